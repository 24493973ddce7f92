//! World setup and teardown, ranks, communicators, endpoints and the barrier.

use std::collections::HashMap;
use std::fmt;
use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::{Mutex, MutexGuard, RwLock};

use crate::config::{Config, CsMode};
use crate::error::{usage, Error, Result, StuckReport};
use crate::progress::HookEntry;
use crate::requests::{RequestCounts, RequestPool};
use crate::stats::{Counter, LockStats, StatsRegistry};
use crate::transport::{ContextId, Fabric, FabricCounts};
use crate::vci::{PoolStats, Vci, VciId, VciPool, VciState, FALLBACK_VCI};

const UNSET: u32 = u32::MAX;
const BARRIER_TAG: i32 = -16;

static NEXT_WORLD: AtomicU64 = AtomicU64::new(1);

/// Library state of one rank (one simulated process).
pub(crate) struct Node {
    pub id: usize,
    pub global: Mutex<()>,
    pub vcis: Box<[Vci]>,
    pub pool: Mutex<VciPool>,
    pub requests: RequestPool,
    /// Lightweight references in the modes without per-VCI lightweight requests.
    pub lw_global: AtomicI64,
    pub hooks: RwLock<Vec<Arc<HookEntry>>>,
    /// Collective-creation sequence numbers, per (parent communicator, parent rank).
    seq: Mutex<HashMap<(u32, u32), u32>>,
}

impl Node {
    pub fn vci(&self, id: VciId) -> &Vci {
        &self.vcis[id as usize]
    }

    fn next_seq(&self, parent: &Comm) -> u32 {
        let mut m = self.seq.lock();
        let s = m.entry((parent.id(), parent.rank)).or_insert(0);
        *s += 1;
        *s
    }
}

/// One member of a communicator: the node it lives on and the VCI it uses.
pub(crate) struct Member {
    pub node: u32,
    vci: AtomicU32,
    extent: AtomicUsize,
    freed: AtomicBool,
}

/// State of a communicator shared by all of its members.
pub(crate) struct CommShared {
    pub id: u32,
    pub members: Box<[Member]>,
    registered: AtomicU32,
}

impl CommShared {
    fn new(id: u32, nodes: impl IntoIterator<Item = u32>) -> Self {
        Self {
            id,
            members: nodes
                .into_iter()
                .map(|node| Member {
                    node,
                    vci: AtomicU32::new(UNSET),
                    extent: AtomicUsize::new(0),
                    freed: AtomicBool::new(false),
                })
                .collect(),
            registered: AtomicU32::new(0),
        }
    }

    pub fn size(&self) -> u32 {
        self.members.len() as u32
    }

    fn register(&self, rank: u32, vci: VciId, extent: usize) -> bool {
        let m = &self.members[rank as usize];
        m.extent.store(extent, Ordering::Relaxed);
        m.vci.store(vci as u32, Ordering::Release);
        self.registered.fetch_add(1, Ordering::AcqRel) + 1 == self.size()
    }
}

/// Critical section around one VCI's state: the global lock plus the VCI
/// mutex in `Global` mode, the VCI lock alone otherwise.
pub(crate) struct Cs<'a> {
    _global: Option<MutexGuard<'a, ()>>,
    st: MutexGuard<'a, VciState>,
}

impl Deref for Cs<'_> {
    type Target = VciState;
    fn deref(&self) -> &VciState {
        &self.st
    }
}

impl DerefMut for Cs<'_> {
    fn deref_mut(&mut self) -> &mut VciState {
        &mut self.st
    }
}

pub(crate) struct Shared {
    pub cfg: Config,
    pub fabric: Fabric,
    pub nodes: Vec<Node>,
    pub stats: StatsRegistry,
    pub world: Arc<CommShared>,
    registry: Mutex<HashMap<(u32, u32), Arc<CommShared>>>,
    next_comm_id: AtomicU32,
    threads_per_node: usize,
}

impl Shared {
    pub fn mode(&self) -> CsMode {
        self.cfg.cs_mode
    }

    pub fn enter<'a>(&self, node: &'a Node, vci: VciId) -> Cs<'a> {
        match self.cfg.cs_mode {
            CsMode::Global => {
                self.stats.bump(Counter::GlobalLock);
                let g = node.global.lock();
                Cs { _global: Some(g), st: node.vci(vci).lock() }
            }
            _ => {
                self.stats.bump(Counter::VciLock);
                Cs { _global: None, st: node.vci(vci).lock() }
            }
        }
    }

    /// Non-blocking variant of [`Shared::enter`] for the fine-grained modes.
    pub fn try_enter<'a>(&self, node: &'a Node, vci: VciId) -> Option<Cs<'a>> {
        debug_assert!(self.cfg.cs_mode != CsMode::Global);
        let st = node.vci(vci).try_lock()?;
        self.stats.bump(Counter::VciLock);
        Some(Cs { _global: None, st })
    }

    /// VCI state while the caller already holds the global lock.
    pub fn enter_under_global<'a>(&self, node: &'a Node, vci: VciId) -> Cs<'a> {
        Cs { _global: None, st: node.vci(vci).lock() }
    }

    pub fn watchdog_expired(&self, since: Instant) -> bool {
        self.cfg.watchdog.is_some_and(|w| since.elapsed() >= w)
    }

    /// VCIs of `node` that still have unfinished work or undelivered events.
    pub fn pending_vcis(&self, node: &Node) -> Vec<VciId> {
        let sim = self.fabric.node(node.id);
        node.vcis
            .iter()
            .filter(|v| {
                sim.context(v.id() as ContextId).pending() > 0 || v.try_lock().is_some_and(|st| st.has_pending_work())
            })
            .map(|v| v.id())
            .collect()
    }

    pub fn stuck(&self, node: &Node, what: &'static str, primary: VciId) -> Error {
        Error::Stuck(StuckReport { what, node: node.id, primary, pending_vcis: self.pending_vcis(node) })
    }

    /// Resolves a communicator rank to (node, VCI), waiting for the member to
    /// finish its side of the collective creation.
    pub fn route(&self, comm: &CommShared, rank: u32) -> Result<(u32, VciId, usize)> {
        let m = comm
            .members
            .get(rank as usize)
            .ok_or_else(|| usage(format!("rank {rank} not in communicator of size {}", comm.size())))?;
        let mut vci = m.vci.load(Ordering::Acquire);
        if vci == UNSET {
            let t0 = Instant::now();
            while vci == UNSET {
                if self.watchdog_expired(t0) {
                    return Err(Error::Stuck(StuckReport {
                        what: "waiting for peer registration",
                        node: m.node as usize,
                        primary: FALLBACK_VCI,
                        pending_vcis: Vec::new(),
                    }));
                }
                std::thread::yield_now();
                vci = m.vci.load(Ordering::Acquire);
            }
        }
        Ok((m.node, vci as VciId, m.extent.load(Ordering::Relaxed)))
    }

    fn acquire_vci(&self, node: &Node) -> VciId {
        let id = node.pool.lock().acquire();
        node.vci(id).set_active(true);
        id
    }

    fn release_vci(&self, node: &Node, id: VciId) -> Result<()> {
        let mut pool = node.pool.lock();
        pool.release(id)?;
        if id != FALLBACK_VCI {
            node.vci(id).set_active(false);
        }
        Ok(())
    }

    /// Registers this rank in the collective object `(parent, seq)`, creating
    /// the shared record if this is the first member to arrive.
    fn join(&self, parent: u32, seq: u32, nodes: impl FnOnce() -> Vec<u32>) -> Arc<CommShared> {
        let mut reg = self.registry.lock();
        reg.entry((parent, seq))
            .or_insert_with(|| {
                let id = self.next_comm_id.fetch_add(1, Ordering::Relaxed);
                Arc::new(CommShared::new(id, nodes()))
            })
            .clone()
    }

    fn finish_join(&self, parent: u32, seq: u32, shared: &CommShared, rank: u32, vci: VciId, extent: usize) {
        if shared.register(rank, vci, extent) {
            self.registry.lock().remove(&(parent, seq));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum CommKind {
    World,
    User,
    Endpoint,
    Window,
}

/// A communicator handle as seen by one member.
#[derive(Clone)]
pub struct Comm {
    pub(crate) shared: Arc<CommShared>,
    pub(crate) rank: u32,
    pub(crate) vci: VciId,
    pub(crate) node: usize,
    pub(crate) kind: CommKind,
}

impl fmt::Debug for Comm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Comm")
            .field("id", &self.shared.id)
            .field("rank", &self.rank)
            .field("size", &self.shared.size())
            .field("vci", &self.vci)
            .finish()
    }
}

impl Comm {
    pub fn id(&self) -> u32 {
        self.shared.id
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn size(&self) -> u32 {
        self.shared.size()
    }

    pub fn is_endpoint(&self) -> bool {
        self.kind == CommKind::Endpoint
    }

    /// The VCI fixed for this handle at creation. Fails once the handle has been freed.
    pub fn lookup_vci(&self) -> Result<VciId> {
        if self.shared.members[self.rank as usize].freed.load(Ordering::Relaxed) {
            return Err(usage(format!("communicator {} used after free", self.shared.id)));
        }
        Ok(self.vci)
    }
}

/// Per-node summary in a finalize report.
#[derive(Debug, Clone)]
pub struct NodeReport {
    pub node: usize,
    pub requests: RequestCounts,
    pub pool: PoolStats,
    pub lightweight_outstanding: i64,
    pub vcis_torn_down: usize,
    /// Events still queued on a context at teardown.
    pub discarded_events: usize,
    /// (contended acquisitions, nanoseconds waited) per VCI.
    pub vci_contention: Vec<(u64, u64)>,
}

/// Instrumentation report produced by [`World::finalize`].
#[derive(Debug, Clone)]
pub struct Report {
    pub stats: LockStats,
    pub fabric: FabricCounts,
    pub nodes: Vec<NodeReport>,
}

impl Report {
    pub fn conserved(&self) -> bool {
        self.fabric.conserved() && self.nodes.iter().all(|n| n.requests.conserved() && n.pool.conserved())
    }

    pub fn vcis_torn_down(&self) -> usize {
        self.nodes.iter().map(|n| n.vcis_torn_down).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("node,metric,value\n");
        let s = &self.stats;
        for (k, v) in [
            ("global_locks", s.global),
            ("vci_locks", s.vci),
            ("request_locks", s.request),
            ("hook_locks", s.hook),
            ("atomics", s.atomics),
            ("vci_polls", s.vci_polls),
            ("global_rounds", s.global_rounds),
            ("hook_runs", s.hook_runs),
            ("events", s.events),
            ("injected", self.fabric.injected),
            ("delivered", self.fabric.delivered),
            ("nic_consumed", self.fabric.nic_consumed),
            ("queued", self.fabric.queued),
            ("routing_faults", self.fabric.routing_faults),
            ("fault_events", self.fabric.fault_events),
        ] {
            out.push_str(&format!("all,{k},{v}\n"));
        }
        for n in &self.nodes {
            for (k, v) in [
                ("requests_total", n.requests.total as u64),
                ("requests_live", n.requests.live as u64),
                ("requests_cached", n.requests.cached as u64),
                ("vcis_free", n.pool.free as u64),
                ("vcis_assigned", n.pool.assigned as u64),
                ("fallback_sharers", n.pool.fallback_sharers as u64),
                ("fallback_grants", n.pool.fallback_grants),
                ("vcis_torn_down", n.vcis_torn_down as u64),
                ("discarded_events", n.discarded_events as u64),
            ] {
                out.push_str(&format!("{},{k},{v}\n", n.node));
            }
        }
        out
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "locks: {}", self.stats)?;
        let c = &self.fabric;
        writeln!(
            f,
            "fabric: injected {} delivered {} nic {} queued {} faults {}+{}",
            c.injected, c.delivered, c.nic_consumed, c.queued, c.routing_faults, c.fault_events
        )?;
        for n in &self.nodes {
            writeln!(
                f,
                "node {}: requests {}/{} free ({} cached), vcis {} assigned {} free, fallback sharers {} grants {}, torn down {}",
                n.node,
                n.requests.global_free + n.requests.cached,
                n.requests.total,
                n.requests.cached,
                n.pool.assigned,
                n.pool.free,
                n.pool.fallback_sharers,
                n.pool.fallback_grants,
                n.vcis_torn_down,
            )?;
        }
        Ok(())
    }
}

/// A set of in-process nodes sharing one simulated fabric.
pub struct World {
    shared: Arc<Shared>,
}

impl World {
    pub fn init(cfg: Config, nodes: usize, threads_per_node: usize) -> Result<World> {
        cfg.validate()?;
        if nodes == 0 {
            return Err(usage("a world needs at least one node"));
        }
        if threads_per_node == 0 {
            return Err(usage("threads per node must be positive"));
        }
        let fabric = Fabric::new(nodes, cfg.vcis, cfg.injection_model, cfg.injection_cost, cfg.rma_mode);
        let nodes_v = (0..nodes)
            .map(|id| Node {
                id,
                global: Mutex::new(()),
                vcis: (0..cfg.vcis as VciId).map(Vci::new).collect(),
                pool: Mutex::new(VciPool::new(cfg.vcis)),
                requests: RequestPool::new(cfg.req_pool_size, cfg.req_cache_capacity),
                lw_global: AtomicI64::new(0),
                hooks: RwLock::new(Vec::new()),
                seq: Mutex::new(HashMap::new()),
            })
            .collect();
        let world = Arc::new(CommShared::new(0, 0..nodes as u32));
        for r in 0..nodes as u32 {
            world.register(r, FALLBACK_VCI, 0);
        }
        let shared = Shared {
            fabric,
            nodes: nodes_v,
            stats: StatsRegistry::new(NEXT_WORLD.fetch_add(1, Ordering::Relaxed)),
            world,
            registry: Mutex::new(HashMap::new()),
            next_comm_id: AtomicU32::new(1),
            threads_per_node,
            cfg,
        };
        Ok(World { shared: Arc::new(shared) })
    }

    pub fn size(&self) -> usize {
        self.shared.nodes.len()
    }

    pub fn threads_per_node(&self) -> usize {
        self.shared.threads_per_node
    }

    pub fn config(&self) -> &Config {
        &self.shared.cfg
    }

    pub fn rank(&self, id: usize) -> Rank {
        assert!(id < self.size(), "rank {id} out of range");
        Rank { shared: self.shared.clone(), node: id }
    }

    pub fn ranks(&self) -> Vec<Rank> {
        (0..self.size()).map(|i| self.rank(i)).collect()
    }

    /// Counters merged over every thread that used this world.
    pub fn lock_stats(&self) -> LockStats {
        self.shared.stats.merged()
    }

    pub fn fabric_counts(&self) -> FabricCounts {
        self.shared.fabric.counts()
    }

    pub fn request_counts(&self, node: usize) -> RequestCounts {
        request_counts(&self.shared.nodes[node])
    }

    pub fn pool_stats(&self, node: usize) -> PoolStats {
        self.shared.nodes[node].pool.lock().stats()
    }

    /// Injection-lock contention per context of `node`.
    pub fn context_lock_stats(&self, node: usize) -> Vec<crate::transport::ContextLockStats> {
        self.shared.fabric.node(node).contexts().iter().map(|c| c.lock_stats()).collect()
    }

    /// Checks for leaked requests, drains and tears down every VCI, and
    /// returns the instrumentation report.
    pub fn finalize(self) -> Result<Report> {
        let sh = &self.shared;
        let mut leaks = Vec::new();
        for n in &sh.nodes {
            for (idx, kind, vci) in n.requests.live() {
                leaks.push(format!("node {} request {idx} ({kind:?}) on vci {vci}", n.id));
            }
        }
        if !leaks.is_empty() {
            return Err(Error::Outstanding { count: leaks.len(), detail: leaks.join("; ") });
        }
        let mut nodes = Vec::new();
        for n in &sh.nodes {
            let requests = request_counts(n);
            let mut discarded = 0;
            let mut torn = 0;
            let mut contention = Vec::new();
            for v in n.vcis.iter() {
                let mut st = v.lock();
                let mut sink = Vec::new();
                while sh.fabric.poll_context(n.id, v.id() as ContextId, usize::MAX, &mut sink).taken > 0 {}
                discarded += sink.len();
                st.req_cache.clear();
                contention.push(v.contention());
                torn += 1;
            }
            let lw = match sh.cfg.cs_mode {
                CsMode::FgCache => {
                    n.vcis.iter().map(|v| v.lock().lw_issued as i64 - v.lightweight_retired() as i64).sum()
                }
                _ => n.lw_global.load(Ordering::Relaxed),
            };
            nodes.push(NodeReport {
                node: n.id,
                requests,
                pool: n.pool.lock().stats(),
                lightweight_outstanding: lw,
                vcis_torn_down: torn,
                discarded_events: discarded,
                vci_contention: contention,
            });
        }
        Ok(Report { stats: sh.stats.merged(), fabric: sh.fabric.counts(), nodes })
    }
}

fn request_counts(n: &Node) -> RequestCounts {
    let cached = n.vcis.iter().map(|v| v.lock().req_cache.len()).sum();
    RequestCounts {
        total: n.requests.total(),
        global_free: n.requests.global_free_len(),
        cached,
        live: n.requests.live().len(),
    }
}

/// A handle to one rank; cheap to clone and share among that rank's threads.
#[derive(Clone)]
pub struct Rank {
    pub(crate) shared: Arc<Shared>,
    pub(crate) node: usize,
}

impl fmt::Debug for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Rank({})", self.node)
    }
}

impl Rank {
    pub fn id(&self) -> usize {
        self.node
    }

    pub fn world_size(&self) -> usize {
        self.shared.nodes.len()
    }

    pub fn config(&self) -> &Config {
        &self.shared.cfg
    }

    pub(crate) fn node(&self) -> &Node {
        &self.shared.nodes[self.node]
    }

    pub fn world_comm(&self) -> Comm {
        Comm {
            shared: self.shared.world.clone(),
            rank: self.node as u32,
            vci: FALLBACK_VCI,
            node: self.node,
            kind: CommKind::World,
        }
    }

    fn check_parent(&self, parent: &Comm) -> Result<()> {
        if parent.node != self.node {
            return Err(usage("communicator belongs to another rank"));
        }
        parent.lookup_vci().map(|_| ())
    }

    /// Duplicates `parent`; collective over its members.
    pub fn comm_dup(&self, parent: &Comm) -> Result<Comm> {
        let all: Vec<u32> = (0..parent.size()).collect();
        Ok(self.comm_create(parent, &all)?.expect("every member is in the group"))
    }

    /// Creates a communicator over `group` (ranks of `parent`, in new-rank
    /// order). Every member of `parent` must call; non-members get `None`.
    pub fn comm_create(&self, parent: &Comm, group: &[u32]) -> Result<Option<Comm>> {
        self.check_parent(parent)?;
        let mut seen = vec![false; parent.size() as usize];
        for &g in group {
            if g >= parent.size() || std::mem::replace(&mut seen[g as usize], true) {
                return Err(usage(format!("invalid group member {g}")));
            }
        }
        let sh = &self.shared;
        let node = self.node();
        let seq = node.next_seq(parent);
        let Some(my) = group.iter().position(|&g| g == parent.rank) else {
            return Ok(None);
        };
        let nodes = || group.iter().map(|&g| parent.shared.members[g as usize].node).collect();
        let shared = sh.join(parent.id(), seq, nodes);
        if shared.size() as usize != group.len() {
            return Err(usage("members disagree on the group of a new communicator"));
        }
        let vci = sh.acquire_vci(node);
        sh.finish_join(parent.id(), seq, &shared, my as u32, vci, 0);
        Ok(Some(Comm { shared, rank: my as u32, vci, node: self.node, kind: CommKind::User }))
    }

    /// Creates `n` endpoints for this rank over `parent`; endpoint `i` of
    /// parent rank `p` has rank `p * n + i`, and each endpoint has its own VCI.
    /// Collective over `parent`.
    pub fn create_endpoints(&self, parent: &Comm, n: usize) -> Result<Vec<Comm>> {
        self.check_parent(parent)?;
        if n == 0 {
            return Err(usage("zero endpoints requested"));
        }
        let sh = &self.shared;
        let node = self.node();
        let seq = node.next_seq(parent);
        let nodes = || parent.shared.members.iter().flat_map(|m| std::iter::repeat_n(m.node, n)).collect();
        let shared = sh.join(parent.id(), seq, nodes);
        if shared.size() as usize != parent.size() as usize * n {
            return Err(usage("members disagree on the endpoint count"));
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let rank = parent.rank * n as u32 + i as u32;
            let vci = sh.acquire_vci(node);
            sh.finish_join(parent.id(), seq, &shared, rank, vci, 0);
            out.push(Comm { shared: shared.clone(), rank, vci, node: self.node, kind: CommKind::Endpoint });
        }
        Ok(out)
    }

    /// Internal communicator backing a window: same members as `parent`,
    /// registered with the window's VCI and exposed extent.
    /// `expose` runs with the new id before peers can route to this member.
    pub(crate) fn window_comm(
        &self,
        parent: &Comm,
        vci: VciId,
        extent: usize,
        expose: impl FnOnce(u32),
    ) -> Result<Comm> {
        let sh = &self.shared;
        let seq = self.node().next_seq(parent);
        let nodes = || parent.shared.members.iter().map(|m| m.node).collect();
        let shared = sh.join(parent.id(), seq, nodes);
        expose(shared.id);
        sh.finish_join(parent.id(), seq, &shared, parent.rank, vci, extent);
        Ok(Comm { shared, rank: parent.rank, vci, node: self.node, kind: CommKind::Window })
    }

    pub(crate) fn acquire_vci(&self) -> VciId {
        self.shared.acquire_vci(self.node())
    }

    pub(crate) fn release_vci(&self, id: VciId) -> Result<()> {
        self.shared.release_vci(self.node(), id)
    }

    /// Frees a communicator handle after a barrier over its members and
    /// returns its VCI to the pool.
    pub fn comm_free(&self, comm: &Comm) -> Result<()> {
        match comm.kind {
            CommKind::World => return Err(usage("the world communicator cannot be freed")),
            CommKind::Window => return Err(usage("window communicators are freed with the window")),
            _ => {}
        }
        self.check_parent(comm)?;
        self.barrier(comm)?;
        self.retire_comm(comm)
    }

    pub(crate) fn retire_comm(&self, comm: &Comm) -> Result<()> {
        let m = &comm.shared.members[comm.rank as usize];
        if m.freed.swap(true, Ordering::AcqRel) {
            return Err(usage("communicator freed twice"));
        }
        if comm.kind != CommKind::Window {
            self.release_vci(comm.vci)?;
        }
        Ok(())
    }

    /// Dissemination barrier over point-to-point messages on `comm`'s VCI.
    pub fn barrier(&self, comm: &Comm) -> Result<()> {
        let n = comm.size();
        let me = comm.rank;
        let mut dist = 1;
        let mut round = 0;
        while dist < n {
            let to = (me + dist) % n;
            let from = (me + n - dist) % n;
            let tag = BARRIER_TAG - round;
            let s = self.isend_internal(comm, to, tag, Vec::new(), false)?;
            let r = self.irecv_internal(comm, from as i32, tag, 0)?;
            self.wait(r)?;
            self.wait(s)?;
            dist <<= 1;
            round += 1;
        }
        Ok(())
    }

    /// The calling thread's counters for this world.
    pub fn thread_stats(&self) -> LockStats {
        self.shared.stats.thread()
    }

    pub fn pool_stats(&self) -> PoolStats {
        self.node().pool.lock().stats()
    }

    pub fn request_counts(&self) -> RequestCounts {
        request_counts(self.node())
    }

    /// Lightweight references currently handed out on `vci` (or node-wide in
    /// the modes without per-VCI lightweight requests).
    pub fn lightweight_outstanding(&self, vci: VciId) -> i64 {
        let node = self.node();
        match self.shared.cfg.cs_mode {
            CsMode::FgCache => {
                let v = node.vci(vci);
                v.lock().lw_issued as i64 - v.lightweight_retired() as i64
            }
            _ => node.lw_global.load(Ordering::Relaxed),
        }
    }

    /// Whether `vci` on this rank is currently active.
    pub fn vci_active(&self, vci: VciId) -> bool {
        self.node().vci(vci).is_active()
    }
}
