//! One-sided operations: windows, put/get/accumulate/fetch-and-op, flush.
//!
//! Every operation is tracked by an operation record in the issuing VCI's
//! state (not a pool request), keyed by a token that travels with the wire
//! message and comes back in the reply. Ordered accumulates allow one message
//! in flight per (window, target); the rest queue behind it in issue order.

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use crate::error::{usage, Error, FaultReason, Result};
use crate::runtime::{Comm, Node, Rank, Shared};
use crate::stats::Counter;
use crate::transport::{ContextId, Region, WireBody, WireMessage, CELL};
use crate::vci::{VciId, VciState};

/// Ordering of accumulates from one origin to one target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AccOrdering {
    /// Applied in issue order.
    #[default]
    Ordered,
    /// No ordering; accumulates are injected as soon as they are issued.
    None,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WinOptions {
    /// `None` takes the configured default hint.
    pub acc_ordering: Option<AccOrdering>,
}

impl WinOptions {
    pub fn ordering(o: AccOrdering) -> Self {
        Self { acc_ordering: Some(o) }
    }
}

/// Result of a get, filled in when the reply arrives (visible after flush).
#[derive(Debug, Clone)]
pub struct GetHandle(Arc<OnceLock<Vec<u8>>>);

impl GetHandle {
    pub fn data(&self) -> Option<&[u8]> {
        self.0.get().map(Vec::as_slice)
    }

    pub fn is_ready(&self) -> bool {
        self.0.get().is_some()
    }
}

/// Old value returned by a fetch-and-op (visible after flush).
#[derive(Debug, Clone)]
pub struct FetchHandle(Arc<OnceLock<i64>>);

impl FetchHandle {
    pub fn value(&self) -> Option<i64> {
        self.0.get().copied()
    }
}

#[derive(Debug)]
enum OpKind {
    Ack,
    Get(Arc<OnceLock<Vec<u8>>>),
    Fetch(Arc<OnceLock<i64>>),
}

#[derive(Debug)]
struct OpRecord {
    win: u32,
    target: u32,
    kind: OpKind,
    ordered: bool,
}

#[derive(Debug, Default)]
struct TargetOps {
    /// Tokens of incomplete operations, in issue order.
    pending: BTreeSet<u64>,
    acc_inflight: bool,
    acc_queue: VecDeque<WireMessage>,
}

/// Per-VCI RMA bookkeeping.
#[derive(Debug, Default)]
pub(crate) struct RmaState {
    targets: HashMap<(u32, u32), TargetOps>,
    ops: HashMap<u64, OpRecord>,
    faults: HashMap<u32, Vec<FaultReason>>,
}

impl RmaState {
    pub fn has_outstanding(&self) -> bool {
        !self.ops.is_empty()
    }

    /// Whether every operation to `target` issued up to token `upto` has completed.
    fn settled(&self, win: u32, target: u32, upto: u64) -> bool {
        self.targets.get(&(win, target)).and_then(|t| t.pending.first()).is_none_or(|&first| first > upto)
    }

    fn settled_win(&self, win: u32, upto: u64) -> bool {
        self.targets
            .iter()
            .filter(|((w, _), _)| *w == win)
            .all(|(_, t)| t.pending.first().is_none_or(|&first| first > upto))
    }

    /// Records a new operation; returns the message if it may be injected now.
    fn begin(&mut self, token: u64, op: OpRecord, msg: WireMessage) -> Option<WireMessage> {
        let t = self.targets.entry((op.win, op.target)).or_default();
        t.pending.insert(token);
        let ordered = op.ordered;
        self.ops.insert(token, op);
        if !ordered {
            return Some(msg);
        }
        if t.acc_inflight {
            t.acc_queue.push_back(msg);
            None
        } else {
            t.acc_inflight = true;
            Some(msg)
        }
    }

    /// Undoes `begin` when injection failed.
    fn abort(&mut self, token: u64) {
        if let Some(op) = self.ops.remove(&token) {
            if let Some(t) = self.targets.get_mut(&(op.win, op.target)) {
                t.pending.remove(&token);
                if op.ordered {
                    t.acc_inflight = false;
                }
            }
        }
    }

    /// Retires an operation; returns the next queued ordered accumulate to inject.
    fn finish(&mut self, token: u64, outcome: Outcome) -> Option<WireMessage> {
        let op = self.ops.remove(&token)?;
        match (outcome, &op.kind) {
            (Outcome::Fault(reason), _) => self.faults.entry(op.win).or_default().push(reason),
            (Outcome::Data(bytes), OpKind::Get(slot)) => {
                let _ = slot.set(bytes);
            }
            (Outcome::Old(v), OpKind::Fetch(slot)) => {
                let _ = slot.set(v);
            }
            _ => {}
        }
        let t = self.targets.get_mut(&(op.win, op.target)).expect("target entry exists");
        t.pending.remove(&token);
        if !op.ordered {
            return None;
        }
        let next = t.acc_queue.pop_front();
        if next.is_none() {
            t.acc_inflight = false;
        }
        next
    }

    fn take_fault(&mut self, win: u32) -> Option<FaultReason> {
        let v = self.faults.remove(&win)?;
        v.into_iter().next()
    }

    fn forget_window(&mut self, win: u32) {
        self.targets.retain(|(w, _), t| *w != win || !t.pending.is_empty());
        self.faults.remove(&win);
    }
}

enum Outcome {
    Ack,
    Data(Vec<u8>),
    Old(i64),
    Fault(FaultReason),
}

struct WinInner {
    comm: Comm,
    /// Primary VCI first, then any extra stripes used by unordered windows.
    vcis: Vec<VciId>,
    region: Arc<Region>,
    ordering: AccOrdering,
    owns_primary: bool,
    next_stripe: AtomicUsize,
}

/// An RMA window as seen by one member. Clones share the same window, so
/// all threads of a rank can use it.
#[derive(Clone)]
pub struct Window {
    inner: Arc<WinInner>,
}

impl std::fmt::Debug for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Window")
            .field("id", &self.id())
            .field("rank", &self.inner.comm.rank())
            .field("vcis", &self.inner.vcis)
            .field("ordering", &self.inner.ordering)
            .finish()
    }
}

thread_local! {
    static STRIPES: RefCell<HashMap<usize, usize>> = RefCell::new(HashMap::new());
}

impl Window {
    pub fn id(&self) -> u32 {
        self.inner.comm.id()
    }

    pub fn rank(&self) -> u32 {
        self.inner.comm.rank()
    }

    pub fn size(&self) -> u32 {
        self.inner.comm.size()
    }

    pub fn acc_ordering(&self) -> AccOrdering {
        self.inner.ordering
    }

    pub fn region(&self) -> &Arc<Region> {
        &self.inner.region
    }

    /// The window's VCI. Fails once the window has been freed.
    pub fn lookup_vci(&self) -> Result<VciId> {
        self.inner.comm.lookup_vci()
    }

    /// All VCIs this window issues on.
    pub fn vcis(&self) -> &[VciId] {
        &self.inner.vcis
    }

    /// VCI used by the calling thread: threads are spread over the stripes
    /// in the order they first touch the window.
    fn issue_vci(&self) -> VciId {
        let v = &self.inner.vcis;
        if v.len() == 1 {
            return v[0];
        }
        let key = Arc::as_ptr(&self.inner) as usize;
        let n = STRIPES.with(|s| {
            *s.borrow_mut().entry(key).or_insert_with(|| self.inner.next_stripe.fetch_add(1, Ordering::Relaxed))
        });
        v[n % v.len()]
    }
}

impl Shared {
    /// Executes an RMA request at this node (software mode) and sends the reply.
    pub(crate) fn serve_rma(&self, node: &Node, vci: VciId, msg: &WireMessage) -> Result<()> {
        self.stats.bump(Counter::Events);
        match self.fabric.apply_rma_at_target(node.id, msg) {
            Ok(reply) => self.fabric.inject(node.id, vci as ContextId, reply),
            Err((token, reason)) => {
                self.fabric.deliver_fault(msg.src_node as usize, msg.src_context, token, reason);
                Ok(())
            }
        }
    }

    pub(crate) fn on_rma_reply(&self, node: &Node, vci: VciId, st: &mut VciState, msg: WireMessage) -> Result<()> {
        let (token, outcome) = match msg.body {
            WireBody::RmaCompletionAck { token } => (token, Outcome::Ack),
            WireBody::RmaGetReply { token, payload } => (token, Outcome::Data(payload)),
            WireBody::RmaFetchOpReply { token, old } => (token, Outcome::Old(old)),
            _ => unreachable!("not an rma reply"),
        };
        self.finish_rma(node, vci, st, token, outcome)
    }

    pub(crate) fn on_rma_fault(
        &self,
        node: &Node,
        vci: VciId,
        st: &mut VciState,
        token: u64,
        reason: FaultReason,
    ) -> Result<()> {
        self.finish_rma(node, vci, st, token, Outcome::Fault(reason))
    }

    fn finish_rma(&self, node: &Node, vci: VciId, st: &mut VciState, token: u64, outcome: Outcome) -> Result<()> {
        self.stats.bump(Counter::Events);
        match st.rma.finish(token, outcome) {
            Some(next) => self.fabric.inject(node.id, vci as ContextId, next),
            None => Ok(()),
        }
    }
}

impl Rank {
    /// Creates a window over `region`; collective over `comm`. Windows on an
    /// endpoint communicator use the endpoint's VCI; others take one from the pool.
    pub fn win_create(&self, comm: &Comm, region: Arc<Region>, opts: WinOptions) -> Result<Window> {
        if comm.node != self.node {
            return Err(usage("communicator belongs to another rank"));
        }
        comm.lookup_vci()?;
        let cfg = &self.shared.cfg;
        let ordering = opts.acc_ordering.unwrap_or(if cfg.hints.accumulate_ordering_none_default {
            AccOrdering::None
        } else {
            AccOrdering::Ordered
        });
        let owns_primary = !comm.is_endpoint();
        let mut vcis = vec![if owns_primary { self.acquire_vci() } else { comm.vci }];
        if owns_primary && ordering == AccOrdering::None {
            for _ in 1..cfg.unordered_window_vcis {
                vcis.push(self.acquire_vci());
            }
        }
        if cfg.check_cross_window_acc {
            region.track_accumulates();
        }
        let sim = self.shared.fabric.node(self.node);
        let member = comm.rank();
        let internal = self.window_comm(comm, vcis[0], region.len(), |id| {
            sim.register_window(id, member, region.clone());
        })?;
        Ok(Window {
            inner: Arc::new(WinInner {
                comm: internal,
                vcis,
                region,
                ordering,
                owns_primary,
                next_stripe: AtomicUsize::new(0),
            }),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn issue(
        &self,
        win: &Window,
        target: u32,
        offset: usize,
        len: usize,
        kind: OpKind,
        ordered: bool,
        body: impl FnOnce(u32, u32, u64) -> WireBody,
    ) -> Result<()> {
        let inner = &win.inner;
        inner.comm.lookup_vci()?;
        let sh = &*self.shared;
        let (dst_node, dst_vci, extent) = sh.route(&inner.comm.shared, target)?;
        if offset.checked_add(len).is_none_or(|end| end > extent) {
            return Err(Error::OutOfRange { offset, len, extent });
        }
        let node = self.node();
        let vci = win.issue_vci();
        let mut cs = sh.enter(node, vci);
        let token = cs.next_token();
        let msg = WireMessage {
            src_node: node.id as u32,
            src_context: vci as ContextId,
            dst_node,
            dst_context: dst_vci as ContextId,
            body: body(win.id(), target, token),
        };
        let op = OpRecord { win: win.id(), target, kind, ordered };
        if let Some(msg) = cs.rma.begin(token, op, msg) {
            if let Err(e) = sh.fabric.inject(node.id, vci as ContextId, msg) {
                cs.rma.abort(token);
                return Err(e);
            }
        }
        Ok(())
    }

    pub fn put(&self, win: &Window, target: u32, offset: usize, data: &[u8]) -> Result<()> {
        let payload = data.to_vec();
        self.issue(win, target, offset, data.len(), OpKind::Ack, false, |w, member, token| WireBody::RmaPut {
            win: w,
            member,
            offset,
            payload,
            token,
        })
    }

    /// Reads `len` bytes from the target; the data is available after a flush.
    pub fn get(&self, win: &Window, target: u32, offset: usize, len: usize) -> Result<GetHandle> {
        let slot = Arc::new(OnceLock::new());
        if len == 0 {
            win.inner.comm.lookup_vci()?;
            let _ = slot.set(Vec::new());
            return Ok(GetHandle(slot));
        }
        self.issue(win, target, offset, len, OpKind::Get(slot.clone()), false, |w, member, token| WireBody::RmaGet {
            win: w,
            member,
            offset,
            len,
            token,
        })?;
        Ok(GetHandle(slot))
    }

    /// Element-wise sum of `values` into consecutive `i64` cells at the target.
    pub fn accumulate(&self, win: &Window, target: u32, offset: usize, values: &[i64]) -> Result<()> {
        let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let len = payload.len();
        let ordered = win.inner.ordering == AccOrdering::Ordered;
        self.issue(win, target, offset, len, OpKind::Ack, ordered, |w, member, token| WireBody::RmaAcc {
            win: w,
            member,
            offset,
            payload,
            token,
        })
    }

    /// Atomically adds `operand` to the target cell; the old value is
    /// available after a flush. Ordered like an accumulate.
    pub fn fetch_and_op(&self, win: &Window, target: u32, offset: usize, operand: i64) -> Result<FetchHandle> {
        let slot = Arc::new(OnceLock::new());
        let ordered = win.inner.ordering == AccOrdering::Ordered;
        self.issue(win, target, offset, CELL, OpKind::Fetch(slot.clone()), ordered, |w, member, token| {
            WireBody::RmaFetchOp { win: w, member, offset, operand, token }
        })?;
        Ok(FetchHandle(slot))
    }

    /// Waits on every VCI of the window until `done(state, last_token)` holds,
    /// where `last_token` is the newest token on that VCI when the wait began.
    fn flush_with(&self, win: &Window, what: &'static str, done: impl Fn(&VciState, u64) -> bool) -> Result<()> {
        win.inner.comm.lookup_vci()?;
        let sh = &*self.shared;
        let node = self.node();
        let id = win.id();
        let mut fault = None;
        for &v in &win.inner.vcis {
            let mut upto = None;
            sh.progress_until(node, v, what, |st| {
                let upto = *upto.get_or_insert(st.last_token());
                if done(st, upto) {
                    if let Some(f) = st.rma.take_fault(id) {
                        fault.get_or_insert(f);
                    }
                    true
                } else {
                    false
                }
            })?;
        }
        match fault {
            Some(f) => Err(Error::RmaFault(f)),
            None => Ok(()),
        }
    }

    /// Waits until every operation to `target` on this window issued before
    /// the call, by any thread of this rank, has completed.
    pub fn flush(&self, win: &Window, target: u32) -> Result<()> {
        let id = win.id();
        self.flush_with(win, "flush", |st, upto| st.rma.settled(id, target, upto))
    }

    pub fn flush_all(&self, win: &Window) -> Result<()> {
        let id = win.id();
        self.flush_with(win, "flush_all", |st, upto| st.rma.settled_win(id, upto))
    }

    /// Passive-target epochs are implicit; kept for API shape.
    pub fn lock_all(&self, win: &Window) -> Result<()> {
        win.inner.comm.lookup_vci().map(|_| ())
    }

    pub fn unlock_all(&self, win: &Window) -> Result<()> {
        self.flush_all(win)
    }

    /// Completes local operations, synchronizes with every member (which
    /// progresses the window's VCI and so serves pending requests from
    /// others), then releases the memory and VCIs. Collective.
    pub fn win_free(&self, win: Window) -> Result<()> {
        let inner = &win.inner;
        self.flush_all(&win)?;
        self.barrier(&inner.comm)?;
        self.shared.fabric.node(self.node).deregister_window(win.id(), inner.comm.rank());
        self.retire_comm(&inner.comm)?;
        let node = self.node();
        for &v in &inner.vcis {
            node.vci(v).lock().rma.forget_window(win.id());
        }
        let skip = usize::from(!inner.owns_primary);
        for &v in &inner.vcis[skip..] {
            self.release_vci(v)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Config, RmaMode};
    use crate::runtime::World;

    fn world(nodes: usize, rma: RmaMode) -> World {
        let cfg = Config { vcis: 8, rma_mode: rma, req_pool_size: 256, injection_cost: 0, ..Config::default() };
        World::init(cfg, nodes, 1).unwrap()
    }

    #[test]
    fn put_flush_get_on_self() {
        for rma in [RmaMode::Hardware, RmaMode::Software] {
            let w = world(1, rma);
            let r = w.rank(0);
            let region = Region::new(64);
            let win = r.win_create(&r.world_comm(), region.clone(), WinOptions::default()).unwrap();
            assert_eq!(win.lookup_vci().unwrap(), 1);
            r.put(&win, 0, 8, &42i64.to_le_bytes()).unwrap();
            r.flush(&win, 0).unwrap();
            assert_eq!(region.load_i64(8), 42);
            let g = r.get(&win, 0, 8, 8).unwrap();
            r.flush(&win, 0).unwrap();
            assert_eq!(g.data().unwrap(), 42i64.to_le_bytes());
            r.win_free(win).unwrap();
            assert!(!r.vci_active(1));
        }
    }

    #[test]
    fn two_windows_get_distinct_vcis() {
        let w = world(1, RmaMode::Hardware);
        let r = w.rank(0);
        let a = r.win_create(&r.world_comm(), Region::new(8), WinOptions::default()).unwrap();
        let b = r.win_create(&r.world_comm(), Region::new(8), WinOptions::default()).unwrap();
        assert_eq!((a.lookup_vci().unwrap(), b.lookup_vci().unwrap()), (1, 2));
    }

    #[test]
    fn ordered_accumulates_apply_in_order() {
        let w = world(1, RmaMode::Software);
        let r = w.rank(0);
        let region = Region::new(8);
        let win = r.win_create(&r.world_comm(), region.clone(), WinOptions::default()).unwrap();
        r.accumulate(&win, 0, 0, &[1]).unwrap();
        r.accumulate(&win, 0, 0, &[10]).unwrap();
        r.flush(&win, 0).unwrap();
        assert_eq!(region.load_i64(0), 11);
    }

    #[test]
    fn none_hint_is_recorded() {
        let w = world(1, RmaMode::Hardware);
        let r = w.rank(0);
        let win = r.win_create(&r.world_comm(), Region::new(8), WinOptions::ordering(AccOrdering::None)).unwrap();
        assert_eq!(win.acc_ordering(), AccOrdering::None);
    }

    #[test]
    fn out_of_range_is_rejected_before_injection() {
        let w = world(1, RmaMode::Hardware);
        let r = w.rank(0);
        let win = r.win_create(&r.world_comm(), Region::new(8), WinOptions::default()).unwrap();
        let before = w.fabric_counts().injected;
        assert!(matches!(r.put(&win, 0, 4, &[0; 8]), Err(Error::OutOfRange { .. })));
        assert_eq!(w.fabric_counts().injected, before);
        r.flush(&win, 0).unwrap();
    }

    #[test]
    fn zero_length_get_is_a_noop() {
        let w = world(1, RmaMode::Hardware);
        let r = w.rank(0);
        let win = r.win_create(&r.world_comm(), Region::new(0), WinOptions::default()).unwrap();
        assert_eq!(r.get(&win, 0, 0, 0).unwrap().data(), Some(&[][..]));
    }

    #[test]
    fn fetch_and_op_identity() {
        let w = world(1, RmaMode::Hardware);
        let r = w.rank(0);
        let region = Region::new(8);
        region.store_i64(0, 5);
        let win = r.win_create(&r.world_comm(), region.clone(), WinOptions::default()).unwrap();
        let h = r.fetch_and_op(&win, 0, 0, 0).unwrap();
        r.flush(&win, 0).unwrap();
        assert_eq!(h.value(), Some(5));
        assert_eq!(region.load_i64(0), 5);
    }

    #[test]
    fn cross_window_accumulates_are_flagged() {
        let cfg = Config { vcis: 4, check_cross_window_acc: true, req_pool_size: 64, ..Config::default() };
        let w = World::init(cfg, 1, 1).unwrap();
        let r = w.rank(0);
        let region = Region::new(8);
        let a = r.win_create(&r.world_comm(), region.clone(), WinOptions::default()).unwrap();
        let b = r.win_create(&r.world_comm(), region.clone(), WinOptions::default()).unwrap();
        r.accumulate(&a, 0, 0, &[1]).unwrap();
        r.accumulate(&b, 0, 0, &[1]).unwrap();
        r.flush(&a, 0).unwrap();
        r.flush(&b, 0).unwrap();
        assert_eq!(region.load_i64(0), 2);
        assert!(region.cross_window_accumulates() >= 1);
    }
}
