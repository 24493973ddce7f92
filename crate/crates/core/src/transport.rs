//! Simulated multi-context NIC.
//!
//! Every node owns a fixed array of hardware contexts. A context has an
//! injection lock (held while a message is charged and enqueued), an
//! incoming queue for wire messages and a completion queue for events the
//! NIC generates itself (hardware RMA replies, faults). Messages injected on
//! one context toward one destination context keep their order.
//!
//! Delivery is timed: under [`InjectionModel::Device`] a message becomes
//! visible at its destination when the source context's device timeline has
//! finished with it. Queues are kept sorted by that time; since one context's
//! timeline only moves forward, per-context FIFO order is preserved.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, MutexGuard, RwLock};

use crate::config::{InjectionModel, RmaMode, DEVICE_NS_PER_UNIT};
use crate::error::{Error, FaultReason, Result};
use crate::matching::Envelope;

pub type ContextId = u16;

/// How far (in device time) an injecting thread may run ahead of its context
/// before it is put to sleep.
pub const INJECTION_BACKLOG: Duration = Duration::from_micros(500);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WireKind {
    Eager,
    RndvRts,
    RndvCts,
    RndvData,
    RmaPut,
    RmaGet,
    RmaGetReply,
    RmaAcc,
    RmaFetchOp,
    RmaFetchOpReply,
    RmaCompletionAck,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireBody {
    Eager {
        envelope: Envelope,
        dst_rank: u32,
        payload: Vec<u8>,
    },
    RndvRts {
        envelope: Envelope,
        dst_rank: u32,
        len: usize,
        sender_token: u64,
    },
    RndvCts {
        sender_token: u64,
        receiver_token: u64,
    },
    RndvData {
        receiver_token: u64,
        payload: Vec<u8>,
    },
    RmaPut {
        win: u32,
        member: u32,
        offset: usize,
        payload: Vec<u8>,
        token: u64,
    },
    RmaGet {
        win: u32,
        member: u32,
        offset: usize,
        len: usize,
        token: u64,
    },
    RmaGetReply {
        token: u64,
        payload: Vec<u8>,
    },
    /// Element-wise wrapping sum of little-endian `i64` cells.
    RmaAcc {
        win: u32,
        member: u32,
        offset: usize,
        payload: Vec<u8>,
        token: u64,
    },
    RmaFetchOp {
        win: u32,
        member: u32,
        offset: usize,
        operand: i64,
        token: u64,
    },
    RmaFetchOpReply {
        token: u64,
        old: i64,
    },
    RmaCompletionAck {
        token: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub src_node: u32,
    pub src_context: ContextId,
    pub dst_node: u32,
    pub dst_context: ContextId,
    pub body: WireBody,
}

impl WireMessage {
    pub fn kind(&self) -> WireKind {
        match self.body {
            WireBody::Eager { .. } => WireKind::Eager,
            WireBody::RndvRts { .. } => WireKind::RndvRts,
            WireBody::RndvCts { .. } => WireKind::RndvCts,
            WireBody::RndvData { .. } => WireKind::RndvData,
            WireBody::RmaPut { .. } => WireKind::RmaPut,
            WireBody::RmaGet { .. } => WireKind::RmaGet,
            WireBody::RmaGetReply { .. } => WireKind::RmaGetReply,
            WireBody::RmaAcc { .. } => WireKind::RmaAcc,
            WireBody::RmaFetchOp { .. } => WireKind::RmaFetchOp,
            WireBody::RmaFetchOpReply { .. } => WireKind::RmaFetchOpReply,
            WireBody::RmaCompletionAck { .. } => WireKind::RmaCompletionAck,
        }
    }

    /// RMA requests that are executed at the target (as opposed to replies).
    pub fn is_rma_request(&self) -> bool {
        matches!(self.kind(), WireKind::RmaPut | WireKind::RmaGet | WireKind::RmaAcc | WireKind::RmaFetchOp)
    }

    fn rma_token(&self) -> Option<u64> {
        match self.body {
            WireBody::RmaPut { token, .. }
            | WireBody::RmaGet { token, .. }
            | WireBody::RmaAcc { token, .. }
            | WireBody::RmaFetchOp { token, .. } => Some(token),
            _ => None,
        }
    }
}

/// Something a context poll hands to the upper layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Wire(WireMessage),
    Fault { token: u64, reason: FaultReason },
}

/// A block of memory exposed through one or more windows.
///
/// Every access runs under the region's mutex, which makes each RMA message
/// atomic with respect to every other access to the region.
#[derive(Debug)]
pub struct Region {
    data: Mutex<RegionData>,
    cross_window: AtomicU64,
}

#[derive(Debug)]
struct RegionData {
    bytes: Vec<u8>,
    /// cell index -> window that last accumulated into it
    acc_owner: Option<HashMap<usize, u32>>,
}

pub const CELL: usize = 8;

impl Region {
    pub fn new(len: usize) -> Arc<Self> {
        Self::from_bytes(vec![0; len])
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Arc<Self> {
        Arc::new(Self { data: Mutex::new(RegionData { bytes, acc_owner: None }), cross_window: AtomicU64::new(0) })
    }

    pub fn len(&self) -> usize {
        self.data.lock().bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn read(&self, offset: usize, len: usize) -> Vec<u8> {
        self.data.lock().bytes[offset..offset + len].to_vec()
    }

    pub fn write(&self, offset: usize, bytes: &[u8]) {
        self.data.lock().bytes[offset..offset + bytes.len()].copy_from_slice(bytes);
    }

    pub fn load_i64(&self, offset: usize) -> i64 {
        let d = self.data.lock();
        i64::from_le_bytes(d.bytes[offset..offset + CELL].try_into().unwrap())
    }

    pub fn store_i64(&self, offset: usize, v: i64) {
        self.write(offset, &v.to_le_bytes());
    }

    pub fn snapshot(&self) -> Vec<u8> {
        self.data.lock().bytes.clone()
    }

    /// Runs `f` with exclusive access to the bytes.
    pub fn with_bytes<R>(&self, f: impl FnOnce(&mut [u8]) -> R) -> R {
        f(&mut self.data.lock().bytes)
    }

    /// Number of accumulates that hit a cell last accumulated through a different window.
    pub fn cross_window_accumulates(&self) -> u64 {
        self.cross_window.load(Ordering::Relaxed)
    }

    pub(crate) fn track_accumulates(&self) {
        let mut d = self.data.lock();
        if d.acc_owner.is_none() {
            d.acc_owner = Some(HashMap::new());
        }
    }

    fn accumulate(&self, offset: usize, payload: &[u8], win: u32) {
        let mut d = self.data.lock();
        let d = &mut *d;
        for (i, chunk) in payload.chunks_exact(CELL).enumerate() {
            let at = offset + i * CELL;
            let cell = &mut d.bytes[at..at + CELL];
            let v = i64::from_le_bytes((&*cell).try_into().unwrap())
                .wrapping_add(i64::from_le_bytes(chunk.try_into().unwrap()));
            cell.copy_from_slice(&v.to_le_bytes());
            if let Some(owner) = d.acc_owner.as_mut() {
                if let Some(prev) = owner.insert(at / CELL, win) {
                    if prev != win {
                        self.cross_window.fetch_add(1, Ordering::Relaxed);
                    }
                }
            }
        }
    }

    fn fetch_add(&self, offset: usize, operand: i64, win: u32) -> i64 {
        let mut d = self.data.lock();
        let cell = &mut d.bytes[offset..offset + CELL];
        let old = i64::from_le_bytes((&*cell).try_into().unwrap());
        cell.copy_from_slice(&old.wrapping_add(operand).to_le_bytes());
        if let Some(owner) = d.acc_owner.as_mut() {
            if let Some(prev) = owner.insert(offset / CELL, win) {
                if prev != win {
                    self.cross_window.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        old
    }
}

struct Timed<T> {
    ready: Instant,
    item: T,
}

fn insert_by_ready<T>(q: &mut VecDeque<Timed<T>>, t: Timed<T>) {
    // Ties keep arrival order; late entries almost always go at the back.
    let mut at = q.len();
    while at > 0 && q[at - 1].ready > t.ready {
        at -= 1;
    }
    q.insert(at, t);
}

#[derive(Default)]
struct InjectState {
    busy_until: Option<Instant>,
    injected: u64,
    nic_consumed: u64,
}

#[derive(Default)]
struct Queues {
    incoming: VecDeque<Timed<WireMessage>>,
    completions: VecDeque<Timed<Event>>,
    delivered: u64,
}

#[repr(align(64))]
struct Padded<T>(T);

/// Injection-lock contention observed on one context.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ContextLockStats {
    pub acquisitions: u64,
    pub contended: u64,
    pub wait_ns: u64,
}

pub struct SimContext {
    id: ContextId,
    inject: Padded<Mutex<InjectState>>,
    contended: Padded<(AtomicU64, AtomicU64, AtomicU64)>,
    queues: Padded<Mutex<Queues>>,
}

impl SimContext {
    fn new(id: ContextId) -> Self {
        Self {
            id,
            inject: Padded(Mutex::new(InjectState::default())),
            contended: Padded((AtomicU64::new(0), AtomicU64::new(0), AtomicU64::new(0))),
            queues: Padded(Mutex::new(Queues::default())),
        }
    }

    pub fn id(&self) -> ContextId {
        self.id
    }

    fn lock_inject(&self) -> MutexGuard<'_, InjectState> {
        let (acq, cont, wait) = &self.contended.0;
        acq.fetch_add(1, Ordering::Relaxed);
        if let Some(g) = self.inject.0.try_lock() {
            return g;
        }
        let t0 = Instant::now();
        let g = self.inject.0.lock();
        cont.fetch_add(1, Ordering::Relaxed);
        wait.fetch_add(t0.elapsed().as_nanos() as u64, Ordering::Relaxed);
        g
    }

    pub fn lock_stats(&self) -> ContextLockStats {
        let (acq, cont, wait) = &self.contended.0;
        ContextLockStats {
            acquisitions: acq.load(Ordering::Relaxed),
            contended: cont.load(Ordering::Relaxed),
            wait_ns: wait.load(Ordering::Relaxed),
        }
    }

    fn push_incoming(&self, ready: Instant, msg: WireMessage) {
        insert_by_ready(&mut self.queues.0.lock().incoming, Timed { ready, item: msg });
    }

    fn push_completion(&self, ready: Instant, ev: Event) {
        insert_by_ready(&mut self.queues.0.lock().completions, Timed { ready, item: ev });
    }

    pub fn pending(&self) -> usize {
        let q = self.queues.0.lock();
        q.incoming.len() + q.completions.len()
    }
}

/// One in-process node: its hardware contexts and exposed window memory.
pub struct SimNode {
    id: usize,
    contexts: Box<[SimContext]>,
    windows: RwLock<HashMap<(u32, u32), Arc<Region>>>,
    rma_mode: RmaMode,
}

impl SimNode {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn contexts(&self) -> &[SimContext] {
        &self.contexts
    }

    pub fn context(&self, ctx: ContextId) -> &SimContext {
        &self.contexts[ctx as usize]
    }

    pub fn rma_mode(&self) -> RmaMode {
        self.rma_mode
    }

    pub fn register_window(&self, win: u32, member: u32, region: Arc<Region>) {
        self.windows.write().insert((win, member), region);
    }

    pub fn deregister_window(&self, win: u32, member: u32) -> Option<Arc<Region>> {
        self.windows.write().remove(&(win, member))
    }

    fn region(&self, win: u32, member: u32) -> Option<Arc<Region>> {
        self.windows.read().get(&(win, member)).cloned()
    }
}

/// Result of one context poll.
#[derive(Debug, Clone, Copy, Default)]
pub struct PollInfo {
    pub taken: usize,
    /// Earliest time a still-queued entry becomes visible.
    pub next_ready: Option<Instant>,
}

/// Totals used to check that no message is lost or duplicated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FabricCounts {
    pub injected: u64,
    pub delivered: u64,
    pub nic_consumed: u64,
    pub queued: u64,
    pub routing_faults: u64,
    pub fault_events: u64,
}

impl FabricCounts {
    /// Every injected message was delivered once, consumed by the NIC, or is still queued.
    pub fn conserved(&self) -> bool {
        self.injected + self.fault_events == self.delivered + self.nic_consumed + self.queued
    }
}

/// All nodes of a world plus the injection cost model.
pub struct Fabric {
    nodes: Vec<SimNode>,
    model: InjectionModel,
    cost_units: u64,
    routing_faults: AtomicU64,
    fault_events: AtomicU64,
}

impl Fabric {
    pub fn new(nodes: usize, contexts: usize, model: InjectionModel, cost_units: u64, rma_mode: RmaMode) -> Self {
        let nodes = (0..nodes)
            .map(|id| SimNode {
                id,
                contexts: (0..contexts).map(|c| SimContext::new(c as ContextId)).collect(),
                windows: RwLock::new(HashMap::new()),
                rma_mode,
            })
            .collect();
        Self { nodes, model, cost_units, routing_faults: AtomicU64::new(0), fault_events: AtomicU64::new(0) }
    }

    pub fn node(&self, id: usize) -> &SimNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[SimNode] {
        &self.nodes
    }

    pub fn context_count(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.contexts.len())
    }

    /// Charges the injection cost on `(node, ctx)` and enqueues `msg` at its
    /// destination. Hardware-mode RMA requests are executed here and their
    /// reply lands on the initiator's completion queue.
    pub fn inject(&self, node: usize, ctx: ContextId, msg: WireMessage) -> Result<()> {
        let src = &self.nodes[node];
        let Some(dst) = self.nodes.get(msg.dst_node as usize) else {
            self.routing_faults.fetch_add(1, Ordering::Relaxed);
            return Err(Error::Routing { node: msg.dst_node as usize });
        };
        if msg.dst_context as usize >= dst.contexts.len() {
            self.routing_faults.fetch_add(1, Ordering::Relaxed);
            return Err(Error::Routing { node: msg.dst_node as usize });
        }
        let context = &src.contexts[ctx as usize];
        let mut st = context.lock_inject();
        let now = Instant::now();
        let ready = match self.model {
            InjectionModel::Spin => {
                spin_work(self.cost_units);
                now
            }
            InjectionModel::Device => {
                let start = st.busy_until.map_or(now, |b| b.max(now));
                let done = start + Duration::from_nanos(self.cost_units * DEVICE_NS_PER_UNIT);
                st.busy_until = Some(done);
                done
            }
        };
        st.injected += 1;
        if msg.is_rma_request() && dst.rma_mode == RmaMode::Hardware {
            st.nic_consumed += 1;
            let initiator = &src.contexts[msg.src_context as usize];
            match self.execute_rma(dst, &msg) {
                Ok(reply) => {
                    st.injected += 1;
                    initiator.push_completion(ready, Event::Wire(reply));
                }
                Err((token, reason)) => {
                    self.fault_events.fetch_add(1, Ordering::Relaxed);
                    initiator.push_completion(ready, Event::Fault { token, reason });
                }
            }
        } else {
            dst.contexts[msg.dst_context as usize].push_incoming(ready, msg);
        }
        drop(st);
        if self.model == InjectionModel::Device {
            let ahead = ready.saturating_duration_since(now);
            if ahead > INJECTION_BACKLOG {
                std::thread::sleep(ahead - INJECTION_BACKLOG / 2);
            }
        }
        Ok(())
    }

    /// Executes an RMA request at its target and builds the reply addressed to
    /// the initiator's context. In software mode this is called by the target's
    /// progress engine, which then injects the reply itself.
    pub fn apply_rma_at_target(&self, node: usize, msg: &WireMessage) -> Result<WireMessage, (u64, FaultReason)> {
        self.execute_rma(&self.nodes[node], msg)
    }

    fn execute_rma(&self, target: &SimNode, msg: &WireMessage) -> Result<WireMessage, (u64, FaultReason)> {
        let token = msg.rma_token().expect("rma request");
        let (win, member) = match msg.body {
            WireBody::RmaPut { win, member, .. }
            | WireBody::RmaGet { win, member, .. }
            | WireBody::RmaAcc { win, member, .. }
            | WireBody::RmaFetchOp { win, member, .. } => (win, member),
            _ => unreachable!(),
        };
        let region = target.region(win, member).ok_or((token, FaultReason::UnknownWindow(win)))?;
        let extent = region.len();
        let in_range = |off: usize, len: usize| off.checked_add(len).is_some_and(|end| end <= extent);
        let body = match &msg.body {
            WireBody::RmaPut { offset, payload, .. } => {
                if !in_range(*offset, payload.len()) {
                    return Err((token, FaultReason::OutOfRange));
                }
                region.write(*offset, payload);
                WireBody::RmaCompletionAck { token }
            }
            WireBody::RmaGet { offset, len, .. } => {
                if !in_range(*offset, *len) {
                    return Err((token, FaultReason::OutOfRange));
                }
                WireBody::RmaGetReply { token, payload: region.read(*offset, *len) }
            }
            WireBody::RmaAcc { offset, payload, .. } => {
                if !in_range(*offset, payload.len()) {
                    return Err((token, FaultReason::OutOfRange));
                }
                region.accumulate(*offset, payload, win);
                WireBody::RmaCompletionAck { token }
            }
            WireBody::RmaFetchOp { offset, operand, .. } => {
                if !in_range(*offset, CELL) {
                    return Err((token, FaultReason::OutOfRange));
                }
                WireBody::RmaFetchOpReply { token, old: region.fetch_add(*offset, *operand, win) }
            }
            _ => unreachable!(),
        };
        Ok(WireMessage {
            src_node: msg.dst_node,
            src_context: msg.dst_context,
            dst_node: msg.src_node,
            dst_context: msg.src_context,
            body,
        })
    }

    /// Delivers a fault event straight to an initiator's completion queue.
    pub fn deliver_fault(&self, node: usize, ctx: ContextId, token: u64, reason: FaultReason) {
        self.fault_events.fetch_add(1, Ordering::Relaxed);
        self.nodes[node].contexts[ctx as usize].push_completion(Instant::now(), Event::Fault { token, reason });
    }

    /// Moves up to `budget` visible entries of one context into `out`,
    /// completions first. Other contexts are never touched.
    pub fn poll_context(&self, node: usize, ctx: ContextId, budget: usize, out: &mut Vec<Event>) -> PollInfo {
        let context = &self.nodes[node].contexts[ctx as usize];
        let mut q = context.queues.0.lock();
        if q.incoming.is_empty() && q.completions.is_empty() {
            return PollInfo::default();
        }
        let now = Instant::now();
        let mut info = PollInfo::default();
        while info.taken < budget {
            match q.completions.front() {
                Some(t) if t.ready <= now => {
                    out.push(q.completions.pop_front().unwrap().item);
                    info.taken += 1;
                }
                _ => break,
            }
        }
        while info.taken < budget {
            match q.incoming.front() {
                Some(t) if t.ready <= now => {
                    out.push(Event::Wire(q.incoming.pop_front().unwrap().item));
                    info.taken += 1;
                }
                _ => break,
            }
        }
        q.delivered += info.taken as u64;
        info.next_ready =
            [q.completions.front().map(|t| t.ready), q.incoming.front().map(|t| t.ready)].into_iter().flatten().min();
        info
    }

    /// Convenience wrapper around [`Fabric::poll_context`].
    pub fn poll(&self, node: usize, ctx: ContextId, budget: usize) -> Vec<Event> {
        let mut out = Vec::new();
        self.poll_context(node, ctx, budget, &mut out);
        out
    }

    pub fn counts(&self) -> FabricCounts {
        let mut c = FabricCounts {
            routing_faults: self.routing_faults.load(Ordering::Relaxed),
            fault_events: self.fault_events.load(Ordering::Relaxed),
            ..Default::default()
        };
        for n in &self.nodes {
            for ctx in n.contexts.iter() {
                let st = ctx.inject.0.lock();
                c.injected += st.injected;
                c.nic_consumed += st.nic_consumed;
                drop(st);
                let q = ctx.queues.0.lock();
                c.delivered += q.delivered;
                c.queued += (q.incoming.len() + q.completions.len()) as u64;
            }
        }
        c
    }
}

#[inline(never)]
fn spin_work(units: u64) {
    let mut x = 0x9E37_79B9_7F4A_7C15u64;
    for i in 0..units {
        x = x.rotate_left(5) ^ i.wrapping_mul(0x2545_F491_4F6C_DD1D);
    }
    std::hint::black_box(x);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eager(dst_node: u32, dst_ctx: ContextId, seq: u32) -> WireMessage {
        WireMessage {
            src_node: 0,
            src_context: 0,
            dst_node,
            dst_context: dst_ctx,
            body: WireBody::Eager {
                envelope: Envelope::new(1, 0, 0),
                dst_rank: 0,
                payload: seq.to_le_bytes().to_vec(),
            },
        }
    }

    fn seq_of(ev: &Event) -> u32 {
        match ev {
            Event::Wire(WireMessage { body: WireBody::Eager { payload, .. }, .. }) => {
                u32::from_le_bytes(payload[..4].try_into().unwrap())
            }
            other => panic!("unexpected event {other:?}"),
        }
    }

    fn fabric(nodes: usize, mode: RmaMode) -> Fabric {
        Fabric::new(nodes, 4, InjectionModel::Device, 0, mode)
    }

    #[test]
    fn single_message_is_delivered() {
        let f = fabric(2, RmaMode::Hardware);
        f.inject(0, 0, eager(1, 0, 0)).unwrap();
        assert_eq!(f.node(1).context(0).pending(), 1);
    }

    #[test]
    fn same_context_messages_keep_order() {
        let f = fabric(2, RmaMode::Hardware);
        f.inject(0, 0, eager(1, 2, 1)).unwrap();
        f.inject(0, 0, eager(1, 2, 2)).unwrap();
        let evs = f.poll(1, 2, 8);
        assert_eq!(evs.iter().map(seq_of).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn poll_respects_budget_and_isolation() {
        let f = fabric(1, RmaMode::Hardware);
        assert!(f.poll(0, 0, 4).is_empty());
        for i in 0..3 {
            f.inject(0, 0, eager(0, 3, i)).unwrap();
        }
        assert!(f.poll(0, 1, 8).is_empty());
        assert_eq!(f.poll(0, 3, 2).len(), 2);
        assert_eq!(f.node(0).context(3).pending(), 1);
    }

    #[test]
    fn unknown_node_is_a_routing_error() {
        let f = fabric(1, RmaMode::Hardware);
        assert_eq!(f.inject(0, 0, eager(5, 0, 0)), Err(Error::Routing { node: 5 }));
        assert_eq!(f.counts().routing_faults, 1);
    }

    fn put(dst_node: u32, win: u32, offset: usize, payload: Vec<u8>) -> WireMessage {
        WireMessage {
            src_node: 0,
            src_context: 1,
            dst_node,
            dst_context: 2,
            body: WireBody::RmaPut { win, member: 1, offset, payload, token: 77 },
        }
    }

    #[test]
    fn hardware_put_completes_without_target_poll() {
        let f = fabric(2, RmaMode::Hardware);
        let r = Region::new(16);
        f.node(1).register_window(9, 1, r.clone());
        f.inject(0, 1, put(1, 9, 8, 42i64.to_le_bytes().to_vec())).unwrap();
        assert_eq!(r.load_i64(8), 42);
        let evs = f.poll(0, 1, 4);
        assert_eq!(evs.len(), 1);
        assert!(matches!(&evs[0], Event::Wire(m) if m.body == WireBody::RmaCompletionAck { token: 77 }));
        assert!(f.counts().conserved());
    }

    #[test]
    fn software_put_waits_for_target_dispatch() {
        let f = fabric(2, RmaMode::Software);
        let r = Region::new(16);
        f.node(1).register_window(9, 1, r.clone());
        f.inject(0, 1, put(1, 9, 0, 5i64.to_le_bytes().to_vec())).unwrap();
        assert!(f.poll(0, 1, 4).is_empty());
        assert_eq!(r.load_i64(0), 0);
        let evs = f.poll(1, 2, 4);
        let Event::Wire(m) = &evs[0] else { panic!() };
        let reply = f.apply_rma_at_target(1, m).unwrap();
        assert_eq!(r.load_i64(0), 5);
        assert_eq!((reply.dst_node, reply.dst_context), (0, 1));
    }

    #[test]
    fn accumulate_twice_sums() {
        let f = fabric(2, RmaMode::Hardware);
        let r = Region::new(8);
        f.node(1).register_window(3, 0, r.clone());
        for _ in 0..2 {
            let m = WireMessage {
                src_node: 0,
                src_context: 0,
                dst_node: 1,
                dst_context: 0,
                body: WireBody::RmaAcc { win: 3, member: 0, offset: 0, payload: 1i64.to_le_bytes().to_vec(), token: 1 },
            };
            f.inject(0, 0, m).unwrap();
        }
        assert_eq!(r.load_i64(0), 2);
    }

    #[test]
    fn unknown_window_faults_to_initiator() {
        let f = fabric(2, RmaMode::Hardware);
        f.inject(0, 1, put(1, 4, 0, vec![1])).unwrap();
        let evs = f.poll(0, 1, 4);
        assert_eq!(evs, vec![Event::Fault { token: 77, reason: FaultReason::UnknownWindow(4) }]);
        assert!(f.counts().conserved());
    }

    #[test]
    fn device_cost_delays_visibility() {
        let f = Fabric::new(2, 1, InjectionModel::Device, 20_000, RmaMode::Hardware); // 100 us
        f.inject(0, 0, eager(1, 0, 0)).unwrap();
        let info = f.poll_context(1, 0, 4, &mut Vec::new());
        assert_eq!(info.taken, 0);
        assert!(info.next_ready.is_some());
        std::thread::sleep(Duration::from_micros(300));
        assert_eq!(f.poll(1, 0, 4).len(), 1);
    }
}
