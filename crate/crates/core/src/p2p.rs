//! Point-to-point operations: eager and rendezvous sends, receives, wait/test.

use std::sync::atomic::Ordering;

use crate::config::CsMode;
use crate::error::{usage, Error, Result};
use crate::matching::{Envelope, Matched, ANY_SOURCE, ANY_TAG};
use crate::requests::{RequestKind, SlotRef, Status};
use crate::runtime::{Comm, Node, Rank, Shared};
use crate::stats::Counter;
use crate::transport::{ContextId, WireBody, WireMessage};
use crate::vci::{VciId, VciState};

/// A message sitting in a matching queue.
#[derive(Debug)]
pub(crate) enum Inbound {
    Eager(Vec<u8>),
    Rts { src_node: u32, src_ctx: ContextId, len: usize, sender_token: u64 },
}

/// A rendezvous send waiting for its clear-to-send.
#[derive(Debug)]
pub(crate) struct PendingSend {
    pub payload: Vec<u8>,
    pub slot: SlotRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Handle {
    Done,
    Lightweight,
    Slot(SlotRef),
}

/// Handle for a nonblocking operation. Complete it with [`Rank::wait`],
/// [`Rank::waitall`] or [`Rank::test`]; dropping it leaks the record.
#[must_use = "requests must be completed with wait or test"]
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    node: usize,
    vci: VciId,
    handle: Handle,
}

impl Request {
    pub fn vci(&self) -> VciId {
        self.vci
    }

    /// True for requests that were complete when returned (eager sends).
    pub fn is_lightweight(&self) -> bool {
        self.handle == Handle::Lightweight
    }

    /// True once [`Rank::test`] has consumed the request.
    pub fn is_done(&self) -> bool {
        self.handle == Handle::Done
    }
}

/// Result of a completed operation. Sends carry no status.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Completion {
    pub status: Option<Status>,
    pub data: Vec<u8>,
}

impl Shared {
    fn count_atomics(&self) -> bool {
        self.mode() != CsMode::Global
    }

    /// Takes a reference on the pre-completed request of `vci`.
    fn lightweight(&self, node: &Node, vci: VciId, st: &mut VciState) -> Request {
        match self.mode() {
            CsMode::FgCache => st.lw_issued += 1,
            CsMode::Fg => {
                self.stats.bump(Counter::Atomic);
                node.lw_global.fetch_add(1, Ordering::Relaxed);
            }
            CsMode::Global => {
                node.lw_global.fetch_add(1, Ordering::Relaxed);
            }
        }
        Request { node: node.id, vci, handle: Handle::Lightweight }
    }

    fn retire_lightweight(&self, node: &Node, vci: VciId) {
        match self.mode() {
            CsMode::FgCache => {
                self.stats.bump(Counter::Atomic);
                node.vci(vci).retire_lightweight();
            }
            CsMode::Fg => {
                self.stats.bump(Counter::Atomic);
                node.lw_global.fetch_sub(1, Ordering::Relaxed);
            }
            CsMode::Global => {
                self.stats.bump(Counter::GlobalLock);
                let _g = node.global.lock();
                node.lw_global.fetch_sub(1, Ordering::Relaxed);
            }
        }
    }

    /// Handles a receive paired with a message, under the VCI lock.
    pub(crate) fn on_match(&self, node: &Node, vci: VciId, m: Matched<SlotRef, Inbound>) -> Result<()> {
        let status = |len| Status { source: m.envelope.source, tag: m.envelope.tag, len };
        match m.msg {
            Inbound::Eager(payload) => {
                self.complete_recv(node, m.recv, status(payload.len()), payload);
                Ok(())
            }
            Inbound::Rts { src_node, src_ctx, len, sender_token } => {
                node.requests.data(m.recv).status = Some(status(len));
                let cts = WireMessage {
                    src_node: node.id as u32,
                    src_context: vci as ContextId,
                    dst_node: src_node,
                    dst_context: src_ctx,
                    body: WireBody::RndvCts { sender_token, receiver_token: m.recv.token() },
                };
                self.fabric.inject(node.id, vci as ContextId, cts)
            }
        }
    }

    fn complete_recv(&self, node: &Node, r: SlotRef, status: Status, mut payload: Vec<u8>) {
        self.stats.bump(Counter::Events);
        node.requests.complete(
            r,
            |d| {
                if payload.len() > d.capacity {
                    d.error = Some(Error::Truncated { len: payload.len(), capacity: d.capacity });
                    payload.truncate(d.capacity);
                }
                d.status = Some(status);
                d.payload = payload;
            },
            &self.stats,
            self.count_atomics(),
        );
    }

    pub(crate) fn on_eager(
        &self,
        node: &Node,
        vci: VciId,
        st: &mut VciState,
        env: Envelope,
        dst: u32,
        payload: Vec<u8>,
    ) -> Result<()> {
        match st.matching.deliver_message(env, dst, Inbound::Eager(payload)) {
            Some(m) => self.on_match(node, vci, m),
            None => Ok(()),
        }
    }

    pub(crate) fn on_rts(&self, node: &Node, vci: VciId, st: &mut VciState, msg: &WireMessage) -> Result<()> {
        let WireBody::RndvRts { envelope, dst_rank, len, sender_token } = msg.body else { unreachable!() };
        let inbound = Inbound::Rts { src_node: msg.src_node, src_ctx: msg.src_context, len, sender_token };
        match st.matching.deliver_message(envelope, dst_rank, inbound) {
            Some(m) => self.on_match(node, vci, m),
            None => Ok(()),
        }
    }

    pub(crate) fn on_cts(&self, node: &Node, vci: VciId, st: &mut VciState, msg: &WireMessage) -> Result<()> {
        let WireBody::RndvCts { sender_token, receiver_token } = msg.body else { unreachable!() };
        let Some(send) = st.pending_rndv.remove(&sender_token) else {
            return Err(usage(format!("clear-to-send for unknown send {sender_token:#x}")));
        };
        let data = WireMessage {
            src_node: node.id as u32,
            src_context: vci as ContextId,
            dst_node: msg.src_node,
            dst_context: msg.src_context,
            body: WireBody::RndvData { receiver_token, payload: send.payload },
        };
        self.fabric.inject(node.id, vci as ContextId, data)?;
        self.stats.bump(Counter::Events);
        node.requests.complete(send.slot, |_| {}, &self.stats, self.count_atomics());
        Ok(())
    }

    pub(crate) fn on_rndv_data(&self, node: &Node, msg: WireMessage) -> Result<()> {
        let WireBody::RndvData { receiver_token, payload } = msg.body else { unreachable!() };
        let r = SlotRef::from_token(receiver_token);
        if !node.requests.is_live(r) {
            return Err(usage(format!("rendezvous data for unknown receive {receiver_token:#x}")));
        }
        let status = node.requests.data(r).status.expect("status recorded at match");
        self.complete_recv(node, r, status, payload);
        Ok(())
    }

    /// Drops the user's reference on a completed slot and returns its result.
    /// `in_global_cs` is set when the caller already holds the global lock.
    fn finish_slot(&self, node: &Node, r: SlotRef, in_global_cs: bool) -> Result<Completion> {
        let (result, vci) = {
            let mut d = node.requests.data(r);
            let result = match d.error.take() {
                Some(e) => Err(e),
                None => Ok(Completion { status: d.status, data: std::mem::take(&mut d.payload) }),
            };
            (result, d.vci)
        };
        if node.requests.release_user(r, &self.stats, self.count_atomics())? {
            match self.mode() {
                CsMode::Global if in_global_cs => node.requests.free_in_global_cs(r),
                CsMode::Global => {
                    self.stats.bump(Counter::GlobalLock);
                    let _g = node.global.lock();
                    node.requests.free_in_global_cs(r);
                }
                CsMode::Fg => node.requests.free_to_pool(r, &self.stats),
                CsMode::FgCache => {
                    let mut cs = self.enter(node, vci);
                    node.requests.free_to_cache(r, &mut cs, &self.stats);
                }
            }
        }
        result
    }
}

impl Rank {
    fn check_comm(&self, comm: &Comm) -> Result<VciId> {
        if comm.node != self.node {
            return Err(usage("communicator belongs to another rank"));
        }
        comm.lookup_vci()
    }

    fn check_request(&self, req: &Request) -> Result<()> {
        if req.node != self.node {
            return Err(usage("request belongs to another rank"));
        }
        Ok(())
    }

    /// Nonblocking send. Payloads up to the eager threshold complete at
    /// injection; larger ones use rendezvous.
    pub fn isend(&self, comm: &Comm, dest: u32, tag: i32, payload: Vec<u8>) -> Result<Request> {
        if tag < 0 {
            return Err(usage(format!("tag {tag} is reserved")));
        }
        self.isend_internal(comm, dest, tag, payload, false)
    }

    /// Nonblocking synchronous send: always rendezvous, completes once the
    /// receiver has matched.
    pub fn issend(&self, comm: &Comm, dest: u32, tag: i32, payload: Vec<u8>) -> Result<Request> {
        if tag < 0 {
            return Err(usage(format!("tag {tag} is reserved")));
        }
        self.isend_internal(comm, dest, tag, payload, true)
    }

    pub(crate) fn isend_internal(
        &self,
        comm: &Comm,
        dest: u32,
        tag: i32,
        payload: Vec<u8>,
        sync: bool,
    ) -> Result<Request> {
        let vci = self.check_comm(comm)?;
        let sh = &*self.shared;
        let (dst_node, dst_vci, _) = sh.route(&comm.shared, dest)?;
        let node = self.node();
        let envelope = Envelope::new(comm.id(), comm.rank as i32, tag);
        let mut cs = sh.enter(node, vci);
        if !sync && payload.len() <= sh.cfg.eager_threshold {
            let msg = WireMessage {
                src_node: node.id as u32,
                src_context: vci as ContextId,
                dst_node,
                dst_context: dst_vci as ContextId,
                body: WireBody::Eager { envelope, dst_rank: dest, payload },
            };
            sh.fabric.inject(node.id, vci as ContextId, msg)?;
            return Ok(sh.lightweight(node, vci, &mut cs));
        }
        let slot = node.requests.alloc(sh.mode(), &mut cs, vci, RequestKind::Send, 0, &sh.stats)?;
        let sender_token = slot.token();
        let len = payload.len();
        cs.pending_rndv.insert(sender_token, PendingSend { payload, slot });
        let rts = WireMessage {
            src_node: node.id as u32,
            src_context: vci as ContextId,
            dst_node,
            dst_context: dst_vci as ContextId,
            body: WireBody::RndvRts { envelope, dst_rank: dest, len, sender_token },
        };
        if let Err(e) = sh.fabric.inject(node.id, vci as ContextId, rts) {
            cs.pending_rndv.remove(&sender_token);
            node.requests.complete(slot, |_| {}, &sh.stats, false);
            drop(cs);
            let _ = sh.finish_slot(node, slot, false);
            return Err(e);
        }
        Ok(Request { node: node.id, vci, handle: Handle::Slot(slot) })
    }

    /// Nonblocking receive of at most `capacity` bytes. `source` may be
    /// [`ANY_SOURCE`] and `tag` may be [`ANY_TAG`].
    pub fn irecv(&self, comm: &Comm, source: i32, tag: i32, capacity: usize) -> Result<Request> {
        if tag < 0 && tag != ANY_TAG {
            return Err(usage(format!("tag {tag} is reserved")));
        }
        if source == ANY_SOURCE && self.shared.cfg.hints.no_any_source {
            return Err(usage("wildcard source receive under the no_any_source hint"));
        }
        self.irecv_internal(comm, source, tag, capacity)
    }

    pub(crate) fn irecv_internal(&self, comm: &Comm, source: i32, tag: i32, capacity: usize) -> Result<Request> {
        let vci = self.check_comm(comm)?;
        if source != ANY_SOURCE && (source < 0 || source as u32 >= comm.size()) {
            return Err(usage(format!("source {source} not in communicator of size {}", comm.size())));
        }
        let sh = &*self.shared;
        let node = self.node();
        let pattern = Envelope::new(comm.id(), source, tag);
        let mut cs = sh.enter(node, vci);
        let slot = node.requests.alloc(sh.mode(), &mut cs, vci, RequestKind::Recv, capacity, &sh.stats)?;
        if let Some(m) = cs.matching.post_receive(pattern, comm.rank, slot) {
            sh.on_match(node, vci, m)?;
        }
        Ok(Request { node: node.id, vci, handle: Handle::Slot(slot) })
    }

    /// Blocks until `req` completes, progressing the request's VCI.
    pub fn wait(&self, req: Request) -> Result<Completion> {
        self.check_request(&req)?;
        let sh = &*self.shared;
        let node = self.node();
        match req.handle {
            Handle::Done => Ok(Completion::default()),
            Handle::Lightweight => {
                sh.retire_lightweight(node, req.vci);
                Ok(Completion::default())
            }
            Handle::Slot(r) if sh.mode() == CsMode::Global => {
                let mut out = None;
                sh.progress_until(node, req.vci, "wait", |_| {
                    if node.requests.is_complete(r) {
                        out = Some(sh.finish_slot(node, r, true));
                        true
                    } else {
                        false
                    }
                })?;
                out.expect("set when the predicate held")
            }
            Handle::Slot(r) => {
                if !node.requests.is_complete(r) {
                    sh.progress_until(node, req.vci, "wait", |_| node.requests.is_complete(r))?;
                }
                sh.finish_slot(node, r, false)
            }
        }
    }

    /// Completes every request, progressing all of their VCIs in turn.
    pub fn waitall(&self, reqs: Vec<Request>) -> Result<Vec<Completion>> {
        let sh = &*self.shared;
        let node = self.node();
        let mut out: Vec<Option<Result<Completion>>> = (0..reqs.len()).map(|_| None).collect();
        let mut pending = Vec::new();
        for (i, req) in reqs.into_iter().enumerate() {
            self.check_request(&req)?;
            match req.handle {
                Handle::Slot(r) => pending.push((i, req.vci, r)),
                _ => out[i] = Some(self.wait(req)),
            }
        }
        let mut vcis: Vec<VciId> = pending.iter().map(|p| p.1).collect();
        vcis.sort_unstable();
        vcis.dedup();
        let mut pacer = sh.pacer();
        while !pending.is_empty() {
            let mut events = 0;
            let mut next_ready = None;
            for &v in &vcis {
                let info = sh.progress_vci(node, v)?;
                events += info.taken;
                next_ready = crate::progress::earliest(next_ready, info.next_ready);
            }
            let before = pending.len();
            pending.retain(|&(i, _, r)| {
                if node.requests.is_complete(r) {
                    out[i] = Some(sh.finish_slot(node, r, false));
                    false
                } else {
                    true
                }
            });
            if pending.is_empty() {
                break;
            }
            if pending.len() == before && pacer.failed() {
                sh.progress_global(node)?;
            }
            pacer.idle(events, next_ready);
            if pacer.expired() {
                return Err(sh.stuck(node, "waitall", vcis[0]));
            }
        }
        out.into_iter().map(|o| o.expect("every request resolved")).collect()
    }

    /// Progresses the request's VCI once; consumes the request and returns
    /// its result if it has completed.
    pub fn test(&self, req: &mut Request) -> Result<Option<Completion>> {
        self.check_request(req)?;
        let sh = &*self.shared;
        let node = self.node();
        match req.handle {
            Handle::Done => Ok(Some(Completion::default())),
            Handle::Lightweight => {
                req.handle = Handle::Done;
                sh.retire_lightweight(node, req.vci);
                Ok(Some(Completion::default()))
            }
            Handle::Slot(r) => {
                if !node.requests.is_complete(r) {
                    sh.progress_vci(node, req.vci)?;
                    if !node.requests.is_complete(r) {
                        return Ok(None);
                    }
                }
                req.handle = Handle::Done;
                sh.finish_slot(node, r, false).map(Some)
            }
        }
    }

    /// Blocking send.
    pub fn send(&self, comm: &Comm, dest: u32, tag: i32, payload: Vec<u8>) -> Result<()> {
        let r = self.isend(comm, dest, tag, payload)?;
        self.wait(r).map(|_| ())
    }

    /// Blocking synchronous send.
    pub fn ssend(&self, comm: &Comm, dest: u32, tag: i32, payload: Vec<u8>) -> Result<()> {
        let r = self.issend(comm, dest, tag, payload)?;
        self.wait(r).map(|_| ())
    }

    /// Blocking receive.
    pub fn recv(&self, comm: &Comm, source: i32, tag: i32, capacity: usize) -> Result<Completion> {
        let r = self.irecv(comm, source, tag, capacity)?;
        self.wait(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::runtime::World;

    fn world(nodes: usize, mode: CsMode) -> World {
        let cfg = Config { cs_mode: mode, vcis: 4, req_pool_size: 256, injection_cost: 0, ..Config::default() };
        World::init(cfg, nodes, 1).unwrap()
    }

    #[test]
    fn self_send_eager_and_rendezvous() {
        for mode in [CsMode::Global, CsMode::Fg, CsMode::FgCache] {
            let w = world(1, mode);
            let r = w.rank(0);
            let c = r.world_comm();
            let s = r.isend(&c, 0, 1, vec![7; 8]).unwrap();
            assert!(s.is_lightweight());
            let big = vec![3u8; 64 << 10];
            let s2 = r.isend(&c, 0, 2, big.clone()).unwrap();
            assert!(!s2.is_lightweight());
            let a = r.recv(&c, 0, 1, 8).unwrap();
            assert_eq!(a.data, vec![7; 8]);
            let b = r.recv(&c, ANY_SOURCE, 2, big.len()).unwrap();
            assert_eq!(b.data, big);
            assert_eq!(b.status, Some(Status { source: 0, tag: 2, len: big.len() }));
            r.wait(s).unwrap();
            r.wait(s2).unwrap();
            assert_eq!(r.lightweight_outstanding(0), 0);
            assert!(w.finalize().unwrap().conserved());
        }
    }

    #[test]
    fn truncation_is_reported_on_the_request() {
        let w = world(1, CsMode::FgCache);
        let r = w.rank(0);
        let c = r.world_comm();
        r.send(&c, 0, 0, vec![1; 16]).unwrap();
        assert_eq!(r.recv(&c, 0, 0, 4), Err(Error::Truncated { len: 16, capacity: 4 }));
    }

    #[test]
    fn irecv_completes_when_already_unexpected() {
        let w = world(1, CsMode::FgCache);
        let r = w.rank(0);
        let c = r.world_comm();
        r.send(&c, 0, 5, vec![1]).unwrap();
        // push the message through the context into the unexpected queue
        r.progress().unwrap();
        let mut q = r.irecv(&c, 0, 5, 1).unwrap();
        assert!(r.test(&mut q).unwrap().is_some());
    }

    #[test]
    fn invalid_destination_and_reserved_tags() {
        let w = world(1, CsMode::Fg);
        let r = w.rank(0);
        let c = r.world_comm();
        assert!(matches!(r.isend(&c, 3, 0, vec![]), Err(Error::Usage(_))));
        assert!(matches!(r.isend(&c, 0, -4, vec![]), Err(Error::Usage(_))));
        assert!(matches!(r.irecv(&c, 9, 0, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn no_any_source_hint_rejects_wildcard_source() {
        let mut cfg = Config { vcis: 2, req_pool_size: 64, ..Config::default() };
        cfg.hints.no_any_source = true;
        let w = World::init(cfg, 1, 1).unwrap();
        let r = w.rank(0);
        assert!(matches!(r.irecv(&r.world_comm(), ANY_SOURCE, 0, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn waitall_empty_is_immediate() {
        let w = world(1, CsMode::FgCache);
        assert!(w.rank(0).waitall(Vec::new()).unwrap().is_empty());
    }

    #[test]
    fn forgotten_request_is_reported_at_finalize() {
        let w = world(1, CsMode::FgCache);
        let r = w.rank(0);
        let _leak = r.irecv(&r.world_comm(), 0, 0, 0).unwrap();
        match w.finalize() {
            Err(Error::Outstanding { count, detail }) => {
                assert_eq!(count, 1);
                assert!(detail.contains("Recv"));
            }
            other => panic!("expected a leak diagnostic, got {other:?}"),
        }
    }
}
