//! Request records: the global pool, per-VCI caches and lightweight requests.
//!
//! All records are allocated once at init. A record lives in exactly one of
//! three places: the global free list (guarded by the request-class lock), a
//! VCI's cache (guarded by that VCI's lock), or in flight. Which locks an
//! allocation or release takes depends on the critical-section mode:
//!
//! | mode      | alloc                              | free                                |
//! |-----------|------------------------------------|-------------------------------------|
//! | `Global`  | global list under the global lock  | global list under the global lock   |
//! | `Fg`      | request lock                       | request lock                        |
//! | `FgCache` | VCI cache, request lock when empty | VCI lock, request lock on overflow  |

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU32, AtomicU8, Ordering};

use parking_lot::{Mutex, MutexGuard};

use crate::config::CsMode;
use crate::error::{usage, Error, Result};
use crate::stats::{Counter, StatsRegistry};
use crate::vci::{VciId, VciState};

const FREE: u8 = 0;
const ACTIVE: u8 = 1;
const COMPLETE: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestKind {
    Send,
    Recv,
}

/// Identifies one use of a record; the generation changes on every free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct SlotRef {
    pub idx: u32,
    pub gen: u32,
}

impl SlotRef {
    pub fn token(self) -> u64 {
        ((self.gen as u64) << 32) | self.idx as u64
    }

    pub fn from_token(t: u64) -> Self {
        Self { idx: t as u32, gen: (t >> 32) as u32 }
    }
}

/// Metadata of a received message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Status {
    pub source: i32,
    pub tag: i32,
    /// Length of the message as sent.
    pub len: usize,
}

#[derive(Debug, Default)]
pub(crate) struct SlotData {
    pub kind: Option<RequestKind>,
    pub vci: VciId,
    pub capacity: usize,
    pub status: Option<Status>,
    pub payload: Vec<u8>,
    pub error: Option<Error>,
}

struct Slot {
    gen: AtomicU32,
    state: AtomicU8,
    refs: AtomicU32,
    data: Mutex<SlotData>,
}

/// Where every record currently is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RequestCounts {
    pub total: usize,
    pub global_free: usize,
    pub cached: usize,
    pub live: usize,
}

impl RequestCounts {
    pub fn conserved(&self) -> bool {
        self.global_free + self.cached + self.live == self.total
    }
}

pub(crate) struct RequestPool {
    slots: Box<[Slot]>,
    global_free: Mutex<VecDeque<u32>>,
    cache_capacity: usize,
}

impl RequestPool {
    pub fn new(size: usize, cache_capacity: usize) -> Self {
        let slots = (0..size)
            .map(|_| Slot {
                gen: AtomicU32::new(0),
                state: AtomicU8::new(FREE),
                refs: AtomicU32::new(0),
                data: Mutex::new(SlotData::default()),
            })
            .collect();
        Self { slots, global_free: Mutex::new((0..size as u32).collect()), cache_capacity }
    }

    fn lock_global(&self, mode: CsMode, stats: &StatsRegistry) -> MutexGuard<'_, VecDeque<u32>> {
        // Under the global critical section this list is already protected.
        if mode != CsMode::Global {
            stats.bump(Counter::RequestLock);
        }
        self.global_free.lock()
    }

    /// Takes a record for an operation on `vci`. The caller is inside that
    /// VCI's critical section; `state` is the guarded VCI state.
    pub fn alloc(
        &self,
        mode: CsMode,
        state: &mut VciState,
        vci: VciId,
        kind: RequestKind,
        capacity: usize,
        stats: &StatsRegistry,
    ) -> Result<SlotRef> {
        let idx = match state.req_cache.pop_front().filter(|_| mode == CsMode::FgCache) {
            Some(i) => i,
            None => self.lock_global(mode, stats).pop_front().ok_or(Error::Exhausted("request pool"))?,
        };
        let slot = &self.slots[idx as usize];
        {
            let mut d = slot.data.lock();
            *d = SlotData { kind: Some(kind), vci, capacity, ..SlotData::default() };
        }
        // one reference for the user handle, one for the progress engine
        slot.refs.store(2, Ordering::Relaxed);
        slot.state.store(ACTIVE, Ordering::Release);
        Ok(SlotRef { idx, gen: slot.gen.load(Ordering::Relaxed) })
    }

    fn slot(&self, r: SlotRef) -> Result<&Slot> {
        let slot = self.slots.get(r.idx as usize).ok_or_else(|| usage("request handle out of range"))?;
        if slot.gen.load(Ordering::Acquire) != r.gen || slot.state.load(Ordering::Acquire) == FREE {
            return Err(usage("stale request handle"));
        }
        Ok(slot)
    }

    pub fn data(&self, r: SlotRef) -> MutexGuard<'_, SlotData> {
        self.slots[r.idx as usize].data.lock()
    }

    /// Whether the token still names a live record (tokens from the wire may be stale).
    pub fn is_live(&self, r: SlotRef) -> bool {
        self.slot(r).is_ok()
    }

    pub fn is_complete(&self, r: SlotRef) -> bool {
        self.slots[r.idx as usize].state.load(Ordering::Acquire) == COMPLETE
    }

    /// Marks the request complete and drops the engine's reference. The
    /// reference is dropped first so the waiter always releases the last one.
    pub fn complete(&self, r: SlotRef, fill: impl FnOnce(&mut SlotData), stats: &StatsRegistry, count_atomics: bool) {
        let slot = &self.slots[r.idx as usize];
        fill(&mut slot.data.lock());
        slot.refs.fetch_sub(1, Ordering::AcqRel);
        if count_atomics {
            stats.bump(Counter::Atomic);
        }
        slot.state.store(COMPLETE, Ordering::Release);
    }

    /// Drops the user's reference; true when the record is now unreferenced.
    pub fn release_user(&self, r: SlotRef, stats: &StatsRegistry, count_atomics: bool) -> Result<bool> {
        let slot = self.slot(r)?;
        if slot.state.load(Ordering::Acquire) != COMPLETE {
            return Err(usage("freeing an active request"));
        }
        if count_atomics {
            stats.bump(Counter::Atomic);
        }
        Ok(slot.refs.fetch_sub(1, Ordering::AcqRel) == 1)
    }

    fn reset(&self, r: SlotRef) {
        let slot = &self.slots[r.idx as usize];
        *slot.data.lock() = SlotData::default();
        slot.gen.fetch_add(1, Ordering::Release);
        slot.state.store(FREE, Ordering::Release);
    }

    /// Returns a record to the global list; the caller is inside the global
    /// critical section (Global mode).
    pub fn free_in_global_cs(&self, r: SlotRef) {
        self.reset(r);
        self.global_free.lock().push_back(r.idx);
    }

    /// Returns a record under the `Fg` rules (request lock).
    pub fn free_to_pool(&self, r: SlotRef, stats: &StatsRegistry) {
        self.reset(r);
        self.lock_global(CsMode::Fg, stats).push_back(r.idx);
    }

    /// Returns a record into its VCI's cache; `state` is the VCI state, held
    /// by the caller. Overflow spills to the global list.
    pub fn free_to_cache(&self, r: SlotRef, state: &mut VciState, stats: &StatsRegistry) {
        self.reset(r);
        if state.req_cache.len() < self.cache_capacity {
            state.req_cache.push_back(r.idx);
        } else {
            self.lock_global(CsMode::FgCache, stats).push_back(r.idx);
        }
    }

    pub fn global_free_len(&self) -> usize {
        self.global_free.lock().len()
    }

    pub fn total(&self) -> usize {
        self.slots.len()
    }

    /// Live records as (index, kind, vci), for leak diagnostics.
    pub fn live(&self) -> Vec<(u32, Option<RequestKind>, VciId)> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.state.load(Ordering::Acquire) != FREE)
            .map(|(i, s)| {
                let d = s.data.lock();
                (i as u32, d.kind, d.vci)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vci::Vci;

    fn reg() -> StatsRegistry {
        StatsRegistry::new(u64::MAX - 11)
    }

    #[test]
    fn cold_then_warm_cache() {
        let stats = reg();
        let pool = RequestPool::new(8, 4);
        let vci = Vci::new(1);
        let mut st = vci.lock();
        let before = stats.thread();
        let r = pool.alloc(CsMode::FgCache, &mut st, 1, RequestKind::Send, 0, &stats).unwrap();
        assert_eq!((stats.thread() - before).request, 1, "cold cache takes the request lock");
        pool.complete(r, |_| {}, &stats, true);
        assert!(pool.release_user(r, &stats, true).unwrap());
        pool.free_to_cache(r, &mut st, &stats);
        assert_eq!(st.req_cache.len(), 1);
        let before = stats.thread();
        let r2 = pool.alloc(CsMode::FgCache, &mut st, 1, RequestKind::Send, 0, &stats).unwrap();
        assert_eq!((stats.thread() - before).request, 0, "warm cache takes no extra lock");
        assert_eq!(r2.idx, r.idx);
        assert_ne!(r2.gen, r.gen);
    }

    #[test]
    fn full_cache_spills_to_global() {
        let stats = reg();
        let pool = RequestPool::new(4, 1);
        let vci = Vci::new(1);
        let mut st = vci.lock();
        let a = pool.alloc(CsMode::FgCache, &mut st, 1, RequestKind::Send, 0, &stats).unwrap();
        let b = pool.alloc(CsMode::FgCache, &mut st, 1, RequestKind::Send, 0, &stats).unwrap();
        for r in [a, b] {
            pool.complete(r, |_| {}, &stats, false);
            pool.release_user(r, &stats, false).unwrap();
        }
        let g0 = pool.global_free_len();
        pool.free_to_cache(a, &mut st, &stats);
        assert_eq!(pool.global_free_len(), g0);
        pool.free_to_cache(b, &mut st, &stats);
        assert_eq!(pool.global_free_len(), g0 + 1);
    }

    #[test]
    fn exhaustion_is_a_resource_error() {
        let stats = reg();
        let pool = RequestPool::new(3, 2);
        let vci = Vci::new(1);
        let mut st = vci.lock();
        for _ in 0..3 {
            pool.alloc(CsMode::FgCache, &mut st, 1, RequestKind::Recv, 0, &stats).unwrap();
        }
        assert_eq!(
            pool.alloc(CsMode::FgCache, &mut st, 1, RequestKind::Recv, 0, &stats),
            Err(Error::Exhausted("request pool"))
        );
    }

    #[test]
    fn freeing_active_request_is_a_usage_fault() {
        let stats = reg();
        let pool = RequestPool::new(2, 2);
        let vci = Vci::new(0);
        let mut st = vci.lock();
        let r = pool.alloc(CsMode::Fg, &mut st, 0, RequestKind::Recv, 0, &stats).unwrap();
        assert!(matches!(pool.release_user(r, &stats, true), Err(Error::Usage(_))));
    }

    #[test]
    fn stale_handle_detected() {
        let stats = reg();
        let pool = RequestPool::new(2, 2);
        let vci = Vci::new(0);
        let mut st = vci.lock();
        let r = pool.alloc(CsMode::Fg, &mut st, 0, RequestKind::Send, 0, &stats).unwrap();
        pool.complete(r, |_| {}, &stats, false);
        pool.release_user(r, &stats, false).unwrap();
        pool.free_to_pool(r, &stats);
        assert!(!pool.is_live(r));
        assert!(pool.release_user(r, &stats, false).is_err());
    }
}
