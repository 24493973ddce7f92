//! Virtual communication interfaces and the per-node VCI pool.
//!
//! A VCI is one independent communication stream: it is bound to exactly one
//! hardware context (VCI `i` uses context `i`) and owns its lock, matching
//! queues, request cache and lightweight request. Records are cache-line
//! aligned so that the locks of neighbouring VCIs never share a line.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::Instant;

use parking_lot::{Mutex, MutexGuard};

use crate::error::{usage, Result};
use crate::matching::MatchQueues;
use crate::p2p::{Inbound, PendingSend};
use crate::requests::SlotRef;
use crate::rma::RmaState;

pub type VciId = u16;

/// The world communicator's VCI; absorbs every assignment once the pool is empty.
pub const FALLBACK_VCI: VciId = 0;

pub const CACHE_LINE: usize = 64;

/// State guarded by a VCI's lock.
pub(crate) struct VciState {
    pub matching: MatchQueues<Inbound, SlotRef>,
    pub req_cache: VecDeque<u32>,
    /// Lightweight-request references handed out; only touched under the lock.
    pub lw_issued: u64,
    pub pending_rndv: HashMap<u64, PendingSend>,
    pub rma: RmaState,
    next_token: u64,
}

impl VciState {
    fn new(id: VciId) -> Self {
        Self {
            matching: MatchQueues::new(),
            req_cache: VecDeque::new(),
            lw_issued: 0,
            pending_rndv: HashMap::new(),
            rma: RmaState::default(),
            next_token: (id as u64) << 40,
        }
    }

    /// Token unique within the node: VCI id in the high bits, sequence below.
    pub fn last_token(&self) -> u64 {
        self.next_token
    }

    pub fn next_token(&mut self) -> u64 {
        self.next_token += 1;
        self.next_token
    }

    /// Whether anything on this VCI is waiting for a peer.
    pub fn has_pending_work(&self) -> bool {
        self.matching.posted_len() > 0 || !self.pending_rndv.is_empty() || self.rma.has_outstanding()
    }
}

#[repr(align(64))]
pub struct Vci {
    id: VciId,
    state: Mutex<VciState>,
    /// Lightweight references released by waits, which take no lock.
    lw_retired: AtomicU64,
    active: AtomicBool,
    contended: AtomicU64,
    wait_ns: AtomicU64,
}

impl Vci {
    pub(crate) fn new(id: VciId) -> Self {
        Self {
            id,
            state: Mutex::new(VciState::new(id)),
            lw_retired: AtomicU64::new(0),
            active: AtomicBool::new(id == FALLBACK_VCI),
            contended: AtomicU64::new(0),
            wait_ns: AtomicU64::new(0),
        }
    }

    pub fn id(&self) -> VciId {
        self.id
    }

    pub fn is_active(&self) -> bool {
        self.active.load(Ordering::Relaxed)
    }

    pub(crate) fn set_active(&self, on: bool) {
        self.active.store(on, Ordering::Relaxed);
    }

    /// Acquires the state mutex, recording contention.
    pub(crate) fn lock(&self) -> MutexGuard<'_, VciState> {
        if let Some(g) = self.state.try_lock() {
            return g;
        }
        let t0 = Instant::now();
        let g = self.state.lock();
        self.contended.fetch_add(1, Ordering::Relaxed);
        self.wait_ns.fetch_add(t0.elapsed().as_nanos() as u64, Ordering::Relaxed);
        g
    }

    pub(crate) fn try_lock(&self) -> Option<MutexGuard<'_, VciState>> {
        self.state.try_lock()
    }

    pub(crate) fn retire_lightweight(&self) {
        self.lw_retired.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn lightweight_retired(&self) -> u64 {
        self.lw_retired.load(Ordering::Relaxed)
    }

    /// Times a thread found this VCI's lock held, and the time spent waiting.
    pub fn contention(&self) -> (u64, u64) {
        (self.contended.load(Ordering::Relaxed), self.wait_ns.load(Ordering::Relaxed))
    }
}

/// First-come, first-served pool of VCIs on one node.
#[derive(Debug)]
pub struct VciPool {
    size: usize,
    free: VecDeque<VciId>,
    /// Users per VCI; the fallback counts the world communicator as one.
    users: Vec<u32>,
    fallback_grants: u64,
}

/// Snapshot of pool accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolStats {
    pub size: usize,
    pub free: usize,
    pub assigned: usize,
    /// Objects currently sharing the fallback besides the world communicator.
    pub fallback_sharers: u32,
    /// Times an acquisition had to fall back since init.
    pub fallback_grants: u64,
}

impl PoolStats {
    /// Free and assigned non-fallback VCIs partition the pool.
    pub fn conserved(&self) -> bool {
        self.free + self.assigned == self.size - 1
    }
}

impl VciPool {
    /// A pool of `size` VCIs; VCI 0 is reserved as the fallback and already in use.
    pub fn new(size: usize) -> Self {
        assert!(size >= 1);
        let mut users = vec![0; size];
        users[FALLBACK_VCI as usize] = 1;
        Self { size, free: (1..size as VciId).collect(), users, fallback_grants: 0 }
    }

    pub fn acquire(&mut self) -> VciId {
        match self.free.pop_front() {
            Some(id) => {
                self.users[id as usize] = 1;
                id
            }
            None => {
                self.users[FALLBACK_VCI as usize] += 1;
                self.fallback_grants += 1;
                FALLBACK_VCI
            }
        }
    }

    pub fn release(&mut self, id: VciId) -> Result<()> {
        let slot = self.users.get_mut(id as usize).ok_or_else(|| usage(format!("vci {id} is not in the pool")))?;
        if id == FALLBACK_VCI {
            if *slot <= 1 {
                return Err(usage("fallback vci released more often than granted"));
            }
            *slot -= 1;
            return Ok(());
        }
        if *slot == 0 {
            return Err(usage(format!("vci {id} released twice")));
        }
        *slot = 0;
        self.free.push_back(id);
        Ok(())
    }

    pub fn is_assigned(&self, id: VciId) -> bool {
        self.users.get(id as usize).is_some_and(|u| *u > 0)
    }

    pub fn stats(&self) -> PoolStats {
        PoolStats {
            size: self.size,
            free: self.free.len(),
            assigned: self.users[1..].iter().filter(|u| **u > 0).count(),
            fallback_sharers: self.users[FALLBACK_VCI as usize] - 1,
            fallback_grants: self.fallback_grants,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_pool_hands_out_one_first() {
        let mut p = VciPool::new(16);
        assert_eq!(p.acquire(), 1);
    }

    #[test]
    fn small_pool_exhausts_into_fallback() {
        let mut p = VciPool::new(4);
        let got: Vec<_> = (0..3).map(|_| p.acquire()).collect();
        assert_eq!(got, vec![1, 2, 3]);
        assert_eq!(p.acquire(), FALLBACK_VCI);
        assert_eq!(p.stats().fallback_sharers, 1);
        assert_eq!(p.stats().fallback_grants, 1);
    }

    #[test]
    fn released_vci_is_reused_in_fifo_order() {
        let mut p = VciPool::new(4);
        for _ in 0..3 {
            p.acquire();
        }
        p.release(2).unwrap();
        assert_eq!(p.acquire(), 2);
        // FIFO across several releases
        p.release(3).unwrap();
        p.release(1).unwrap();
        assert_eq!(p.acquire(), 3);
        assert_eq!(p.acquire(), 1);
    }

    #[test]
    fn fallback_release_only_decrements() {
        let mut p = VciPool::new(2);
        assert_eq!(p.acquire(), 1);
        assert_eq!(p.acquire(), 0);
        let before = p.stats();
        p.release(FALLBACK_VCI).unwrap();
        let after = p.stats();
        assert_eq!(after.size, before.size);
        assert_eq!(after.free, before.free);
        assert_eq!(after.fallback_sharers, 0);
        assert!(p.release(FALLBACK_VCI).is_err());
    }

    #[test]
    fn double_release_is_a_usage_fault() {
        let mut p = VciPool::new(8);
        for _ in 0..3 {
            p.acquire();
        }
        p.release(3).unwrap();
        assert!(matches!(p.release(3), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn vci_records_do_not_share_cache_lines() {
        assert_eq!(std::mem::align_of::<Vci>(), CACHE_LINE);
        assert_eq!(std::mem::size_of::<Vci>() % CACHE_LINE, 0);
        let vcis: Vec<Vci> = (0..4).map(Vci::new).collect();
        for pair in vcis.windows(2) {
            let a = &pair[0] as *const Vci as usize;
            let b = &pair[1] as *const Vci as usize;
            assert_eq!(a % CACHE_LINE, 0);
            // last byte of a and first byte of b land on different lines
            let a_last_line = (a + std::mem::size_of::<Vci>() - 1) / CACHE_LINE;
            assert!(a_last_line < b / CACHE_LINE);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pool_conserves_slots(size in 1usize..12, script in prop::collection::vec(any::<(bool, u8)>(), 0..200)) {
                let mut p = VciPool::new(size);
                let mut held: Vec<VciId> = Vec::new();
                for (acquire, pick) in script {
                    if acquire || held.is_empty() {
                        held.push(p.acquire());
                    } else {
                        let id = held.remove(pick as usize % held.len());
                        p.release(id).unwrap();
                    }
                    let st = p.stats();
                    prop_assert!(st.conserved());
                    prop_assert_eq!(st.fallback_sharers as usize, held.iter().filter(|v| **v == FALLBACK_VCI).count());
                }
            }

            #[test]
            fn pool_replay_is_deterministic(script in prop::collection::vec(any::<(bool, u8)>(), 0..100)) {
                let run = || {
                    let mut p = VciPool::new(6);
                    let mut held = Vec::new();
                    let mut seen = Vec::new();
                    for (acquire, pick) in &script {
                        if *acquire || held.is_empty() {
                            let id = p.acquire();
                            seen.push(id);
                            held.push(id);
                        } else {
                            let id = held.remove(*pick as usize % held.len());
                            p.release(id).unwrap();
                        }
                    }
                    seen
                };
                prop_assert_eq!(run(), run());
            }
        }
    }
}
