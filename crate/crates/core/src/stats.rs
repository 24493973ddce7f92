//! Lock and progress instrumentation.
//!
//! Counters are accumulated per thread (each thread owns its own block of
//! relaxed atomics, written only by that thread) and merged on demand, so
//! counting never introduces a shared cache line between threads.

use std::cell::RefCell;
use std::fmt;
use std::ops::Sub;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum Counter {
    GlobalLock,
    VciLock,
    RequestLock,
    HookLock,
    Atomic,
    VciPoll,
    GlobalRound,
    HookRun,
    Events,
}

const NCOUNTERS: usize = 9;

#[derive(Default)]
struct ThreadStats {
    counts: [AtomicU64; NCOUNTERS],
}

impl ThreadStats {
    #[inline]
    fn bump(&self, c: Counter, n: u64) {
        // Single writer: a plain load/store pair avoids a locked RMW.
        let slot = &self.counts[c as usize];
        slot.store(slot.load(Ordering::Relaxed) + n, Ordering::Relaxed);
    }

    fn snapshot(&self) -> LockStats {
        let v = |c: Counter| self.counts[c as usize].load(Ordering::Relaxed);
        LockStats {
            global: v(Counter::GlobalLock),
            vci: v(Counter::VciLock),
            request: v(Counter::RequestLock),
            hook: v(Counter::HookLock),
            atomics: v(Counter::Atomic),
            vci_polls: v(Counter::VciPoll),
            global_rounds: v(Counter::GlobalRound),
            hook_runs: v(Counter::HookRun),
            events: v(Counter::Events),
        }
    }
}

/// Merged or per-thread counter values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LockStats {
    pub global: u64,
    pub vci: u64,
    pub request: u64,
    pub hook: u64,
    pub atomics: u64,
    pub vci_polls: u64,
    pub global_rounds: u64,
    pub hook_runs: u64,
    pub events: u64,
}

impl LockStats {
    /// Critical-section lock acquisitions of every class.
    pub fn locks(&self) -> u64 {
        self.global + self.vci + self.request + self.hook
    }

    pub fn csv_header() -> &'static str {
        "global_locks,vci_locks,request_locks,hook_locks,atomics,vci_polls,global_rounds,hook_runs,events"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.global,
            self.vci,
            self.request,
            self.hook,
            self.atomics,
            self.vci_polls,
            self.global_rounds,
            self.hook_runs,
            self.events
        )
    }

    fn add(&mut self, o: &LockStats) {
        self.global += o.global;
        self.vci += o.vci;
        self.request += o.request;
        self.hook += o.hook;
        self.atomics += o.atomics;
        self.vci_polls += o.vci_polls;
        self.global_rounds += o.global_rounds;
        self.hook_runs += o.hook_runs;
        self.events += o.events;
    }
}

impl Sub for LockStats {
    type Output = LockStats;
    fn sub(self, o: LockStats) -> LockStats {
        LockStats {
            global: self.global - o.global,
            vci: self.vci - o.vci,
            request: self.request - o.request,
            hook: self.hook - o.hook,
            atomics: self.atomics - o.atomics,
            vci_polls: self.vci_polls - o.vci_polls,
            global_rounds: self.global_rounds - o.global_rounds,
            hook_runs: self.hook_runs - o.hook_runs,
            events: self.events - o.events,
        }
    }
}

impl fmt::Display for LockStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "locks: global={} vci={} request={} hook={}", self.global, self.vci, self.request, self.hook)?;
        writeln!(f, "atomics: {}", self.atomics)?;
        write!(
            f,
            "progress: vci_polls={} global_rounds={} hook_runs={} events={}",
            self.vci_polls, self.global_rounds, self.hook_runs, self.events
        )
    }
}

thread_local! {
    static LOCAL: RefCell<Vec<(u64, Arc<ThreadStats>)>> = const { RefCell::new(Vec::new()) };
}

/// Per-world registry of thread counter blocks.
pub(crate) struct StatsRegistry {
    world_id: u64,
    threads: Mutex<Vec<Arc<ThreadStats>>>,
}

impl StatsRegistry {
    pub(crate) fn new(world_id: u64) -> Self {
        Self { world_id, threads: Mutex::new(Vec::new()) }
    }

    fn with_local<R>(&self, f: impl FnOnce(&ThreadStats) -> R) -> R {
        LOCAL.with(|cell| {
            let mut local = cell.borrow_mut();
            if let Some((_, s)) = local.iter().rev().find(|(id, _)| *id == self.world_id) {
                return f(s);
            }
            // Drop blocks of worlds that no longer exist.
            local.retain(|(_, s)| Arc::strong_count(s) > 1);
            let s = Arc::new(ThreadStats::default());
            self.threads.lock().push(s.clone());
            local.push((self.world_id, s));
            f(&local.last().unwrap().1)
        })
    }

    #[inline]
    pub(crate) fn bump(&self, c: Counter) {
        self.with_local(|s| s.bump(c, 1));
    }

    /// Counters of the calling thread only.
    pub(crate) fn thread(&self) -> LockStats {
        self.with_local(|s| s.snapshot())
    }

    /// Sum over every thread that touched this world.
    pub(crate) fn merged(&self) -> LockStats {
        let mut total = LockStats::default();
        for t in self.threads.lock().iter() {
            total.add(&t.snapshot());
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_thread_counts_merge() {
        let reg = Arc::new(StatsRegistry::new(u64::MAX - 7));
        reg.bump(Counter::VciLock);
        let r2 = reg.clone();
        std::thread::spawn(move || {
            r2.bump(Counter::VciLock);
            for _ in 0..5 {
                r2.bump(Counter::Events);
            }
            assert_eq!(r2.thread().vci, 1);
        })
        .join()
        .unwrap();
        assert_eq!(reg.thread().vci, 1);
        let m = reg.merged();
        assert_eq!(m.vci, 2);
        assert_eq!(m.events, 5);
        assert_eq!(m.locks(), 2);
    }
}
