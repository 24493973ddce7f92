//! Lock acquisitions on the critical path of each operation, per
//! critical-section mode. Single-threaded, zero injection cost, so every
//! wait completes in its first poll.

use std::time::Duration;

use vcirt::{Config, CsMode, LockStats, Rank, Region, WinOptions, World};

/// (global, vci, request) lock acquisitions.
type Locks = (u64, u64, u64);

fn world(mode: CsMode) -> World {
    let cfg = Config { cs_mode: mode, injection_cost: 0, vcis: 4, ..Config::default() };
    World::init(cfg, 2, 1).unwrap()
}

fn measure<T>(rank: &Rank, op: impl FnOnce() -> T) -> (T, Locks) {
    let before = rank.thread_stats();
    let out = op();
    let d: LockStats = rank.thread_stats() - before;
    assert_eq!(d.hook, 0, "no progress hooks are registered");
    (out, (d.global, d.vci, d.request))
}

/// Message sizes: one that completes at injection and one that needs a
/// rendezvous, hence a pool request.
const SMALL: usize = 8;
const LARGE: usize = 64 * 1024;

struct Row {
    isend: Locks,
    isend_immediate: Locks,
    put: Locks,
    wait: Locks,
    wait_immediate: Locks,
}

fn observe(mode: CsMode) -> Row {
    let w = world(mode);
    let (a, b) = (w.rank(0), w.rank(1));
    let (ca, cb) = (a.comm_dup(&a.world_comm()).unwrap(), b.comm_dup(&b.world_comm()).unwrap());

    // Warm the request caches so the cached mode shows its steady state.
    for _ in 0..2 {
        let r = b.irecv(&cb, 0, 1, LARGE).unwrap();
        let s = a.isend(&ca, 1, 1, vec![0; LARGE]).unwrap();
        std::thread::scope(|sc| {
            sc.spawn(|| b.wait(r).unwrap());
            a.wait(s).unwrap();
        });
    }

    let (small, isend_immediate) = measure(&a, || a.isend(&ca, 1, 2, vec![1; SMALL]).unwrap());
    assert!(small.is_lightweight());
    let (_, wait_immediate) = measure(&a, || a.wait(small).unwrap());

    // Receive posted first, message already sitting at the receiver: the
    // wait completes in one poll and then frees the request.
    let recv = b.irecv(&cb, 0, 3, SMALL).unwrap();
    a.wait(a.isend(&ca, 1, 3, vec![3; SMALL]).unwrap()).unwrap();
    std::thread::sleep(Duration::from_millis(5));
    let (done, wait) = measure(&b, || b.wait(recv).unwrap());
    assert_eq!(done.data, vec![3; SMALL]);

    let big_recv = b.irecv(&cb, 0, 4, LARGE).unwrap();
    let (big, isend) = measure(&a, || a.isend(&ca, 1, 4, vec![4; LARGE]).unwrap());
    assert!(!big.is_lightweight());
    std::thread::scope(|s| {
        s.spawn(|| b.wait(big_recv).unwrap());
        a.wait(big).unwrap();
    });

    let regions = [Region::new(64), Region::new(64)];
    let wa = a.win_create(&a.world_comm(), regions[0].clone(), WinOptions::default()).unwrap();
    let wb = b.win_create(&b.world_comm(), regions[1].clone(), WinOptions::default()).unwrap();
    let (_, put) = measure(&a, || a.put(&wa, 1, 0, &[9; 8]).unwrap());
    a.flush(&wa, 1).unwrap();
    std::thread::scope(|s| {
        s.spawn(|| b.win_free(wb).unwrap());
        a.win_free(wa).unwrap();
    });
    std::thread::scope(|s| {
        s.spawn(|| b.comm_free(&cb).unwrap());
        a.comm_free(&ca).unwrap();
    });
    assert!(w.finalize().unwrap().conserved());
    Row { isend, isend_immediate, put, wait, wait_immediate }
}

fn assert_row(mode: CsMode, want: [Locks; 5]) {
    let r = observe(mode);
    let got = [r.isend, r.isend_immediate, r.put, r.wait, r.wait_immediate];
    let names = ["isend", "isend (immediate)", "put", "wait", "wait (immediate)"];
    for ((name, g), w) in names.iter().zip(got).zip(want) {
        assert_eq!(g, w, "{mode:?} {name}: (global, vci, request) locks");
    }
}

#[test]
fn global_critical_section_takes_one_global_lock_everywhere() {
    let g = (1, 0, 0);
    assert_row(CsMode::Global, [g; 5]);
}

#[test]
fn fine_grained_takes_vci_and_request_locks() {
    assert_row(CsMode::Fg, [(0, 1, 1), (0, 1, 0), (0, 1, 0), (0, 1, 1), (0, 0, 0)]);
}

#[test]
fn request_cache_replaces_request_lock_with_vci_lock() {
    assert_row(CsMode::FgCache, [(0, 1, 0), (0, 1, 0), (0, 1, 0), (0, 2, 0), (0, 0, 0)]);
}
