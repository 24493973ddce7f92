//! One-sided accumulate semantics across threads and ranks.

use std::sync::{Barrier, Mutex};

use proptest::prelude::*;
use vcirt::{AccOrdering, Config, Region, WinOptions, Window, World};

fn windows(w: &World, ordering: AccOrdering, len: usize) -> (Vec<Window>, Vec<std::sync::Arc<Region>>) {
    let regions: Vec<_> = (0..w.size()).map(|_| Region::new(len)).collect();
    let wins = w
        .ranks()
        .iter()
        .zip(&regions)
        .map(|(r, reg)| r.win_create(&r.world_comm(), reg.clone(), WinOptions::ordering(ordering)).unwrap())
        .collect();
    (wins, regions)
}

fn free(w: World, wins: Vec<Window>) {
    std::thread::scope(|s| {
        for (r, win) in w.ranks().into_iter().zip(wins) {
            s.spawn(move || r.win_free(win).unwrap());
        }
    });
    assert!(w.finalize().unwrap().conserved());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Every fetch on an ordered window sees exactly the operations issued
    /// before it by the same origin.
    #[test]
    fn ordered_accumulates_apply_in_issue_order(ops in prop::collection::vec((any::<bool>(), -1000i64..1000), 1..80), cost in 0u64..50) {
        let w = World::init(Config { injection_cost: cost, ..Config::default() }, 2, 1).unwrap();
        let (wins, regions) = windows(&w, AccOrdering::Ordered, 8);
        let a = w.rank(0);
        let mut prefix = 0;
        let mut fetches = Vec::new();
        for (fetch, v) in ops {
            if fetch {
                fetches.push((a.fetch_and_op(&wins[0], 1, 0, v).unwrap(), prefix));
            } else {
                a.accumulate(&wins[0], 1, 0, &[v]).unwrap();
            }
            prefix += v;
        }
        a.flush(&wins[0], 1).unwrap();
        for (h, want) in &fetches {
            prop_assert_eq!(h.value(), Some(*want));
        }
        prop_assert_eq!(regions[1].load_i64(0), prefix);
        free(w, wins);
    }
}

#[test]
fn unordered_increments_from_eight_threads_sum_exactly() {
    let cfg = Config { injection_cost: 10, unordered_window_vcis: 4, ..Config::default() };
    let w = World::init(cfg, 2, 8).unwrap();
    let (wins, regions) = windows(&w, AccOrdering::None, 8);
    let r = w.rank(0);
    std::thread::scope(|s| {
        for _ in 0..8 {
            s.spawn(|| {
                for _ in 0..1000 {
                    r.accumulate(&wins[0], 1, 0, &[1]).unwrap();
                }
                r.flush(&wins[0], 1).unwrap();
            });
        }
    });
    assert_eq!(regions[1].load_i64(0), 8000);
    free(w, wins);
}

#[test]
fn concurrent_fetch_and_add_hands_out_a_permutation() {
    let w = World::init(Config { injection_cost: 10, ..Config::default() }, 4, 16).unwrap();
    let (wins, regions) = windows(&w, AccOrdering::Ordered, 8);
    let ranks = w.ranks();
    let olds = Mutex::new(Vec::new());
    let start = Barrier::new(64);
    std::thread::scope(|s| {
        for id in 0..64 {
            let (r, win, olds, start) = (&ranks[id / 16], &wins[id / 16], &olds, &start);
            s.spawn(move || {
                start.wait();
                let h = r.fetch_and_op(win, 0, 0, 1).unwrap();
                r.flush(win, 0).unwrap();
                olds.lock().unwrap().push(h.value().unwrap());
            });
        }
    });
    let mut olds = olds.into_inner().unwrap();
    olds.sort_unstable();
    assert_eq!(olds, (0..64).collect::<Vec<i64>>());
    assert_eq!(regions[0].load_i64(0), 64);
    free(w, wins);
}
