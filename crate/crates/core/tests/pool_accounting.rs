//! VCI pool bookkeeping under random create/free sequences on one rank.

use proptest::prelude::*;
use vcirt::{Comm, Config, Region, WinOptions, Window, World};

#[derive(Debug, Clone)]
enum Op {
    Dup,
    Win,
    FreeComm(usize),
    FreeWin(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        Just(Op::Dup),
        Just(Op::Win),
        any::<usize>().prop_map(Op::FreeComm),
        any::<usize>().prop_map(Op::FreeWin)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Live communicators and windows minus pool assignments equals the
    /// number of objects multiplexed onto the fallback VCI.
    #[test]
    fn fallback_sharers_account_for_pool_shortfall(vcis in 1usize..6, ops in prop::collection::vec(op(), 0..60)) {
        let w = World::init(Config { vcis, injection_cost: 0, ..Config::default() }, 1, 1).unwrap();
        let r = w.rank(0);
        let mut comms: Vec<Comm> = Vec::new();
        let mut wins: Vec<Window> = Vec::new();
        for op in ops {
            match op {
                Op::Dup => comms.push(r.comm_dup(&r.world_comm()).unwrap()),
                Op::Win => wins.push(r.win_create(&r.world_comm(), Region::new(8), WinOptions::default()).unwrap()),
                Op::FreeComm(i) if !comms.is_empty() => {
                    let c = comms.swap_remove(i % comms.len());
                    r.comm_free(&c).unwrap();
                }
                Op::FreeWin(i) if !wins.is_empty() => {
                    let win = wins.swap_remove(i % wins.len());
                    r.win_free(win).unwrap();
                }
                _ => {}
            }
            let pool = r.pool_stats();
            prop_assert!(pool.conserved(), "{pool:?}");
            let live = comms.len() + wins.len();
            prop_assert_eq!(live - pool.assigned, pool.fallback_sharers as usize);
        }
        for c in comms {
            r.comm_free(&c).unwrap();
        }
        for win in wins {
            r.win_free(win).unwrap();
        }
        let pool = r.pool_stats();
        prop_assert_eq!((pool.assigned, pool.fallback_sharers), (0, 0));
        prop_assert!(w.finalize().unwrap().conserved());
    }
}
