//! Programs whose completion needs one VCI's waiter to progress another VCI.

use std::sync::Barrier;
use std::time::Duration;

use vcirt::{Config, Error, Region, RmaMode, WinOptions, World};

const LARGE: usize = 64 * 1024;

fn config(hybrid: Option<u32>, rma_mode: RmaMode) -> Config {
    Config {
        vcis: 8,
        injection_cost: 0,
        eager_threshold: 1024,
        hybrid_threshold: hybrid,
        rma_mode,
        watchdog: Some(Duration::from_millis(500)),
        ..Config::default()
    }
}

/// Rank 0 ssends on comm1 then comm2; rank 1's thread 0 posts on comm1 but
/// waits only after thread 1's wait on comm2 has returned.
fn ssend_pair(cfg: Config) -> Vec<Result<(), Error>> {
    let w = World::init(cfg, 2, 2).unwrap();
    let (r0, r1) = (w.rank(0), w.rank(1));
    let c1 = [r0.comm_dup(&r0.world_comm()).unwrap(), r1.comm_dup(&r1.world_comm()).unwrap()];
    let c2 = [r0.comm_dup(&r0.world_comm()).unwrap(), r1.comm_dup(&r1.world_comm()).unwrap()];
    let gate = Barrier::new(2);
    std::thread::scope(|s| {
        let sender =
            s.spawn(|| r0.ssend(&c1[0], 1, 0, vec![1; LARGE]).and_then(|_| r0.ssend(&c2[0], 1, 0, vec![2; LARGE])));
        let t0 = s.spawn(|| {
            let req = r1.irecv(&c1[1], 0, 0, LARGE).unwrap();
            gate.wait();
            gate.wait();
            r1.wait(req).map(drop)
        });
        let t1 = s.spawn(|| {
            let req = r1.irecv(&c2[1], 0, 0, LARGE).unwrap();
            gate.wait();
            let r = r1.wait(req).map(drop);
            gate.wait();
            r
        });
        [sender, t0, t1].map(|h| h.join().unwrap()).into()
    })
}

#[test]
fn hybrid_progress_completes_the_ssend_program() {
    for r in ssend_pair(config(Some(100), RmaMode::Hardware)) {
        r.unwrap();
    }
}

#[test]
fn pure_per_vci_progress_leaves_the_ssend_program_stuck() {
    let results = ssend_pair(config(None, RmaMode::Hardware));
    assert!(results.iter().any(|r| matches!(r, Err(Error::Stuck(_)))), "{results:?}");
}

#[test]
fn hybrid_progress_completes_the_software_rma_program() {
    let w = World::init(config(Some(100), RmaMode::Software), 2, 2).unwrap();
    let (r0, r1) = (w.rank(0), w.rank(1));
    let mut wins = Vec::new();
    for _ in 0..2 {
        let a = r0.win_create(&r0.world_comm(), Region::from_bytes(vec![1; LARGE]), WinOptions::default()).unwrap();
        let b = r1.win_create(&r1.world_comm(), Region::from_bytes(vec![2; LARGE]), WinOptions::default()).unwrap();
        wins.push((a, b));
    }
    let gate = Barrier::new(2);
    std::thread::scope(|s| {
        s.spawn(|| {
            let g1 = r0.get(&wins[0].0, 1, 0, LARGE).unwrap();
            let g2 = r0.get(&wins[1].0, 1, 0, LARGE).unwrap();
            r0.flush(&wins[0].0, 1).unwrap();
            r0.flush(&wins[1].0, 1).unwrap();
            assert!(g1.data().unwrap().iter().chain(g2.data().unwrap()).all(|&b| b == 2));
        });
        s.spawn(|| {
            let _g = r1.get(&wins[0].1, 0, 0, LARGE).unwrap();
            gate.wait();
            gate.wait();
            r1.flush(&wins[0].1, 0).unwrap();
        });
        s.spawn(|| {
            let _g = r1.get(&wins[1].1, 0, 0, LARGE).unwrap();
            gate.wait();
            r1.flush(&wins[1].1, 0).unwrap();
            gate.wait();
        });
    });
    std::thread::scope(|s| {
        for (a, b) in wins {
            let (r0, r1) = (&r0, &r1);
            s.spawn(move || r0.win_free(a).unwrap());
            s.spawn(move || r1.win_free(b).unwrap());
        }
    });
    assert!(w.finalize().unwrap().conserved());
}
