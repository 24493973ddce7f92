//! The two cross-VCI dependency programs: a synchronous send whose partner
//! thread is blocked on a different communicator, and the analogous pair of
//! gets over two windows under software RMA. Both complete only if waiting
//! on one VCI occasionally progresses the others.

use std::sync::{Barrier, Mutex};
use std::time::{Duration, Instant};

use vcirt::{Config, Error, Rank, Region, RmaMode, WinOptions, Window, World};

use crate::common::{check, free_windows, BenchError, BenchResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Scenario {
    Pt2pt,
    Rma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Completed,
    Stuck,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub verdict: Verdict,
    /// Until completion, or until the first watchdog report.
    pub elapsed: Duration,
    pub detail: Option<String>,
}

/// Payload large enough to take the rendezvous path.
const LARGE: usize = 64 * 1024;

/// Runs one scenario. `cfg` supplies the progress settings; the scenario
/// forces what it needs (software RMA, a watchdog, rendezvous-sized data).
pub fn run(which: Scenario, cfg: &Config) -> BenchResult<Outcome> {
    let mut cfg = cfg.clone();
    if cfg.watchdog.is_none() {
        cfg.watchdog = Some(Duration::from_secs(1));
    }
    cfg.vcis = cfg.vcis.max(4);
    cfg.eager_threshold = cfg.eager_threshold.min(LARGE / 2);
    if which == Scenario::Rma {
        cfg.rma_mode = RmaMode::Software;
    }
    let world = World::init(cfg, 2, 2)?;
    let start = Instant::now();
    let first_stuck: Mutex<Option<(Duration, String)>> = Mutex::new(None);
    let note = |r: Result<(), Error>| -> BenchResult<()> {
        match r {
            Err(Error::Stuck(s)) => {
                let mut g = first_stuck.lock().expect("stuck slot");
                if g.is_none() {
                    *g = Some((start.elapsed(), s.to_string()));
                }
                Ok(())
            }
            other => Ok(other?),
        }
    };
    let windows = match which {
        Scenario::Pt2pt => {
            pt2pt(&world, &note)?;
            Vec::new()
        }
        Scenario::Rma => rma(&world, &note)?,
    };
    let elapsed = start.elapsed();
    let stuck = first_stuck.into_inner().expect("stuck slot");
    if stuck.is_none() {
        free_windows(windows)?;
    }
    Ok(match stuck {
        // A stuck run leaves requests behind; the world is dropped unfinalized.
        Some((at, detail)) => Outcome { verdict: Verdict::Stuck, elapsed: at, detail: Some(detail) },
        None => {
            let report = world.finalize()?;
            check(report.conserved(), || "teardown not conserved".into())?;
            Outcome { verdict: Verdict::Completed, elapsed, detail: None }
        }
    })
}

type Note<'a> = dyn Fn(Result<(), Error>) -> BenchResult<()> + Sync + 'a;

/// Rank 0 ssends on comm1 then comm2. On rank 1, thread 0 posts on comm1
/// and waits only after thread 1 has finished waiting on comm2.
fn pt2pt(world: &World, note: &Note<'_>) -> BenchResult<()> {
    let (r0, r1) = (world.rank(0), world.rank(1));
    let c1 = [r0.comm_dup(&r0.world_comm())?, r1.comm_dup(&r1.world_comm())?];
    let c2 = [r0.comm_dup(&r0.world_comm())?, r1.comm_dup(&r1.world_comm())?];
    let barrier = Barrier::new(2);
    let payload = vec![7u8; LARGE];
    std::thread::scope(|s| {
        let sender = s.spawn(|| -> BenchResult<()> {
            note(r0.ssend(&c1[0], 1, 0, payload.clone()))?;
            note(r0.ssend(&c2[0], 1, 0, payload.clone()))
        });
        let t0 = s.spawn(|| -> BenchResult<()> {
            let req1 = r1.irecv(&c1[1], 0, 0, LARGE)?;
            barrier.wait();
            barrier.wait();
            note(r1.wait(req1).map(|c| drop(c.data)))
        });
        let t1 = s.spawn(|| -> BenchResult<()> {
            let req2 = r1.irecv(&c2[1], 0, 0, LARGE)?;
            barrier.wait();
            let r = note(r1.wait(req2).map(|c| drop(c.data)));
            barrier.wait();
            r
        });
        for h in [sender, t0, t1] {
            h.join().expect("scenario thread panicked")?;
        }
        Ok::<_, BenchError>(())
    })?;
    Ok(())
}

/// Rank 0 gets from both windows and flushes them in order. On rank 1,
/// thread 1 flushes win2 between the barriers and thread 0 flushes win1
/// only afterwards; under software RMA nobody else serves win1 meanwhile.
fn rma(world: &World, note: &Note<'_>) -> BenchResult<Vec<(Rank, Window)>> {
    let (r0, r1) = (world.rank(0), world.rank(1));
    let mut wins = Vec::new();
    for _ in 0..2 {
        let a = r0.win_create(&r0.world_comm(), Region::from_bytes(vec![1; LARGE]), WinOptions::default())?;
        let b = r1.win_create(&r1.world_comm(), Region::from_bytes(vec![2; LARGE]), WinOptions::default())?;
        wins.push((a, b));
    }
    let barrier = Barrier::new(2);
    std::thread::scope(|s| {
        let origin = s.spawn(|| -> BenchResult<()> {
            let g1 = r0.get(&wins[0].0, 1, 0, LARGE)?;
            let g2 = r0.get(&wins[1].0, 1, 0, LARGE)?;
            note(r0.flush(&wins[0].0, 1))?;
            note(r0.flush(&wins[1].0, 1))?;
            for g in [g1, g2].iter().filter_map(|g| g.data()) {
                check(g.iter().all(|&b| b == 2), || "get returned wrong data".into())?;
            }
            Ok(())
        });
        let t0 = s.spawn(|| -> BenchResult<()> {
            let _g = r1.get(&wins[0].1, 0, 0, LARGE)?;
            barrier.wait();
            barrier.wait();
            note(r1.flush(&wins[0].1, 0))
        });
        let t1 = s.spawn(|| -> BenchResult<()> {
            let _g = r1.get(&wins[1].1, 0, 0, LARGE)?;
            barrier.wait();
            let r = note(r1.flush(&wins[1].1, 0));
            barrier.wait();
            r
        });
        for h in [origin, t0, t1] {
            h.join().expect("scenario thread panicked")?;
        }
        Ok::<_, BenchError>(())
    })?;
    Ok(wins.into_iter().flat_map(|(a, b)| [(r0.clone(), a), (r1.clone(), b)]).collect())
}
