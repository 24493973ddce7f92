//! Busy-target RMA latency.
//!
//! Each origin thread issues a window of puts to its partner and flushes,
//! while the partner thread computes for a fixed delay before entering the
//! library. With software RMA nobody serves the puts during that delay, so
//! the flush waits for it; with hardware RMA the delay is invisible.

use std::time::{Duration, Instant};

use vcirt::{Region, WinOptions, World};

use crate::common::{check, compute, median, run_threads, stamped, BenchError, BenchResult, Harness, RowKey, Table};

#[derive(Debug, Clone)]
pub struct BusyTarget {
    pub threads: usize,
    pub msg_size: usize,
    /// Puts per flush.
    pub window: usize,
    pub target_compute: Duration,
}

impl BusyTarget {
    fn key(&self, h: &Harness) -> RowKey {
        RowKey {
            benchmark: "busy_target",
            mode: format!("{:?}/compute_us={}", h.cfg.rma_mode, self.target_compute.as_micros()).to_lowercase(),
            threads: self.threads,
            vcis: h.cfg.vcis,
            msg_size: self.msg_size,
            iters: self.window,
        }
    }

    pub fn run(&self, h: &Harness) -> BenchResult<Table> {
        if self.threads == 0 || self.window == 0 || self.msg_size == 0 {
            return Err(BenchError::Params("threads, window and msg_size must be positive".into()));
        }
        h.repeat(&self.key(h), |_| Ok(vec![("flush_latency_us", self.once(h)?)]))
    }

    /// One repetition; returns the median over pairs of issue-to-flush latency in µs.
    pub fn once(&self, h: &Harness) -> BenchResult<f64> {
        let t = self.threads;
        let world = World::init(h.cfg.clone(), 2, t)?;
        let (a, b) = (world.rank(0), world.rank(1));
        let mut wins = Vec::with_capacity(t);
        for _ in 0..t {
            let ca = a.comm_dup(&a.world_comm())?;
            let cb = b.comm_dup(&b.world_comm())?;
            let len = self.window * self.msg_size;
            let wa = a.win_create(&ca, Region::new(len), WinOptions::default())?;
            let wb = b.win_create(&cb, Region::new(len), WinOptions::default())?;
            wins.push(std::sync::Mutex::new((Some((ca, wa)), Some((cb, wb)))));
        }
        let lat = run_threads(2 * t, |id, start| {
            let i = id % t;
            let origin = id < t;
            let (comm, win) = {
                let mut pair = wins[i].lock().expect("window slot");
                if origin { pair.0.take() } else { pair.1.take() }.expect("each handle taken once")
            };
            let rank = if origin { &a } else { &b };
            start.wait();
            let mut latency = None;
            if origin {
                let t0 = Instant::now();
                for k in 0..self.window {
                    rank.put(&win, 1, k * self.msg_size, &stamped(self.msg_size, i, k as u64))?;
                }
                rank.flush(&win, 1)?;
                latency = Some(t0.elapsed());
            } else {
                compute(self.target_compute);
            }
            let region = win.region().clone();
            rank.win_free(win)?;
            rank.comm_free(&comm)?;
            if !origin {
                for k in 0..self.window {
                    let got = region.read(k * self.msg_size, self.msg_size);
                    check(got == stamped(self.msg_size, i, k as u64), || format!("pair {i}: put {k} missing"))?;
                }
            }
            Ok(latency)
        })?;
        h.finish(world)?;
        let us: Vec<f64> = lat.into_iter().flatten().map(|d| d.as_secs_f64() * 1e6).collect();
        Ok(median(&us))
    }
}
