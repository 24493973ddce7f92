//! Remote band fetches in the style of an energy-banding Monte Carlo code:
//! every node holds a cross-section table, and each thread repeatedly fetches
//! one band of it from a random remote node with a get and a flush.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcirt::{Config, Region, WinOptions, Window, World};

use crate::common::{
    check, free_windows, median, run_threads, BenchError, BenchResult, Harness, Mode, ProgressBarrier, RowKey, Table,
};

#[derive(Debug, Clone)]
pub struct Ebms {
    pub mode: Mode,
    pub nodes: usize,
    pub threads: usize,
    /// Bytes per fetched band.
    pub band_size: usize,
    pub iters: usize,
}

fn table_byte(node: usize, offset: usize) -> u8 {
    (node * 131 + offset * 7 + offset / 251) as u8
}

impl Ebms {
    pub fn run(&self, h: &Harness) -> BenchResult<Table> {
        if self.nodes < 2 || self.threads == 0 || self.band_size == 0 || self.iters == 0 {
            return Err(BenchError::Params("need at least 2 nodes and positive threads, band size, iters".into()));
        }
        let key = RowKey {
            benchmark: "ebms",
            mode: format!("{}/{:?}", self.mode, h.cfg.rma_mode).to_lowercase(),
            threads: self.threads,
            vcis: if self.mode == Mode::Everywhere { 1 } else { h.cfg.vcis },
            msg_size: self.band_size,
            iters: self.iters,
        };
        h.repeat(&key, |_| {
            let mut lat = self.once(h)?;
            lat.sort_by(f64::total_cmp);
            let pct = |p: f64| lat[((lat.len() - 1) as f64 * p).round() as usize];
            Ok(vec![("fetch_us_p50", median(&lat)), ("fetch_us_p90", pct(0.9)), ("fetch_us_max", pct(1.0))])
        })
    }

    /// One repetition; returns every fetch latency in µs.
    pub fn once(&self, h: &Harness) -> BenchResult<Vec<f64>> {
        if self.mode == Mode::Everywhere {
            let flat = Ebms { mode: Mode::Ser, nodes: self.nodes * self.threads, threads: 1, ..self.clone() };
            let cfg = Config { vcis: 1, ..h.cfg.clone() };
            return flat.once(&Harness { cfg, ..h.clone() });
        }
        let (n, t, band) = (self.nodes, self.threads, self.band_size);
        let world = World::init(h.cfg.clone(), n, t)?;
        let ranks = world.ranks();
        let tables: Vec<_> =
            (0..n).map(|node| Region::from_bytes((0..t * band).map(|o| table_byte(node, o)).collect())).collect();
        // Handles per node; thread `i` uses `wins[node][i % len]`.
        let mut wins: Vec<Vec<Window>> = vec![Vec::new(); n];
        match self.mode {
            Mode::Ser | Mode::Par => {
                let count = if self.mode == Mode::Ser { 1 } else { t };
                for _ in 0..count {
                    for (node, r) in ranks.iter().enumerate() {
                        wins[node].push(r.win_create(&r.world_comm(), tables[node].clone(), WinOptions::default())?);
                    }
                }
            }
            Mode::Ep => {
                for (node, r) in ranks.iter().enumerate() {
                    for ep in r.create_endpoints(&r.world_comm(), t)? {
                        wins[node].push(r.win_create(&ep, tables[node].clone(), WinOptions::default())?);
                    }
                }
            }
            Mode::Everywhere => unreachable!("handled above"),
        }
        let sync = ProgressBarrier::new(n * t);
        let iters = self.iters;
        let seed = h.seed;
        let lat = run_threads(n * t, |id, start| {
            let (node, i) = (id / t, id % t);
            let rank = &ranks[node];
            let win = &wins[node][i % wins[node].len()];
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id as u64).wrapping_mul(0x9e37_79b9));
            start.wait();
            let mut out = Vec::with_capacity(iters);
            for _ in 0..iters {
                sync.wait(rank)?;
                let remote = (node + rng.gen_range(1..n)) % n;
                let target = if self.mode == Mode::Ep { remote * t + i } else { remote };
                let t0 = Instant::now();
                let g = rank.get(win, target as u32, i * band, band)?;
                rank.flush(win, target as u32)?;
                out.push(t0.elapsed().as_secs_f64() * 1e6);
                let ok =
                    g.data().is_some_and(|d| d.iter().enumerate().all(|(k, &b)| b == table_byte(remote, i * band + k)));
                check(ok, || format!("thread {i} on node {node}: band from node {remote} corrupted"))?;
            }
            sync.wait(rank)?;
            Ok(out)
        })?;
        let handles = wins
            .into_iter()
            .enumerate()
            .flat_map(|(node, ws)| ws.into_iter().map(move |w| (node, w)))
            .map(|(node, w)| (ranks[node].clone(), w))
            .collect();
        free_windows(handles)?;
        h.finish(world)?;
        Ok(lat.into_iter().flatten().collect())
    }
}
