//! Block-sparse matrix multiply with a get-compute-update pattern.
//!
//! `A` and `B` are `tiles × tiles` grids of dense or zero tiles; nonzero tiles
//! live round-robin on the ranks. Workers claim work units (one tile product
//! each) from a global counter on rank 0 with fetch_and_op, get the operand
//! tiles, multiply locally and accumulate into the owner of the `C` tile
//! whenever their next unit targets a different `C` tile.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcirt::{AccOrdering, Config, Rank, Region, WinOptions, Window, World};

use crate::common::{check, free_windows, median, run_threads, BenchError, BenchResult, Harness, Mode, RowKey, Table};

#[derive(Debug, Clone)]
pub struct Bspmm {
    pub mode: Mode,
    pub nodes: usize,
    pub threads: usize,
    pub tile_dim: usize,
    /// Tiles per matrix side.
    pub tiles: usize,
    pub density: f64,
    pub acc_ordering: AccOrdering,
    /// VCIs an unordered accumulate window spreads over; defaults to the
    /// thread count.
    pub acc_stripes: Option<usize>,
}

impl Default for Bspmm {
    fn default() -> Self {
        Self {
            mode: Mode::Par,
            nodes: 2,
            threads: 4,
            tile_dim: 16,
            tiles: 8,
            density: 0.5,
            acc_ordering: AccOrdering::Ordered,
            acc_stripes: None,
        }
    }
}

/// Per-run phase totals of one worker.
#[derive(Debug, Default, Clone)]
pub struct Phases {
    pub fetch_us: f64,
    pub fetches: usize,
    pub get_us: f64,
    pub gets: usize,
    /// Accumulate plus the flush that completes it.
    pub acc_us: f64,
    pub accs: usize,
    /// Time inside each accumulate call alone.
    pub acc_init_us: Vec<f64>,
}

/// Tile contents and placement, identical on every rank.
struct Problem {
    nt: usize,
    d: usize,
    nodes: usize,
    a: Vec<Option<Vec<i64>>>,
    b: Vec<Option<Vec<i64>>>,
    /// `(i, j, k)`: `C[i][j] += A[i][k] * B[k][j]`, grouped by `(i, j)`.
    units: Vec<(usize, usize, usize)>,
}

const CELL: usize = 8;

impl Problem {
    fn generate(nt: usize, d: usize, nodes: usize, density: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tile =
            |rng: &mut ChaCha8Rng| rng.gen_bool(density).then(|| (0..d * d).map(|_| rng.gen_range(-3..=3)).collect());
        let a: Vec<_> = (0..nt * nt).map(|_| tile(&mut rng)).collect();
        let b: Vec<_> = (0..nt * nt).map(|_| tile(&mut rng)).collect();
        let mut units = Vec::new();
        for i in 0..nt {
            for j in 0..nt {
                for k in 0..nt {
                    if a[i * nt + k].is_some() && b[k * nt + j].is_some() {
                        units.push((i, j, k));
                    }
                }
            }
        }
        Problem { nt, d, nodes, a, b, units }
    }

    fn tile_bytes(&self) -> usize {
        self.d * self.d * CELL
    }

    /// Owner and byte offset of an operand tile; `B` tiles follow `A` tiles.
    fn operand(&self, which_b: bool, idx: usize) -> (usize, usize) {
        let global = idx + usize::from(which_b) * self.nt * self.nt;
        (global % self.nodes, (global / self.nodes) * self.tile_bytes())
    }

    fn operand_region(&self, node: usize) -> Vec<u8> {
        let slots = (2 * self.nt * self.nt).div_ceil(self.nodes);
        let mut out = vec![0; slots * self.tile_bytes()];
        for (which_b, m) in [(false, &self.a), (true, &self.b)] {
            for (idx, t) in m.iter().enumerate() {
                let (owner, off) = self.operand(which_b, idx);
                if let (true, Some(t)) = (owner == node, t) {
                    for (k, v) in t.iter().enumerate() {
                        out[off + k * CELL..off + (k + 1) * CELL].copy_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    /// Owner and byte offset of a `C` tile; the first cell holds the work counter.
    fn c_tile(&self, i: usize, j: usize) -> (usize, usize) {
        let g = i * self.nt + j;
        (g % self.nodes, CELL + (g / self.nodes) * self.tile_bytes())
    }

    fn c_region_len(&self) -> usize {
        CELL + (self.nt * self.nt).div_ceil(self.nodes) * self.tile_bytes()
    }

    fn oracle(&self) -> Vec<Vec<i64>> {
        let (nt, d) = (self.nt, self.d);
        let mut c = vec![vec![0i64; d * d]; nt * nt];
        for &(i, j, k) in &self.units {
            let (a, b) = (self.a[i * nt + k].as_ref().unwrap(), self.b[k * nt + j].as_ref().unwrap());
            multiply_add(&mut c[i * nt + j], a, b, d);
        }
        c
    }
}

fn multiply_add(c: &mut [i64], a: &[i64], b: &[i64], d: usize) {
    for r in 0..d {
        for k in 0..d {
            let x = a[r * d + k];
            if x != 0 {
                for col in 0..d {
                    c[r * d + col] += x * b[k * d + col];
                }
            }
        }
    }
}

fn to_i64s(bytes: &[u8]) -> Vec<i64> {
    bytes.chunks_exact(CELL).map(|c| i64::from_le_bytes(c.try_into().expect("cell"))).collect()
}

impl Bspmm {
    fn key(&self, h: &Harness) -> RowKey {
        RowKey {
            benchmark: "bspmm",
            mode: format!("{}/acc={:?}", self.mode, self.acc_ordering).to_lowercase(),
            threads: self.threads,
            vcis: if self.mode == Mode::Everywhere { 1 } else { h.cfg.vcis },
            msg_size: self.tile_dim * self.tile_dim * CELL,
            iters: self.tiles,
        }
    }

    pub fn run(&self, h: &Harness) -> BenchResult<Table> {
        h.repeat(&self.key(h), |rep| {
            let p = self.once(h, h.seed.wrapping_add(rep as u64))?;
            let mean = |us: f64, n: usize| if n == 0 { 0.0 } else { us / n as f64 };
            let sum = |f: fn(&Phases) -> (f64, usize)| p.iter().map(f).fold((0.0, 0), |(a, b), (x, y)| (a + x, b + y));
            let (fu, fnum) = sum(|q| (q.fetch_us, q.fetches));
            let (gu, gnum) = sum(|q| (q.get_us, q.gets));
            let (au, anum) = sum(|q| (q.acc_us, q.accs));
            let init: Vec<f64> = p.iter().flat_map(|q| q.acc_init_us.iter().copied()).collect();
            let init = if init.is_empty() { 0.0 } else { median(&init) };
            Ok(vec![
                ("fetch_op_us", mean(fu, fnum)),
                ("get_us", mean(gu, gnum)),
                ("acc_us", mean(au, anum)),
                ("acc_init_us", init),
            ])
        })
    }

    /// One run; checks `C` against the sequential product and returns each
    /// worker's phase totals.
    pub fn once(&self, h: &Harness, seed: u64) -> BenchResult<Vec<Phases>> {
        if self.nodes == 0 || self.threads == 0 || self.tile_dim == 0 || self.tiles == 0 {
            return Err(BenchError::Params("nodes, threads, tile_dim and tiles must be positive".into()));
        }
        if self.mode == Mode::Everywhere {
            let flat = Bspmm { mode: Mode::Ser, nodes: self.nodes * self.threads, threads: 1, ..self.clone() };
            let cfg = Config { vcis: 1, ..h.cfg.clone() };
            return flat.once(&Harness { cfg, ..h.clone() }, seed);
        }
        let (n, t) = (self.nodes, self.threads);
        let prob = Problem::generate(self.tiles, self.tile_dim, n, self.density, seed);
        let mut cfg = h.cfg.clone();
        if self.acc_ordering == AccOrdering::None {
            cfg.unordered_window_vcis = self.acc_stripes.unwrap_or(t);
        }
        let world = World::init(cfg, n, t)?;
        let ranks = world.ranks();
        let operands: Vec<_> = (0..n).map(|r| Region::from_bytes(prob.operand_region(r))).collect();
        let cs: Vec<_> = (0..n).map(|_| Region::new(prob.c_region_len())).collect();
        let acc_opts = WinOptions::ordering(self.acc_ordering);
        // [node] -> (get windows, accumulate windows); thread `i` uses entry `i % len`.
        let mut wins: Vec<(Vec<Window>, Vec<Window>)> = vec![(Vec::new(), Vec::new()); n];
        match self.mode {
            Mode::Ser | Mode::Par => {
                let gets = if self.mode == Mode::Par { t } else { 1 };
                for _ in 0..gets {
                    for (r, rank) in ranks.iter().enumerate() {
                        wins[r].0.push(rank.win_create(
                            &rank.world_comm(),
                            operands[r].clone(),
                            WinOptions::default(),
                        )?);
                    }
                }
                for (r, rank) in ranks.iter().enumerate() {
                    wins[r].1.push(rank.win_create(&rank.world_comm(), cs[r].clone(), acc_opts)?);
                }
            }
            Mode::Ep => {
                for (r, rank) in ranks.iter().enumerate() {
                    for ep in rank.create_endpoints(&rank.world_comm(), t)? {
                        wins[r].0.push(rank.win_create(&ep, operands[r].clone(), WinOptions::default())?);
                        wins[r].1.push(rank.win_create(&ep, cs[r].clone(), acc_opts)?);
                    }
                }
            }
            Mode::Everywhere => unreachable!("handled above"),
        }
        let endpoints = self.mode == Mode::Ep;
        let phases = run_threads(n * t, |id, start| {
            let (node, i) = (id / t, id % t);
            let (gw, aw) = (&wins[node].0, &wins[node].1);
            let ctx = Worker {
                rank: &ranks[node],
                get_win: &gw[i % gw.len()],
                acc_win: &aw[i % aw.len()],
                target: |owner: usize| (if endpoints { owner * t + i } else { owner }) as u32,
                prob: &prob,
            };
            start.wait();
            ctx.work()
        })?;
        let handles = wins
            .into_iter()
            .enumerate()
            .flat_map(|(r, (g, a))| g.into_iter().chain(a).map(move |w| (r, w)))
            .map(|(r, w)| (ranks[r].clone(), w))
            .collect();
        free_windows(handles)?;
        h.finish(world)?;
        let expect = prob.oracle();
        for i in 0..prob.nt {
            for j in 0..prob.nt {
                let (owner, off) = prob.c_tile(i, j);
                let got = to_i64s(&cs[owner].read(off, prob.tile_bytes()));
                check(got == expect[i * prob.nt + j], || {
                    format!("C tile ({i}, {j}) differs from the sequential product")
                })?;
            }
        }
        let claimed = cs[0].load_i64(0) as usize;
        check(claimed == prob.units.len() + n * t, || format!("work counter ended at {claimed}"))?;
        Ok(phases)
    }
}

struct Worker<'a, F> {
    rank: &'a Rank,
    get_win: &'a Window,
    acc_win: &'a Window,
    target: F,
    prob: &'a Problem,
}

impl<F: Fn(usize) -> u32> Worker<'_, F> {
    fn work(&self) -> BenchResult<Phases> {
        let (rank, prob) = (self.rank, self.prob);
        let (nt, d) = (prob.nt, prob.d);
        let mut ph = Phases::default();
        let mut current: Option<(usize, usize)> = None;
        let mut local = vec![0i64; d * d];
        loop {
            let t0 = Instant::now();
            let counter = (self.target)(0);
            let claim = rank.fetch_and_op(self.acc_win, counter, 0, 1)?;
            rank.flush(self.acc_win, counter)?;
            ph.fetch_us += t0.elapsed().as_secs_f64() * 1e6;
            ph.fetches += 1;
            let unit = claim.value().and_then(|w| prob.units.get(w as usize)).copied();
            if let Some(ij) = current.filter(|&c| unit.map(|u| (u.0, u.1)) != Some(c)) {
                self.update(ij, &mut local, &mut ph)?;
            }
            let Some((i, j, k)) = unit else { break };
            current = Some((i, j));
            let t0 = Instant::now();
            let (oa, offa) = prob.operand(false, i * nt + k);
            let (ob, offb) = prob.operand(true, k * nt + j);
            let ga = rank.get(self.get_win, (self.target)(oa), offa, prob.tile_bytes())?;
            let gb = rank.get(self.get_win, (self.target)(ob), offb, prob.tile_bytes())?;
            rank.flush(self.get_win, (self.target)(oa))?;
            if ob != oa {
                rank.flush(self.get_win, (self.target)(ob))?;
            }
            ph.get_us += t0.elapsed().as_secs_f64() * 1e6;
            ph.gets += 2;
            let (a, b) = (ga.data().expect("flushed get"), gb.data().expect("flushed get"));
            multiply_add(&mut local, &to_i64s(a), &to_i64s(b), d);
        }
        Ok(ph)
    }

    /// Adds the locally accumulated tile into its owner and waits for it.
    fn update(&self, (i, j): (usize, usize), local: &mut [i64], ph: &mut Phases) -> BenchResult<()> {
        let (owner, off) = self.prob.c_tile(i, j);
        let target = (self.target)(owner);
        let t0 = Instant::now();
        self.rank.accumulate(self.acc_win, target, off, local)?;
        ph.acc_init_us.push(t0.elapsed().as_secs_f64() * 1e6);
        self.rank.flush(self.acc_win, target)?;
        ph.acc_us += t0.elapsed().as_secs_f64() * 1e6;
        ph.accs += 1;
        local.fill(0);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operand_slots_do_not_overlap() {
        let p = Problem::generate(4, 2, 3, 1.0, 1);
        let mut seen = std::collections::HashSet::new();
        for which_b in [false, true] {
            for idx in 0..16 {
                assert!(seen.insert(p.operand(which_b, idx)));
            }
        }
        let len = p.operand_region(0).len();
        assert!(seen.iter().all(|&(_, off)| off + p.tile_bytes() <= len));
    }

    #[test]
    fn units_group_by_output_tile() {
        let p = Problem::generate(5, 2, 2, 0.6, 7);
        let mut seen = Vec::new();
        for &(i, j, _) in &p.units {
            if seen.last() != Some(&(i, j)) {
                assert!(!seen.contains(&(i, j)));
                seen.push((i, j));
            }
        }
    }
}
