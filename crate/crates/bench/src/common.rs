//! Shared harness plumbing: modes, CSV rows, repetition, seeding.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;
use vcirt::{Config, Report};

/// How application threads are mapped onto communication resources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, clap::ValueEnum)]
pub enum Mode {
    /// Every thread shares one communicator (or window).
    Ser,
    /// One communicator (or window) per thread pair.
    Par,
    /// User-visible endpoints, one per thread.
    Ep,
    /// One single-threaded rank per thread, one VCI per rank.
    Everywhere,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::Ser => "ser_comm",
            Mode::Par => "par_comm",
            Mode::Ep => "endpoints",
            Mode::Everywhere => "everywhere",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Mode {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, BenchError> {
        match s {
            "ser" | "ser_comm" => Ok(Mode::Ser),
            "par" | "par_comm" => Ok(Mode::Par),
            "ep" | "endpoints" => Ok(Mode::Ep),
            "everywhere" => Ok(Mode::Everywhere),
            _ => Err(BenchError::Params(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Runtime(#[from] vcirt::Error),
    #[error("data check failed: {0}")]
    Check(String),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type BenchResult<T> = Result<T, BenchError>;

pub(crate) fn check(ok: bool, what: impl FnOnce() -> String) -> BenchResult<()> {
    if ok {
        Ok(())
    } else {
        Err(BenchError::Check(what()))
    }
}

/// One CSV record.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Row {
    pub benchmark: String,
    pub mode: String,
    pub threads: usize,
    pub vcis: usize,
    pub msg_size: usize,
    pub iters: usize,
    pub metric: String,
    pub value: f64,
    pub run_id: String,
}

/// The identifying columns shared by every row of one benchmark invocation.
#[derive(Debug, Clone)]
pub struct RowKey {
    pub benchmark: &'static str,
    pub mode: String,
    pub threads: usize,
    pub vcis: usize,
    pub msg_size: usize,
    pub iters: usize,
}

impl RowKey {
    pub fn row(&self, metric: &str, value: f64, run_id: impl Into<String>) -> Row {
        Row {
            benchmark: self.benchmark.to_string(),
            mode: self.mode.clone(),
            threads: self.threads,
            vcis: self.vcis,
            msg_size: self.msg_size,
            iters: self.iters,
            metric: metric.to_string(),
            value,
            run_id: run_id.into(),
        }
    }
}

/// Rows produced by one benchmark invocation.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub rows: Vec<Row>,
}

impl Table {
    /// Values of `metric` from individual repetitions, in run order.
    pub fn samples(&self, metric: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.metric == metric && r.run_id != "median").map(|r| r.value).collect()
    }

    /// The reported median of `metric`.
    pub fn median(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric && r.run_id == "median").map(|r| r.value)
    }

    pub fn extend(&mut self, other: Table) {
        self.rows.extend(other.rows);
    }

    pub fn write_csv<W: Write>(&self, out: W) -> BenchResult<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // Ties share the average of their 1-based positions.
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of tie-averaged ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Runtime configuration and repetition policy shared by all benchmarks.
#[derive(Debug, Clone)]
pub struct Harness {
    pub cfg: Config,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Print the merged lock counters of every measured run to stderr.
    pub dump_lock_stats: bool,
}

impl Default for Harness {
    fn default() -> Self {
        Self { cfg: Config::default(), reps: 5, warmup: 1, seed: seed_from_env(), dump_lock_stats: false }
    }
}

pub const DEFAULT_SEED: u64 = 0x5eed_0001;

/// `BENCH_SEED` if set and numeric, else a fixed default.
pub fn seed_from_env() -> u64 {
    std::env::var("BENCH_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(DEFAULT_SEED)
}

impl Harness {
    /// Runs `warmup` discarded repetitions followed by `reps` measured ones.
    /// Each run returns named metric values; a median row is appended per metric.
    pub fn repeat(
        &self,
        key: &RowKey,
        mut run: impl FnMut(usize) -> BenchResult<Vec<(&'static str, f64)>>,
    ) -> BenchResult<Table> {
        for w in 0..self.warmup {
            run(usize::MAX - w)?;
        }
        let mut table = Table::default();
        let mut names: Vec<&'static str> = Vec::new();
        for rep in 0..self.reps.max(1) {
            for (name, v) in run(rep)? {
                if !names.contains(&name) {
                    names.push(name);
                }
                table.rows.push(key.row(name, v, rep.to_string()));
            }
        }
        for name in names {
            let m = median(&table.samples(name));
            table.rows.push(key.row(name, m, "median"));
        }
        Ok(table)
    }

    /// Finalizes a world, requiring a clean, conserved teardown.
    pub(crate) fn finish(&self, world: vcirt::World) -> BenchResult<Report> {
        let report = world.finalize()?;
        check(report.conserved(), || format!("teardown not conserved:\n{report}"))?;
        if self.dump_lock_stats {
            eprintln!("{}", report.stats);
        }
        Ok(report)
    }
}

/// Scoped threads that all start together; returns per-thread results in order.
pub(crate) fn run_threads<T: Send>(
    n: usize,
    body: impl Fn(usize, &std::sync::Barrier) -> BenchResult<T> + Sync,
) -> BenchResult<Vec<T>> {
    let start = Arc::new(std::sync::Barrier::new(n));
    thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .map(|i| {
                let start = start.clone();
                let body = &body;
                s.spawn(move || body(i, &start))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("benchmark thread panicked")).collect()
    })
}

/// Frees window handles concurrently; `win_free` is collective, so each
/// handle needs its own thread.
pub(crate) fn free_windows(handles: Vec<(vcirt::Rank, vcirt::Window)>) -> BenchResult<()> {
    thread::scope(|s| {
        let joins: Vec<_> = handles.into_iter().map(|(r, w)| s.spawn(move || r.win_free(w))).collect();
        joins.into_iter().try_for_each(|j| j.join().expect("win_free thread panicked"))
    })?;
    Ok(())
}

/// A thread barrier whose waiters keep progressing the runtime, for phases
/// where a peer may still need this rank to serve its requests.
pub(crate) struct ProgressBarrier {
    count: AtomicUsize,
    generation: AtomicUsize,
    n: usize,
}

impl ProgressBarrier {
    pub(crate) fn new(n: usize) -> Self {
        Self { count: AtomicUsize::new(0), generation: AtomicUsize::new(0), n }
    }

    pub(crate) fn wait(&self, rank: &vcirt::Rank) -> BenchResult<()> {
        let gen = self.generation.load(Ordering::Acquire);
        if self.count.fetch_add(1, Ordering::AcqRel) + 1 == self.n {
            self.count.store(0, Ordering::Relaxed);
            self.generation.fetch_add(1, Ordering::Release);
            return Ok(());
        }
        while self.generation.load(Ordering::Acquire) == gen {
            if rank.progress()? == 0 {
                thread::sleep(Duration::from_micros(20));
            }
        }
        Ok(())
    }
}

/// Stand-in for application compute: the thread leaves the CPU for `d`.
pub(crate) fn compute(d: Duration) {
    if !d.is_zero() {
        thread::sleep(d);
    }
}

/// Fills a message payload that identifies its flow and sequence number.
/// Messages per second over the union of per-thread `(start, end)` spans.
pub(crate) fn span_rate(spans: &[(Instant, Instant)], messages: usize) -> f64 {
    let start = spans.iter().map(|s| s.0).min().expect("no threads");
    let end = spans.iter().map(|s| s.1).max().expect("no threads");
    messages as f64 / end.duration_since(start).as_secs_f64()
}

pub(crate) fn stamp(buf: &mut [u8], flow: usize, seq: u64) {
    let tag = seq.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ flow as u64;
    for (i, b) in buf.iter_mut().enumerate() {
        *b = (tag >> ((i % 8) * 8)) as u8 ^ i as u8;
    }
}

pub(crate) fn stamped(len: usize, flow: usize, seq: u64) -> Vec<u8> {
    let mut v = vec![0; len];
    stamp(&mut v, flow, seq);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn spearman_separated_groups() {
        // Three delay levels, five runs each, latencies perfectly separated.
        let x: Vec<f64> = [0.0, 2.0, 5.0].iter().flat_map(|&d| std::iter::repeat_n(d, 5)).collect();
        let y: Vec<f64> = (0..15).map(|i| i as f64).collect();
        let rho = spearman(&x, &y);
        assert!((rho - 0.9449).abs() < 1e-3, "{rho}");
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
    }

    #[test]
    fn stamps_differ_by_flow_and_seq() {
        let a = stamped(16, 0, 1);
        assert_ne!(a, stamped(16, 1, 1));
        assert_ne!(a, stamped(16, 0, 2));
        assert_eq!(a, stamped(16, 0, 1));
    }

    #[test]
    fn repeat_appends_medians() {
        let h = Harness { reps: 3, warmup: 1, ..Harness::default() };
        let key = RowKey { benchmark: "t", mode: "m".into(), threads: 1, vcis: 1, msg_size: 0, iters: 1 };
        let mut calls = 0;
        let t = h
            .repeat(&key, |rep| {
                calls += 1;
                Ok(vec![("x", rep as f64)])
            })
            .unwrap();
        assert_eq!(calls, 4);
        assert_eq!(t.samples("x"), vec![0.0, 1.0, 2.0]);
        assert_eq!(t.median("x"), Some(1.0));
    }
}
