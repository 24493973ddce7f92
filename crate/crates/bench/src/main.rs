use std::fs::File;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use vcirt::{AccOrdering, Config, CsMode, RmaMode};
use vcirt_bench::bspmm::Bspmm;
use vcirt_bench::busy::BusyTarget;
use vcirt_bench::common::{BenchError, BenchResult, Harness, Mode, RowKey, Table};
use vcirt_bench::conformance;
use vcirt_bench::deadlock::{self, Scenario, Verdict};
use vcirt_bench::ebms::Ebms;
use vcirt_bench::fuzz::{fuzz_secs_from_env, Fuzz};
use vcirt_bench::msgrate::{MsgRate, Op};
use vcirt_bench::senders::SendersReceiver;
use vcirt_bench::stencil::Stencil;

#[derive(Parser)]
#[command(name = "bench", about = "Microbenchmarks and application patterns for the vcirt runtime")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    #[arg(long, global = true, value_enum, default_value_t = Mode::Par)]
    mode: Mode,
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// VCIs per rank, including the fallback VCI.
    #[arg(long, global = true)]
    vcis: Option<usize>,
    /// Critical-section mode: global, fg or fgcache.
    #[arg(long, global = true)]
    cs: Option<CsMode>,
    #[arg(long, global = true, default_value_t = 8)]
    msg_size: usize,
    #[arg(long, global = true, default_value_t = 2048)]
    iters: usize,
    /// RMA execution: hw or sw.
    #[arg(long, global = true)]
    rma: Option<RmaMode>,
    /// Write rows here instead of stdout.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    #[arg(long, global = true)]
    dump_lock_stats: bool,
    #[arg(long, global = true, default_value_t = 5)]
    reps: usize,
    #[arg(long, global = true, default_value_t = 1)]
    warmup: usize,
    /// Outstanding operations before each waitall or flush.
    #[arg(long, global = true, default_value_t = 64)]
    window: usize,
    /// Runtime config file (`key = value` lines); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra runtime settings, `key=value`, applied last.
    #[arg(long = "set", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pairwise message rate.
    Msgrate {
        #[arg(long, value_enum, default_value_t = Op::Isend)]
        op: Op,
        /// Spread the thread pairs over this many communicators.
        #[arg(long)]
        distinct_comms: Option<usize>,
        /// Busy-target run: the target computes this long before entering
        /// the library, and flush latency of one window of puts is reported.
        #[arg(long)]
        target_compute_us: Option<u64>,
    },
    /// Dedicated sender threads and one polling receiver per rank; `--mode`
    /// par gives each sender a communicator, ep gives it an endpoint.
    Senders {
        /// Sender threads per rank.
        #[arg(long, default_value_t = 2)]
        senders: usize,
    },
    /// Randomized multi-threaded workload checking request, VCI pool and
    /// message conservation; fails on any violation or fault.
    Fuzz {
        /// Run time in seconds; defaults to FUZZ_SECS or 60.
        #[arg(long)]
        secs: Option<u64>,
    },
    /// Runtime semantics checks: lock table, nonovertaking order, wildcard
    /// matching and accumulate semantics. Fails if any check fails.
    Check,
    /// Cross-VCI dependency programs; reports completed or stuck.
    Deadlock {
        #[arg(long, value_enum, default_value_t = Scenario::Pt2pt)]
        which: Scenario,
        /// Disable escalation to global progress (pure per-VCI progress).
        #[arg(long)]
        per_vci_only: bool,
    },
    /// 2D stencil halo exchange; `--threads` is threads per node (a square).
    Stencil {
        /// Node grid as ROWSxCOLS.
        #[arg(long, default_value = "2x2", value_parser = parse_grid)]
        node_grid: (usize, usize),
        /// Cells per side of each thread's block.
        #[arg(long, default_value_t = 32)]
        grid: usize,
    },
    /// Remote band fetches (get + flush) from random nodes.
    Ebms {
        #[arg(long, default_value_t = 2)]
        nodes: usize,
        /// Bytes per band.
        #[arg(long, default_value_t = 8)]
        band_size: usize,
    },
    /// Block-sparse matrix multiply with work stealing.
    Bspmm {
        #[arg(long, default_value_t = 2)]
        nodes: usize,
        #[arg(long, default_value_t = 16)]
        tile_dim: usize,
        /// Tiles per matrix side.
        #[arg(long, default_value_t = 8)]
        tiles: usize,
        /// Probability that a tile is nonzero.
        #[arg(long, default_value_t = 0.5)]
        density: f64,
        /// Accumulate ordering of the update window: ordered or none.
        #[arg(long, default_value = "ordered", value_parser = parse_ordering)]
        acc_ordering: AccOrdering,
        /// VCIs an unordered accumulate window spreads over (default: threads).
        #[arg(long)]
        acc_stripes: Option<usize>,
    },
}

fn parse_ordering(s: &str) -> Result<AccOrdering, String> {
    match s {
        "ordered" => Ok(AccOrdering::Ordered),
        "none" => Ok(AccOrdering::None),
        _ => Err(format!("expected ordered or none, got {s:?}")),
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once('x').ok_or("expected ROWSxCOLS")?;
    Ok((a.parse().map_err(|_| "bad row count")?, b.parse().map_err(|_| "bad column count")?))
}

impl Common {
    fn harness(&self) -> BenchResult<Harness> {
        let mut cfg = match &self.config {
            Some(p) => Config::parse(&std::fs::read_to_string(p)?)?,
            None => Config::default(),
        };
        if let Some(v) = self.vcis {
            cfg.vcis = v;
        }
        if let Some(cs) = self.cs {
            cfg.cs_mode = cs;
        }
        if let Some(rma) = self.rma {
            cfg.rma_mode = rma;
        }
        for kv in &self.set {
            let (k, v) =
                kv.split_once('=').ok_or_else(|| vcirt::Error::Config(format!("expected key=value, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(Harness {
            cfg,
            reps: self.reps,
            warmup: self.warmup,
            dump_lock_stats: self.dump_lock_stats,
            ..Harness::default()
        })
    }
}

fn run(cli: &Cli) -> BenchResult<Table> {
    let c = &cli.common;
    let h = c.harness()?;
    match &cli.cmd {
        Cmd::Msgrate { target_compute_us: Some(us), .. } => BusyTarget {
            threads: c.threads,
            msg_size: c.msg_size,
            window: c.window,
            target_compute: Duration::from_micros(*us),
        }
        .run(&h),
        Cmd::Msgrate { op, distinct_comms, .. } => MsgRate {
            mode: c.mode,
            op: *op,
            threads: c.threads,
            msg_size: c.msg_size,
            window: c.window,
            iters: c.iters,
            distinct_comms: *distinct_comms,
        }
        .run(&h),
        Cmd::Senders { senders } => {
            SendersReceiver { mode: c.mode, senders: *senders, msg_size: c.msg_size, window: c.window, iters: c.iters }
                .run(&h)
        }
        Cmd::Fuzz { secs } => {
            Fuzz { duration: Duration::from_secs(secs.unwrap_or_else(fuzz_secs_from_env)), seed: h.seed }.run()
        }
        Cmd::Check => run_checks(h.seed),
        Cmd::Stencil { node_grid, grid } => {
            Stencil { mode: c.mode, node_grid: *node_grid, threads: c.threads, block: *grid, iters: c.iters }.run(&h)
        }
        Cmd::Ebms { nodes, band_size } => {
            Ebms { mode: c.mode, nodes: *nodes, threads: c.threads, band_size: *band_size, iters: c.iters }.run(&h)
        }
        Cmd::Bspmm { nodes, tile_dim, tiles, density, acc_ordering, acc_stripes } => Bspmm {
            mode: c.mode,
            nodes: *nodes,
            threads: c.threads,
            tile_dim: *tile_dim,
            tiles: *tiles,
            density: *density,
            acc_ordering: *acc_ordering,
            acc_stripes: *acc_stripes,
        }
        .run(&h),
        Cmd::Deadlock { which, per_vci_only } => {
            let mut cfg = h.cfg.clone();
            if *per_vci_only {
                cfg.hybrid_threshold = None;
            }
            let out = deadlock::run(*which, &cfg)?;
            if let Some(d) = &out.detail {
                eprintln!("{d}");
            }
            if out.verdict == Verdict::Stuck && cfg.hybrid_threshold.is_some() {
                return Err(BenchError::Check(format!("{which:?} program stuck under hybrid progress")));
            }
            let key = RowKey {
                benchmark: "deadlock",
                mode: format!("{which:?}/{}", if *per_vci_only { "per_vci" } else { "hybrid" }).to_lowercase(),
                threads: 2,
                vcis: cfg.vcis,
                msg_size: 0,
                iters: 1,
            };
            let completed = f64::from(u8::from(out.verdict == Verdict::Completed));
            Ok(Table {
                rows: vec![
                    key.row("completed", completed, "0"),
                    key.row("elapsed_ms", out.elapsed.as_secs_f64() * 1e3, "0"),
                ],
            })
        }
    }
}

fn run_checks(seed: u64) -> BenchResult<Table> {
    let key = |name: &'static str| RowKey {
        benchmark: "check",
        mode: name.into(),
        threads: 0,
        vcis: 0,
        msg_size: 0,
        iters: 1,
    };
    let mut rows = Vec::new();
    for mode in [CsMode::Global, CsMode::Fg, CsMode::FgCache] {
        let got = conformance::observe_locks(mode)?;
        let want = conformance::expected_locks(mode);
        for ((op, g), w) in conformance::LOCK_OPS.iter().zip(got).zip(want) {
            if g != w {
                return Err(BenchError::Check(format!("{mode:?} {op}: locks {g:?}, expected {w:?}")));
            }
        }
    }
    rows.push(key("lock_table").row("passed", 1.0, "0"));
    conformance::nonovertaking(10_000, 8)?;
    rows.push(key("nonovertaking").row("passed", 1.0, "0"));
    let traces = conformance::wildcard_traces(1000, 100, seed)?;
    rows.push(key("wildcard_matching").row("traces", traces as f64, "0"));
    conformance::rma_semantics()?;
    rows.push(key("rma_semantics").row("passed", 1.0, "0"));
    Ok(Table { rows })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(&cli).and_then(|table| match &cli.common.csv {
        Some(p) => table.write_csv(File::create(p)?),
        None => table.write_csv(io::stdout().lock()),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bench: {e}");
            ExitCode::FAILURE
        }
    }
}
