//! Randomized multi-threaded workload that checks conservation.
//!
//! Each world gets a random configuration and runs a series of rounds. A
//! round is planned up front from the seed: point-to-point flows between
//! threads on random communicators (duplicates or endpoints), mixed eager and
//! rendezvous sizes, wildcard receives where they cannot steal, and
//! optionally a window with puts, gets, accumulates and fetch-and-ops. After
//! every round all payloads and window contents are checked, every object
//! is freed, and request records and VCI pool slots must be back to their
//! idle counts. Every world must finalize conserved with zero faults.

use std::collections::HashMap;
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcirt::{AccOrdering, Comm, Config, Rank, Region, Request, WinOptions, Window, World, ANY_SOURCE, ANY_TAG};

use crate::common::{check, free_windows, run_threads, stamped, BenchResult, ProgressBarrier, RowKey, Table};

#[derive(Debug, Clone)]
pub struct Fuzz {
    pub duration: Duration,
    pub seed: u64,
}

/// `FUZZ_SECS` if set and valid, else 60.
pub fn fuzz_secs_from_env() -> u64 {
    std::env::var("FUZZ_SECS").ok().and_then(|s| s.parse().ok()).unwrap_or(60)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FuzzSummary {
    pub worlds: u64,
    pub rounds: u64,
    pub messages: u64,
    pub rma_ops: u64,
    pub faults: u64,
}

/// One stream of messages between two threads.
#[derive(Debug, Clone)]
struct FlowPlan {
    src: (usize, usize),
    dst: (usize, usize),
    comm: usize,
    tag: i32,
    sizes: Vec<usize>,
    synchronous: bool,
    any_source: bool,
    any_tag: bool,
}

#[derive(Debug, Clone)]
struct RmaPlan {
    ordering: AccOrdering,
    /// Per thread: `(target, cell, value)` accumulates.
    accs: Vec<Vec<(usize, usize, i64)>>,
    /// Per thread: fetch-and-add of 1 on node 0's counter.
    fetches: Vec<usize>,
}

#[derive(Debug, Clone)]
struct RoundPlan {
    endpoints: bool,
    dups: usize,
    flows: Vec<FlowPlan>,
    rma: Option<RmaPlan>,
}

const ACC_CELLS: usize = 4;
const CELL: usize = 8;

/// Window layout per node: the fetch counter, accumulate cells, then one put
/// slot per writer thread in the world.
fn put_slot(writer: usize) -> usize {
    CELL * (1 + ACC_CELLS + writer)
}

fn put_value(round: u64, writer: usize, target: usize) -> i64 {
    (round as i64) << 32 | (writer as i64) << 8 | target as i64
}

fn random_config(rng: &mut impl Rng) -> BenchResult<Config> {
    let mut cfg = Config::default();
    let pick = |rng: &mut dyn rand::RngCore, xs: &[&'static str]| *xs.choose(rng).expect("choices");
    for (k, choices) in [
        ("cs_mode", &["global", "fg", "fgcache"][..]),
        ("vcis", &["1", "2", "3", "5", "16"]),
        ("eager_threshold", &["64", "1024", "8192"]),
        ("rma_mode", &["hw", "sw"]),
        ("injection_cost", &["0", "20", "200"]),
        ("req_cache_capacity", &["0", "1", "8", "64"]),
        ("poll_budget", &["1", "4", "64"]),
        ("unordered_window_vcis", &["1", "2", "4"]),
        ("hybrid_threshold", &["1", "100"]),
    ] {
        cfg.set(k, pick(rng, choices))?;
    }
    cfg.watchdog = Some(Duration::from_secs(10));
    Ok(cfg)
}

fn plan_round(rng: &mut impl Rng, nodes: usize, t: usize) -> RoundPlan {
    let endpoints = rng.gen_bool(0.3);
    let dups = if endpoints { 0 } else { rng.gen_range(1..=3) };
    let threads: Vec<(usize, usize)> = (0..nodes).flat_map(|n| (0..t).map(move |i| (n, i))).collect();
    let mut flows = Vec::new();
    for tag in 0..rng.gen_range(1..=2 * nodes * t) {
        let src = *threads.choose(rng).expect("threads");
        let dst = loop {
            let d = *threads.choose(rng).expect("threads");
            if d.0 != src.0 {
                break d;
            }
        };
        let count = rng.gen_range(1..=24);
        let sizes = (0..count)
            .map(|_| match rng.gen_range(0..10) {
                0 => 0,
                1..=6 => rng.gen_range(1..=64),
                7 | 8 => rng.gen_range(65..=2048),
                _ => rng.gen_range(2049..=20_000),
            })
            .collect();
        flows.push(FlowPlan {
            src,
            dst,
            comm: if endpoints { 0 } else { rng.gen_range(0..dups) },
            tag: tag as i32,
            sizes,
            synchronous: rng.gen_bool(0.2),
            any_source: rng.gen_bool(0.3),
            any_tag: rng.gen_bool(0.3),
        });
    }
    // A wildcard tag may only be used when no other flow shares the
    // (source rank, destination rank, communicator) triple.
    let rank_of = |(n, i): (usize, usize)| if endpoints { n * t + i } else { n };
    let key = |f: &FlowPlan| (rank_of(f.src), rank_of(f.dst), f.comm);
    let mut shared: HashMap<_, usize> = HashMap::new();
    for f in &flows {
        *shared.entry(key(f)).or_default() += 1;
    }
    for f in &mut flows {
        f.any_tag &= !f.any_source && shared[&key(f)] == 1;
    }
    let rma = rng.gen_bool(0.5).then(|| RmaPlan {
        ordering: if rng.gen_bool(0.5) { AccOrdering::Ordered } else { AccOrdering::None },
        accs: threads
            .iter()
            .map(|_| {
                (0..rng.gen_range(0..=16))
                    .map(|_| (rng.gen_range(0..nodes), rng.gen_range(0..ACC_CELLS), rng.gen_range(-50..=50)))
                    .collect()
            })
            .collect(),
        fetches: threads.iter().map(|_| rng.gen_range(0..=6)).collect(),
    });
    RoundPlan { endpoints, dups, flows, rma }
}

/// Frees communicators concurrently; `comm_free` is collective.
fn free_comms(handles: Vec<(Rank, Comm)>) -> BenchResult<()> {
    thread::scope(|s| {
        let joins: Vec<_> = handles.into_iter().map(|(r, c)| s.spawn(move || r.comm_free(&c))).collect();
        joins.into_iter().try_for_each(|j| j.join().expect("comm_free thread panicked"))
    })?;
    Ok(())
}

impl Fuzz {
    pub fn run(&self) -> BenchResult<Table> {
        let s = self.execute()?;
        let key = RowKey {
            benchmark: "fuzz",
            mode: "random".into(),
            threads: 0,
            vcis: 0,
            msg_size: 0,
            iters: s.rounds as usize,
        };
        Ok(Table {
            rows: [
                ("worlds", s.worlds),
                ("rounds", s.rounds),
                ("messages", s.messages),
                ("rma_ops", s.rma_ops),
                ("faults", s.faults),
            ]
            .into_iter()
            .map(|(m, v)| key.row(m, v as f64, "0"))
            .collect(),
        })
    }

    /// Runs worlds until the duration elapses; any violation is an error.
    pub fn execute(&self) -> BenchResult<FuzzSummary> {
        let deadline = Instant::now() + self.duration;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut sum = FuzzSummary::default();
        while sum.worlds == 0 || Instant::now() < deadline {
            let cfg = random_config(&mut rng)?;
            let (nodes, t) = (rng.gen_range(2..=3), rng.gen_range(1..=4));
            let world = World::init(cfg.clone(), nodes, t)?;
            let idle: Vec<_> = world.ranks().iter().map(|r| r.pool_stats().assigned).collect();
            for _ in 0..rng.gen_range(1..=6) {
                let plan = plan_round(&mut rng, nodes, t);
                self.round(&world, &plan, sum.rounds, &mut sum)?;
                sum.rounds += 1;
                for (node, r) in world.ranks().iter().enumerate() {
                    let counts = r.request_counts();
                    check(counts.conserved() && counts.live == 0, || {
                        format!("round {}: node {node} request records not conserved: {counts:?}", sum.rounds)
                    })?;
                    let pool = r.pool_stats();
                    check(pool.conserved() && pool.assigned == idle[node], || {
                        format!("round {}: node {node} pool slots not released: {pool:?}", sum.rounds)
                    })?;
                }
                if Instant::now() >= deadline {
                    break;
                }
            }
            let report = world.finalize()?;
            sum.faults += report.fabric.routing_faults + report.fabric.fault_events;
            check(report.conserved(), || format!("world {} ({cfg:?}) not conserved:\n{report}", sum.worlds))?;
            check(sum.faults == 0, || format!("world {}: {} fault(s)", sum.worlds, sum.faults))?;
            sum.worlds += 1;
        }
        Ok(sum)
    }

    fn round(&self, world: &World, plan: &RoundPlan, round: u64, sum: &mut FuzzSummary) -> BenchResult<()> {
        let ranks = world.ranks();
        let (nodes, t) = (ranks.len(), world.threads_per_node());
        // comms[node][thread or dup index]
        let comms: Vec<Vec<Comm>> = if plan.endpoints {
            ranks.iter().map(|r| r.create_endpoints(&r.world_comm(), t)).collect::<Result<_, _>>()?
        } else {
            let mut out = vec![Vec::new(); nodes];
            for _ in 0..plan.dups {
                for (n, r) in ranks.iter().enumerate() {
                    out[n].push(r.comm_dup(&r.world_comm())?);
                }
            }
            out
        };
        let comm_for = |(n, i): (usize, usize), f: &FlowPlan| &comms[n][if plan.endpoints { i } else { f.comm }];
        let rank_of = |(n, i): (usize, usize)| if plan.endpoints { n * t + i } else { n } as u32;

        let regions: Vec<_> = (0..nodes).map(|_| Region::new(put_slot(nodes * t))).collect();
        let wins: Vec<Window> = match &plan.rma {
            Some(rma) => ranks
                .iter()
                .zip(&regions)
                .map(|(r, reg)| r.win_create(&r.world_comm(), reg.clone(), WinOptions::ordering(rma.ordering)))
                .collect::<Result<_, _>>()?,
            None => Vec::new(),
        };
        let fetched = Mutex::new(Vec::new());
        let sync = ProgressBarrier::new(nodes * t);

        run_threads(nodes * t, |id, start| {
            let me = (id / t, id % t);
            let rank = &ranks[me.0];
            start.wait();
            let mut recvs: Vec<(usize, u64, Request)> = Vec::new();
            for (fi, f) in plan.flows.iter().enumerate().filter(|(_, f)| f.dst == me) {
                let source = if f.any_source { ANY_SOURCE } else { rank_of(f.src) as i32 };
                let tag = if f.any_tag { ANY_TAG } else { f.tag };
                for (seq, &size) in f.sizes.iter().enumerate() {
                    recvs.push((fi, seq as u64, rank.irecv(comm_for(me, f), source, tag, size)?));
                }
            }
            let mut sends = Vec::new();
            for (fi, f) in plan.flows.iter().enumerate().filter(|(_, f)| f.src == me) {
                for (seq, &size) in f.sizes.iter().enumerate() {
                    let payload = stamped(size, fi, seq as u64);
                    let (comm, dest) = (comm_for(me, f), rank_of(f.dst));
                    sends.push(if f.synchronous {
                        rank.issend(comm, dest, f.tag, payload)?
                    } else {
                        rank.isend(comm, dest, f.tag, payload)?
                    });
                }
            }
            let (meta, reqs): (Vec<_>, Vec<_>) = recvs.into_iter().map(|(fi, seq, r)| ((fi, seq), r)).unzip();
            for ((fi, seq), c) in meta.into_iter().zip(rank.waitall(reqs)?) {
                let f = &plan.flows[fi];
                let size = f.sizes[seq as usize];
                let st = c.status.expect("receive status");
                check(st.tag == f.tag && st.source == rank_of(f.src) as i32 && st.len == size, || {
                    format!("flow {fi} message {seq}: wrong envelope {st:?}")
                })?;
                check(c.data == stamped(size, fi, seq), || {
                    format!("flow {fi} message {seq} corrupted or out of order")
                })?;
            }
            rank.waitall(sends)?;

            if let Some(rma) = &plan.rma {
                let win = &wins[me.0];
                let writer = id;
                for target in 0..nodes {
                    let v = put_value(round, writer, target);
                    rank.put(win, target as u32, put_slot(writer), &v.to_le_bytes())?;
                }
                for &(target, cell, v) in &rma.accs[id] {
                    rank.accumulate(win, target as u32, CELL * (1 + cell), &[v])?;
                }
                let handles =
                    (0..rma.fetches[id]).map(|_| rank.fetch_and_op(win, 0, 0, 1)).collect::<Result<Vec<_>, _>>()?;
                rank.flush_all(win)?;
                let olds: Vec<i64> = handles.iter().map(|h| h.value().expect("flushed fetch")).collect();
                fetched.lock().expect("fetched").extend(olds);
                for target in 0..nodes {
                    let g = rank.get(win, target as u32, put_slot(writer), CELL)?;
                    rank.flush(win, target as u32)?;
                    let want = put_value(round, writer, target).to_le_bytes();
                    check(g.data() == Some(&want[..]), || {
                        format!("thread {id}: get after put to node {target} differs")
                    })?;
                }
            }
            // Nobody leaves the library until everyone is done, so software
            // RMA targets stay served.
            sync.wait(rank)?;
            Ok(())
        })?;

        sum.messages += plan.flows.iter().map(|f| f.sizes.len() as u64).sum::<u64>();
        if let Some(rma) = &plan.rma {
            let mut olds = fetched.into_inner().expect("fetched");
            olds.sort_unstable();
            let total: usize = rma.fetches.iter().sum();
            check(olds.iter().copied().eq(0..total as i64), || {
                format!("fetch_and_op results not a permutation: {olds:?}")
            })?;
            check(regions[0].load_i64(0) == total as i64, || "fetch counter total wrong".into())?;
            let mut expect = vec![[0i64; ACC_CELLS]; nodes];
            for &(target, cell, v) in rma.accs.iter().flatten() {
                expect[target][cell] += v;
            }
            for (n, reg) in regions.iter().enumerate() {
                for (c, &want) in expect[n].iter().enumerate() {
                    let got = reg.load_i64(CELL * (1 + c));
                    check(got == want, || format!("node {n} cell {c}: accumulated {got}, expected {want}"))?;
                }
            }
            sum.rma_ops += (nodes * t * 2 * nodes + total + rma.accs.iter().map(Vec::len).sum::<usize>()) as u64;
            free_windows(ranks.iter().cloned().zip(wins).collect())?;
        }
        let owned = comms.into_iter().enumerate().flat_map(|(n, cs)| cs.into_iter().map(move |c| (n, c)));
        free_comms(owned.map(|(n, c)| (ranks[n].clone(), c)).collect())
    }
}
