//! Semantic checks of the runtime that go beyond a single benchmark: lock
//! counts per operation, nonovertaking order under threads, wildcard
//! matching against a brute-force model, and one-sided accumulate semantics.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcirt::{AccOrdering, Comm, Config, CsMode, Rank, Region, Request, WinOptions, World, ANY_SOURCE, ANY_TAG};

use crate::common::{check, free_windows, run_threads, BenchResult, ProgressBarrier};

/// `(global, vci, request)` lock acquisitions of one operation.
pub type Locks = (u64, u64, u64);

/// Columns of the lock table.
pub const LOCK_OPS: [&str; 5] = ["isend", "isend (immediate)", "put", "wait", "wait (immediate)"];

/// The expected table: one row per critical-section mode.
pub fn expected_locks(mode: CsMode) -> [Locks; 5] {
    match mode {
        CsMode::Global => [(1, 0, 0); 5],
        CsMode::Fg => [(0, 1, 1), (0, 1, 0), (0, 1, 0), (0, 1, 1), (0, 0, 0)],
        CsMode::FgCache => [(0, 1, 0), (0, 1, 0), (0, 1, 0), (0, 2, 0), (0, 0, 0)],
    }
}

fn measure<T>(rank: &Rank, op: impl FnOnce() -> vcirt::Result<T>) -> BenchResult<(T, Locks)> {
    let before = rank.thread_stats();
    let out = op()?;
    let d = rank.thread_stats() - before;
    Ok((out, (d.global, d.vci + d.hook, d.request)))
}

fn pairwise<A: Send, B: Send>(a: impl FnOnce() -> A + Send, b: impl FnOnce() -> B + Send) -> (A, B) {
    thread::scope(|s| {
        let hb = s.spawn(b);
        let ra = a();
        (ra, hb.join().expect("partner thread panicked"))
    })
}

/// Observes one row of the lock table: single-threaded operations with no
/// injection cost, so each wait completes in its first poll.
pub fn observe_locks(mode: CsMode) -> BenchResult<[Locks; 5]> {
    const SMALL: usize = 8;
    const LARGE: usize = 64 * 1024;
    let cfg = Config { cs_mode: mode, injection_cost: 0, vcis: 4, ..Config::default() };
    let w = World::init(cfg, 2, 1)?;
    let (a, b) = (w.rank(0), w.rank(1));
    let (ca, cb) = (a.comm_dup(&a.world_comm())?, b.comm_dup(&b.world_comm())?);

    // Warm both request caches.
    for _ in 0..2 {
        let r = b.irecv(&cb, 0, 1, LARGE)?;
        let s = a.isend(&ca, 1, 1, vec![0; LARGE])?;
        let (x, y) = pairwise(|| a.wait(s), || b.wait(r));
        x?;
        y?;
    }

    let (small, isend_immediate) = measure(&a, || a.isend(&ca, 1, 2, vec![1; SMALL]))?;
    check(small.is_lightweight(), || "small send did not complete at injection".into())?;
    let (_, wait_immediate) = measure(&a, || a.wait(small))?;

    let recv = b.irecv(&cb, 0, 3, SMALL)?;
    a.wait(a.isend(&ca, 1, 3, vec![3; SMALL])?)?;
    thread::sleep(Duration::from_millis(2));
    let (done, wait) = measure(&b, || b.wait(recv))?;
    check(done.data == [3; SMALL], || "received wrong payload".into())?;

    let big_recv = b.irecv(&cb, 0, 4, LARGE)?;
    let (big, isend) = measure(&a, || a.isend(&ca, 1, 4, vec![4; LARGE]))?;
    let (x, y) = pairwise(|| a.wait(big), || b.wait(big_recv));
    x?;
    y?;

    let wa = a.win_create(&a.world_comm(), Region::new(64), WinOptions::default())?;
    let wb = b.win_create(&b.world_comm(), Region::new(64), WinOptions::default())?;
    let (_, put) = measure(&a, || a.put(&wa, 1, 0, &[9; 8]))?;
    a.flush(&wa, 1)?;
    let (x, y) = pairwise(|| a.win_free(wa), || b.win_free(wb));
    x?;
    y?;
    let (x, y) = pairwise(|| a.comm_free(&ca), || b.comm_free(&cb));
    x?;
    y?;
    let report = w.finalize()?;
    check(report.conserved(), || format!("teardown not conserved:\n{report}"))?;
    Ok([isend, isend_immediate, put, wait, wait_immediate])
}

/// `threads` sender threads stream sequence-stamped messages on one
/// communicator with one tag; a single receiver checks that each sender's
/// messages match in send order. Every 64th message takes the rendezvous path.
pub fn nonovertaking(messages: usize, threads: usize) -> BenchResult<()> {
    let cfg = Config { injection_cost: 0, eager_threshold: 1024, ..Config::default() };
    let w = World::init(cfg, 2, threads)?;
    let (a, b) = (w.rank(0), w.rank(1));
    let (ca, cb) = (a.comm_dup(&a.world_comm())?, b.comm_dup(&b.world_comm())?);
    let per = messages / threads;
    let size = |seq: usize| if seq % 64 == 63 { 4096 } else { 16 };
    let payload = |thread: usize, seq: usize| {
        let mut v = vec![0u8; size(seq)];
        v[..8].copy_from_slice(&((thread as u64) << 32 | seq as u64).to_le_bytes());
        v
    };
    run_threads(threads + 1, |id, start| {
        start.wait();
        if id < threads {
            let mut pending = VecDeque::new();
            for seq in 0..per {
                pending.push_back(a.isend(&ca, 1, 0, payload(id, seq))?);
                if pending.len() >= 32 {
                    a.wait(pending.pop_front().expect("pending"))?;
                }
            }
            a.waitall(pending.into())?;
            return Ok(());
        }
        let mut next = vec![0usize; threads];
        let mut posted = VecDeque::new();
        let mut left = per * threads;
        let mut unposted = left;
        while left > 0 {
            while posted.len() < 64 && unposted > 0 {
                posted.push_back(b.irecv(&cb, 0, 0, 4096)?);
                unposted -= 1;
            }
            let c = b.wait(posted.pop_front().expect("posted"))?;
            let stamp = u64::from_le_bytes(c.data[..8].try_into().expect("stamp"));
            let (t, seq) = ((stamp >> 32) as usize, (stamp & 0xffff_ffff) as usize);
            check(t < threads && seq == next[t] && c.data.len() == size(seq), || {
                format!("sender {t}: got message {seq}, expected {}", next.get(t).copied().unwrap_or(0))
            })?;
            next[t] += 1;
            left -= 1;
        }
        Ok(())
    })?;
    drop((ca, cb));
    let report = w.finalize()?;
    check(report.conserved(), || format!("teardown not conserved:\n{report}"))
}

#[derive(Debug, Clone, Copy)]
enum Event {
    Post { comm: usize, source: i32, tag: i32 },
    Arrive { comm: usize, source: i32, tag: i32 },
}

/// The matching rule stated directly: a new receive takes the earliest
/// arrived, unconsumed message it accepts; a new message goes to the
/// earliest posted, unmatched receive that accepts it. Returns, per
/// receive, the index of the message it got.
fn brute_force(events: &[Event]) -> Vec<Option<usize>> {
    // (comm, source, tag)
    type Env = (usize, i32, i32);
    let accepts = |pat: &Env, msg: &Env| {
        pat.0 == msg.0 && (pat.1 == ANY_SOURCE || pat.1 == msg.1) && (pat.2 == ANY_TAG || pat.2 == msg.2)
    };
    let mut messages: Vec<(Env, bool)> = Vec::new();
    let mut receives: Vec<(Env, Option<usize>)> = Vec::new();
    for e in events {
        match *e {
            Event::Post { comm, source, tag } => {
                let pat = (comm, source, tag);
                let hit = (0..messages.len()).find(|&m| !messages[m].1 && accepts(&pat, &messages[m].0));
                if let Some(m) = hit {
                    messages[m].1 = true;
                }
                receives.push((pat, hit));
            }
            Event::Arrive { comm, source, tag } => {
                let env = (comm, source, tag);
                let m = messages.len();
                let hit = (0..receives.len()).find(|&r| receives[r].1.is_none() && accepts(&receives[r].0, &env));
                if let Some(r) = hit {
                    receives[r].1 = Some(m);
                }
                messages.push((env, hit.is_some()));
            }
        }
    }
    receives.into_iter().map(|r| r.1).collect()
}

/// Extends a trace so that every receive is matched and every message
/// consumed: each pending receive gets a concrete message it accepts, then
/// each leftover message gets an exact receive.
fn close_trace(events: &mut Vec<Event>) {
    loop {
        let matched = brute_force(events);
        let posts: Vec<Event> = events.iter().copied().filter(|e| matches!(e, Event::Post { .. })).collect();
        let Some(r) = matched.iter().position(Option::is_none) else { break };
        let Event::Post { comm, source, tag } = posts[r] else { unreachable!() };
        events.push(Event::Arrive {
            comm,
            source: if source == ANY_SOURCE { 0 } else { source },
            tag: if tag == ANY_TAG { 0 } else { tag },
        });
    }
    let consumed: Vec<usize> = brute_force(events).into_iter().flatten().collect();
    let arrivals: Vec<Event> = events.iter().copied().filter(|e| matches!(e, Event::Arrive { .. })).collect();
    for (m, e) in arrivals.into_iter().enumerate() {
        if let (false, Event::Arrive { comm, source, tag }) = (consumed.contains(&m), e) {
            events.push(Event::Post { comm, source, tag });
        }
    }
}

fn random_trace(rng: &mut impl Rng, max_events: usize) -> Vec<Event> {
    let sources = [0, 2];
    (0..rng.gen_range(1..=max_events))
        .map(|_| {
            let comm = rng.gen_range(0..2);
            let tag = rng.gen_range(0..3);
            let source = sources[rng.gen_range(0..2)];
            if rng.gen_bool(0.5) {
                Event::Post {
                    comm,
                    source: if rng.gen_bool(0.35) { ANY_SOURCE } else { source },
                    tag: if rng.gen_bool(0.35) { ANY_TAG } else { tag },
                }
            } else {
                Event::Arrive { comm, source, tag }
            }
        })
        .collect()
}

/// Replays random traces through the runtime (ranks 0 and 2 send to rank 1
/// on two communicators; rank 1 posts receives with wildcards) and compares
/// every match with [`brute_force`]. Returns the number of traces checked.
pub fn wildcard_traces(traces: usize, max_events: usize, seed: u64) -> BenchResult<usize> {
    // A receive the runtime left unmatched surfaces as a stuck wait.
    let cfg = Config { injection_cost: 0, watchdog: Some(Duration::from_secs(2)), ..Config::default() };
    let w = World::init(cfg, 3, 1)?;
    let ranks = w.ranks();
    let comms: Vec<Vec<Comm>> = (0..2)
        .map(|_| ranks.iter().map(|r| r.comm_dup(&r.world_comm())).collect::<Result<_, _>>())
        .collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rx = &ranks[1];
    for trace in 0..traces {
        let mut events = random_trace(&mut rng, max_events);
        close_trace(&mut events);
        let want = brute_force(&events);
        let mut reqs: Vec<Request> = Vec::new();
        let mut sent = 0u64;
        for e in &events {
            match *e {
                Event::Post { comm, source, tag } => reqs.push(rx.irecv(&comms[comm][1], source, tag, 8)?),
                Event::Arrive { comm, source, tag } => {
                    let tx = &ranks[source as usize];
                    tx.wait(tx.isend(&comms[comm][source as usize], 1, tag, sent.to_le_bytes().to_vec())?)?;
                    sent += 1;
                    // Pull the message into rank 1's queues before the next event.
                    while rx.progress()? == 0 {}
                }
            }
        }
        for (r, (c, want)) in rx.waitall(reqs)?.into_iter().zip(want).enumerate() {
            let got = u64::from_le_bytes(c.data[..8].try_into().expect("message id"));
            check(Some(got as usize) == want, || {
                format!("trace {trace}: receive {r} matched message {got}, model says {want:?}\n{events:?}")
            })?;
        }
    }
    drop(comms);
    let report = w.finalize()?;
    check(report.conserved(), || format!("teardown not conserved:\n{report}"))?;
    Ok(traces)
}

/// Ordered window: a mix of accumulates and fetch-and-ops from one origin
/// returns the prefix sums of issue order. Unordered window: 8 threads × 1000
/// increments of one cell sum exactly. Fetch-and-op: 64 concurrent
/// incrementers on 4 ranks receive a permutation of `0..64`.
pub fn rma_semantics() -> BenchResult<()> {
    let cfg = Config { injection_cost: 20, ..Config::default() };
    let w = World::init(cfg, 4, 16)?;
    let ranks = w.ranks();
    let regions: Vec<_> = ranks.iter().map(|_| Region::new(64)).collect();
    let window = |ordering| -> BenchResult<Vec<vcirt::Window>> {
        Ok(ranks
            .iter()
            .zip(&regions)
            .map(|(r, reg)| r.win_create(&r.world_comm(), reg.clone(), WinOptions::ordering(ordering)))
            .collect::<Result<_, _>>()?)
    };
    let ordered = window(AccOrdering::Ordered)?;
    let unordered = window(AccOrdering::None)?;

    // Sequential application: every fetch sees exactly the values issued before it.
    let (a, win) = (&ranks[0], &ordered[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut expect = 0i64;
    let mut fetches = Vec::new();
    for _ in 0..200 {
        let v = rng.gen_range(-100..=100);
        if rng.gen_bool(0.3) {
            fetches.push((a.fetch_and_op(win, 1, 0, v)?, expect));
        } else {
            a.accumulate(win, 1, 0, &[v])?;
        }
        expect += v;
    }
    a.flush(win, 1)?;
    for (k, (h, want)) in fetches.iter().enumerate() {
        check(h.value() == Some(*want), || format!("ordered fetch {k}: got {:?}, expected {want}", h.value()))?;
    }
    check(regions[1].load_i64(0) == expect, || "ordered accumulate total wrong".into())?;

    let olds = Mutex::new(Vec::new());
    let sync = ProgressBarrier::new(ranks.len() * 16);
    run_threads(ranks.len() * 16, |id, start| {
        let (node, i) = (id / 16, id % 16);
        let r = &ranks[node];
        start.wait();
        if node == 1 && i < 8 {
            for _ in 0..1000 {
                r.accumulate(&unordered[node], 2, 8, &[1])?;
            }
            r.flush(&unordered[node], 2)?;
        }
        let h = r.fetch_and_op(&ordered[node], 3, 16, 1)?;
        r.flush(&ordered[node], 3)?;
        olds.lock().expect("olds").push(h.value().expect("flushed"));
        sync.wait(r)?;
        Ok(())
    })?;
    check(regions[2].load_i64(8) == 8000, || format!("unordered sum {} != 8000", regions[2].load_i64(8)))?;
    let mut olds = olds.into_inner().expect("olds");
    olds.sort_unstable();
    check(olds.iter().copied().eq(0..64), || format!("fetch_and_op results not a permutation of 0..64: {olds:?}"))?;

    let handles = ranks.iter().cloned().zip(ordered).chain(ranks.iter().cloned().zip(unordered)).collect();
    free_windows(handles)?;
    let report = w.finalize()?;
    check(report.conserved(), || format!("teardown not conserved:\n{report}"))
}
