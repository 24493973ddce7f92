//! Pairwise message-rate microbenchmark.
//!
//! Thread `i` on the sending rank streams messages to thread `i` on the
//! receiving rank. Messages go out in windows of `window` operations followed
//! by a waitall (isend) or a flush (put).

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use vcirt::{Comm, Rank, Region, WinOptions, Window, World};

use crate::common::{
    check, free_windows, run_threads, span_rate, stamp, stamped, BenchError, BenchResult, Harness, Mode, RowKey, Table,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Op {
    Isend,
    Put,
}

#[derive(Debug, Clone)]
pub struct MsgRate {
    pub mode: Mode,
    pub op: Op,
    pub threads: usize,
    pub msg_size: usize,
    /// Operations in flight before each waitall or flush.
    pub window: usize,
    /// Messages per thread per repetition.
    pub iters: usize,
    /// Number of communicators the thread pairs are spread over (par mode).
    pub distinct_comms: Option<usize>,
}

impl Default for MsgRate {
    fn default() -> Self {
        Self { mode: Mode::Par, op: Op::Isend, threads: 1, msg_size: 8, window: 64, iters: 2048, distinct_comms: None }
    }
}

/// Origin and target handles of one flow's window.
type WindowPair = (Window, Window);
type OwnedWindow = (Rank, Window);

/// One sender/receiver pair: the communicator each side uses and whom it addresses.
struct Flow {
    tx: Rank,
    tx_comm: Comm,
    dest: u32,
    rx: Rank,
    rx_comm: Comm,
    source: i32,
    tag: i32,
}

impl MsgRate {
    fn validate(&self) -> BenchResult<()> {
        if self.threads == 0 || self.window == 0 || self.iters == 0 {
            return Err(BenchError::Params("threads, window and iters must be positive".into()));
        }
        if self.distinct_comms == Some(0) {
            return Err(BenchError::Params("distinct_comms must be positive".into()));
        }
        Ok(())
    }

    fn world(&self, h: &Harness) -> BenchResult<World> {
        let t = self.threads;
        Ok(match self.mode {
            Mode::Everywhere => {
                let cfg = vcirt::Config { vcis: 1, ..h.cfg.clone() };
                World::init(cfg, 2 * t, 1)?
            }
            _ => World::init(h.cfg.clone(), 2, t)?,
        })
    }

    /// Builds the communicators of every flow from the main thread. Creation
    /// is non-blocking, so both sides can be set up in turn.
    fn flows(&self, world: &World) -> BenchResult<Vec<Flow>> {
        let t = self.threads;
        let mut flows = Vec::with_capacity(t);
        match self.mode {
            Mode::Ser => {
                let (a, b) = (world.rank(0), world.rank(1));
                let ca = a.comm_dup(&a.world_comm())?;
                let cb = b.comm_dup(&b.world_comm())?;
                for i in 0..t {
                    flows.push(Flow {
                        tx: a.clone(),
                        tx_comm: ca.clone(),
                        dest: 1,
                        rx: b.clone(),
                        rx_comm: cb.clone(),
                        source: 0,
                        tag: i as i32,
                    });
                }
            }
            Mode::Par => {
                let (a, b) = (world.rank(0), world.rank(1));
                let k = self.distinct_comms.unwrap_or(t);
                let mut comms = Vec::with_capacity(k);
                for _ in 0..k {
                    comms.push((a.comm_dup(&a.world_comm())?, b.comm_dup(&b.world_comm())?));
                }
                for i in 0..t {
                    let (ca, cb) = &comms[i % k];
                    flows.push(Flow {
                        tx: a.clone(),
                        tx_comm: ca.clone(),
                        dest: 1,
                        rx: b.clone(),
                        rx_comm: cb.clone(),
                        source: 0,
                        tag: i as i32,
                    });
                }
            }
            Mode::Ep => {
                let (a, b) = (world.rank(0), world.rank(1));
                let ea = a.create_endpoints(&a.world_comm(), t)?;
                let eb = b.create_endpoints(&b.world_comm(), t)?;
                for (i, (ca, cb)) in ea.into_iter().zip(eb).enumerate() {
                    flows.push(Flow {
                        tx: a.clone(),
                        tx_comm: ca,
                        dest: (t + i) as u32,
                        rx: b.clone(),
                        rx_comm: cb,
                        source: i as i32,
                        tag: 0,
                    });
                }
            }
            Mode::Everywhere => {
                // One two-member communicator per pair; creation is collective
                // over the world, so every rank takes part in each.
                let ranks = world.ranks();
                for i in 0..t {
                    let group = [i as u32, (t + i) as u32];
                    let mut made = Vec::new();
                    for r in &ranks {
                        if let Some(c) = r.comm_create(&r.world_comm(), &group)? {
                            made.push((r.clone(), c));
                        }
                    }
                    let (b, cb) = made.pop().expect("pair member");
                    let (a, ca) = made.pop().expect("pair member");
                    flows.push(Flow { tx: a, tx_comm: ca, dest: 1, rx: b, rx_comm: cb, source: 0, tag: 0 });
                }
            }
        }
        Ok(flows)
    }

    fn key(&self, h: &Harness) -> RowKey {
        let mut mode = self.mode.label().to_string();
        if let Some(k) = self.distinct_comms {
            mode = format!("{mode}/comms={k}");
        }
        RowKey {
            benchmark: match self.op {
                Op::Isend => "msgrate_isend",
                Op::Put => "msgrate_put",
            },
            mode,
            threads: self.threads,
            vcis: if self.mode == Mode::Everywhere { 1 } else { h.cfg.vcis },
            msg_size: self.msg_size,
            iters: self.iters,
        }
    }

    pub fn run(&self, h: &Harness) -> BenchResult<Table> {
        self.validate()?;
        h.repeat(&self.key(h), |_| {
            let rate = match self.op {
                Op::Isend => self.once_isend(h)?,
                Op::Put => self.once_put(h)?,
            };
            Ok(vec![("msgs_per_sec", rate)])
        })
    }

    /// One repetition of the isend flavor; returns aggregate messages per second.
    pub fn once_isend(&self, h: &Harness) -> BenchResult<f64> {
        let world = self.world(h)?;
        let flows = self.flows(&world)?;
        let t = self.threads;
        let (iters, window, size) = (self.iters, self.window, self.msg_size);
        let spans = run_threads(2 * t, |id, start| {
            let f = &flows[id % t];
            let sender = id < t;
            start.wait();
            let t0 = Instant::now();
            let mut seq = 0u64;
            while (seq as usize) < iters {
                let n = window.min(iters - seq as usize);
                if sender {
                    let reqs = (0..n)
                        .map(|j| f.tx.isend(&f.tx_comm, f.dest, f.tag, stamped(size, id, seq + j as u64)))
                        .collect::<Result<Vec<_>, _>>()?;
                    f.tx.waitall(reqs)?;
                } else {
                    let reqs =
                        (0..n).map(|_| f.rx.irecv(&f.rx_comm, f.source, f.tag, size)).collect::<Result<Vec<_>, _>>()?;
                    let mut expect = vec![0; size];
                    for (j, c) in f.rx.waitall(reqs)?.into_iter().enumerate() {
                        stamp(&mut expect, id - t, seq + j as u64);
                        check(c.data == expect, || {
                            format!("flow {} message {} corrupted or out of order", id - t, seq + j as u64)
                        })?;
                    }
                }
                seq += n as u64;
            }
            Ok((t0, Instant::now()))
        })?;
        drop(flows);
        h.finish(world)?;
        Ok(span_rate(&spans, t * iters))
    }

    /// Window handles for every flow: `(origin, target)` per flow plus the
    /// distinct handles that must each be freed once.
    fn windows(&self, flows: &[Flow]) -> BenchResult<(Vec<WindowPair>, Vec<OwnedWindow>)> {
        let t = self.threads;
        let len = t * self.msg_size;
        // Pairs that share a communicator share its window.
        let groups = match self.mode {
            Mode::Ser => 1,
            Mode::Par => self.distinct_comms.unwrap_or(t),
            Mode::Ep | Mode::Everywhere => t,
        };
        let mut made = Vec::with_capacity(groups);
        for f in &flows[..groups] {
            let tw = f.tx.win_create(&f.tx_comm, Region::new(len), WinOptions::default())?;
            let rw = f.rx.win_create(&f.rx_comm, Region::new(len), WinOptions::default())?;
            made.push((tw, rw));
        }
        let per_flow = (0..t).map(|i| made[i % groups].clone()).collect();
        let owners = flows[..groups]
            .iter()
            .zip(made)
            .flat_map(|(f, (tw, rw))| [(f.tx.clone(), tw), (f.rx.clone(), rw)])
            .collect();
        Ok((per_flow, owners))
    }

    /// One repetition of the put flavor; pair `i` writes slot `i` of its window.
    pub fn once_put(&self, h: &Harness) -> BenchResult<f64> {
        let world = self.world(h)?;
        let flows = self.flows(&world)?;
        let t = self.threads;
        let (iters, window, size) = (self.iters, self.window, self.msg_size);
        let (wins, owners) = self.windows(&flows)?;
        let done: Vec<AtomicBool> = (0..t).map(|_| AtomicBool::new(false)).collect();
        let spans = run_threads(2 * t, |id, start| {
            let i = id % t;
            let f = &flows[i];
            let (tw, rw) = &wins[i];
            let offset = i * size;
            start.wait();
            let t0 = Instant::now();
            if id < t {
                let mut buf = vec![0; size];
                for seq in 0..iters as u64 {
                    stamp(&mut buf, i, seq);
                    f.tx.put(tw, f.dest, offset, &buf)?;
                    if (seq as usize + 1).is_multiple_of(window) {
                        f.tx.flush(tw, f.dest)?;
                    }
                }
                f.tx.flush(tw, f.dest)?;
                done[i].store(true, Ordering::Release);
            } else {
                // Only software RMA needs the target to progress.
                let vci = rw.lookup_vci()?;
                while !done[i].load(Ordering::Acquire) {
                    if f.rx.progress_vci(vci)? == 0 {
                        std::thread::sleep(Duration::from_micros(50));
                    }
                }
                let last = stamped(size, i, iters as u64 - 1);
                check(rw.region().read(offset, size) == last, || format!("pair {i}: target slot holds a stale put"))?;
            }
            Ok((t0, Instant::now()))
        })?;
        drop(wins);
        free_windows(owners)?;
        drop(flows);
        h.finish(world)?;
        Ok(span_rate(&spans[..t], t * iters))
    }
}
