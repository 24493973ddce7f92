//! Dedicated senders and a single polling receiver per rank.
//!
//! Each of the two ranks runs `senders` threads that stream to the other
//! rank and one receiver thread that drains everything addressed to it. With
//! communicators, sender `i` uses its own communicator and the receiver must
//! cycle over all of them, polling VCIs the local senders also drive. With
//! endpoints, every sender owns an endpoint and addresses the receiver's
//! endpoint directly.

use std::collections::VecDeque;
use std::time::Instant;

use vcirt::{Comm, Rank, Request, World, ANY_SOURCE};

use crate::common::{check, run_threads, span_rate, stamped, BenchError, BenchResult, Harness, Mode, RowKey, Table};

#[derive(Debug, Clone)]
pub struct SendersReceiver {
    pub mode: Mode,
    /// Sender threads per rank.
    pub senders: usize,
    pub msg_size: usize,
    /// Sends per waitall, and receives the receiver keeps posted.
    pub window: usize,
    /// Messages per sender.
    pub iters: usize,
}

/// Communicators of one rank: what each sender uses, and what the receiver
/// polls with the source it expects there.
struct Wiring {
    rank: Rank,
    send: Vec<(Comm, u32)>,
    recv: Vec<(Comm, i32)>,
}

impl SendersReceiver {
    pub fn run(&self, h: &Harness) -> BenchResult<Table> {
        if self.senders == 0 || self.window == 0 || self.iters == 0 {
            return Err(BenchError::Params("senders, window and iters must be positive".into()));
        }
        if !matches!(self.mode, Mode::Par | Mode::Ep) {
            return Err(BenchError::Params("senders runs in par (communicators) or ep (endpoints) mode".into()));
        }
        let key = RowKey {
            benchmark: "senders_receiver",
            mode: self.mode.label().into(),
            threads: self.senders,
            vcis: h.cfg.vcis,
            msg_size: self.msg_size,
            iters: self.iters,
        };
        h.repeat(&key, |_| Ok(vec![("msgs_per_sec", self.once(h)?)]))
    }

    fn wire(&self, world: &World) -> BenchResult<Vec<Wiring>> {
        let s = self.senders;
        let ranks = world.ranks();
        let mut out: Vec<Wiring> =
            ranks.iter().map(|r| Wiring { rank: r.clone(), send: Vec::new(), recv: Vec::new() }).collect();
        match self.mode {
            Mode::Par => {
                for _ in 0..s {
                    for (node, w) in out.iter_mut().enumerate() {
                        let c = w.rank.comm_dup(&w.rank.world_comm())?;
                        w.send.push((c.clone(), (1 - node) as u32));
                        w.recv.push((c, (1 - node) as i32));
                    }
                }
            }
            Mode::Ep => {
                for (node, w) in out.iter_mut().enumerate() {
                    let mut eps = w.rank.create_endpoints(&w.rank.world_comm(), s + 1)?;
                    let receiver = ((1 - node) * (s + 1) + s) as u32;
                    w.recv.push((eps.pop().expect("receiver endpoint"), ANY_SOURCE));
                    w.send.extend(eps.into_iter().map(|c| (c, receiver)));
                }
            }
            _ => unreachable!("checked in run"),
        }
        Ok(out)
    }

    /// One repetition; returns messages per second summed over both receivers.
    pub fn once(&self, h: &Harness) -> BenchResult<f64> {
        let s = self.senders;
        let world = World::init(h.cfg.clone(), 2, s + 1)?;
        let wiring = self.wire(&world)?;
        let spans = run_threads(2 * (s + 1), |id, start| {
            let (node, i) = (id / (s + 1), id % (s + 1));
            let w = &wiring[node];
            start.wait();
            let t0 = Instant::now();
            if i < s {
                self.send(w, i)?;
            } else {
                self.receive(w)?;
            }
            Ok((t0, Instant::now()))
        })?;
        drop(wiring);
        h.finish(world)?;
        Ok(span_rate(&spans, 2 * s * self.iters))
    }

    fn send(&self, w: &Wiring, i: usize) -> BenchResult<()> {
        let (comm, dest) = &w.send[i];
        let mut seq = 0;
        while seq < self.iters {
            let n = self.window.min(self.iters - seq);
            let reqs = (seq..seq + n)
                .map(|k| w.rank.isend(comm, *dest, i as i32, stamped(self.msg_size, i, k as u64)))
                .collect::<Result<Vec<_>, _>>()?;
            w.rank.waitall(reqs)?;
            seq += n;
        }
        Ok(())
    }

    /// Keeps receives posted on every polled communicator and cycles over
    /// them, testing the oldest receive of each, until all senders are drained.
    fn receive(&self, w: &Wiring) -> BenchResult<()> {
        let (s, iters, size) = (self.senders, self.iters, self.msg_size);
        let depth = (self.window / w.recv.len()).max(1);
        // Receives still to post per polled communicator.
        let mut unposted: Vec<usize> = vec![s * iters / w.recv.len(); w.recv.len()];
        let mut posted: Vec<VecDeque<Request>> = w.recv.iter().map(|_| VecDeque::new()).collect();
        let mut next_seq = vec![0usize; s];
        let mut left = s * iters;
        while left > 0 {
            let before = left;
            for (c, (comm, source)) in w.recv.iter().enumerate() {
                while posted[c].len() < depth && unposted[c] > 0 {
                    posted[c].push_back(w.rank.irecv(comm, *source, vcirt::ANY_TAG, size)?);
                    unposted[c] -= 1;
                }
                let Some(front) = posted[c].front_mut() else { continue };
                let Some(done) = w.rank.test(front)? else { continue };
                posted[c].pop_front();
                let flow = done.status.map_or(usize::MAX, |st| st.tag as usize);
                check(flow < s, || format!("message with unexpected tag {flow}"))?;
                let seq = next_seq[flow];
                check(done.data == stamped(size, flow, seq as u64), || {
                    format!("sender {flow} message {seq} corrupted or out of order")
                })?;
                next_seq[flow] += 1;
                left -= 1;
            }
            if left == before {
                std::thread::yield_now();
            }
        }
        Ok(())
    }
}
