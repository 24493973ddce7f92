//! Messages from one thread on one communicator match in send order, also
//! when other threads send with the same envelope concurrently.

use std::collections::VecDeque;

use vcirt::{Config, World};

#[test]
fn per_thread_order_survives_concurrent_senders() {
    const THREADS: usize = 4;
    const PER: usize = 1000;
    let cfg = Config { injection_cost: 0, eager_threshold: 256, ..Config::default() };
    let w = World::init(cfg, 2, THREADS).unwrap();
    let (a, b) = (w.rank(0), w.rank(1));
    let (ca, cb) = (a.comm_dup(&a.world_comm()).unwrap(), b.comm_dup(&b.world_comm()).unwrap());
    let len = |seq: usize| if seq % 50 == 49 { 1024 } else { 8 };
    std::thread::scope(|s| {
        for t in 0..THREADS {
            let (a, ca) = (&a, &ca);
            s.spawn(move || {
                let mut pending = VecDeque::new();
                for seq in 0..PER {
                    let mut p = vec![0u8; len(seq)];
                    p[..8].copy_from_slice(&((t << 32 | seq) as u64).to_le_bytes());
                    pending.push_back(a.isend(ca, 1, 7, p).unwrap());
                    if pending.len() > 16 {
                        a.wait(pending.pop_front().unwrap()).unwrap();
                    }
                }
                a.waitall(pending.into()).unwrap();
            });
        }
        let mut next = [0usize; THREADS];
        for _ in 0..THREADS * PER {
            let c = b.recv(&cb, 0, 7, 1024).unwrap();
            let stamp = u64::from_le_bytes(c.data[..8].try_into().unwrap()) as usize;
            let (t, seq) = (stamp >> 32, stamp & 0xffff_ffff);
            assert_eq!(seq, next[t], "sender {t} overtaken");
            assert_eq!(c.data.len(), len(seq));
            next[t] += 1;
        }
    });
    assert!(w.finalize().unwrap().conserved());
}
