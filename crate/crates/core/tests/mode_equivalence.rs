//! A single-threaded program produces the same results under every
//! critical-section mode and VCI count.

use proptest::prelude::*;
use vcirt::{AccOrdering, Config, CsMode, Region, WinOptions, World, ANY_SOURCE, ANY_TAG};

#[derive(Debug, Clone)]
enum Step {
    Send { comm: usize, tag: i32, len: usize },
    Recv { comm: usize, any_source: bool, any_tag: bool, tag: i32 },
    Put { offset: usize, value: u8 },
    Acc { offset: usize, value: i64 },
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        (0usize..3, 0i32..3, 0usize..20_000).prop_map(|(comm, tag, len)| Step::Send { comm, tag, len }),
        (0usize..3, any::<bool>(), any::<bool>(), 0i32..3).prop_map(|(comm, any_source, any_tag, tag)| Step::Recv {
            comm,
            any_source,
            any_tag,
            tag
        }),
        (0usize..8, any::<u8>()).prop_map(|(o, value)| Step::Put { offset: o * 8, value }),
        (0usize..8, -1000i64..1000).prop_map(|(o, value)| Step::Acc { offset: 64 + o * 8, value }),
    ]
}

fn quiesce(ranks: &[&vcirt::Rank]) {
    while ranks.iter().map(|r| r.progress().unwrap()).sum::<usize>() > 0 {}
}

/// What rank 1 observed: (communicator, tag, payload) per completed receive,
/// in post order, followed by the window contents.
type Observed = (Vec<(usize, i32, Vec<u8>)>, Vec<u8>);

/// Runs the program from rank 0 to rank 1. Receives left unmatched get a
/// filler message each, and leftover messages are drained with wildcard
/// receives, so every run ends clean.
fn run(steps: &[Step], mode: CsMode, vcis: usize) -> Observed {
    let cfg = Config { cs_mode: mode, vcis, injection_cost: 0, eager_threshold: 4096, ..Config::default() };
    let w = World::init(cfg, 2, 1).unwrap();
    let (a, b) = (w.rank(0), w.rank(1));
    let comms: Vec<_> =
        (0..3).map(|_| (a.comm_dup(&a.world_comm()).unwrap(), b.comm_dup(&b.world_comm()).unwrap())).collect();
    let region = Region::new(128);
    let wa = a.win_create(&a.world_comm(), Region::new(128), WinOptions::ordering(AccOrdering::Ordered)).unwrap();
    let wb = b.win_create(&b.world_comm(), region.clone(), WinOptions::default()).unwrap();
    let mut sends = Vec::new();
    let mut sent = [0usize; 3];
    let mut recvs = Vec::new();
    for (k, s) in steps.iter().enumerate() {
        match *s {
            Step::Send { comm, tag, len } => {
                sends.push(a.isend(&comms[comm].0, 1, tag, vec![k as u8; len]).unwrap());
                sent[comm] += 1;
            }
            Step::Recv { comm, any_source, any_tag, tag } => {
                let source = if any_source { ANY_SOURCE } else { 0 };
                let tag = if any_tag { ANY_TAG } else { tag };
                recvs.push((comm, tag, b.irecv(&comms[comm].1, source, tag, 20_000).unwrap()));
            }
            Step::Put { offset, value } => {
                a.put(&wa, 1, offset, &[value; 8]).unwrap();
                a.flush(&wa, 1).unwrap();
            }
            Step::Acc { offset, value } => a.accumulate(&wa, 1, offset, &[value]).unwrap(),
        }
    }
    a.flush(&wa, 1).unwrap();
    quiesce(&[&a, &b]);
    let mut got = Vec::new();
    let mut received = [0usize; 3];
    for (comm, tag, mut r) in recvs {
        let c = match b.test(&mut r).unwrap() {
            Some(c) => c,
            None => {
                let filler = a.isend(&comms[comm].0, 1, tag.max(0), vec![0xee]).unwrap();
                sends.push(filler);
                sent[comm] += 1;
                quiesce(&[&a, &b]);
                b.test(&mut r).unwrap().expect("filler matches the oldest open receive")
            }
        };
        received[comm] += 1;
        got.push((comm, c.status.unwrap().tag, c.data));
    }
    for comm in 0..3 {
        for _ in received[comm]..sent[comm] {
            // Single-threaded: rendezvous data needs the sender progressed too.
            let mut r = b.irecv(&comms[comm].1, ANY_SOURCE, ANY_TAG, 20_000).unwrap();
            quiesce(&[&a, &b]);
            let c = b.test(&mut r).unwrap().expect("leftover message");
            got.push((comm, c.status.unwrap().tag, c.data));
        }
    }
    a.waitall(sends).unwrap();
    std::thread::scope(|s| {
        s.spawn(|| b.win_free(wb).unwrap());
        a.win_free(wa).unwrap();
    });
    for (ca, cb) in &comms {
        std::thread::scope(|s| {
            s.spawn(|| b.comm_free(cb).unwrap());
            a.comm_free(ca).unwrap();
        });
    }
    assert!(w.finalize().unwrap().conserved());
    (got, region.read(0, 128))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn results_do_not_depend_on_mode_or_vci_count(steps in prop::collection::vec(step(), 0..40)) {
        let reference = run(&steps, CsMode::Global, 1);
        for mode in [CsMode::Global, CsMode::Fg, CsMode::FgCache] {
            for vcis in [1, 16] {
                prop_assert_eq!(&run(&steps, mode, vcis), &reference, "{:?} with {} vcis", mode, vcis);
            }
        }
    }
}
