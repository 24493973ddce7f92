//! The matching queues against a direct statement of the rule: a receive
//! takes the oldest unconsumed message it accepts, a message goes to the
//! oldest unmatched receive that accepts it.

use proptest::prelude::*;
use vcirt::matching::{Envelope, MatchQueues};
use vcirt::{ANY_SOURCE, ANY_TAG};

#[derive(Debug, Clone, Copy)]
enum Event {
    Post { comm: u32, source: i32, tag: i32 },
    Arrive { comm: u32, source: i32, tag: i32 },
}

fn event() -> impl Strategy<Value = Event> {
    let wild = |w: i32, hi: i32| prop_oneof![1 => Just(w), 2 => 0..hi];
    prop_oneof![
        (0u32..2, wild(ANY_SOURCE, 3), wild(ANY_TAG, 3)).prop_map(|(comm, source, tag)| Event::Post {
            comm,
            source,
            tag
        }),
        (0u32..2, 0i32..3, 0i32..3).prop_map(|(comm, source, tag)| Event::Arrive { comm, source, tag }),
    ]
}

/// Per receive (in post order), the arrival index of the message it got.
fn model(events: &[Event]) -> Vec<Option<usize>> {
    let ok = |p: (u32, i32, i32), m: (u32, i32, i32)| {
        p.0 == m.0 && (p.1 == ANY_SOURCE || p.1 == m.1) && (p.2 == ANY_TAG || p.2 == m.2)
    };
    let mut msgs: Vec<((u32, i32, i32), bool)> = Vec::new();
    let mut recvs: Vec<((u32, i32, i32), Option<usize>)> = Vec::new();
    for e in events {
        match *e {
            Event::Post { comm, source, tag } => {
                let p = (comm, source, tag);
                let hit = msgs.iter().position(|(m, used)| !used && ok(p, *m));
                if let Some(i) = hit {
                    msgs[i].1 = true;
                }
                recvs.push((p, hit));
            }
            Event::Arrive { comm, source, tag } => {
                let m = (comm, source, tag);
                let hit = recvs.iter().position(|(p, got)| got.is_none() && ok(*p, m));
                if let Some(i) = hit {
                    recvs[i].1 = Some(msgs.len());
                }
                msgs.push((m, hit.is_some()));
            }
        }
    }
    recvs.into_iter().map(|r| r.1).collect()
}

fn engine(events: &[Event]) -> Vec<Option<usize>> {
    let mut q: MatchQueues<usize, usize> = MatchQueues::new();
    let (mut recvs, mut msgs) = (0, 0);
    let mut out = Vec::new();
    for e in events {
        match *e {
            Event::Post { comm, source, tag } => {
                out.push(None);
                if let Some(m) = q.post_receive(Envelope::new(comm, source, tag), 0, recvs) {
                    out[m.recv] = Some(m.msg);
                }
                recvs += 1;
            }
            Event::Arrive { comm, source, tag } => {
                if let Some(m) = q.deliver_message(Envelope::new(comm, source, tag), 0, msgs) {
                    out[m.recv] = Some(m.msg);
                }
                msgs += 1;
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn engine_matches_model(events in prop::collection::vec(event(), 0..=100)) {
        prop_assert_eq!(engine(&events), model(&events));
    }
}
