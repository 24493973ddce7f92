//! Point-to-point matching: posted-receive and unexpected-message queues.
//!
//! One [`MatchQueues`] pair exists per VCI and is shared by every
//! communicator mapped to that VCI; entries are keyed by the full envelope,
//! so communicators never see each other's traffic. Both queues are scanned
//! front to back, which gives MPI's nonovertaking order: among entries that
//! could match, the oldest one wins.

use std::collections::VecDeque;

/// Wildcard source for receives.
pub const ANY_SOURCE: i32 = -1;
/// Wildcard tag for receives. Matches only non-negative (user) tags.
pub const ANY_TAG: i32 = -1;

/// The `<communicator, source rank, tag>` triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Envelope {
    pub comm_id: u32,
    pub source: i32,
    pub tag: i32,
}

impl Envelope {
    pub fn new(comm_id: u32, source: i32, tag: i32) -> Self {
        Self { comm_id, source, tag }
    }

    /// Whether a receive pattern (`self`) accepts an arriving envelope.
    #[inline]
    pub fn accepts(&self, arrived: &Envelope) -> bool {
        self.comm_id == arrived.comm_id
            && (self.source == ANY_SOURCE || self.source == arrived.source)
            && (if self.tag == ANY_TAG { arrived.tag >= 0 } else { self.tag == arrived.tag })
    }

    pub fn has_wildcard(&self) -> bool {
        self.source == ANY_SOURCE || self.tag == ANY_TAG
    }
}

/// A receive waiting for a message.
#[derive(Debug)]
pub struct Posted<R> {
    pub pattern: Envelope,
    /// Destination rank in the communicator; distinguishes endpoints that share a VCI.
    pub dst: u32,
    pub recv: R,
}

/// A message that arrived before any matching receive.
#[derive(Debug)]
pub struct Arrived<M> {
    pub envelope: Envelope,
    pub dst: u32,
    pub msg: M,
}

/// A receive paired with a message.
#[derive(Debug)]
pub struct Matched<R, M> {
    pub recv: R,
    pub envelope: Envelope,
    pub msg: M,
}

#[derive(Debug)]
pub struct MatchQueues<M, R> {
    posted: VecDeque<Posted<R>>,
    unexpected: VecDeque<Arrived<M>>,
}

impl<M, R> Default for MatchQueues<M, R> {
    fn default() -> Self {
        Self { posted: VecDeque::new(), unexpected: VecDeque::new() }
    }
}

impl<M, R> MatchQueues<M, R> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Matches a new receive against the unexpected queue, or appends it to
    /// the posted queue.
    pub fn post_receive(&mut self, pattern: Envelope, dst: u32, recv: R) -> Option<Matched<R, M>> {
        let hit = self.unexpected.iter().position(|a| a.dst == dst && pattern.accepts(&a.envelope));
        match hit {
            Some(i) => {
                let a = self.unexpected.remove(i).expect("index in range");
                Some(Matched { recv, envelope: a.envelope, msg: a.msg })
            }
            None => {
                self.posted.push_back(Posted { pattern, dst, recv });
                None
            }
        }
    }

    /// Matches an arriving message against the posted queue, or appends it to
    /// the unexpected queue.
    pub fn deliver_message(&mut self, envelope: Envelope, dst: u32, msg: M) -> Option<Matched<R, M>> {
        debug_assert!(envelope.source >= 0, "sends never carry a wildcard source");
        let hit = self.posted.iter().position(|p| p.dst == dst && p.pattern.accepts(&envelope));
        match hit {
            Some(i) => {
                let p = self.posted.remove(i).expect("index in range");
                Some(Matched { recv: p.recv, envelope, msg })
            }
            None => {
                self.unexpected.push_back(Arrived { envelope, dst, msg });
                None
            }
        }
    }

    pub fn posted_len(&self) -> usize {
        self.posted.len()
    }

    pub fn unexpected_len(&self) -> usize {
        self.unexpected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posted.is_empty() && self.unexpected.is_empty()
    }

    pub fn unexpected(&self) -> impl Iterator<Item = &Arrived<M>> {
        self.unexpected.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type Q = MatchQueues<&'static str, u32>;

    #[test]
    fn wildcard_source_hits_unexpected() {
        let mut q = Q::new();
        assert!(q.deliver_message(Envelope::new(1, 0, 5), 0, "m").is_none());
        let m = q.post_receive(Envelope::new(1, ANY_SOURCE, 5), 0, 7).unwrap();
        assert_eq!((m.recv, m.msg), (7, "m"));
        assert!(q.is_empty());
    }

    #[test]
    fn earlier_unexpected_message_matches_first() {
        let mut q = Q::new();
        q.deliver_message(Envelope::new(1, 0, 5), 0, "A");
        q.deliver_message(Envelope::new(1, 0, 5), 0, "B");
        assert_eq!(q.post_receive(Envelope::new(1, 0, 5), 0, 0).unwrap().msg, "A");
        assert_eq!(q.post_receive(Envelope::new(1, 0, 5), 0, 0).unwrap().msg, "B");
    }

    #[test]
    fn other_communicator_is_not_matched() {
        let mut q = Q::new();
        q.deliver_message(Envelope::new(2, 0, 5), 0, "m");
        assert!(q.post_receive(Envelope::new(1, 0, 5), 0, 1).is_none());
        assert_eq!(q.posted_len(), 1);
        assert_eq!(q.unexpected_len(), 1);
    }

    #[test]
    fn double_wildcard_receive_matches() {
        let mut q = Q::new();
        q.post_receive(Envelope::new(1, ANY_SOURCE, ANY_TAG), 0, 3);
        let m = q.deliver_message(Envelope::new(1, 3, 9), 0, "x").unwrap();
        assert_eq!(m.recv, 3);
        assert_eq!(m.envelope, Envelope::new(1, 3, 9));
    }

    #[test]
    fn earlier_posted_exact_beats_later_wildcard() {
        let mut q = Q::new();
        q.post_receive(Envelope::new(1, 0, 1), 0, 10);
        q.post_receive(Envelope::new(1, ANY_SOURCE, 1), 0, 20);
        assert_eq!(q.deliver_message(Envelope::new(1, 0, 1), 0, "m").unwrap().recv, 10);
        assert_eq!(q.posted_len(), 1);
    }

    #[test]
    fn unmatched_arrival_grows_unexpected() {
        let mut q = Q::new();
        q.deliver_message(Envelope::new(1, 0, 1), 0, "m");
        assert_eq!(q.unexpected_len(), 1);
    }

    #[test]
    fn any_tag_skips_internal_tags() {
        let mut q = Q::new();
        q.deliver_message(Envelope::new(1, 0, -5), 0, "internal");
        assert!(q.post_receive(Envelope::new(1, 0, ANY_TAG), 0, 1).is_none());
    }

    #[test]
    fn destination_rank_separates_endpoints() {
        let mut q = Q::new();
        q.deliver_message(Envelope::new(1, 0, 1), 3, "for-3");
        assert!(q.post_receive(Envelope::new(1, 0, 1), 4, 1).is_none());
        assert_eq!(q.post_receive(Envelope::new(1, 0, 1), 3, 2).unwrap().msg, "for-3");
    }
}
