use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::model::{InstanceId, LogicalClock, Packet};

/// Dedupe identity: a packet and the replay it belongs to, if any. Replay
/// copies travel alongside originals until their target strips the mark.
pub type QueueKey = (LogicalClock, Option<InstanceId>);

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueStats {
    pub enqueued: u64,
    pub suppressed: u64,
    pub delivered: u64,
    /// Deliveries of a key that had already been delivered once.
    pub duplicates_delivered: u64,
    pub max_depth: usize,
}

/// Per-instance input queue with duplicate suppression by clock.
#[derive(Clone, Debug)]
pub struct MessageQueue {
    pending: VecDeque<Packet>,
    seen: BTreeSet<QueueKey>,
    delivered_ever: BTreeSet<QueueKey>,
    held: VecDeque<Packet>,
    dedupe: bool,
    pub stats: QueueStats,
}

pub fn key_of(pkt: &Packet) -> QueueKey {
    (pkt.clock, pkt.replay_target())
}

impl MessageQueue {
    pub fn new(dedupe: bool) -> Self {
        MessageQueue {
            pending: VecDeque::new(),
            seen: BTreeSet::new(),
            delivered_ever: BTreeSet::new(),
            held: VecDeque::new(),
            dedupe,
            stats: QueueStats::default(),
        }
    }

    /// Admits a packet unless its key was seen before. Control packets are
    /// never deduplicated.
    pub fn admit(&mut self, pkt: &Packet) -> bool {
        if pkt.control {
            return true;
        }
        let fresh = self.seen.insert(key_of(pkt));
        if !fresh && self.dedupe {
            self.stats.suppressed += 1;
            return false;
        }
        true
    }

    /// Appends after admission.
    pub fn enqueue(&mut self, pkt: Packet) -> bool {
        if !self.admit(&pkt) {
            return false;
        }
        self.push_back(pkt);
        true
    }

    pub fn push_back(&mut self, pkt: Packet) {
        self.stats.enqueued += 1;
        self.pending.push_back(pkt);
        self.stats.max_depth = self.stats.max_depth.max(self.pending.len());
    }

    /// Puts already-admitted packets at the head, keeping their order.
    pub fn push_front_all(&mut self, pkts: Vec<Packet>) {
        for p in pkts.into_iter().rev() {
            self.stats.enqueued += 1;
            self.pending.push_front(p);
        }
        self.stats.max_depth = self.stats.max_depth.max(self.pending.len());
    }

    pub fn dequeue(&mut self) -> Option<Packet> {
        let p = self.pending.pop_front()?;
        if !p.control {
            self.stats.delivered += 1;
            if !self.delivered_ever.insert(key_of(&p)) {
                self.stats.duplicates_delivered += 1;
            }
        }
        Some(p)
    }

    /// Withholds an admitted packet until [`release_held`](Self::release_held).
    pub fn hold(&mut self, pkt: Packet) {
        self.held.push_back(pkt);
    }

    pub fn held_len(&self) -> usize {
        self.held.len()
    }

    /// Moves every held packet to the tail of the queue, in arrival order.
    pub fn release_held(&mut self) {
        while let Some(p) = self.held.pop_front() {
            self.push_back(p);
        }
    }

    pub fn prune(&mut self, clock: LogicalClock) {
        let lo = (clock, None);
        let keys: Vec<QueueKey> = self.seen.range(lo..).take_while(|k| k.0 == clock).copied().collect();
        for k in keys {
            self.seen.remove(&k);
        }
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Packet> {
        self.pending.iter().chain(self.held.iter())
    }

    /// Drops everything (the owning instance failed).
    pub fn clear(&mut self) {
        self.pending.clear();
        self.held.clear();
    }

    pub fn seen_len(&self) -> usize {
        self.seen.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Direction, FlowKey, Mark, Protocol, TcpFlags};

    fn pkt(c: u64) -> Packet {
        Packet {
            clock: LogicalClock::new(0, c).unwrap(),
            flow: FlowKey::new([1, 1, 1, 1].into(), [2, 2, 2, 2].into(), 1, 2, Protocol::Udp),
            direction: Direction::Forward,
            tcp_flags: TcpFlags::empty(),
            payload_len: 0,
            payload_tag: String::new(),
            vec: 0,
            marks: Vec::new(),
            ingress_time: 0,
            trace_index: c,
            control: false,
            replayed: false,
            session: None,
        }
    }

    #[test]
    fn same_clock_delivered_once() {
        let mut q = MessageQueue::new(true);
        assert!(q.enqueue(pkt(1)));
        assert!(!q.enqueue(pkt(1)));
        assert!(q.enqueue(pkt(2)));
        assert_eq!(q.dequeue().unwrap().trace_index, 1);
        assert_eq!(q.dequeue().unwrap().trace_index, 2);
        assert!(q.dequeue().is_none());
        assert_eq!(q.stats.suppressed, 1);
        assert_eq!(q.stats.duplicates_delivered, 0);
    }

    #[test]
    fn replay_copies_are_distinct_until_stripped() {
        let mut q = MessageQueue::new(true);
        let mut r = pkt(1);
        r.marks.push(Mark::replay(InstanceId(9)));
        assert!(q.enqueue(pkt(1)));
        assert!(q.enqueue(r.clone()));
        r.marks.clear();
        assert!(!q.enqueue(r));
    }

    #[test]
    fn disabled_dedupe_counts_duplicates() {
        let mut q = MessageQueue::new(false);
        q.enqueue(pkt(1));
        q.enqueue(pkt(1));
        q.dequeue();
        q.dequeue();
        assert_eq!(q.stats.duplicates_delivered, 1);
    }

    #[test]
    fn held_packets_release_in_order() {
        let mut q = MessageQueue::new(true);
        q.enqueue(pkt(1));
        for c in 2..5 {
            let p = pkt(c);
            assert!(q.admit(&p));
            q.hold(p);
        }
        assert_eq!(q.len(), 1);
        q.release_held();
        let order: Vec<u64> = std::iter::from_fn(|| q.dequeue()).map(|p| p.trace_index).collect();
        assert_eq!(order, vec![1, 2, 3, 4]);
    }

    #[test]
    fn prune_forgets_clock() {
        let mut q = MessageQueue::new(true);
        q.enqueue(pkt(1));
        q.prune(LogicalClock::new(0, 1).unwrap());
        assert_eq!(q.seen_len(), 0);
    }
}
