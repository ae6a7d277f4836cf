use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::{InstanceId, LogicalClock, Packet, RootId};

pub const DEFAULT_PERSIST_EVERY: u64 = 100;
pub const DEFAULT_DROP_THRESHOLD: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub pkt: Packet,
    pub first_hop: InstanceId,
    /// Vector reported by the first delete request.
    pub final_vec: Option<u32>,
    /// Tags committed by the store for this clock.
    pub committed: BTreeSet<u32>,
}

impl LogEntry {
    pub fn recon(&self) -> u32 {
        self.committed.iter().fold(0, |acc, t| acc ^ t)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeleteOutcome {
    Deleted,
    /// Some tracked update has not been committed yet.
    Pending,
    Unknown,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootStats {
    pub ingested: u64,
    pub dropped_threshold: u64,
    pub deleted: u64,
    pub unknown_deletes: u64,
    pub max_log: usize,
}

/// Clock assignment, packet log and delete reconciliation for one root.
#[derive(Clone, Debug)]
pub struct RootState {
    pub id: RootId,
    bits: u32,
    next_counter: u64,
    persisted: u64,
    persist_every: u64,
    drop_threshold: usize,
    log: BTreeMap<LogicalClock, LogEntry>,
    pub stats: RootStats,
}

impl RootState {
    pub fn new(id: RootId, persist_every: u64, drop_threshold: usize) -> Self {
        RootState {
            id,
            bits: crate::model::DEFAULT_ROOT_BITS,
            next_counter: 1,
            persisted: 0,
            persist_every: persist_every.max(1),
            drop_threshold,
            log: BTreeMap::new(),
            stats: RootStats::default(),
        }
    }

    /// Replacement root after a crash: resumes past every clock the failed
    /// root may have handed out.
    pub fn recover(id: RootId, persisted: u64, persist_every: u64, drop_threshold: usize) -> Self {
        let mut r = RootState::new(id, persist_every, drop_threshold);
        r.next_counter = persisted + r.persist_every;
        r.persisted = persisted;
        r
    }

    /// Counter value durably stored.
    pub fn persisted(&self) -> u64 {
        self.persisted
    }

    pub fn next_counter(&self) -> u64 {
        self.next_counter
    }

    /// Assigns a clock and logs the packet, or returns `None` when the log is
    /// full (the packet is dropped).
    pub fn ingest(&mut self, mut pkt: Packet, first_hop: InstanceId) -> Option<Packet> {
        if self.log.len() >= self.drop_threshold {
            self.stats.dropped_threshold += 1;
            return None;
        }
        let counter = self.next_counter;
        self.next_counter += 1;
        if counter.is_multiple_of(self.persist_every) {
            self.persisted = counter;
        }
        pkt.clock = LogicalClock::with_bits(self.id.0 as u64, counter, self.bits).expect("clock counter overflow");
        pkt.vec = 0;
        self.log.insert(
            pkt.clock,
            LogEntry {
                pkt: pkt.clone(),
                first_hop,
                final_vec: None,
                committed: BTreeSet::new(),
            },
        );
        self.stats.ingested += 1;
        self.stats.max_log = self.stats.max_log.max(self.log.len());
        Some(pkt)
    }

    /// Records a commit signal; may complete a pending delete.
    pub fn commit(&mut self, clock: LogicalClock, tag: u32) -> DeleteOutcome {
        let Some(e) = self.log.get_mut(&clock) else {
            return DeleteOutcome::Unknown;
        };
        e.committed.insert(tag);
        self.try_delete(clock)
    }

    /// Delete request from the end of the chain.
    pub fn delete(&mut self, clock: LogicalClock, final_vec: u32) -> DeleteOutcome {
        let Some(e) = self.log.get_mut(&clock) else {
            self.stats.unknown_deletes += 1;
            return DeleteOutcome::Unknown;
        };
        e.final_vec.get_or_insert(final_vec);
        self.try_delete(clock)
    }

    fn try_delete(&mut self, clock: LogicalClock) -> DeleteOutcome {
        let e = &self.log[&clock];
        match e.final_vec {
            Some(v) if v ^ e.recon() == 0 => {
                self.log.remove(&clock);
                self.stats.deleted += 1;
                DeleteOutcome::Deleted
            }
            _ => DeleteOutcome::Pending,
        }
    }

    pub fn is_logged(&self, clock: LogicalClock) -> bool {
        self.log.contains_key(&clock)
    }

    pub fn log(&self) -> &BTreeMap<LogicalClock, LogEntry> {
        &self.log
    }

    pub fn log_len(&self) -> usize {
        self.log.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{update_tag, Direction, FlowKey, Protocol, TcpFlags};

    fn pkt() -> Packet {
        Packet {
            clock: LogicalClock::ZERO,
            flow: FlowKey::new([1, 1, 1, 1].into(), [2, 2, 2, 2].into(), 1, 2, Protocol::Udp),
            direction: Direction::Forward,
            tcp_flags: TcpFlags::empty(),
            payload_len: 0,
            payload_tag: String::new(),
            vec: 0,
            marks: Vec::new(),
            ingress_time: 0,
            trace_index: 0,
            control: false,
            replayed: false,
            session: None,
        }
    }

    #[test]
    fn counters_are_monotone() {
        let mut r = RootState::new(RootId(0), 100, 10);
        let c: Vec<u64> = (0..3).map(|_| r.ingest(pkt(), InstanceId(1)).unwrap().clock.counter()).collect();
        assert_eq!(c, vec![1, 2, 3]);
    }

    #[test]
    fn full_log_drops() {
        let mut r = RootState::new(RootId(0), 100, 2);
        assert!(r.ingest(pkt(), InstanceId(1)).is_some());
        assert!(r.ingest(pkt(), InstanceId(1)).is_some());
        assert!(r.ingest(pkt(), InstanceId(1)).is_none());
        assert_eq!(r.log_len(), 2);
        assert_eq!(r.stats.dropped_threshold, 1);
    }

    #[test]
    fn recovery_skips_unpersisted_clocks() {
        let mut r = RootState::new(RootId(0), 100, 1000);
        for _ in 0..399 {
            r.ingest(pkt(), InstanceId(1));
            let c = r.log().keys().next().copied().unwrap();
            r.delete(c, 0);
        }
        assert_eq!(r.persisted(), 300);
        let mut r2 = RootState::recover(RootId(0), r.persisted(), 100, 1000);
        assert_eq!(r2.ingest(pkt(), InstanceId(1)).unwrap().clock.counter(), 400);
    }

    #[test]
    fn delete_waits_for_every_commit() {
        let mut r = RootState::new(RootId(0), 100, 10);
        let c = r.ingest(pkt(), InstanceId(1)).unwrap().clock;
        let (a, b) = (update_tag(1, 0), update_tag(2, 3));
        r.commit(c, a);
        assert_eq!(r.delete(c, a ^ b), DeleteOutcome::Pending);
        assert!(r.is_logged(c));
        assert_eq!(r.commit(c, a), DeleteOutcome::Pending);
        assert_eq!(r.commit(c, b), DeleteOutcome::Deleted);
        assert!(!r.is_logged(c));
    }

    #[test]
    fn untracked_packet_deletes_at_once() {
        let mut r = RootState::new(RootId(0), 100, 10);
        let c = r.ingest(pkt(), InstanceId(1)).unwrap().clock;
        assert_eq!(r.delete(c, 0), DeleteOutcome::Deleted);
        assert_eq!(r.delete(c, 0), DeleteOutcome::Unknown);
    }
}
