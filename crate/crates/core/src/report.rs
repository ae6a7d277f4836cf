//! Run reports and the event-log digest.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{Direction, FlowKey, InstanceId, ObjectId, Time, Value};
use crate::nfs::Alert;
use crate::store::HistoryEntry;

/// Running SHA-256 over one line per simulator event.
#[derive(Clone)]
pub struct EventLog {
    hasher: Sha256,
    pub events: u64,
    keep: Option<Vec<String>>,
}

impl Default for EventLog {
    fn default() -> Self {
        EventLog::new(false)
    }
}

impl EventLog {
    /// `keep` retains the lines for debugging.
    pub fn new(keep: bool) -> Self {
        EventLog {
            hasher: Sha256::new(),
            events: 0,
            keep: keep.then(Vec::new),
        }
    }

    pub fn record(&mut self, time: Time, actor: &str, kind: &str, payload: &str) {
        let line = format!("{time} {actor} {kind} {payload}\n");
        self.hasher.update(line.as_bytes());
        self.events += 1;
        if let Some(k) = self.keep.as_mut() {
            k.push(line);
        }
    }

    pub fn lines(&self) -> Option<&[String]> {
        self.keep.as_deref()
    }

    pub fn digest(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }
}

/// A packet delivered to an end host.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OutputRecord {
    pub trace_index: u64,
    pub direction: Direction,
    /// Client-view flow at ingress.
    pub flow: FlowKey,
    /// Wire tuple as delivered.
    pub tuple: FlowKey,
    pub payload_len: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub ingested: u64,
    pub outputs: u64,
    /// Packets an instance dequeued more than once.
    pub delivered_duplicates: u64,
    /// Outputs a host received more than once.
    pub egress_duplicates: u64,
    pub suppressed: u64,
    pub duplicate_applications: u64,
    pub emulated: u64,
    pub ownership_violations: u64,
    pub store_errors: u64,
    pub nf_errors: u64,
    pub fatal_ops: u64,
    pub retransmissions: u64,
    pub deleted: u64,
    pub unknown_deletes: u64,
    pub dropped_threshold: u64,
    pub max_root_log: usize,
    pub processed: BTreeMap<InstanceId, u64>,
}

/// Order evidence for one moved flow.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowOrder {
    pub flow: FlowKey,
    /// Clocks in the order upstream senders emitted the flow's packets to
    /// the vertex.
    pub emitted: Vec<u64>,
    /// Per per-flow object (declared index): clocks in store application order.
    pub applied: BTreeMap<u16, Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandoverRecord {
    pub session: u64,
    pub vertex: String,
    pub from: InstanceId,
    pub to: InstanceId,
    pub started: Time,
    pub released: Option<Time>,
    pub completed: Option<Time>,
    pub moved_flows: usize,
    /// Packets of moved flows queued at or travelling towards the old
    /// instance when the move started.
    pub in_transit: u64,
    pub flows: Vec<FlowOrder>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailoverRecord {
    pub session: u64,
    pub vertex: String,
    pub failed: InstanceId,
    pub replacement: InstanceId,
    pub crashed_at: Time,
    pub recovered_at: Option<Time>,
    /// Logged packets whose path crossed the failed instance.
    pub in_flight: u64,
    /// Packets the replacement re-executed in replay mode.
    pub replayed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloneRecord {
    pub session: u64,
    pub original: InstanceId,
    pub clone: InstanceId,
    pub started: Time,
    pub winner: Option<InstanceId>,
    pub processed_original: u64,
    pub processed_clone: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootFailureRecord {
    pub root: u16,
    pub crashed_at: Time,
    pub recovered_at: Option<Time>,
    /// Trace indices that were logged but not yet sent.
    pub lost_unsent: Vec<u64>,
    pub persisted: u64,
    pub resumed_at: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreRecoveryRecord {
    pub shard: u16,
    pub crashed_at: Time,
    pub recovered_at: Time,
    pub checkpoint_time: Time,
    pub from_checkpoint: usize,
    pub from_read: usize,
    pub replayed_ops: usize,
    pub cached_objects: usize,
    pub reads_checked: usize,
    pub read_mismatches: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub digest: String,
    pub events: u64,
    pub end_time: Time,
    /// Final store contents across all shards.
    pub store: Vec<(ObjectId, Value)>,
    /// Per-object application history, when recorded.
    pub history: Vec<(ObjectId, Vec<HistoryEntry>)>,
    pub outputs: Vec<OutputRecord>,
    pub alerts: Vec<Alert>,
    pub metrics: Metrics,
    pub handovers: Vec<HandoverRecord>,
    pub failovers: Vec<FailoverRecord>,
    pub clones: Vec<CloneRecord>,
    pub root_failures: Vec<RootFailureRecord>,
    /// Clock counters each root assigned, in assignment order.
    pub clocks: BTreeMap<u16, Vec<u64>>,
    pub store_recoveries: Vec<StoreRecoveryRecord>,
    /// (vertex name, plan digest) at the end of the run.
    pub plans: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn store_map(&self) -> BTreeMap<ObjectId, Value> {
        self.store.iter().cloned().collect()
    }

    pub fn history_map(&self) -> BTreeMap<ObjectId, Vec<HistoryEntry>> {
        self.history.iter().cloned().collect()
    }

    /// One-paragraph human summary.
    pub fn summary(&self) -> String {
        let m = &self.metrics;
        let mut s = format!(
            "{}: seed {} events {} end {} ns\n  ingested {} outputs {} alerts {} objects {}\n  duplicates: delivered {} egress {} applied {} (suppressed {}, emulated {})\n  digest {}\n",
            self.name,
            self.seed,
            self.events,
            self.end_time,
            m.ingested,
            m.outputs,
            self.alerts.len(),
            self.store.len(),
            m.delivered_duplicates,
            m.egress_duplicates,
            m.duplicate_applications,
            m.suppressed,
            m.emulated,
            self.digest
        );
        for f in &self.failovers {
            s += &format!(
                "  failover {} -> {} in-flight {} replayed {}\n",
                f.failed, f.replacement, f.in_flight, f.replayed
            );
        }
        for h in &self.handovers {
            s += &format!(
                "  handover {} -> {} flows {} in-transit {}\n",
                h.from, h.to, h.moved_flows, h.in_transit
            );
        }
        for c in &self.clones {
            s += &format!("  clone {} of {} winner {:?}\n", c.clone, c.original, c.winner);
        }
        for r in &self.root_failures {
            s += &format!(
                "  root {} crash lost {} persisted {} resumed {}\n",
                r.root,
                r.lost_unsent.len(),
                r.persisted,
                r.resumed_at
            );
        }
        for r in &self.store_recoveries {
            s += &format!(
                "  shard {} recovered: checkpoint@{} case1 {} case2 {} mismatches {}\n",
                r.shard, r.checkpoint_time, r.from_checkpoint, r.from_read, r.read_mismatches
            );
        }
        for w in &self.warnings {
            s += &format!("  warning: {w}\n");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_depends_on_every_line() {
        let mut a = EventLog::new(true);
        let mut b = EventLog::new(false);
        a.record(1, "r0", "ingest", "0");
        b.record(1, "r0", "ingest", "0");
        assert_eq!(a.digest(), b.digest());
        b.record(2, "i1", "deq", "1");
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.lines().unwrap().len(), 1);
    }
}
