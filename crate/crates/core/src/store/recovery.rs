//! Store-instance crash recovery.
//!
//! Per-flow objects (and shared objects that were cached at a single
//! instance) come back from the surviving NF instances' cache dumps. Shared
//! objects come back from the last checkpoint plus the NF-local write-ahead
//! logs: either by replaying everything after the checkpoint's TS, or, when
//! some instance read the object after the checkpoint, by starting from the
//! logged read whose TS `ts_select` picks and replaying everything after it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Checkpoint, CustomOps, StoreError, StoreInstance};
use crate::model::{InstanceId, LogicalClock, ObjectId, OpMode, Operation, ShardId, Ts, TsEntry, Value};

/// A shared-state read as logged by the client.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadRecord {
    pub key: ObjectId,
    pub value: Value,
    pub ts: Ts,
    pub read_seq: u64,
}

/// What one surviving NF instance contributes to a store recovery.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NfDump {
    /// Authoritative locally cached objects.
    pub cache: BTreeMap<ObjectId, Value>,
    /// Logged shared mutations for the failed shard, in issue order.
    pub wal: Vec<Operation>,
    pub reads: Vec<ReadRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyRecovery {
    /// Checkpoint plus replay.
    FromCheckpoint,
    /// Started from the read with this TS.
    FromRead { ts: Ts, read_seq: u64 },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub keys: BTreeMap<ObjectId, KeyRecovery>,
    /// (issuer, clock) of every replayed mutation, in replay order.
    pub replayed: Vec<(InstanceId, LogicalClock)>,
    pub cached_objects: usize,
}

/// Elimination-based TS selection over candidate reads. Returns the index of
/// the chosen candidate.
///
/// For every instance's log, traversed newest first, the first entry that
/// appears in some remaining candidate's TS prunes all candidates that do
/// not contain it. Ties among survivors go to the largest maximum clock,
/// then the latest read.
pub fn ts_select(candidates: &[ReadRecord], wals: &BTreeMap<InstanceId, Vec<Operation>>) -> Result<usize, StoreError> {
    if candidates.is_empty() {
        return Err(StoreError::NoCandidates);
    }
    let mut set: Vec<usize> = (0..candidates.len()).collect();
    for (instance, wal) in wals {
        let found = wal.iter().rev().find_map(|op| {
            let entry = TsEntry {
                clock: op.clock,
                seq: op.seq,
            };
            set.iter()
                .any(|&i| candidates[i].ts.contains_entry(*instance, entry))
                .then_some(entry)
        });
        if let Some(entry) = found {
            set.retain(|&i| candidates[i].ts.contains_entry(*instance, entry));
        }
    }
    set.sort_by_key(|&i| (candidates[i].ts.max_clock(), candidates[i].read_seq));
    Ok(*set.last().expect("elimination keeps at least one candidate"))
}

fn after(ts: &Ts, op: &Operation) -> bool {
    match ts.get(op.issuer) {
        Some(e) => op.seq > e.seq,
        None => true,
    }
}

fn check_gaps(shard: ShardId, checkpoint: &Checkpoint, dumps: &BTreeMap<InstanceId, NfDump>) -> Result<(), StoreError> {
    for (instance, dump) in dumps {
        let floor = checkpoint.ts.get(*instance).map_or(0, |e| e.seq);
        let mut expected = None;
        for op in &dump.wal {
            match expected {
                None => {
                    if op.seq > floor + 1 {
                        return Err(StoreError::RecoveryGap {
                            instance: *instance,
                            shard,
                            expected: floor + 1,
                            found: op.seq,
                        });
                    }
                }
                Some(e) if op.seq != e => {
                    return Err(StoreError::RecoveryGap {
                        instance: *instance,
                        shard,
                        expected: e,
                        found: op.seq,
                    })
                }
                _ => {}
            }
            expected = Some(op.seq + 1);
        }
    }
    Ok(())
}

fn post_checkpoint_reads(checkpoint: &Checkpoint, dumps: &BTreeMap<InstanceId, NfDump>) -> BTreeMap<ObjectId, Vec<ReadRecord>> {
    let mut out: BTreeMap<ObjectId, Vec<ReadRecord>> = BTreeMap::new();
    for dump in dumps.values() {
        for r in &dump.reads {
            if r.read_seq > checkpoint.seq {
                out.entry(r.key.clone()).or_default().push(r.clone());
            }
        }
    }
    out
}

/// Rebuilds a failed store shard.
pub fn recover_store(
    shard: ShardId,
    checkpoint: &Checkpoint,
    dumps: &BTreeMap<InstanceId, NfDump>,
    custom: CustomOps,
    seed: u64,
) -> Result<(StoreInstance, RecoveryReport), StoreError> {
    check_gaps(shard, checkpoint, dumps)?;
    let mut store = StoreInstance::with_custom(shard, custom, seed);
    let mut report = RecoveryReport::default();

    let wals: BTreeMap<InstanceId, Vec<Operation>> = dumps.iter().map(|(i, d)| (*i, d.wal.clone())).collect();
    let reads = post_checkpoint_reads(checkpoint, dumps);

    let mut keys: BTreeSet<ObjectId> = checkpoint.shared_values.keys().cloned().collect();
    keys.extend(wals.values().flatten().map(|op| op.key.object_id()));
    keys.extend(reads.keys().cloned());

    let mut replay: Vec<Operation> = Vec::new();
    for key in &keys {
        let (base, base_ts) = match reads.get(key) {
            Some(candidates) => {
                let idx = ts_select(candidates, &wals)?;
                let chosen = &candidates[idx];
                report.keys.insert(
                    key.clone(),
                    KeyRecovery::FromRead {
                        ts: chosen.ts.clone(),
                        read_seq: chosen.read_seq,
                    },
                );
                (chosen.value.clone(), chosen.ts.clone())
            }
            None => {
                report.keys.insert(key.clone(), KeyRecovery::FromCheckpoint);
                (
                    checkpoint.shared_values.get(key).cloned().unwrap_or_default(),
                    checkpoint.ts.clone(),
                )
            }
        };
        if !base.is_none() {
            store.install(key.clone(), base, None);
        }
        for wal in wals.values() {
            replay.extend(
                wal.iter()
                    .filter(|op| op.key.object_id() == *key && after(&base_ts, op))
                    .cloned(),
            );
        }
    }

    replay.sort_by_key(|op| (op.clock, op.issuer, op.seq));
    for mut op in replay {
        report.replayed.push((op.issuer, op.clock));
        op.mode = OpMode::Blocking;
        store.apply(op)?;
    }

    let mut ts = Ts::new();
    for (instance, wal) in &wals {
        if let Some(op) = wal.last() {
            ts.record(
                *instance,
                TsEntry {
                    clock: op.clock,
                    seq: op.seq,
                },
            );
        } else if let Some(e) = checkpoint.ts.get(*instance) {
            ts.record(*instance, e);
        }
    }
    store.set_ts(ts);

    for (instance, dump) in dumps {
        for (key, value) in &dump.cache {
            if store.get(key).is_some() && !key.is_shared() {
                continue;
            }
            let owner = (!key.is_shared()).then_some(*instance);
            store.install(key.clone(), value.clone(), owner);
            report.cached_objects += 1;
        }
    }

    let max_read = dumps
        .values()
        .flat_map(|d| d.reads.iter().map(|r| r.read_seq))
        .max()
        .unwrap_or(0);
    store.bump_seq(checkpoint.seq.max(max_read) + 1);
    Ok((store, report))
}

/// A post-checkpoint read whose value is not explained by the logs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadMismatch {
    pub key: ObjectId,
    pub read_seq: u64,
    pub logged: Value,
    pub replayed: Value,
}

/// Re-executes, for every post-checkpoint logged read, the checkpoint value
/// plus every logged mutation covered by the read's TS, and reports reads
/// whose value is not reproduced.
pub fn verify_read_log(checkpoint: &Checkpoint, dumps: &BTreeMap<InstanceId, NfDump>, custom: &CustomOps) -> Vec<ReadMismatch> {
    let reads = post_checkpoint_reads(checkpoint, dumps);
    let mut out = Vec::new();
    for (key, records) in reads {
        for r in records {
            let mut scratch = StoreInstance::with_custom(ShardId(0), custom.clone(), 0);
            if let Some(v) = checkpoint.shared_values.get(&key) {
                scratch.install(key.clone(), v.clone(), None);
            }
            let mut ops: Vec<&Operation> = dumps
                .values()
                .flat_map(|d| d.wal.iter())
                .filter(|op| {
                    op.key.object_id() == key
                        && after(&checkpoint.ts, op)
                        && r.ts.get(op.issuer).is_some_and(|e| op.seq <= e.seq)
                })
                .collect();
            ops.sort_by_key(|op| (op.clock, op.issuer, op.seq));
            for op in ops {
                let mut op = op.clone();
                op.mode = OpMode::Blocking;
                op.tag = None;
                let _ = scratch.apply(op);
            }
            let replayed = scratch.value(&key).cloned().unwrap_or_default();
            if replayed != r.value {
                out.push(ReadMismatch {
                    key: key.clone(),
                    read_seq: r.read_seq,
                    logged: r.value.clone(),
                    replayed,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{OpKind, StateKey, VertexId};

    fn clk(c: u64) -> LogicalClock {
        LogicalClock::new(0, c).unwrap()
    }

    fn key() -> StateKey {
        StateKey::shared(VertexId(1), vec![0, 0])
    }

    fn upd(issuer: u16, c: u64, seq: u64) -> Operation {
        Operation::new(OpKind::Increment(1), key(), OpMode::NonBlocking, clk(c), InstanceId(issuer)).with_seq(seq)
    }

    fn ts(entries: &[(u16, u64, u64)]) -> Ts {
        let mut t = Ts::new();
        for &(i, c, s) in entries {
            t.record(InstanceId(i), TsEntry { clock: clk(c), seq: s });
        }
        t
    }

    #[test]
    fn case_one_replays_strictly_after() {
        let mut cp = Checkpoint::empty();
        cp.ts = ts(&[(1, 10, 1)]);
        cp.shared_values.insert(key().object_id(), Value::Int(1));
        let mut dumps = BTreeMap::new();
        dumps.insert(
            InstanceId(1),
            NfDump {
                wal: vec![upd(1, 10, 1), upd(1, 12, 2)],
                ..Default::default()
            },
        );
        let (store, report) = recover_store(ShardId(0), &cp, &dumps, CustomOps::standard(), 0).unwrap();
        assert_eq!(report.replayed, vec![(InstanceId(1), clk(12))]);
        assert_eq!(store.value(&key().object_id()), Some(&Value::Int(2)));
    }

    #[test]
    fn gap_is_reported() {
        let cp = Checkpoint::empty();
        let mut dumps = BTreeMap::new();
        dumps.insert(
            InstanceId(1),
            NfDump {
                wal: vec![upd(1, 10, 1), upd(1, 12, 3)],
                ..Default::default()
            },
        );
        assert!(matches!(
            recover_store(ShardId(0), &cp, &dumps, CustomOps::standard(), 0),
            Err(StoreError::RecoveryGap { expected: 2, found: 3, .. })
        ));
    }

    #[test]
    fn single_candidate() {
        let r = ReadRecord {
            key: key().object_id(),
            value: Value::Int(3),
            ts: ts(&[(1, 5, 1)]),
            read_seq: 9,
        };
        let mut wals = BTreeMap::new();
        wals.insert(InstanceId(1), vec![upd(1, 5, 1)]);
        assert_eq!(ts_select(&[r], &wals).unwrap(), 0);
        assert_eq!(ts_select(&[], &wals), Err(StoreError::NoCandidates));
    }
}
