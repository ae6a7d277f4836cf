use std::collections::BTreeMap;

use chc::model::{obj_key, InstanceId, LogicalClock, OpKind, OpMode, Operation, ShardId, StateKey, Value, VertexId};
use chc::store::recovery::{recover_store, ts_select, KeyRecovery, NfDump, ReadRecord};
use chc::store::{Checkpoint, CustomOps, StoreInstance};
use chc::verify::recovery_worked_example;
use proptest::prelude::*;

#[test]
fn worked_example_selects_ts18_and_replays_the_rest() {
    let (sel, replayed) = recovery_worked_example().unwrap();
    assert_eq!(sel, 2);
    assert_eq!(replayed, vec![23, 32, 35]);
}

struct Execution {
    store: StoreInstance,
    dumps: BTreeMap<InstanceId, NfDump>,
    reads: Vec<ReadRecord>,
    checkpoint: Checkpoint,
}

/// Runs `steps` against a live store: (issuer, read?, operand). A checkpoint
/// is taken before step `cp_at`.
fn execute(steps: &[(u16, bool, i64)], cp_at: usize) -> Execution {
    let key = StateKey::shared(VertexId(1), obj_key(0, &[]));
    let mut store = StoreInstance::new(ShardId(0));
    store.install(key.object_id(), Value::Int(0), None);
    let mut dumps: BTreeMap<InstanceId, NfDump> = BTreeMap::new();
    let mut reads = Vec::new();
    let mut checkpoint = store.checkpoint_now(0);
    for (i, &(issuer, read, v)) in steps.iter().enumerate() {
        if i == cp_at {
            checkpoint = store.checkpoint_now(i as u64);
        }
        let inst = InstanceId(issuer);
        let clock = LogicalClock::new(0, i as u64 + 1).unwrap();
        let dump = dumps.entry(inst).or_default();
        if read {
            let r = store.apply(Operation::new(OpKind::Read, key.clone(), OpMode::Blocking, clock, inst)).unwrap();
            let rec = ReadRecord {
                key: key.object_id(),
                value: r.value,
                ts: r.ts,
                read_seq: r.read_seq.unwrap(),
            };
            dump.reads.push(rec.clone());
            reads.push(rec);
        } else {
            let seq = dump.wal.len() as u64 + 1;
            let op = Operation::new(OpKind::Increment(v), key.clone(), OpMode::NonBlocking, clock, inst).with_seq(seq);
            dump.wal.push(op.clone());
            store.apply_nonblocking(op).unwrap();
        }
    }
    store.drain();
    Execution {
        store,
        dumps,
        reads,
        checkpoint,
    }
}

fn steps() -> impl Strategy<Value = (Vec<(u16, bool, i64)>, usize)> {
    prop::collection::vec((1u16..=4, prop::bool::weighted(0.3), -9i64..10), 1..50)
        .prop_flat_map(|s| {
            let n = s.len();
            (Just(s), 0..=n)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Reads of one store form a chain; elimination must pick a read with
    /// the newest TS, which a brute-force scan finds directly.
    #[test]
    fn ts_select_picks_the_newest_read((s, _) in steps(), pick in prop::collection::vec(any::<bool>(), 50)) {
        let ex = execute(&s, 0);
        let cands: Vec<ReadRecord> = ex.reads.iter().zip(pick.iter().cycle()).filter(|(_, p)| **p).map(|(r, _)| r.clone()).collect();
        prop_assume!(!cands.is_empty());
        let wals = ex.dumps.iter().map(|(i, d)| (*i, d.wal.clone())).collect();
        let got = ts_select(&cands, &wals).unwrap();
        let newest = cands.iter().max_by_key(|r| r.read_seq).unwrap();
        prop_assert_eq!(&cands[got].ts, &newest.ts);
        prop_assert_eq!(&cands[got].value, &newest.value);
    }

    /// Rebuilding from any checkpoint plus the logs gives the live value.
    #[test]
    fn recovery_rebuilds_the_live_value((s, cp_at) in steps()) {
        let ex = execute(&s, cp_at);
        let key = StateKey::shared(VertexId(1), obj_key(0, &[])).object_id();
        let (rebuilt, report) = recover_store(ShardId(0), &ex.checkpoint, &ex.dumps, CustomOps::standard(), 0).unwrap();
        prop_assert_eq!(rebuilt.value(&key), ex.store.value(&key));
        let post_reads = ex.reads.iter().any(|r| r.read_seq > ex.checkpoint.seq);
        let from_read = matches!(report.keys.get(&key), Some(KeyRecovery::FromRead { .. }));
        prop_assert_eq!(post_reads, from_read);
        prop_assert!(chc::store::recovery::verify_read_log(&ex.checkpoint, &ex.dumps, &CustomOps::standard()).is_empty());
    }
}
