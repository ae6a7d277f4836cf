use chc::model::{InstanceId, LogicalClock, OpKind, OpMode, Operation, ShardId, StateKey, Value, VertexId};
use chc::store::StoreInstance;
use chc::verify::props::{callback_coherence, emulation_idempotence, nondet_repeat, read_after_outstanding, MutationCase};
use proptest::prelude::*;

fn steps() -> impl Strategy<Value = Vec<(u16, u8, i64)>> {
    prop::collection::vec((1u16..=4, 0u8..4, -20i64..20), 1..60)
}

fn mutation_case() -> impl Strategy<Value = MutationCase> {
    (
        prop::collection::vec((0u8..4, -50i64..50, 1u16..5), 1..40),
        prop::collection::vec((0usize..40, any::<usize>()), 0..20),
    )
        .prop_map(|(ops, dups)| MutationCase { ops, dups })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn emulation_is_idempotent(case in mutation_case()) {
        prop_assert_eq!(emulation_idempotence(&case), Ok(()));
    }

    #[test]
    fn reads_see_outstanding_updates(s in steps()) {
        prop_assert_eq!(read_after_outstanding(&s), Ok(()));
    }

    #[test]
    fn callback_caches_stay_coherent(s in steps()) {
        prop_assert_eq!(callback_coherence(&s), Ok(()));
    }

    #[test]
    fn nondet_values_repeat(
        reqs in prop::collection::vec((1u64..12, any::<bool>(), 0u64..1_000_000), 1..60),
        seed in any::<u64>(),
    ) {
        prop_assert_eq!(nondet_repeat(&reqs, seed), Ok(()));
    }
}

#[test]
fn idempotence_check_detects_missing_emulation() {
    // Same sequence with emulation off: the re-issue is applied again.
    let key = StateKey::shared(VertexId(1), vec![0, 0]);
    let op = Operation::new(OpKind::Increment(1), key.clone(), OpMode::Blocking, LogicalClock::new(0, 1).unwrap(), InstanceId(1));
    let mut s = StoreInstance::new(ShardId(0));
    s.set_emulation(false);
    s.install(key.object_id(), Value::Int(0), None);
    s.apply(op.clone()).unwrap();
    s.apply(op).unwrap();
    assert_eq!(s.value(&key.object_id()), Some(&Value::Int(2)));
    assert_eq!(s.stats.duplicate_applications, 1);
}

#[test]
fn property_generators_pass_at_scale() {
    let r = chc::verify::run(10, &chc::verify::Options { cases: 300, ..Default::default() }).unwrap();
    assert!(r.pass, "{r}");
}
