//! Ideal-chain oracle and output-equivalence checking.
//!
//! The ideal chain runs every NF with one instance, processes the trace in
//! order with nothing in flight, and talks to a single store. A deployment
//! is equivalent when its outputs, per-flow state and commutative shared
//! state match the ideal run exactly, and every other shared object ends in
//! a value some serial order of the same updates produces.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::client::{CachePolicy, ClientConfig, StoreAccess, StoreClient};
use crate::model::{
    scope_project, InstanceId, LogicalClock, ObjectId, OpKind, Operation, Packet, RootId, Scope, ShardId, StateKey,
    Value,
};
use crate::nfs::{Alert, NfContext, Verdict};
use crate::partition::stable_hash;
use crate::report::{OutputRecord, RunReport};
use crate::runtime::{compile, DagError, LogicalDag, RootState, VertexSpec};
use crate::store::{exec_kind, ApplyResult, CustomOps, HistoryEntry, NondetKind, StoreError, StoreInstance};
use crate::trace::TraceRecord;

/// Final state of an ideal run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdealRun {
    pub store: BTreeMap<ObjectId, Value>,
    pub initial: BTreeMap<ObjectId, Value>,
    pub outputs: Vec<OutputRecord>,
    pub alerts: BTreeSet<Alert>,
    pub history: BTreeMap<ObjectId, Vec<HistoryEntry>>,
}

struct Direct<'a> {
    store: &'a mut StoreInstance,
    now: u64,
}

impl StoreAccess for Direct<'_> {
    fn blocking(&mut self, _shard: ShardId, op: Operation) -> Result<ApplyResult, StoreError> {
        self.store.apply(op)
    }
    fn nondet(&mut self, _shard: ShardId, clock: LogicalClock, kind: NondetKind) -> Value {
        self.store.nondet_value(clock, kind, self.now)
    }
    fn register_callback(&mut self, _shard: ShardId, key: &ObjectId, instance: InstanceId) {
        self.store.register_callback(key, instance);
    }
}

/// Root a client flow enters through; matches the simulator.
pub fn root_of(flow: &crate::model::FlowKey, roots: u16) -> u16 {
    (stable_hash(&scope_project(flow, &Scope::five_tuple())) % roots.max(1) as u64) as u16
}

fn push_all(client: &mut StoreClient, store: &mut StoreInstance) {
    for (shard, op) in client.take_outbox() {
        if let Ok(ack) = store.apply_nonblocking(op) {
            client.on_ack(shard, ack.seq);
        }
    }
    store.drain();
}

/// Runs the trace, minus the records in `skip`, through the ideal chain.
pub fn run_ideal(
    chain: &[VertexSpec],
    trace: &[TraceRecord],
    roots: u16,
    skip: &BTreeSet<u64>,
) -> Result<IdealRun, DagError> {
    let specs: Vec<VertexSpec> = chain
        .iter()
        .map(|v| VertexSpec {
            parallelism: 1,
            ..v.clone()
        })
        .collect();
    let dag = compile(&LogicalDag::chain(specs), roots, 1, None)?;
    let mut store = StoreInstance::with_custom(ShardId(0), CustomOps::standard(), 0);
    store.record_history();
    let mut initial = BTreeMap::new();
    for v in &dag.vertices {
        for (index, sub, value) in v.nf.initial_state() {
            let key = StateKey::shared(v.id, crate::model::obj_key(index, &sub)).object_id();
            initial.insert(key.clone(), value.clone());
            store.install(key, value, None);
        }
    }
    let cfg = ClientConfig {
        shards: 1,
        ..ClientConfig::default()
    };
    let mut clients: Vec<StoreClient> = dag
        .vertices
        .iter()
        .map(|v| StoreClient::new(v.instances[0], v.id, v.decls.clone(), cfg.clone()))
        .collect();
    for (k, v) in dag.vertices.iter().enumerate() {
        for (index, d) in v.decls.iter().enumerate() {
            if d.policy() == CachePolicy::CrossflowConditionalCache {
                let mut acc = Direct {
                    store: &mut store,
                    now: 0,
                };
                clients[k].set_permission(index as u16, true, &mut acc, 0);
            }
        }
    }
    let mut root_states: Vec<RootState> = (0..roots)
        .map(|r| RootState::new(RootId(r), u64::MAX, usize::MAX))
        .collect();
    let mut out = IdealRun {
        initial,
        ..IdealRun::default()
    };
    for (i, r) in trace.iter().enumerate() {
        if skip.contains(&(i as u64)) {
            continue;
        }
        let mut pkt = Packet {
            clock: LogicalClock::ZERO,
            flow: r.flow,
            direction: r.direction,
            tcp_flags: r.tcp_flags,
            payload_len: r.payload_len,
            payload_tag: r.payload_tag.clone(),
            vec: 0,
            marks: Vec::new(),
            ingress_time: r.time,
            trace_index: i as u64,
            control: false,
            replayed: false,
            session: None,
        };
        let root = root_of(&pkt.client_flow(), roots) as usize;
        let Some(p) = root_states[root].ingest(pkt, dag.vertices[0].instances[0]) else { continue };
        pkt = p;
        let mut forwarded = true;
        for (k, v) in dag.vertices.iter().enumerate() {
            let mut acc = Direct {
                store: &mut store,
                now: r.time,
            };
            let verdict = {
                let mut ctx = NfContext::new(&mut clients[k], &mut acc, &pkt, crate::client::Mode::Normal, r.time);
                let verdict = v.nf.process(&mut pkt, &mut ctx);
                out.alerts.extend(ctx.alerts.drain(..));
                verdict
            };
            push_all(&mut clients[k], &mut store);
            if verdict == Verdict::Drop {
                forwarded = false;
                break;
            }
        }
        if forwarded {
            out.outputs.push(OutputRecord {
                trace_index: i as u64,
                direction: pkt.direction,
                flow: r.client_flow(),
                tuple: pkt.flow,
                payload_len: pkt.payload_len,
            });
        }
    }
    for c in clients.iter_mut() {
        c.periodic_flush(u64::MAX, true);
        push_all(c, &mut store);
    }
    out.store = store.snapshot();
    out.history = store.history().cloned().unwrap_or_default();
    out.outputs.sort();
    Ok(out)
}

fn is_commutative(kind: &OpKind) -> bool {
    match kind {
        OpKind::Custom { name, .. } => name == "min_clock" || name == "max_clock",
        k => k.is_commutative(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedVerdict {
    Equal,
    /// Differs from the ideal value but is the result of applying the same
    /// updates in another order.
    Reordered,
    Inconclusive,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoeCheck {
    pub per_flow_objects: usize,
    pub per_flow_mismatches: Vec<ObjectId>,
    pub ideal_outputs: usize,
    pub actual_outputs: usize,
    /// Outputs present in one run but not the other.
    pub output_mismatches: usize,
    pub first_output_diff: Option<String>,
    pub alerts_equal: bool,
    pub commutative_objects: usize,
    pub commutative_mismatches: Vec<ObjectId>,
    pub other_shared: Vec<(ObjectId, SharedVerdict)>,
}

impl CoeCheck {
    /// Per-flow state, outputs, alerts and commutative shared state all match.
    pub fn exact(&self) -> bool {
        self.per_flow_mismatches.is_empty()
            && self.output_mismatches == 0
            && self.alerts_equal
            && self.commutative_mismatches.is_empty()
    }

    pub fn equivalent(&self) -> bool {
        self.exact() && self.other_shared.iter().all(|(_, v)| *v != SharedVerdict::Inconclusive)
    }

    pub fn summary(&self) -> String {
        let reordered = self.other_shared.iter().filter(|(_, v)| *v == SharedVerdict::Reordered).count();
        let inconclusive = self
            .other_shared
            .iter()
            .filter(|(_, v)| *v == SharedVerdict::Inconclusive)
            .count();
        format!(
            "per-flow {}/{} equal, outputs {}/{} (mismatched {}), alerts {}, commutative {}/{} equal, other shared {} (reordered {}, inconclusive {})",
            self.per_flow_objects - self.per_flow_mismatches.len(),
            self.per_flow_objects,
            self.actual_outputs,
            self.ideal_outputs,
            self.output_mismatches,
            if self.alerts_equal { "equal" } else { "differ" },
            self.commutative_objects - self.commutative_mismatches.len(),
            self.commutative_objects,
            self.other_shared.len(),
            reordered,
            inconclusive
        )
    }
}

/// Compares a run against the ideal chain.
pub fn check_coe(ideal: &IdealRun, actual: &RunReport) -> CoeCheck {
    let store = actual.store_map();
    let history = actual.history_map();
    let mut c = CoeCheck::default();
    let keys: BTreeSet<&ObjectId> = ideal.store.keys().chain(store.keys()).collect();
    let none = Value::None;
    for key in keys {
        let want = ideal.store.get(key).unwrap_or(&none);
        let got = store.get(key).unwrap_or(&none);
        if key.per_flow {
            c.per_flow_objects += 1;
            if want != got {
                c.per_flow_mismatches.push(key.clone());
            }
            continue;
        }
        let ops = ideal.history.get(key);
        let commutative = ops.is_some_and(|h| !h.is_empty() && h.iter().all(|e| is_commutative(&e.kind)));
        if commutative {
            c.commutative_objects += 1;
            if want != got {
                c.commutative_mismatches.push(key.clone());
            }
            continue;
        }
        let verdict = if want == got {
            SharedVerdict::Equal
        } else if reorders(key, ideal, history.get(key), got) {
            SharedVerdict::Reordered
        } else {
            SharedVerdict::Inconclusive
        };
        c.other_shared.push((key.clone(), verdict));
    }
    c.ideal_outputs = ideal.outputs.len();
    c.actual_outputs = actual.outputs.len();
    let a: BTreeSet<&OutputRecord> = ideal.outputs.iter().collect();
    let b: BTreeSet<&OutputRecord> = actual.outputs.iter().collect();
    let mut diff = a.symmetric_difference(&b);
    c.first_output_diff = diff.next().map(|o| {
        let side = if a.contains(o) { "missing" } else { "unexpected" };
        format!("{side} output of trace record {}: {:?}", o.trace_index, o.tuple)
    });
    c.output_mismatches = a.symmetric_difference(&b).count() + (actual.outputs.len() - b.len());
    let alerts: BTreeSet<&Alert> = actual.alerts.iter().collect();
    c.alerts_equal = alerts == ideal.alerts.iter().collect();
    c
}

/// Whether `got` results from applying the ideal run's updates of `key` in
/// the order the deployment applied them.
fn reorders(key: &ObjectId, ideal: &IdealRun, applied: Option<&Vec<HistoryEntry>>, got: &Value) -> bool {
    let Some(applied) = applied else { return false };
    let mut want: Vec<u64> = ideal.history.get(key).map_or(Vec::new(), |h| h.iter().map(|e| e.clock.raw()).collect());
    let mut have: Vec<u64> = applied.iter().map(|e| e.clock.raw()).collect();
    want.sort_unstable();
    have.sort_unstable();
    if want != have {
        return false;
    }
    let custom = CustomOps::standard();
    let mut v = ideal.initial.get(key).cloned().unwrap_or_default();
    for e in applied {
        match exec_kind(&custom, key, &e.kind, &v) {
            Ok((next, _)) => v = next,
            Err(_) => return false,
        }
    }
    &v == got
}

/// Searches for a subset of `candidates` whose removal from the trace makes
/// the ideal chain produce exactly `outputs`. Smaller subsets are tried
/// first; at most 2^16 subsets are examined.
pub fn explain_drops(
    chain: &[VertexSpec],
    trace: &[TraceRecord],
    roots: u16,
    candidates: &[u64],
    outputs: &[OutputRecord],
) -> Result<Option<Vec<u64>>, DagError> {
    let n = candidates.len().min(16);
    let mut want = outputs.to_vec();
    want.sort();
    let mut masks: Vec<u32> = (0..(1u32 << n)).collect();
    masks.sort_by_key(|m| (m.count_ones(), *m));
    for m in masks {
        let skip: BTreeSet<u64> = (0..n).filter(|i| m & (1 << i) != 0).map(|i| candidates[i]).collect();
        let run = run_ideal(chain, trace, roots, &skip)?;
        if run.outputs == want {
            return Ok(Some(skip.into_iter().collect()));
        }
    }
    Ok(None)
}
