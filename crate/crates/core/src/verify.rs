//! Acceptance checks, shared by the `chc check` command and the acceptance
//! test target.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{CrashPoint, Fault, Trigger};
use crate::model::{
    obj_key, update_tag, Direction, FlowKey, InstanceId, LogicalClock, OpKind, OpMode, Operation, Packet,
    Protocol, RootId, ShardId, StateKey, TcpFlags, Time, Ts, TsEntry, Value, VertexId,
};
use crate::nfs::{nat, Alert, NfSpec};
use crate::oracle::{check_coe, explain_drops, root_of, run_ideal};
use crate::report::RunReport;
use crate::runtime::{DeleteOutcome, RootState};
use crate::scenario::{builtin, Scenario};
use crate::store::recovery::{recover_store, ts_select, NfDump, ReadRecord};
use crate::store::{Checkpoint, CustomOps, Effect, NondetKind, StoreInstance};
use crate::trace::{embedded_signatures, TraceRecord};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{verdict} [{:>2}] {}: {}", self.id, self.name, self.detail)
    }
}

#[derive(Clone, Debug)]
pub struct Options {
    /// Seeds for the multi-seed criteria.
    pub seeds: u64,
    /// Random cases per store property.
    pub cases: usize,
    /// The `chc` binary, for the cross-process determinism check.
    pub binary: Option<PathBuf>,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            seeds: 10,
            cases: 100,
            binary: None,
        }
    }
}

pub const CRITERIA: &[(u8, &str)] = &[
    (1, "chain output equivalence"),
    (2, "handover order"),
    (3, "shared counter"),
    (4, "trojan ordering"),
    (5, "duplicate suppression"),
    (6, "nf failure"),
    (7, "root failure"),
    (8, "store failure"),
    (9, "delete safety"),
    (10, "store properties"),
    (11, "determinism"),
];

/// COE wall-clock budget.
pub const COE_BUDGET: Duration = Duration::from_secs(30);
pub const HANDOVER_FLOWS: usize = 200;
pub const MIN_IN_TRANSIT: u64 = 50;
pub const COUNTER_INSTANCES: usize = 4;
pub const COUNTER_PER_INSTANCE: usize = 1000;
pub const TROJAN_SIGNATURES: usize = 11;
/// Seeds (out of `Options::seeds`) in which degraded ordering must miss.
pub const DEGRADED_MISS_SEEDS: u64 = 8;
pub const MIN_IN_FLIGHT: u64 = 20;
pub const ROOT_LOST: usize = 5;
pub const PERSIST_EVERY: &[u64] = &[10, 100];
pub const CHECKPOINT_MS: &[u64] = &[30, 75, 150];
pub const STORE_NATS: &[usize] = &[5, 10];

type Check = Result<(bool, String), String>;

pub fn run(id: u8, opts: &Options) -> Option<CriterionResult> {
    let &(_, name) = CRITERIA.iter().find(|(i, _)| *i == id)?;
    let out: Check = match id {
        1 => coe_baseline(),
        2 => handover(),
        3 => shared_counter(opts.seeds),
        4 => trojan_ordering(opts.seeds),
        5 => duplicate_suppression(),
        6 => nf_failure(),
        7 => root_failure(),
        8 => store_failure(),
        9 => delete_safety(),
        10 => store_properties(opts.cases),
        11 => determinism(opts.binary.as_deref()),
        _ => return None,
    };
    let (pass, detail) = out.unwrap_or_else(|e| (false, format!("error: {e}")));
    Some(CriterionResult { id, name, pass, detail })
}

pub fn run_all(opts: &Options) -> Vec<CriterionResult> {
    CRITERIA.iter().filter_map(|(id, _)| run(*id, opts)).collect()
}

fn scenario(name: &str) -> Result<Scenario, String> {
    builtin(name)
        .ok_or_else(|| format!("missing built-in scenario {name}"))?
        .map_err(|e| e.to_string())
}

fn err<E: fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Serialized final store: byte equality of two runs' state.
pub fn store_bytes(r: &RunReport) -> Vec<u8> {
    serde_json::to_vec(&r.store).expect("store values serialize")
}

fn coe_baseline() -> Check {
    let s = scenario("coe-baseline")?;
    let t = Instant::now();
    let (out, records) = s.run().map_err(err)?;
    let ideal = run_ideal(&s.chain, &records, s.sim.roots, &BTreeSet::new()).map_err(err)?;
    let elapsed = t.elapsed();
    let c = check_coe(&ideal, &out.report);
    let pass = c.exact() && elapsed <= COE_BUDGET;
    Ok((pass, format!("{} packets, {}; {:.2?}", records.len(), c.summary(), elapsed)))
}

fn handover() -> Check {
    let s = scenario("handover")?;
    let (out, records) = s.run().map_err(err)?;
    let r = &out.report;
    let [h] = r.handovers.as_slice() else {
        return Ok((false, format!("{} handovers recorded", r.handovers.len())));
    };
    let mut compared = 0;
    let mut bad = 0;
    for f in &h.flows {
        for applied in f.applied.values() {
            compared += 1;
            if *applied != f.emitted {
                bad += 1;
            }
        }
    }
    let ideal = run_ideal(&s.chain, &records, s.sim.roots, &BTreeSet::new()).map_err(err)?;
    let c = check_coe(&ideal, r);
    let pass = h.completed.is_some()
        && h.moved_flows == HANDOVER_FLOWS
        && h.in_transit >= MIN_IN_TRANSIT
        && compared >= HANDOVER_FLOWS
        && bad == 0
        && c.per_flow_mismatches.is_empty();
    Ok((
        pass,
        format!(
            "moved {} flows, {} in transit, order mismatches {bad}/{compared}, per-flow state {}/{} equal",
            h.moved_flows,
            h.in_transit,
            c.per_flow_objects - c.per_flow_mismatches.len(),
            c.per_flow_objects
        ),
    ))
}

/// Keeps the first `per` packets routed to each first-vertex instance.
fn balance_trace(s: &Scenario, records: Vec<TraceRecord>, per: usize) -> Result<Vec<TraceRecord>, String> {
    let dag = s.compile(&records).map_err(err)?;
    let plan = &dag.vertices[0].plan;
    let mut counts: BTreeMap<InstanceId, usize> = plan.instances().into_iter().map(|i| (i, 0)).collect();
    let kept: Vec<TraceRecord> = records
        .into_iter()
        .filter(|r| {
            let c = counts.get_mut(&plan.route_flow(&r.client_flow())).expect("plan instance");
            *c += 1;
            *c <= per
        })
        .collect();
    match counts.iter().find(|(_, c)| **c < per) {
        Some((i, c)) => Err(format!("instance {i} only sees {c} packets")),
        None => Ok(kept),
    }
}

fn shared_total(r: &RunReport) -> Option<i64> {
    let key = obj_key(nat::TOTAL, &[]);
    r.store.iter().find(|(k, _)| k.is_shared() && k.obj_key == key).and_then(|(_, v)| v.as_int())
}

fn shared_counter(seeds: u64) -> Check {
    let base = scenario("counter")?;
    let want = (COUNTER_INSTANCES * COUNTER_PER_INSTANCE) as i64;
    let mut finals = Vec::new();
    let mut pass = base.chain[0].parallelism == COUNTER_INSTANCES;
    for seed in 0..seeds {
        let mut s = base.clone();
        s.trace.as_mut().ok_or("counter scenario needs a generated trace")?.seed = seed;
        s.sim.seed = seed;
        let records = balance_trace(&s, s.records().map_err(err)?, COUNTER_PER_INSTANCE)?;
        let out = s.run_on(Arc::new(records)).map_err(err)?;
        let processed = &out.report.metrics.processed;
        pass &= processed.len() == COUNTER_INSTANCES
            && processed.values().all(|n| *n == COUNTER_PER_INSTANCE as u64);
        let total = shared_total(&out.report);
        pass &= total == Some(want);
        finals.push(total.map_or("-".to_string(), |v| v.to_string()));
    }
    Ok((pass, format!("{COUNTER_INSTANCES}x{COUNTER_PER_INSTANCE} increments; final values [{}]", finals.join(" "))))
}

fn trojan_ordering(seeds: u64) -> Check {
    let base = scenario("trojan")?;
    let mut found = [Vec::new(), Vec::new()];
    let mut sigs_ok = true;
    for (slot, degraded) in [false, true].into_iter().enumerate() {
        for seed in 0..seeds {
            let mut s = base.clone();
            s.trace.as_mut().ok_or("trojan scenario needs a generated trace")?.seed = seed;
            s.sim.seed = seed;
            let v = s
                .chain
                .iter_mut()
                .find(|v| matches!(v.nf, NfSpec::Trojan { .. }))
                .ok_or("no trojan vertex")?;
            v.nf = NfSpec::Trojan { degraded };
            let (out, records) = s.run().map_err(err)?;
            sigs_ok &= embedded_signatures(&records).len() == TROJAN_SIGNATURES;
            let n = out.report.alerts.iter().filter(|a| matches!(a, Alert::Trojan { .. })).count();
            found[slot].push(n);
        }
    }
    let clock_ok = found[0].iter().all(|n| *n == TROJAN_SIGNATURES);
    let missed = found[1].iter().filter(|n| **n < TROJAN_SIGNATURES).count() as u64;
    let need = DEGRADED_MISS_SEEDS * seeds / 10;
    let pass = sigs_ok && clock_ok && missed >= need;
    Ok((
        pass,
        format!("clock order found {:?}, arrival order found {:?} (misses in {missed}/{seeds} seeds)", found[0], found[1]),
    ))
}

fn duplicate_suppression() -> Check {
    let base = scenario("clone")?;
    let mut line = Vec::new();
    let mut pass = true;
    for on in [true, false] {
        let mut s = base.clone();
        s.sim.suppression = on;
        let (out, _) = s.run().map_err(err)?;
        let r = &out.report;
        let m = &r.metrics;
        let raced = r.clones.len() == 1 && r.clones[0].winner.is_some();
        pass &= raced;
        pass &= if on {
            m.delivered_duplicates == 0 && m.duplicate_applications == 0
        } else {
            m.delivered_duplicates > 0 && m.duplicate_applications > 0
        };
        line.push(format!(
            "suppression {}: delivered {} applied {}",
            if on { "on" } else { "off" },
            m.delivered_duplicates,
            m.duplicate_applications
        ));
    }
    Ok((pass, line.join("; ")))
}

/// The crash cases: (instance, crash point).
pub const NF_FAILURE_CASES: &[(u16, CrashPoint)] = &[
    (1, CrashPoint::AfterStatePush),
    (1, CrashPoint::BeforeStatePush),
    (1, CrashPoint::BeforeForward),
    (3, CrashPoint::BeforeDelete),
];

fn nf_failure() -> Check {
    let base = scenario("nf-failure")?;
    let mut clean = base.clone();
    clean.sim.faults.clear();
    let (reference, records) = clean.run().map_err(err)?;
    let want = store_bytes(&reference.report);
    let mut pass = true;
    let mut line = Vec::new();
    for &(instance, point) in NF_FAILURE_CASES {
        let mut s = base.clone();
        let count = match s.sim.faults.first() {
            Some(Fault::Instance {
                trigger: Trigger::AfterProcessed { count, .. },
                ..
            }) => *count,
            _ => return Err("nf-failure scenario needs an after_processed instance fault".into()),
        };
        s.sim.faults = vec![Fault::Instance {
            instance,
            trigger: Trigger::AfterProcessed { count, point },
        }];
        let r = s.run_on(records.clone()).map_err(err)?.report;
        let same = store_bytes(&r) == want;
        let dups = r.metrics.egress_duplicates;
        let (in_flight, recovered) = match r.failovers.as_slice() {
            [f] => (f.in_flight, f.recovered_at.is_some()),
            _ => (0, false),
        };
        pass &= same && dups == 0 && recovered && in_flight >= MIN_IN_FLIGHT;
        line.push(format!(
            "{point:?}@{instance}: in-flight {in_flight} store {} dups {dups}",
            if same { "equal" } else { "DIFFERS" }
        ));
    }
    Ok((pass, line.join("; ")))
}

/// Inserts `n` single-packet UDP flows hashing to root 0 into a quiet gap of
/// the trace. Returns the burst time and trace indices.
pub fn inject_burst(records: &mut Vec<TraceRecord>, roots: u16, n: usize) -> Result<(Time, Vec<u64>), String> {
    const QUIET: Time = 20_000;
    const EVENT_CLEAR: Time = 200_000;
    let events: Vec<Time> = records.iter().filter(|r| r.is_event()).map(|r| r.time).collect();
    let start = records.len() * 2 / 5;
    let pos = (start..records.len().saturating_sub(1))
        .find(|&i| {
            let (a, b) = (records[i].time, records[i + 1].time);
            let t = a + (b - a) / 2;
            b - a >= 2 * QUIET && events.iter().all(|e| e.abs_diff(t) >= EVENT_CLEAR)
        })
        .ok_or("no quiet gap in the trace")?;
    let t = records[pos].time + (records[pos + 1].time - records[pos].time) / 2;
    let mut burst = Vec::new();
    for k in 0u16.. {
        if burst.len() == n {
            break;
        }
        let flow = FlowKey::new(
            Ipv4Addr::new(10, 200, (k >> 8) as u8, k as u8),
            Ipv4Addr::new(198, 51, 100, 7),
            40_000 + k,
            53,
            Protocol::Udp,
        );
        if root_of(&flow, roots) == 0 {
            burst.push(TraceRecord {
                time: t,
                flow,
                direction: Direction::Forward,
                tcp_flags: TcpFlags::empty(),
                payload_len: 64,
                payload_tag: String::new(),
            });
        }
    }
    let first = pos + 1;
    records.splice(first..first, burst);
    Ok((t, (first..first + n).map(|i| i as u64).collect()))
}

fn root_failure() -> Check {
    let base = scenario("root-failure")?;
    let mut pass = true;
    let mut line = Vec::new();
    for &n in PERSIST_EVERY {
        let mut s = base.clone();
        s.sim.persist_every = n;
        let mut records = s.records().map_err(err)?;
        let (t, burst) = inject_burst(&mut records, s.sim.roots, ROOT_LOST)?;
        if s.sim.link_jitter + 1 >= s.sim.root_tx {
            return Err("root-failure needs link_jitter + 1 < root_tx".into());
        }
        s.sim.faults = vec![Fault::Root {
            root: 0,
            time: t + s.sim.host_delay + s.sim.link_jitter + 1,
        }];
        let records = Arc::new(records);
        let r = s.run_on(records.clone()).map_err(err)?.report;
        let [rec] = r.root_failures.as_slice() else {
            return Ok((false, format!("{} root failures recorded", r.root_failures.len())));
        };
        let lost_ok = rec.lost_unsent == burst;
        let explained = explain_drops(&s.chain, &records, s.sim.roots, &rec.lost_unsent, &r.outputs).map_err(err)?;
        let mut reused = 0;
        for clocks in r.clocks.values() {
            let unique: BTreeSet<u64> = clocks.iter().copied().collect();
            reused += clocks.len() - unique.len();
        }
        let after = r.clocks.get(&0).map_or(0, |c| c.iter().filter(|c| **c >= rec.resumed_at).count());
        pass &= lost_ok && explained.is_some() && reused == 0 && after > 0;
        line.push(format!(
            "n={n}: lost {} explained {} reused clocks {reused} resumed at {} ({after} later clocks)",
            rec.lost_unsent.len(),
            explained.map_or("no".to_string(), |d| format!("by dropping {}", d.len())),
            rec.resumed_at
        ));
    }
    Ok((pass, line.join("; ")))
}

fn store_failure() -> Check {
    let base = scenario("store-failure")?;
    let (sel, replays) = recovery_worked_example()?;
    let mut pass = sel == 2 && replays == [23, 32, 35];
    let mut line = vec![format!("worked example selects candidate {sel}, replays {replays:?}")];
    let keys = [obj_key(nat::TOTAL, &[]), obj_key(nat::TOTAL_TCP, &[])];
    let commutative = |r: &RunReport| -> Vec<Value> {
        keys.iter()
            .map(|k| {
                r.store
                    .iter()
                    .find(|(o, _)| o.is_shared() && o.obj_key == *k)
                    .map_or(Value::None, |(_, v)| v.clone())
            })
            .collect()
    };
    for &nats in STORE_NATS {
        let mut s = base.clone();
        s.chain[0].parallelism = nats;
        let mut clean = s.clone();
        clean.sim.faults.clear();
        clean.sim.checkpoint_interval = None;
        let (reference, records) = clean.run().map_err(err)?;
        let want = commutative(&reference.report);
        for &ms in CHECKPOINT_MS {
            s.sim.checkpoint_interval = Some(ms * 1_000_000);
            let r = s.run_on(records.clone()).map_err(err)?.report;
            let [rec] = r.store_recoveries.as_slice() else {
                pass = false;
                line.push(format!("{nats} NATs/{ms} ms: {} recoveries", r.store_recoveries.len()));
                continue;
            };
            let same = commutative(&r) == want && !want.contains(&Value::None);
            pass &= same && rec.error.is_none() && rec.reads_checked > 0 && rec.read_mismatches == 0;
            line.push(format!(
                "{nats} NATs/{ms} ms: counters {} reads {}/{} reproduced{}",
                if same { "equal" } else { "DIFFER" },
                rec.reads_checked - rec.read_mismatches,
                rec.reads_checked,
                rec.error.as_ref().map_or(String::new(), |e| format!(" error {e}"))
            ));
        }
    }
    Ok((pass, line.join("; ")))
}

fn clk(c: u64) -> LogicalClock {
    LogicalClock::new(0, c).expect("small counter")
}

fn example_key() -> StateKey {
    StateKey::shared(VertexId(1), obj_key(0, &[]))
}

fn example_ts(entries: &[(u16, u64, u64)]) -> Ts {
    let mut t = Ts::new();
    for &(i, c, s) in entries {
        t.record(InstanceId(i), TsEntry { clock: clk(c), seq: s });
    }
    t
}

/// Four instances' logs and three candidate reads (TS19, TS27, TS18).
/// Returns the index `ts_select` picks and the clocks the rebuild replays.
pub fn recovery_worked_example() -> Result<(usize, Vec<u64>), String> {
    let logs: [(u16, &[u64]); 4] = [(1, &[5, 15, 35]), (2, &[20]), (3, &[11, 23]), (4, &[13, 32])];
    let mut dumps: BTreeMap<InstanceId, NfDump> = BTreeMap::new();
    for (i, clocks) in logs {
        let wal = clocks
            .iter()
            .enumerate()
            .map(|(n, c)| {
                Operation::new(OpKind::Increment(1), example_key(), OpMode::NonBlocking, clk(*c), InstanceId(i))
                    .with_seq(n as u64 + 1)
            })
            .collect();
        dumps.insert(InstanceId(i), NfDump { wal, ..Default::default() });
    }
    let key = example_key().object_id();
    let read = |value: i64, ts: Ts, read_seq: u64| ReadRecord {
        key: key.clone(),
        value: Value::Int(value),
        ts,
        read_seq,
    };
    let candidates = vec![
        read(3, example_ts(&[(1, 5, 1), (3, 11, 1), (4, 13, 1)]), 5),
        read(4, example_ts(&[(1, 15, 2), (3, 11, 1), (4, 13, 1)]), 6),
        read(5, example_ts(&[(1, 15, 2), (2, 20, 1), (3, 11, 1), (4, 13, 1)]), 7),
    ];
    let wals = dumps.iter().map(|(i, d)| (*i, d.wal.clone())).collect();
    let sel = ts_select(&candidates, &wals).map_err(err)?;
    dumps.get_mut(&InstanceId(4)).expect("instance 4").reads = candidates;
    let (store, report) = recover_store(ShardId(0), &Checkpoint::empty(), &dumps, CustomOps::standard(), 0).map_err(err)?;
    if store.value(&key) != Some(&Value::Int(8)) {
        return Err(format!("rebuilt value {:?}, expected 8", store.value(&key)));
    }
    Ok((sel, report.replayed.iter().map(|(_, c)| c.counter()).collect()))
}

#[derive(Copy, Clone, Debug)]
enum RootEvent {
    Commit(usize, u32),
    Delete(usize),
}

struct Explore {
    clocks: Vec<LogicalClock>,
    tags: [u32; 2],
    events: Vec<RootEvent>,
    leaves: u64,
    violations: u64,
    stuck: u64,
}

impl Explore {
    fn dfs(&mut self, root: &RootState, used: u32, commits: &[u8], deleted: &[bool]) {
        if used.count_ones() as usize == self.events.len() {
            self.leaves += 1;
            if deleted.iter().any(|d| !d) || root.log_len() != 0 {
                self.stuck += 1;
            }
            return;
        }
        for e in 0..self.events.len() {
            if used & (1 << e) != 0 {
                continue;
            }
            let mut r = root.clone();
            let mut commits = commits.to_vec();
            let mut deleted = deleted.to_vec();
            let (p, outcome) = match self.events[e] {
                RootEvent::Commit(p, tag) => {
                    commits[p] |= if tag == self.tags[0] { 1 } else { 2 };
                    (p, r.commit(self.clocks[p], tag))
                }
                RootEvent::Delete(p) => (p, r.delete(self.clocks[p], self.tags[0] ^ self.tags[1])),
            };
            if outcome == DeleteOutcome::Deleted {
                if commits[p] != 3 {
                    self.violations += 1;
                }
                deleted[p] = true;
            }
            if deleted[p] && r.is_logged(self.clocks[p]) {
                self.violations += 1;
            }
            self.dfs(&r, used | (1 << e), &commits, &deleted);
        }
    }
}

/// Every interleaving of two commits and one delete request for each of
/// three packets. Returns (interleavings, early deletes, never deleted).
pub fn explore_deletes() -> (u64, u64, u64) {
    let mut root = RootState::new(RootId(0), 100, 100);
    let clocks: Vec<LogicalClock> = (0..3).map(|i| root.ingest(dummy_packet(i), InstanceId(1)).expect("room").clock).collect();
    let tags = [update_tag(1, 0), update_tag(2, 1)];
    let mut events = Vec::new();
    for p in 0..clocks.len() {
        events.push(RootEvent::Commit(p, tags[0]));
        events.push(RootEvent::Commit(p, tags[1]));
        events.push(RootEvent::Delete(p));
    }
    let mut x = Explore {
        clocks,
        tags,
        events,
        leaves: 0,
        violations: 0,
        stuck: 0,
    };
    x.dfs(&root, 0, &[0; 3], &[false; 3]);
    (x.leaves, x.violations, x.stuck)
}

fn dummy_packet(i: u64) -> Packet {
    Packet {
        clock: LogicalClock::ZERO,
        flow: FlowKey::new(Ipv4Addr::new(10, 0, 0, 1), Ipv4Addr::new(10, 0, 0, 2), 1000 + i as u16, 80, Protocol::Tcp),
        direction: Direction::Forward,
        tcp_flags: TcpFlags::empty(),
        payload_len: 0,
        payload_tag: String::new(),
        vec: 0,
        marks: Vec::new(),
        ingress_time: 0,
        trace_index: i,
        control: false,
        replayed: false,
        session: None,
    }
}

fn delete_safety() -> Check {
    let (leaves, early, stuck) = explore_deletes();
    Ok((
        leaves == 362_880 && early == 0 && stuck == 0,
        format!("{leaves} interleavings, {early} early deletes, {stuck} never deleted"),
    ))
}

fn store_properties(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut fails = BTreeMap::new();
    for _ in 0..cases {
        let checks = [
            ("emulation idempotence", props::emulation_idempotence(&props::MutationCase::random(&mut rng))),
            ("read after outstanding", props::read_after_outstanding(&props::gen_steps(&mut rng, 4))),
            ("callback coherence", props::callback_coherence(&props::gen_steps(&mut rng, 4))),
            ("nondet repeat", props::nondet_repeat(&props::gen_nondet(&mut rng), rng.gen())),
        ];
        for (name, r) in checks {
            if let Err(e) = r {
                fails.entry(name).or_insert(e);
            }
        }
    }
    let detail = if fails.is_empty() {
        format!("4 properties x {cases} cases hold")
    } else {
        fails.iter().map(|(n, e)| format!("{n}: {e}")).collect::<Vec<_>>().join("; ")
    };
    Ok((fails.is_empty() && cases >= 100, detail))
}

fn determinism(binary: Option<&std::path::Path>) -> Check {
    let bin = binary.ok_or("no chc binary given")?;
    let scenario_name = "coe-baseline";
    let mut digests = Vec::new();
    for _ in 0..2 {
        let out = std::process::Command::new(bin)
            .args(["run", scenario_name, "--digest"])
            .output()
            .map_err(|e| format!("{}: {e}", bin.display()))?;
        if !out.status.success() {
            return Err(format!("chc run exited with {}", out.status));
        }
        digests.push(String::from_utf8_lossy(&out.stdout).trim().to_string());
    }
    let (local, _) = scenario(scenario_name)?.run().map_err(err)?;
    let pass = digests[0].len() == 64 && digests[0] == digests[1] && digests[0] == local.report.digest;
    Ok((pass, format!("digests {} / {} (in-process {})", short(&digests[0]), short(&digests[1]), short(&local.report.digest))))
}

fn short(d: &str) -> &str {
    &d[..d.len().min(16)]
}

/// Store properties over generated operation sequences.
pub mod props {
    use super::*;

    fn shared(obj: u8) -> StateKey {
        StateKey::shared(VertexId(1), obj_key(obj as u16, &[]))
    }

    const COUNTER: u8 = 0;
    const LIST: u8 = 1;

    fn fresh() -> StoreInstance {
        let mut s = StoreInstance::new(ShardId(0));
        s.install(shared(COUNTER).object_id(), Value::Int(0), None);
        s.install(shared(LIST).object_id(), Value::List(Vec::new()), None);
        s
    }

    /// A mutation sequence plus re-issues of earlier mutations.
    #[derive(Clone, Debug)]
    pub struct MutationCase {
        /// (kind 0..4: increment, write, push, pop; operand; issuer)
        pub ops: Vec<(u8, i64, u16)>,
        /// (position, target): after op `position`, re-issue op
        /// `target % (position + 1)`.
        pub dups: Vec<(usize, usize)>,
    }

    impl MutationCase {
        pub fn random(rng: &mut impl Rng) -> Self {
            let n = rng.gen_range(1..40);
            MutationCase {
                ops: (0..n).map(|_| (rng.gen_range(0..4), rng.gen_range(-50..50), rng.gen_range(1..5))).collect(),
                dups: (0..rng.gen_range(0..20)).map(|_| (rng.gen_range(0..n), rng.gen())).collect(),
            }
        }
    }

    fn mutation(case: &MutationCase, i: usize) -> Operation {
        let (kind, v, issuer) = case.ops[i];
        let (kind, obj) = match kind % 4 {
            0 => (OpKind::Increment(v), COUNTER),
            1 => (OpKind::Write(Value::Int(v)), COUNTER),
            2 => (OpKind::Push(Value::Int(v)), LIST),
            _ => (OpKind::Pop, LIST),
        };
        Operation::new(kind, shared(obj), OpMode::Blocking, clk(i as u64 + 1), InstanceId(issuer))
    }

    /// Re-issuing an applied mutation returns the original reply and leaves
    /// the state as if it had been applied once.
    pub fn emulation_idempotence(case: &MutationCase) -> Result<(), String> {
        let mut dup = fresh();
        let mut once = fresh();
        let mut replies: Vec<Option<Value>> = Vec::new();
        for i in 0..case.ops.len() {
            let op = mutation(case, i);
            let a = dup.apply(op.clone()).ok().map(|r| r.value);
            let b = once.apply(op).ok().map(|r| r.value);
            if a != b {
                return Err(format!("op {i}: reply {a:?} vs {b:?}"));
            }
            replies.push(a);
            for (n, &(_, target)) in case.dups.iter().enumerate().filter(|(_, (p, _))| p % case.ops.len() == i) {
                let j = target % (i + 1);
                let Some(want) = &replies[j] else { continue };
                let mut op = mutation(case, j);
                if n % 2 == 1 {
                    op.mode = OpMode::NonBlocking;
                    dup.apply_nonblocking(op).map_err(err)?;
                    dup.drain();
                } else {
                    let r = dup.apply(op).map_err(err)?;
                    if !r.emulated || r.value != *want {
                        return Err(format!("re-issue of op {j}: {:?} (emulated {}) vs {want:?}", r.value, r.emulated));
                    }
                }
            }
            if dup.snapshot() != once.snapshot() {
                return Err(format!("state diverges after op {i}"));
            }
        }
        if dup.stats.duplicate_applications != 0 || !dup.errors().is_empty() {
            return Err("duplicates were applied".into());
        }
        Ok(())
    }

    /// (issuer 1..=n, action, operand) steps.
    pub fn gen_steps(rng: &mut impl Rng, instances: u16) -> Vec<(u16, u8, i64)> {
        (0..rng.gen_range(1..60))
            .map(|_| (rng.gen_range(1..=instances), rng.gen_range(0..4), rng.gen_range(-20..20)))
            .collect()
    }

    /// A read issued after outstanding non-blocking updates (from any
    /// instance) reflects all of them.
    pub fn read_after_outstanding(steps: &[(u16, u8, i64)]) -> Result<(), String> {
        let mut s = fresh();
        let key = shared(COUNTER);
        let mut model = 0i64;
        for (i, &(issuer, action, v)) in steps.iter().enumerate() {
            let c = clk(i as u64 + 1);
            let issuer = InstanceId(issuer);
            match action % 4 {
                0 | 1 => {
                    let op = Operation::new(OpKind::Increment(v), key.clone(), OpMode::NonBlocking, c, issuer);
                    s.apply_nonblocking(op).map_err(err)?;
                    model += v;
                }
                2 => {
                    let r = s.apply(Operation::new(OpKind::Read, key.clone(), OpMode::Blocking, c, issuer)).map_err(err)?;
                    if r.value != Value::Int(model) {
                        return Err(format!("step {i}: read {:?}, expected {model}", r.value));
                    }
                }
                _ => {
                    let (v, _) = s.read_shared(&key.object_id(), issuer).map_err(err)?;
                    if v != Value::Int(model) {
                        return Err(format!("step {i}: shared read {v:?}, expected {model}"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Every instance holding a callback-cached copy sees the store value
    /// once refreshes are delivered.
    pub fn callback_coherence(steps: &[(u16, u8, i64)]) -> Result<(), String> {
        let mut s = fresh();
        let key = shared(COUNTER);
        let oid = key.object_id();
        let mut caches: BTreeMap<InstanceId, Value> = BTreeMap::new();
        for (i, &(issuer, action, v)) in steps.iter().enumerate() {
            let c = clk(i as u64 + 1);
            let inst = InstanceId(issuer);
            match action % 4 {
                0 => {
                    if let std::collections::btree_map::Entry::Vacant(e) = caches.entry(inst) {
                        let r = s.apply(Operation::new(OpKind::Read, key.clone(), OpMode::Blocking, c, inst)).map_err(err)?;
                        s.register_callback(&oid, inst);
                        e.insert(r.value);
                    }
                }
                1 | 2 => {
                    let kind = if action % 4 == 1 { OpKind::Increment(v) } else { OpKind::Write(Value::Int(v)) };
                    let r = s.apply(Operation::new(kind, key.clone(), OpMode::Blocking, c, inst)).map_err(err)?;
                    if let Some(e) = caches.get_mut(&inst) {
                        *e = r.state;
                    }
                }
                _ => {
                    let op = Operation::new(OpKind::Increment(v), key.clone(), OpMode::NonBlocking, c, inst);
                    s.apply_nonblocking(op).map_err(err)?;
                    s.drain();
                    if caches.contains_key(&inst) {
                        let cur = s.value(&oid).cloned().unwrap_or_default();
                        caches.insert(inst, cur);
                    }
                }
            }
            for fx in s.take_effects() {
                if let Effect::Refresh { instance, key, value, .. } = fx {
                    if key == oid {
                        if !caches.contains_key(&instance) {
                            return Err(format!("refresh sent to {instance}, which holds no copy"));
                        }
                        caches.insert(instance, value);
                    }
                }
            }
            let cur = s.value(&oid).cloned().unwrap_or_default();
            if let Some((inst, v)) = caches.iter().find(|(_, v)| **v != cur) {
                return Err(format!("step {i}: {inst} caches {v:?}, store has {cur:?}"));
            }
        }
        Ok(())
    }

    /// (clock counter, random-or-time, request time) requests.
    pub fn gen_nondet(rng: &mut impl Rng) -> Vec<(u64, bool, Time)> {
        (0..rng.gen_range(1..60))
            .map(|_| (rng.gen_range(1..12), rng.gen(), rng.gen_range(0..1_000_000)))
            .collect()
    }

    /// Non-deterministic values are fixed per (clock, kind) on first request
    /// and repeat on every later request, at any time, and two stores with
    /// the same seed hand out the same values.
    pub fn nondet_repeat(reqs: &[(u64, bool, Time)], seed: u64) -> Result<(), String> {
        let mut a = StoreInstance::with_custom(ShardId(0), CustomOps::standard(), seed);
        let mut b = StoreInstance::with_custom(ShardId(0), CustomOps::standard(), seed);
        let mut first: BTreeMap<(u64, bool), Value> = BTreeMap::new();
        for &(c, random, now) in reqs {
            let kind = if random { NondetKind::Random } else { NondetKind::Time };
            let v = a.nondet_value(clk(c), kind, now);
            if b.nondet_value(clk(c), kind, now) != v {
                return Err(format!("clock {c}: stores with one seed disagree"));
            }
            let want = first.entry((c, random)).or_insert_with(|| v.clone());
            if *want != v {
                return Err(format!("clock {c} {kind:?}: {v:?} after {want:?}"));
            }
        }
        Ok(())
    }
}
