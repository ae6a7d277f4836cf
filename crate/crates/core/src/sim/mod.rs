//! Deterministic discrete-event simulation of a chain deployment.
//!
//! Roots, NF instances, store shards and the end hosts are actors that
//! exchange messages over FIFO channels with configurable delay and jitter.
//! Time is integer nanoseconds; every random draw comes from one seeded
//! ChaCha stream, and every collection iterates in key order, so a run is a
//! pure function of (chain, trace, config). Each processed event is folded
//! into a SHA-256 digest.

mod protocols;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::client::{conditional_cache_permitted, shard_for, CachePolicy, ClientConfig, StoreAccess, StoreClient};
use crate::dynamics::{Action, CrashPoint, Fault, Straggler, Trigger};
use crate::model::{
    scope_project, FlowKey, InstanceId, LogicalClock, MarkKind, ObjectId, Operation, Packet, Scope, ShardId,
    StateKey, Time, Value,
};
use crate::nfs::{Alert, NetworkFunction, NfContext, Verdict};
use crate::partition::stable_hash;
use crate::report::{EventLog, OutputRecord, RunReport};
use crate::runtime::{InstanceStats, MessageQueue, PhysicalDag, RootState};
use crate::store::{ApplyResult, Checkpoint, NondetKind, StoreError, StoreInstance};
use crate::trace::TraceRecord;

fn d_roots() -> u16 {
    1
}
fn d_shards() -> u16 {
    1
}
fn d_link() -> Time {
    2_000
}
fn d_host() -> Time {
    5_000
}
fn d_root_tx() -> Time {
    200
}
fn d_service() -> Time {
    2_000
}
fn d_rtt() -> Time {
    4_000
}
fn d_flush_every() -> u32 {
    16
}
fn d_flush_interval() -> Time {
    200_000
}
fn d_tick() -> Time {
    50_000
}
fn d_persist() -> u64 {
    crate::runtime::DEFAULT_PERSIST_EVERY
}
fn d_threshold() -> usize {
    crate::runtime::DEFAULT_DROP_THRESHOLD
}
fn d_true() -> bool {
    true
}
fn d_detect() -> Time {
    100_000
}
fn d_root_recovery() -> Time {
    200_000
}
fn d_store_recovery() -> Time {
    500_000
}
fn d_race() -> Time {
    500_000
}
fn d_quiet() -> Time {
    2_000_000
}
fn d_delete_retry() -> Time {
    200_000
}
fn d_max_time() -> Time {
    600_000_000_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_roots")]
    pub roots: u16,
    #[serde(default = "d_shards")]
    pub shards: u16,
    /// One-way delay of chain, root and store links.
    #[serde(default = "d_link")]
    pub link_delay: Time,
    /// Uniform extra delay per message; channels stay FIFO.
    #[serde(default)]
    pub link_jitter: Time,
    /// One-way delay between end hosts and the chain.
    #[serde(default = "d_host")]
    pub host_delay: Time,
    /// Root transmit time per packet.
    #[serde(default = "d_root_tx")]
    pub root_tx: Time,
    /// Base per-packet service time at an instance.
    #[serde(default = "d_service")]
    pub service: Time,
    /// Cost of one blocking store round trip, added to service time.
    #[serde(default = "d_rtt")]
    pub store_rtt: Time,
    #[serde(default = "d_flush_every")]
    pub flush_every: u32,
    #[serde(default = "d_flush_interval")]
    pub flush_interval: Time,
    /// Period of flush, retransmit and delete-retry timers.
    #[serde(default = "d_tick")]
    pub tick: Time,
    #[serde(default = "d_persist")]
    pub persist_every: u64,
    #[serde(default = "d_threshold")]
    pub drop_threshold: usize,
    /// Queue deduplication and store duplicate emulation.
    #[serde(default = "d_true")]
    pub suppression: bool,
    /// Time to detect an instance failure and start its replacement.
    #[serde(default = "d_detect")]
    pub detect_delay: Time,
    #[serde(default = "d_root_recovery")]
    pub root_recovery: Time,
    #[serde(default = "d_store_recovery")]
    pub store_recovery: Time,
    #[serde(default)]
    pub checkpoint_interval: Option<Time>,
    /// Clone race length after the clone caught up.
    #[serde(default = "d_race")]
    pub race_window: Time,
    /// Prunes stay deferred this long after a replay session ends.
    #[serde(default = "d_quiet")]
    pub prune_quiet: Time,
    #[serde(default = "d_delete_retry")]
    pub delete_retry: Time,
    /// Record per-object application history (needed for order checks).
    #[serde(default)]
    pub record_history: bool,
    #[serde(default)]
    pub keep_event_lines: bool,
    #[serde(default = "d_max_time")]
    pub max_time: Time,
    #[serde(default)]
    pub stragglers: Vec<Straggler>,
    #[serde(default)]
    pub faults: Vec<Fault>,
    #[serde(default)]
    pub actions: Vec<Action>,
}

impl Default for SimConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Node {
    Host,
    Root(u16),
    Inst(InstanceId),
    Shard(u16),
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Host => write!(f, "host"),
            Node::Root(r) => write!(f, "R{r}"),
            Node::Inst(i) => write!(f, "{i}"),
            Node::Shard(s) => write!(f, "S{s}"),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Msg {
    Packet(Packet),
    StoreOp { id: u64 },
    StoreAck { seq: u64 },
    Commit { clock: LogicalClock, tag: u32 },
    Refresh { key: ObjectId, value: Value },
    Released { session: u64 },
    Delete { clock: LogicalClock, vec: u32 },
    DeleteAck { clock: LogicalClock },
    GateReached { session: u64 },
    Output(Packet),
}

impl Msg {
    fn describe(&self) -> (&'static str, String) {
        match self {
            Msg::Packet(p) => {
                let kind = if p.control { "marker" } else { "pkt" };
                (kind, format!("{} {} {:?}", p.clock.raw(), p.trace_index, p.session))
            }
            Msg::StoreOp { id } => ("op", id.to_string()),
            Msg::StoreAck { seq } => ("ack", seq.to_string()),
            Msg::Commit { clock, tag } => ("commit", format!("{} {tag:x}", clock.raw())),
            Msg::Refresh { key, .. } => ("refresh", key.to_string()),
            Msg::Released { session } => ("released", session.to_string()),
            Msg::Delete { clock, vec } => ("delete", format!("{} {vec:x}", clock.raw())),
            Msg::DeleteAck { clock } => ("delack", clock.raw().to_string()),
            Msg::GateReached { session } => ("gate", session.to_string()),
            Msg::Output(p) => ("out", format!("{} {}", p.clock.raw(), p.trace_index)),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Ev {
    Ingest(usize),
    Deliver { from: Node, to: Node, msg: Msg },
    RootTx(u16),
    Push(InstanceId),
    Forward(InstanceId),
    Finish(InstanceId),
    Tick,
    Checkpoint,
    CrashInstance(InstanceId),
    CrashRoot(u16),
    CrashShard(u16),
    Failover(InstanceId),
    RootRecover(u16),
    StoreRecover(u16),
    StartClone(InstanceId),
    StartHandover(usize),
    RaceEnd(u64),
    PruneFlush,
}

pub(crate) struct ShardNode {
    pub store: StoreInstance,
    pub up: bool,
    pub durable: Vec<Checkpoint>,
    pub crashed_at: Time,
    /// Counters of store incarnations lost to crashes.
    pub lost_duplicates: u64,
    pub lost_errors: u64,
}

pub(crate) struct RootNode {
    pub state: RootState,
    pub up: bool,
    pub tx: VecDeque<(InstanceId, Packet)>,
    pub tx_busy: bool,
    pub buffered: Vec<Packet>,
    pub failure: Option<usize>,
}

/// Replay barrier at a replay target: non-replay input is withheld until
/// markers from every upstream sender arrived.
pub(crate) struct Barrier {
    pub session: u64,
    pub expected: usize,
    pub got: usize,
}

pub(crate) struct Current {
    pub pkt: Packet,
    pub verdict: Verdict,
}

pub(crate) struct Inst {
    pub id: InstanceId,
    pub vertex: usize,
    pub client: StoreClient,
    pub queue: MessageQueue,
    pub alive: bool,
    pub busy: bool,
    pub processed: BTreeSet<LogicalClock>,
    pub stats: InstanceStats,
    pub straggler: Option<(Time, Time)>,
    pub current: Option<Current>,
    pub barrier: Option<Barrier>,
    /// Replay markers seen per session, at intermediate instances.
    pub markers: BTreeMap<u64, usize>,
    pub pending_deletes: BTreeMap<LogicalClock, (u32, Time)>,
    pub crash_plan: Option<(u64, CrashPoint)>,
}

pub(crate) struct HandoverState {
    pub session: u64,
    pub vertex: usize,
    pub old: InstanceId,
    pub new: Option<InstanceId>,
    pub requested_new: Option<u16>,
    pub flows: BTreeSet<FlowKey>,
    pub started: bool,
    pub expected_markers: usize,
    pub got_markers: usize,
    pub released_shards: BTreeSet<u16>,
    pub released: bool,
    pub held: Vec<Packet>,
    pub gate_expected: usize,
    pub gate_got: usize,
    pub held_out: Vec<(Node, Msg)>,
    pub emitted: BTreeMap<FlowKey, Vec<u64>>,
    pub record: usize,
}

impl HandoverState {
    fn gate_open(&self) -> bool {
        self.gate_got >= self.gate_expected
    }

    pub(crate) fn holds_output_of(&self, inst: InstanceId, flow: &FlowKey) -> bool {
        self.started && self.new == Some(inst) && !self.gate_open() && self.flows.contains(flow)
    }
}

pub(crate) struct CloneState {
    pub session: u64,
    pub original: InstanceId,
    pub clone: InstanceId,
    pub base_original: u64,
    pub racing: bool,
    pub record: usize,
}

pub(crate) struct FailoverState {
    pub session: u64,
    pub replacement: InstanceId,
    pub record: usize,
}

/// Result of one run.
pub struct SimOutcome {
    pub report: RunReport,
    pub event_lines: Option<Vec<String>>,
}

pub struct Sim {
    pub(crate) cfg: SimConfig,
    pub(crate) dag: PhysicalDag,
    pub(crate) trace: Arc<Vec<TraceRecord>>,
    pub(crate) now: Time,
    pub(crate) seq: u64,
    pub(crate) events: BTreeMap<(Time, u64), Ev>,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) log: EventLog,
    pub(crate) last_arrival: BTreeMap<(Node, Node), Time>,
    pub(crate) insts: BTreeMap<InstanceId, Inst>,
    pub(crate) roots: Vec<RootNode>,
    pub(crate) shards: Vec<ShardNode>,
    pub(crate) inflight: BTreeMap<(InstanceId, u16), BTreeMap<u64, Operation>>,
    pub(crate) next_op_id: u64,
    pub(crate) next_instance: u16,
    pub(crate) next_session: u64,
    pub(crate) principal: BTreeMap<InstanceId, InstanceId>,
    pub(crate) egress: MessageQueue,
    pub(crate) alerts: BTreeSet<Alert>,
    pub(crate) outputs: Vec<OutputRecord>,
    pub(crate) nf_errors: u64,
    pub(crate) handovers: Vec<HandoverState>,
    pub(crate) clones: Vec<CloneState>,
    pub(crate) failovers: Vec<FailoverState>,
    pub(crate) active_sessions: usize,
    pub(crate) quiet_until: Time,
    pub(crate) deferred_prunes: Vec<LogicalClock>,
    pub(crate) tick_armed: bool,
    pub(crate) checkpoint_armed: bool,
    pub(crate) clocks: BTreeMap<u16, Vec<u64>>,
    pub(crate) crashed_at: BTreeMap<InstanceId, Time>,
    pub(crate) report: RunReport,
}

/// Synchronous store access for one instance during one handler run.
pub(crate) struct Access<'a> {
    pub shards: &'a mut [ShardNode],
    pub inflight: &'a mut BTreeMap<(InstanceId, u16), BTreeMap<u64, Operation>>,
    pub issuer: InstanceId,
    pub now: Time,
    pub blocking: u32,
    pub acks: Vec<(u16, InstanceId, u64)>,
}

impl Access<'_> {
    /// Hands the issuer's still-travelling non-blocking ops for `shard` to the
    /// store, so a blocking op never overtakes them.
    fn drain_inflight(&mut self, shard: u16) {
        if let Some(ops) = self.inflight.remove(&(self.issuer, shard)) {
            let node = &mut self.shards[shard as usize];
            for (_, op) in ops {
                if let Ok(ack) = node.store.apply_nonblocking(op) {
                    self.acks.push((shard, ack.issuer, ack.seq));
                }
            }
            node.store.drain();
        }
    }
}

impl StoreAccess for Access<'_> {
    fn blocking(&mut self, shard: ShardId, op: Operation) -> Result<ApplyResult, StoreError> {
        self.blocking += 1;
        if !self.shards[shard.0 as usize].up {
            return Err(StoreError::Unavailable(shard));
        }
        self.drain_inflight(shard.0);
        self.shards[shard.0 as usize].store.apply(op)
    }

    fn nondet(&mut self, shard: ShardId, clock: LogicalClock, kind: NondetKind) -> Value {
        self.blocking += 1;
        self.shards[shard.0 as usize].store.nondet_value(clock, kind, self.now)
    }

    fn register_callback(&mut self, shard: ShardId, key: &ObjectId, instance: InstanceId) {
        self.shards[shard.0 as usize].store.register_callback(key, instance);
    }
}

impl Sim {
    pub fn new(dag: PhysicalDag, trace: Arc<Vec<TraceRecord>>, cfg: SimConfig) -> Self {
        let shards = (0..dag.shards)
            .map(|s| {
                let mut store = StoreInstance::with_custom(ShardId(s), crate::store::CustomOps::standard(), cfg.seed);
                store.set_emulation(cfg.suppression);
                ShardNode {
                    store,
                    up: true,
                    durable: Vec::new(),
                    crashed_at: 0,
                    lost_duplicates: 0,
                    lost_errors: 0,
                }
            })
            .collect();
        let roots = dag
            .roots
            .iter()
            .map(|r| RootNode {
                state: RootState::new(*r, cfg.persist_every, cfg.drop_threshold),
                up: true,
                tx: VecDeque::new(),
                tx_busy: false,
                buffered: Vec::new(),
                failure: None,
            })
            .collect();
        let next_instance = dag.vertices.iter().flat_map(|v| v.instances.iter()).map(|i| i.0).max().unwrap_or(0) + 1;
        let mut sim = Sim {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            log: EventLog::new(cfg.keep_event_lines),
            egress: MessageQueue::new(cfg.suppression),
            report: RunReport {
                seed: cfg.seed,
                ..RunReport::default()
            },
            cfg,
            dag,
            trace,
            now: 0,
            seq: 0,
            events: BTreeMap::new(),
            last_arrival: BTreeMap::new(),
            insts: BTreeMap::new(),
            roots,
            shards,
            inflight: BTreeMap::new(),
            next_op_id: 0,
            next_instance,
            next_session: 1,
            principal: BTreeMap::new(),
            alerts: BTreeSet::new(),
            outputs: Vec::new(),
            nf_errors: 0,
            handovers: Vec::new(),
            clones: Vec::new(),
            failovers: Vec::new(),
            active_sessions: 0,
            quiet_until: 0,
            deferred_prunes: Vec::new(),
            tick_armed: false,
            checkpoint_armed: false,
            clocks: BTreeMap::new(),
            crashed_at: BTreeMap::new(),
        };
        sim.setup();
        sim
    }

    pub fn set_name(&mut self, name: &str) {
        self.report.name = name.to_string();
    }

    fn setup(&mut self) {
        let record = self.cfg.record_history || self.cfg.actions.iter().any(|a| matches!(a, Action::Handover { .. }));
        for s in &mut self.shards {
            if record {
                s.store.record_history();
            }
        }
        for v in &self.dag.vertices {
            for (index, sub, value) in v.nf.initial_state() {
                let key = StateKey::shared(v.id, crate::model::obj_key(index, &sub)).object_id();
                let shard = shard_for(&key, self.dag.shards);
                self.shards[shard.0 as usize].store.install(key, value, None);
            }
        }
        for s in &mut self.shards {
            let cp = s.store.checkpoint_now(0);
            s.durable.push(cp);
        }
        let all: Vec<(usize, InstanceId)> = self
            .dag
            .vertices
            .iter()
            .enumerate()
            .flat_map(|(k, v)| v.instances.iter().map(move |i| (k, *i)))
            .collect();
        for (k, id) in all {
            self.spawn_instance(id, k);
        }
        for k in 0..self.dag.vertices.len() {
            self.refresh_permissions(k);
        }
        for f in self.cfg.faults.clone() {
            match f {
                Fault::Instance { instance, trigger } => match trigger {
                    Trigger::At { time } => self.schedule(time, Ev::CrashInstance(InstanceId(instance))),
                    Trigger::AfterProcessed { count, point } => {
                        if let Some(i) = self.insts.get_mut(&InstanceId(instance)) {
                            i.crash_plan = Some((count, point));
                        } else {
                            self.report.warnings.push(format!("fault names unknown instance {instance}"));
                        }
                    }
                },
                Fault::Root { root, time } => self.schedule(time, Ev::CrashRoot(root)),
                Fault::Shard { shard, time } => self.schedule(time, Ev::CrashShard(shard)),
            }
        }
        for a in self.cfg.actions.clone() {
            match a {
                Action::Clone { instance, time } => self.schedule(time, Ev::StartClone(InstanceId(instance))),
                Action::Handover { from, to, flows, time } => {
                    let idx = self.plan_handover(InstanceId(from), to, flows, time);
                    if let Some(idx) = idx {
                        self.schedule(time, Ev::StartHandover(idx));
                    }
                }
            }
        }
        if !self.trace.is_empty() {
            self.schedule(self.trace[0].time, Ev::Ingest(0));
        }
        self.arm_timers();
    }

    pub(crate) fn client_config(&self) -> ClientConfig {
        ClientConfig {
            flush_every: self.cfg.flush_every,
            flush_interval: self.cfg.flush_interval,
            store_rtt: self.cfg.store_rtt,
            max_tries: 5,
            shards: self.dag.shards,
        }
    }

    pub(crate) fn spawn_instance(&mut self, id: InstanceId, vertex: usize) {
        let v = &self.dag.vertices[vertex];
        let client = StoreClient::new(id, v.id, v.decls.clone(), self.client_config());
        let straggler = self
            .cfg
            .stragglers
            .iter()
            .find(|s| s.instance == id.0)
            .map(|s| (s.min, s.max.max(s.min)));
        self.insts.insert(
            id,
            Inst {
                id,
                vertex,
                client,
                queue: MessageQueue::new(self.cfg.suppression),
                alive: true,
                busy: false,
                processed: BTreeSet::new(),
                stats: InstanceStats::default(),
                straggler,
                current: None,
                barrier: None,
                markers: BTreeMap::new(),
                pending_deletes: BTreeMap::new(),
                crash_plan: None,
            },
        );
    }

    /// Grants conditional caching where the vertex's split gives one
    /// accessor per object value; revoked while a clone races.
    pub(crate) fn refresh_permissions(&mut self, vertex: usize) {
        let v = &self.dag.vertices[vertex];
        let racing: BTreeSet<InstanceId> = self
            .clones
            .iter()
            .filter(|c| c.racing)
            .flat_map(|c| [c.original, c.clone])
            .collect();
        let par = v.instances.len();
        let scope = v.plan.scope.clone();
        let decls = v.decls.clone();
        let ids: Vec<InstanceId> = self
            .insts
            .values()
            .filter(|i| i.vertex == vertex && i.alive)
            .map(|i| i.id)
            .collect();
        let vertex_racing = ids.iter().any(|i| racing.contains(i));
        for id in ids {
            for (index, d) in decls.iter().enumerate() {
                if d.policy() != CachePolicy::CrossflowConditionalCache {
                    continue;
                }
                let ok = !vertex_racing && conditional_cache_permitted(d.scope.as_ref(), &scope, par);
                self.with_access(id, |inst, acc| {
                    let now = acc.now;
                    inst.client.set_permission(index as u16, ok, acc, now)
                });
            }
        }
    }

    pub(crate) fn schedule(&mut self, at: Time, ev: Ev) {
        self.seq += 1;
        self.events.insert((at.max(self.now), self.seq), ev);
    }

    fn arm_timers(&mut self) {
        if !self.tick_armed {
            self.tick_armed = true;
            let t = self.now + self.cfg.tick;
            self.schedule(t, Ev::Tick);
        }
        if let Some(iv) = self.cfg.checkpoint_interval {
            if !self.checkpoint_armed && iv > 0 {
                self.checkpoint_armed = true;
                let t = self.now + iv;
                self.schedule(t, Ev::Checkpoint);
            }
        }
    }

    pub(crate) fn send(&mut self, from: Node, to: Node, msg: Msg) {
        let host_edge = matches!(from, Node::Host) || matches!(to, Node::Host);
        let base = if host_edge { self.cfg.host_delay } else { self.cfg.link_delay };
        let jitter = if self.cfg.link_jitter > 0 {
            self.rng.gen_range(0..=self.cfg.link_jitter)
        } else {
            0
        };
        let chan = (from, to);
        let mut at = self.now + base + jitter;
        if let Some(last) = self.last_arrival.get(&chan) {
            at = at.max(*last);
        }
        self.last_arrival.insert(chan, at);
        self.schedule(at, Ev::Deliver { from, to, msg });
    }

    /// Sends a packet towards an instance, replicating new input of a
    /// cloned instance to its clone.
    pub(crate) fn send_packet(&mut self, from: Node, dst: InstanceId, pkt: Packet) {
        if !pkt.control && pkt.replay_target().is_none() {
            if let Some(v) = self.dag.vertex_of(dst).or_else(|| self.insts.get(&dst).map(|i| i.vertex)) {
                let flow = pkt.client_flow();
                for h in self.handovers.iter_mut() {
                    if h.vertex == v && h.flows.contains(&flow) {
                        h.emitted.entry(flow).or_default().push(pkt.clock.raw());
                    }
                }
            }
            let replicas: Vec<InstanceId> = self
                .clones
                .iter()
                .filter(|c| c.racing && c.original == dst)
                .map(|c| c.clone)
                .collect();
            for c in replicas {
                self.send(from, Node::Inst(c), Msg::Packet(pkt.clone()));
            }
        }
        self.send(from, Node::Inst(dst), Msg::Packet(pkt));
    }

    pub(crate) fn alive(&self, id: InstanceId) -> bool {
        self.insts.get(&id).is_some_and(|i| i.alive)
    }

    pub(crate) fn any_shard_down(&self) -> bool {
        self.shards.iter().any(|s| !s.up)
    }

    /// Runs `f` with synchronous store access on behalf of instance `id`,
    /// then ships the acks for any ops the access drained.
    pub(crate) fn with_access<R>(&mut self, id: InstanceId, f: impl FnOnce(&mut Inst, &mut Access<'_>) -> R) -> (R, u32) {
        let now = self.now;
        let inst = self.insts.get_mut(&id).expect("instance exists");
        let mut acc = Access {
            shards: &mut self.shards,
            inflight: &mut self.inflight,
            issuer: id,
            now,
            blocking: 0,
            acks: Vec::new(),
        };
        let r = f(inst, &mut acc);
        let blocking = acc.blocking;
        let acks = std::mem::take(&mut acc.acks);
        for (shard, issuer, seq) in acks {
            self.send(Node::Shard(shard), Node::Inst(issuer), Msg::StoreAck { seq });
        }
        self.pump_effects();
        (r, blocking)
    }

    /// Turns store side effects into messages.
    pub(crate) fn pump_effects(&mut self) {
        for s in 0..self.shards.len() {
            let effects = self.shards[s].store.take_effects();
            for e in effects {
                match e {
                    crate::store::Effect::Commit { clock, tag, .. } => {
                        self.send(Node::Shard(s as u16), Node::Root(clock.root().0), Msg::Commit { clock, tag })
                    }
                    crate::store::Effect::Refresh { instance, key, value, .. } => {
                        self.send(Node::Shard(s as u16), Node::Inst(instance), Msg::Refresh { key, value })
                    }
                    crate::store::Effect::HandoverReleased { instance, session } => {
                        self.send(Node::Shard(s as u16), Node::Inst(instance), Msg::Released { session })
                    }
                }
            }
        }
    }

    /// Ships an instance's queued non-blocking operations.
    pub(crate) fn ship_outbox(&mut self, id: InstanceId) {
        let Some(inst) = self.insts.get_mut(&id) else { return };
        let out = inst.client.take_outbox();
        for (shard, op) in out {
            self.ship_op(id, shard.0, op);
        }
    }

    fn ship_op(&mut self, id: InstanceId, shard: u16, op: Operation) {
        if !self.shards[shard as usize].up {
            return;
        }
        self.next_op_id += 1;
        let opid = self.next_op_id;
        self.inflight.entry((id, shard)).or_default().insert(opid, op);
        self.send(Node::Inst(id), Node::Shard(shard), Msg::StoreOp { id: opid });
    }

    /// Upstream senders of vertex `k`: the roots for the first vertex, else
    /// the instances of the previous vertex.
    pub(crate) fn sender_count(&self, k: usize) -> usize {
        if k == 0 {
            self.roots.len()
        } else {
            self.dag.vertices[k - 1].instances.len()
        }
    }

    pub fn run(mut self) -> SimOutcome {
        loop {
            let Some((&(t, s), _)) = self.events.iter().next() else {
                if self.force_flush() {
                    continue;
                }
                break;
            };
            let ev = self.events.remove(&(t, s)).expect("event present");
            if t > self.cfg.max_time {
                self.report.warnings.push(format!("stopped at time limit {}", self.cfg.max_time));
                break;
            }
            self.now = t;
            self.dispatch(ev);
        }
        self.finish()
    }

    /// Pushes out every dirty cache entry once traffic stopped.
    fn force_flush(&mut self) -> bool {
        let ids: Vec<InstanceId> = self
            .insts
            .values()
            .filter(|i| i.alive && (i.client.has_dirty() || i.client.unacked_len() > 0 || !i.pending_deletes.is_empty()))
            .map(|i| i.id)
            .collect();
        if ids.is_empty() || self.any_shard_down() {
            return false;
        }
        let mut any = false;
        for id in ids {
            let inst = self.insts.get_mut(&id).expect("alive");
            if inst.client.has_dirty() {
                inst.client.periodic_flush(self.now, true);
                any = true;
            }
            self.ship_outbox(id);
        }
        if !any {
            // only retransmissions or deletes are outstanding: let timers run
            self.arm_timers();
            return !self.events.is_empty() && self.outstanding_work();
        }
        self.arm_timers();
        true
    }

    fn outstanding_work(&self) -> bool {
        self.insts
            .values()
            .any(|i| i.alive && (i.client.unacked_len() > 0 || !i.pending_deletes.is_empty()))
    }

    fn has_foreground_events(&self) -> bool {
        self.events.values().any(|e| !matches!(e, Ev::Tick | Ev::Checkpoint | Ev::PruneFlush))
    }

    fn dispatch(&mut self, ev: Ev) {
        match ev {
            Ev::Ingest(i) => {
                let r = &self.trace[i];
                self.log.record(self.now, "host", "send", &i.to_string());
                let pkt = Packet {
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
                let root = self.root_for(&pkt.client_flow());
                self.send(Node::Host, Node::Root(root), Msg::Packet(pkt));
                self.report.metrics.ingested += 1;
                if i + 1 < self.trace.len() {
                    let t = self.trace[i + 1].time;
                    self.schedule(t, Ev::Ingest(i + 1));
                }
            }
            Ev::Deliver { from, to, msg } => {
                let (kind, payload) = msg.describe();
                self.log.record(self.now, &to.to_string(), kind, &format!("{from} {payload}"));
                self.deliver(from, to, msg);
            }
            Ev::RootTx(r) => {
                self.log.record(self.now, &format!("R{r}"), "tx", "");
                self.root_tx(r);
            }
            Ev::Push(id) => {
                self.log.record(self.now, &id.to_string(), "push", "");
                if self.alive(id) {
                    self.ship_outbox(id);
                }
            }
            Ev::Forward(id) => {
                self.log.record(self.now, &id.to_string(), "fwd", "");
                if self.alive(id) {
                    self.forward(id);
                }
            }
            Ev::Finish(id) => {
                self.log.record(self.now, &id.to_string(), "done", "");
                if self.alive(id) {
                    self.finish_packet(id);
                }
            }
            Ev::Tick => {
                self.log.record(self.now, "timer", "tick", "");
                self.tick_armed = false;
                self.tick();
            }
            Ev::Checkpoint => {
                self.log.record(self.now, "timer", "checkpoint", "");
                self.checkpoint_armed = false;
                for s in &mut self.shards {
                    if s.up {
                        let cp = s.store.checkpoint_now(self.now);
                        s.durable.push(cp);
                    }
                }
                if self.has_foreground_events() || self.outstanding_work() {
                    self.arm_timers();
                }
            }
            Ev::CrashInstance(id) => {
                self.log.record(self.now, &id.to_string(), "crash", "");
                self.crash_instance(id);
            }
            Ev::CrashRoot(r) => {
                self.log.record(self.now, &format!("R{r}"), "crash", "");
                self.crash_root(r);
            }
            Ev::CrashShard(s) => {
                self.log.record(self.now, &format!("S{s}"), "crash", "");
                self.crash_shard(s);
            }
            Ev::Failover(id) => {
                self.log.record(self.now, &id.to_string(), "failover", "");
                self.failover(id);
            }
            Ev::RootRecover(r) => {
                self.log.record(self.now, &format!("R{r}"), "recover", "");
                self.recover_root(r);
            }
            Ev::StoreRecover(s) => {
                self.log.record(self.now, &format!("S{s}"), "recover", "");
                self.recover_shard(s);
            }
            Ev::StartClone(id) => {
                self.log.record(self.now, &id.to_string(), "clone", "");
                self.start_clone(id);
            }
            Ev::StartHandover(idx) => {
                self.log.record(self.now, "ctl", "handover", &idx.to_string());
                self.start_handover(idx);
            }
            Ev::RaceEnd(session) => {
                self.log.record(self.now, "ctl", "race-end", &session.to_string());
                self.end_race(session);
            }
            Ev::PruneFlush => {
                self.log.record(self.now, "ctl", "prune", "");
                self.flush_prunes();
            }
        }
    }

    pub(crate) fn root_for(&self, flow: &FlowKey) -> u16 {
        (stable_hash(&scope_project(flow, &Scope::five_tuple())) % self.roots.len() as u64) as u16
    }

    fn deliver(&mut self, from: Node, to: Node, msg: Msg) {
        match to {
            Node::Host => {
                if let Msg::Output(pkt) = msg {
                    self.egress_output(pkt);
                }
            }
            Node::Root(r) => self.root_receive(r, from, msg),
            Node::Shard(s) => self.shard_receive(s, from, msg),
            Node::Inst(id) => {
                if !self.alive(id) {
                    if let Msg::StoreOp { .. } = msg {
                        // unreachable: ops travel towards shards
                    }
                    return;
                }
                self.instance_receive(id, from, msg);
            }
        }
    }

    fn egress_output(&mut self, pkt: Packet) {
        if !self.egress.enqueue(pkt) {
            return;
        }
        while let Some(p) = self.egress.dequeue() {
            let rec = &self.trace[p.trace_index as usize];
            self.outputs.push(OutputRecord {
                trace_index: p.trace_index,
                direction: p.direction,
                flow: rec.client_flow(),
                tuple: p.flow,
                payload_len: p.payload_len,
            });
        }
    }

    fn root_receive(&mut self, r: u16, from: Node, msg: Msg) {
        let root = &mut self.roots[r as usize];
        match msg {
            Msg::Packet(pkt) => {
                if !root.up {
                    root.buffered.push(pkt);
                    return;
                }
                self.root_ingest(r, pkt);
            }
            Msg::Commit { clock, tag } => {
                if root.up && root.state.commit(clock, tag) == crate::runtime::DeleteOutcome::Deleted {
                    self.on_deleted(clock);
                }
            }
            Msg::Delete { clock, vec } => {
                if !root.up {
                    return;
                }
                if root.state.delete(clock, vec) == crate::runtime::DeleteOutcome::Deleted {
                    self.on_deleted(clock);
                }
                self.send(Node::Root(r), from, Msg::DeleteAck { clock });
            }
            _ => {}
        }
    }

    pub(crate) fn root_ingest(&mut self, r: u16, pkt: Packet) {
        let first = self.dag.vertices[0].plan.route(&pkt);
        let root = &mut self.roots[r as usize];
        if let Some(p) = root.state.ingest(pkt, first) {
            self.clocks.entry(r).or_default().push(p.clock.counter());
            root.tx.push_back((first, p));
            self.arm_root_tx(r);
        }
    }

    pub(crate) fn arm_root_tx(&mut self, r: u16) {
        let root = &mut self.roots[r as usize];
        if !root.tx_busy && !root.tx.is_empty() {
            root.tx_busy = true;
            let t = self.now + self.cfg.root_tx;
            self.schedule(t, Ev::RootTx(r));
        }
    }

    fn root_tx(&mut self, r: u16) {
        let root = &mut self.roots[r as usize];
        root.tx_busy = false;
        if !root.up {
            return;
        }
        let Some((mut dst, pkt)) = root.tx.pop_front() else { return };
        if !self.alive(dst) && !pkt.control && pkt.replay_target().is_none() {
            dst = self.dag.vertices[0].plan.route(&pkt);
        }
        self.send_packet(Node::Root(r), dst, pkt);
        self.arm_root_tx(r);
    }

    fn shard_receive(&mut self, s: u16, from: Node, msg: Msg) {
        let Node::Inst(issuer) = from else { return };
        let Msg::StoreOp { id } = msg else { return };
        let op = self.inflight.get_mut(&(issuer, s)).and_then(|m| m.remove(&id));
        let Some(op) = op else { return };
        if !self.shards[s as usize].up {
            return;
        }
        let node = &mut self.shards[s as usize];
        if let Ok(ack) = node.store.apply_nonblocking(op) {
            node.store.drain();
            self.send(Node::Shard(s), Node::Inst(ack.issuer), Msg::StoreAck { seq: ack.seq });
        }
        self.pump_effects();
    }

    fn instance_receive(&mut self, id: InstanceId, from: Node, msg: Msg) {
        match msg {
            Msg::Packet(pkt) => self.instance_packet(id, pkt),
            Msg::StoreAck { seq } => {
                if let Node::Shard(s) = from {
                    self.insts.get_mut(&id).expect("alive").client.on_ack(ShardId(s), seq);
                }
            }
            Msg::Refresh { key, value } => self.insts.get_mut(&id).expect("alive").client.on_refresh(&key, value),
            Msg::Released { session } => {
                if let Node::Shard(s) = from {
                    self.on_released(id, session, s);
                }
            }
            Msg::DeleteAck { clock } => {
                self.insts.get_mut(&id).expect("alive").pending_deletes.remove(&clock);
            }
            Msg::GateReached { session } => self.on_gate(id, session),
            _ => {}
        }
    }

    fn instance_packet(&mut self, id: InstanceId, pkt: Packet) {
        if pkt.control && pkt.has_mark(MarkKind::LastOfMove) {
            if let Some(h) = pkt.session.and_then(|s| self.handovers.iter().find(|h| h.session == s)) {
                let vertex = self.insts[&id].vertex;
                if vertex == h.vertex + 1 {
                    let new = h.new.expect("started handover has a target");
                    let s = h.session;
                    self.send(Node::Inst(id), Node::Inst(new), Msg::GateReached { session: s });
                    return;
                }
            }
        }
        if !pkt.control {
            let flow = pkt.client_flow();
            if let Some(h) = self
                .handovers
                .iter_mut()
                .find(|h| h.started && h.new == Some(id) && !h.released && h.flows.contains(&flow))
            {
                let inst = self.insts.get_mut(&id).expect("alive");
                if inst.queue.admit(&pkt) {
                    h.held.push(pkt);
                }
                return;
            }
        }
        let inst = self.insts.get_mut(&id).expect("alive");
        if inst.barrier.is_some() && !pkt.control && pkt.replay_target() != Some(id) {
            if inst.queue.admit(&pkt) {
                inst.queue.hold(pkt);
            }
            return;
        }
        inst.queue.enqueue(pkt);
        self.kick(id);
    }

    pub(crate) fn kick(&mut self, id: InstanceId) {
        if self.any_shard_down() {
            return;
        }
        loop {
            let Some(inst) = self.insts.get_mut(&id) else { return };
            if !inst.alive || inst.busy {
                return;
            }
            let Some(pkt) = inst.queue.dequeue() else { return };
            if pkt.control {
                self.log.record(self.now, &id.to_string(), "ctl", &format!("{:?}", pkt.session));
                self.control(id, pkt);
                continue;
            }
            self.process(id, pkt);
            return;
        }
    }

    fn process(&mut self, id: InstanceId, mut pkt: Packet) {
        let vertex = self.insts[&id].vertex;
        let nf: Arc<dyn NetworkFunction> = self.dag.vertices[vertex].nf.clone();
        let mode = {
            let inst = &self.insts[&id];
            if pkt.replay_target() == Some(id) {
                crate::client::Mode::Replay
            } else if inst.processed.contains(&pkt.clock) {
                crate::client::Mode::Dry
            } else {
                crate::client::Mode::Normal
            }
        };
        self.log.record(
            self.now,
            &id.to_string(),
            "process",
            &format!("{} {} {:?}", pkt.clock.raw(), pkt.trace_index, mode),
        );
        let now = self.now;
        let ((verdict, vec, alerts, errors), blocking) = self.with_access(id, |inst, acc| {
            let mut ctx = NfContext::new(&mut inst.client, acc, &pkt, mode, now);
            let verdict = nf.process(&mut pkt, &mut ctx);
            (verdict, ctx.vec, std::mem::take(&mut ctx.alerts), ctx.errors.len())
        });
        self.nf_errors += errors as u64;
        self.alerts.extend(alerts);
        pkt.vec ^= vec;
        let extra = match self.insts[&id].straggler {
            Some((lo, hi)) => self.rng.gen_range(lo..=hi),
            None => 0,
        };
        let service = (self.cfg.service + extra + self.cfg.store_rtt * blocking as Time).max(8);
        if mode == crate::client::Mode::Replay {
            pkt.clear_mark(MarkKind::Replay);
            self.note_replayed(id);
        }
        let inst = self.insts.get_mut(&id).expect("alive");
        inst.processed.insert(pkt.clock);
        inst.stats.processed += 1;
        inst.stats.busy_time += service;
        inst.busy = true;
        let count = inst.stats.processed;
        let crash = match inst.crash_plan {
            Some((c, point)) if c == count => {
                inst.crash_plan = None;
                Some(point)
            }
            _ => None,
        };
        inst.current = Some(Current { pkt, verdict });
        self.schedule(now + service / 2, Ev::Push(id));
        self.schedule(now + service, Ev::Forward(id));
        self.schedule(now + service + 2, Ev::Finish(id));
        if let Some(point) = crash {
            self.schedule(now + point.offset(service), Ev::CrashInstance(id));
        }
    }

    fn forward(&mut self, id: InstanceId) {
        let inst = &self.insts[&id];
        let Some(cur) = inst.current.as_ref() else { return };
        if cur.verdict == Verdict::Drop {
            return;
        }
        let pkt = cur.pkt.clone();
        let vertex = inst.vertex;
        let flow = pkt.client_flow();
        let held = self.handovers.iter().position(|h| h.vertex == vertex && h.holds_output_of(id, &flow));
        let last = vertex + 1 == self.dag.vertices.len();
        let targets: Vec<(Node, Msg)> = if last {
            vec![(Node::Host, Msg::Output(pkt))]
        } else {
            self.next_hops(vertex + 1, pkt)
        };
        for (to, msg) in targets {
            if let Some(h) = held {
                self.handovers[h].held_out.push((to, msg));
                continue;
            }
            self.emit(Node::Inst(id), to, msg);
        }
    }

    pub(crate) fn emit(&mut self, from: Node, to: Node, msg: Msg) {
        match (to, msg) {
            (Node::Inst(dst), Msg::Packet(p)) => self.send_packet(from, dst, p),
            (to, msg) => self.send(from, to, msg),
        }
    }

    /// Where a packet leaving for vertex `k` goes. Replay copies reach the
    /// replay target's vertex only through the target's partition.
    fn next_hops(&self, k: usize, pkt: Packet) -> Vec<(Node, Msg)> {
        let v = &self.dag.vertices[k];
        let route = v.plan.route(&pkt);
        if let Some(t) = pkt.replay_target() {
            if self.insts.get(&t).is_some_and(|i| i.vertex == k) {
                let principal = self.principal.get(&t).copied();
                if route == t || Some(route) == principal {
                    return vec![(Node::Inst(t), Msg::Packet(pkt))];
                }
                return Vec::new();
            }
        }
        vec![(Node::Inst(route), Msg::Packet(pkt))]
    }

    fn finish_packet(&mut self, id: InstanceId) {
        let inst = self.insts.get_mut(&id).expect("alive");
        let cur = inst.current.take();
        inst.busy = false;
        if let Some(cur) = cur {
            let clock = cur.pkt.clock;
            let vec = cur.pkt.vec;
            let last = inst.vertex + 1 == self.dag.vertices.len();
            if last || cur.verdict == Verdict::Drop {
                inst.pending_deletes.insert(clock, (vec, self.now + self.cfg.delete_retry));
                self.send(Node::Inst(id), Node::Root(clock.root().0), Msg::Delete { clock, vec });
                self.arm_timers();
            }
        }
        self.kick(id);
    }

    fn control(&mut self, id: InstanceId, pkt: Packet) {
        let Some(session) = pkt.session else { return };
        if pkt.has_mark(MarkKind::LastReplay) {
            let target = pkt.replay_target();
            if target == Some(id) {
                let done = {
                    let inst = self.insts.get_mut(&id).expect("alive");
                    match inst.barrier.as_mut() {
                        Some(b) if b.session == session => {
                            b.got += 1;
                            b.got >= b.expected
                        }
                        _ => false,
                    }
                };
                if done {
                    let inst = self.insts.get_mut(&id).expect("alive");
                    inst.barrier = None;
                    inst.queue.release_held();
                    self.replay_complete(id, session);
                }
                return;
            }
            let Some(target) = target else { return };
            let vertex = self.insts[&id].vertex;
            let expected = self.sender_count(vertex);
            let inst = self.insts.get_mut(&id).expect("alive");
            let n = inst.markers.entry(session).or_insert(0);
            *n += 1;
            if *n == expected {
                inst.markers.remove(&session);
                let tv = self.insts.get(&target).map(|i| i.vertex).unwrap_or(usize::MAX);
                let next: Vec<InstanceId> = if vertex + 1 == tv {
                    vec![target]
                } else if vertex + 1 < self.dag.vertices.len() {
                    self.dag.vertices[vertex + 1].instances.clone()
                } else {
                    Vec::new()
                };
                for n in next {
                    self.send(Node::Inst(id), Node::Inst(n), Msg::Packet(pkt.clone()));
                }
            }
            return;
        }
        if pkt.has_mark(MarkKind::LastOfMove) {
            self.on_move_marker(id, session);
        }
    }

    fn tick(&mut self) {
        let ids: Vec<InstanceId> = self.insts.values().filter(|i| i.alive).map(|i| i.id).collect();
        let stores_up = !self.any_shard_down();
        for id in ids {
            let now = self.now;
            let inst = self.insts.get_mut(&id).expect("alive");
            inst.client.periodic_flush(now, false);
            let retrans = if stores_up { inst.client.due_retransmits(now) } else { Vec::new() };
            let mut resend = Vec::new();
            for (clock, (vec, deadline)) in inst.pending_deletes.iter_mut() {
                if *deadline <= now {
                    *deadline = now + self.cfg.delete_retry;
                    resend.push((*clock, *vec));
                }
            }
            self.ship_outbox(id);
            for (shard, op) in retrans {
                self.ship_op(id, shard.0, op);
            }
            for (clock, vec) in resend {
                self.send(Node::Inst(id), Node::Root(clock.root().0), Msg::Delete { clock, vec });
            }
        }
        let dirty = self.insts.values().any(|i| i.alive && i.client.has_dirty());
        if self.has_foreground_events() || self.outstanding_work() || dirty {
            self.arm_timers();
        }
    }

    pub(crate) fn on_deleted(&mut self, clock: LogicalClock) {
        if self.active_sessions > 0 || self.now < self.quiet_until {
            self.deferred_prunes.push(clock);
            return;
        }
        self.prune(clock);
    }

    fn prune(&mut self, clock: LogicalClock) {
        for s in &mut self.shards {
            if s.up {
                s.store.prune_clock(clock);
            }
        }
        for i in self.insts.values_mut() {
            i.queue.prune(clock);
            i.processed.remove(&clock);
        }
    }

    fn flush_prunes(&mut self) {
        if self.active_sessions > 0 {
            return;
        }
        if self.now < self.quiet_until {
            let t = self.quiet_until;
            self.schedule(t, Ev::PruneFlush);
            return;
        }
        for c in std::mem::take(&mut self.deferred_prunes) {
            self.prune(c);
        }
    }

    pub(crate) fn session_ended(&mut self) {
        self.active_sessions = self.active_sessions.saturating_sub(1);
        self.quiet_until = self.now + self.cfg.prune_quiet;
        let t = self.quiet_until;
        self.schedule(t, Ev::PruneFlush);
    }

    fn finish(mut self) -> SimOutcome {
        let mut report = std::mem::take(&mut self.report);
        report.digest = self.log.digest();
        report.events = self.log.events;
        report.end_time = self.now;
        let mut store = BTreeMap::new();
        let mut history = BTreeMap::new();
        for s in &self.shards {
            store.extend(s.store.snapshot());
            if let Some(h) = s.store.history() {
                history.extend(h.iter().map(|(k, v)| (k.clone(), v.clone())));
            }
        }
        let m = &mut report.metrics;
        for i in self.insts.values() {
            m.delivered_duplicates += i.queue.stats.duplicates_delivered;
            m.suppressed += i.queue.stats.suppressed;
            m.ownership_violations += i.client.stats.ownership_violations;
            m.retransmissions += i.client.stats.retransmissions;
            m.fatal_ops += i.client.fatal().len() as u64;
            m.processed.insert(i.id, i.stats.processed);
        }
        m.egress_duplicates = self.egress.stats.duplicates_delivered;
        m.suppressed += self.egress.stats.suppressed;
        for s in &self.shards {
            m.duplicate_applications += s.store.stats.duplicate_applications + s.lost_duplicates;
            m.emulated += s.store.stats.emulated;
            m.store_errors += s.store.errors().len() as u64 + s.lost_errors;
        }
        for r in &self.roots {
            m.deleted += r.state.stats.deleted;
            m.unknown_deletes += r.state.stats.unknown_deletes;
            m.dropped_threshold += r.state.stats.dropped_threshold;
            m.max_root_log = m.max_root_log.max(r.state.stats.max_log);
        }
        m.nf_errors = self.nf_errors;
        m.outputs = self.outputs.len() as u64;
        for h in &self.handovers {
            let Some(rec) = report.handovers.get_mut(h.record) else { continue };
            let v = &self.dag.vertices[h.vertex];
            for flow in &h.flows {
                let mut applied = BTreeMap::new();
                for (index, d) in v.decls.iter().enumerate() {
                    if d.kind != crate::client::ScopeKind::PerFlow {
                        continue;
                    }
                    let scope = d.scope.clone().unwrap_or_else(Scope::five_tuple);
                    let key = StateKey::shared(v.id, crate::model::obj_key(index as u16, &scope_project(flow, &scope)));
                    let mut oid = key.object_id();
                    oid.per_flow = true;
                    let clocks = history
                        .get(&oid)
                        .map(|h: &Vec<crate::store::HistoryEntry>| h.iter().map(|e| e.clock.raw()).collect())
                        .unwrap_or_default();
                    applied.insert(index as u16, clocks);
                }
                rec.flows.push(crate::report::FlowOrder {
                    flow: *flow,
                    emitted: h.emitted.get(flow).cloned().unwrap_or_default(),
                    applied,
                });
            }
        }
        for i in self.insts.values() {
            if i.alive && (!i.queue.is_empty() || i.queue.held_len() > 0 || i.current.is_some()) {
                report.warnings.push(format!(
                    "{} ended with {} queued and {} held packets",
                    i.id,
                    i.queue.len(),
                    i.queue.held_len()
                ));
            }
            if i.alive && !i.client.fatal().is_empty() {
                report.warnings.push(format!("{} gave up on {} store ops", i.id, i.client.fatal().len()));
            }
        }
        for r in &self.roots {
            if r.up && r.state.log_len() > 0 {
                report.warnings.push(format!("{} ended with {} undeleted packets", r.state.id, r.state.log_len()));
            }
        }
        for h in &self.handovers {
            if h.started && !(h.released && h.gate_open()) {
                report.warnings.push(format!("handover session {} did not complete", h.session));
            }
        }
        report.store = store.into_iter().collect();
        report.history = history.into_iter().collect();
        report.outputs = std::mem::take(&mut self.outputs);
        report.outputs.sort();
        report.alerts = self.alerts.iter().cloned().collect();
        report.clocks = std::mem::take(&mut self.clocks);
        report.plans = self
            .dag
            .vertices
            .iter()
            .map(|v| (v.name.clone(), v.plan.digest()))
            .collect();
        let lines = self.log.lines().map(|l| l.to_vec());
        SimOutcome {
            report,
            event_lines: lines,
        }
    }
}

/// Builds and runs a simulation.
pub fn simulate(dag: PhysicalDag, trace: Arc<Vec<TraceRecord>>, cfg: SimConfig, name: &str) -> SimOutcome {
    let mut sim = Sim::new(dag, trace, cfg);
    sim.set_name(name);
    sim.run()
}
