//! External state store.
//!
//! A [`StoreInstance`] is one shard of the datastore. It serializes every
//! offloaded operation, keeps the per-(object, clock) update log used to
//! emulate re-executed updates, tracks the timestamp-set (TS) of the last
//! shared mutation executed for each NF instance, mirrors the shared-state
//! write-ahead log, and produces checkpoints for crash recovery.
//!
//! The store is a plain synchronous state machine. Messages it wants sent
//! (commit signals to roots, cache refreshes, handover notifications) are
//! queued as [`Effect`]s and collected by the caller with
//! [`StoreInstance::take_effects`].

pub mod codec;
pub mod recovery;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{InstanceId, LogicalClock, ObjectId, OpKind, OpMode, Operation, ShardId, Time, Ts, TsEntry, Value};

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StoreError {
    #[error("pop from empty or absent list at {0}")]
    EmptyList(ObjectId),
    #[error("type mismatch at {key}: expected {expected}, found {found}")]
    TypeError {
        key: ObjectId,
        expected: String,
        found: String,
    },
    #[error("{issuer} does not own {key} (owner {owner:?})")]
    OwnershipViolation {
        key: ObjectId,
        owner: Option<InstanceId>,
        issuer: InstanceId,
    },
    #[error("object {0} not found")]
    NotFound(ObjectId),
    #[error("unknown custom operation {0:?}")]
    UnknownCustom(String),
    #[error("custom operation {name:?} failed: {reason}")]
    CustomFailed { name: String, reason: String },
    #[error("non-blocking submission of a non-mutation at {0}")]
    NotMutation(ObjectId),
    #[error("missing WAL segment for {instance} on {shard}: expected seq {expected}, found {found}")]
    RecoveryGap {
        instance: InstanceId,
        shard: ShardId,
        expected: u64,
        found: u64,
    },
    #[error("no TS candidates for selection")]
    NoCandidates,
    #[error("store shard {0} is unavailable")]
    Unavailable(ShardId),
}

/// A store-side custom operation: `(current, arg) -> (new_state, reply)`.
pub type CustomFn = fn(&Value, &Value) -> Result<(Value, Value), String>;

#[derive(Clone, Default)]
pub struct CustomOps(BTreeMap<String, CustomFn>);

impl CustomOps {
    pub fn new() -> Self {
        CustomOps::default()
    }

    pub fn register(&mut self, name: &str, f: CustomFn) {
        self.0.insert(name.to_string(), f);
    }

    pub fn get(&self, name: &str) -> Option<CustomFn> {
        self.0.get(name).copied()
    }

    /// The operations every store loads at construction.
    pub fn standard() -> Self {
        let mut ops = CustomOps::new();
        ops.register("pick_least_loaded", pick_least_loaded);
        ops.register("min_clock", min_clock);
        ops.register("max_clock", max_clock);
        ops.register("release_backend", release_backend);
        ops
    }
}

impl std::fmt::Debug for CustomOps {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.0.keys()).finish()
    }
}

/// Atomically selects the backend with the fewest active connections
/// (ties go to the smallest name) and increments it. State is a map
/// backend → count; the reply is the chosen backend name as bytes.
pub fn pick_least_loaded(current: &Value, _arg: &Value) -> Result<(Value, Value), String> {
    let map = current.as_map().ok_or_else(|| format!("expected map, found {}", current.type_name()))?;
    let mut best: Option<(&String, i64)> = None;
    for (name, load) in map {
        let load = load.as_int().ok_or("non-integer load")?;
        if best.is_none_or(|(_, b)| load < b) {
            best = Some((name, load));
        }
    }
    let (name, load) = best.ok_or("empty backend set")?;
    let name = name.clone();
    let mut next = map.clone();
    next.insert(name.clone(), Value::Int(load + 1));
    Ok((Value::Map(next), Value::Bytes(name.into_bytes())))
}

/// Decrements the named backend's connection count (not below zero).
pub fn release_backend(current: &Value, arg: &Value) -> Result<(Value, Value), String> {
    let map = current.as_map().ok_or_else(|| format!("expected map, found {}", current.type_name()))?;
    let name = match arg {
        Value::Bytes(b) => String::from_utf8(b.clone()).map_err(|_| "backend name is not utf-8")?,
        other => return Err(format!("expected backend name, found {}", other.type_name())),
    };
    let mut next = map.clone();
    let load = next.get(&name).and_then(Value::as_int).ok_or("unknown backend")?;
    next.insert(name, Value::Int((load - 1).max(0)));
    let out = Value::Map(next);
    Ok((out.clone(), out))
}

/// Per-field minimum over a map of clocks. `arg` is a one-entry map.
pub fn min_clock(current: &Value, arg: &Value) -> Result<(Value, Value), String> {
    merge_clock(current, arg, |a, b| a.min(b))
}

pub fn max_clock(current: &Value, arg: &Value) -> Result<(Value, Value), String> {
    merge_clock(current, arg, |a, b| a.max(b))
}

fn merge_clock(current: &Value, arg: &Value, pick: fn(i64, i64) -> i64) -> Result<(Value, Value), String> {
    let mut map = match current {
        Value::None => BTreeMap::new(),
        Value::Map(m) => m.clone(),
        other => return Err(format!("expected map, found {}", other.type_name())),
    };
    let upd = arg.as_map().ok_or("argument must be a map")?;
    for (field, v) in upd {
        let v = v.as_int().ok_or("clock must be an integer")?;
        let merged = match map.get(field).and_then(Value::as_int) {
            Some(old) => pick(old, v),
            None => v,
        };
        map.insert(field.clone(), Value::Int(merged));
    }
    let out = Value::Map(map);
    Ok((out.clone(), out))
}

/// Mutation semantics shared by the store and client-side caches: returns
/// `(new_state, reply)`.
pub fn exec_kind(custom: &CustomOps, oid: &ObjectId, kind: &OpKind, current: &Value) -> Result<(Value, Value), StoreError> {
    let type_err = |expected: &str| StoreError::TypeError {
        key: oid.clone(),
        expected: expected.to_string(),
        found: current.type_name().to_string(),
    };
    match kind {
        OpKind::Increment(d) | OpKind::Decrement(d) => {
            let d = if matches!(kind, OpKind::Decrement(_)) { -*d } else { *d };
            let base = match current {
                Value::None => 0,
                Value::Int(v) => *v,
                _ => return Err(type_err("int")),
            };
            let v = Value::Int(base.wrapping_add(d));
            Ok((v.clone(), v))
        }
        OpKind::Push(item) => {
            let mut list = match current {
                Value::None => Vec::new(),
                Value::List(l) => l.clone(),
                _ => return Err(type_err("list")),
            };
            list.push(item.clone());
            let v = Value::List(list);
            Ok((v.clone(), v))
        }
        OpKind::Pop => match current {
            Value::List(l) if !l.is_empty() => {
                let mut rest = l.clone();
                let head = rest.remove(0);
                Ok((Value::List(rest), head))
            }
            Value::List(_) | Value::None => Err(StoreError::EmptyList(oid.clone())),
            _ => Err(type_err("list")),
        },
        OpKind::CompareAndUpdate { expected, new } => {
            if !current.is_none() && !expected.is_none() && !current.same_type(expected) {
                return Err(StoreError::TypeError {
                    key: oid.clone(),
                    expected: current.type_name().to_string(),
                    found: expected.type_name().to_string(),
                });
            }
            if current == expected {
                Ok((new.clone(), Value::Int(1)))
            } else {
                Ok((current.clone(), Value::Int(0)))
            }
        }
        OpKind::Write(v) => Ok((v.clone(), v.clone())),
        OpKind::Custom { name, arg } => {
            let f = custom.get(name).ok_or_else(|| StoreError::UnknownCustom(name.clone()))?;
            f(current, arg).map_err(|reason| StoreError::CustomFailed {
                name: name.clone(),
                reason,
            })
        }
        OpKind::Read => unreachable!("reads handled before exec"),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateObject {
    pub value: Value,
    pub version: u64,
    pub shared: bool,
    pub cached_at: BTreeSet<InstanceId>,
    /// Current owner of a per-flow object; `None` when released or unclaimed.
    pub owner: Option<InstanceId>,
}

impl StateObject {
    fn new(shared: bool) -> Self {
        StateObject {
            value: Value::None,
            version: 0,
            shared,
            cached_at: BTreeSet::new(),
            owner: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedUpdate {
    pub reply: Value,
    pub post: Value,
    pub version: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalEntry {
    /// Store-local sequence number of the application.
    pub seq: u64,
    pub op: Operation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub time: Time,
    /// Store sequence at snapshot time; reads with a larger sequence happened
    /// after the checkpoint.
    pub seq: u64,
    pub shared_values: BTreeMap<ObjectId, Value>,
    pub ts: Ts,
}

impl Checkpoint {
    pub fn empty() -> Self {
        Checkpoint {
            time: 0,
            seq: 0,
            shared_values: BTreeMap::new(),
            ts: Ts::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyResult {
    /// The operation's reply: the read value, the popped element, the custom
    /// reply, or the post-update value.
    pub value: Value,
    /// Object state after the operation.
    pub state: Value,
    pub version: u64,
    pub ts: Ts,
    pub emulated: bool,
    /// Store sequence of a read (for recovery's read log).
    pub read_seq: Option<u64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub clock: LogicalClock,
    pub issuer: InstanceId,
    pub seq: u64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NondetKind {
    Time,
    Random,
}

/// Something the store wants delivered to another actor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Effect {
    /// Update-tracking commit: XOR `tag` into the root's record for `clock`.
    Commit { clock: LogicalClock, tag: u32, issuer: InstanceId },
    /// Callback refresh of a cached shared object.
    Refresh {
        instance: InstanceId,
        key: ObjectId,
        value: Value,
        version: u64,
    },
    /// The old owner released the moved flows' state.
    HandoverReleased { instance: InstanceId, session: u64 },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub applied: u64,
    pub emulated: u64,
    pub reads: u64,
    /// Applications of a (key, clock) pair that had already been applied.
    pub duplicate_applications: u64,
    pub nonblocking_errors: u64,
}

#[derive(Clone, Debug)]
pub struct StoreInstance {
    pub shard: ShardId,
    objects: BTreeMap<ObjectId, StateObject>,
    update_log: BTreeMap<(ObjectId, LogicalClock), LoggedUpdate>,
    log_by_clock: BTreeMap<LogicalClock, BTreeSet<ObjectId>>,
    applied_ever: BTreeSet<(ObjectId, LogicalClock)>,
    pending: VecDeque<Operation>,
    wal: Vec<WalEntry>,
    ts: Ts,
    callbacks: BTreeMap<ObjectId, BTreeSet<InstanceId>>,
    nondet_log: BTreeMap<(LogicalClock, NondetKind), Value>,
    checkpoints: Vec<Checkpoint>,
    seq: u64,
    aliases: BTreeMap<InstanceId, InstanceId>,
    released_sessions: BTreeSet<u64>,
    session_watchers: BTreeMap<u64, BTreeSet<InstanceId>>,
    custom: CustomOps,
    rng: ChaCha8Rng,
    effects: Vec<Effect>,
    errors: Vec<StoreError>,
    emulation: bool,
    history: Option<BTreeMap<ObjectId, Vec<HistoryEntry>>>,
    pub stats: StoreStats,
}

/// One applied mutation, as recorded by [`StoreInstance::record_history`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub clock: LogicalClock,
    pub issuer: InstanceId,
    pub kind: OpKind,
}

impl StoreInstance {
    pub fn new(shard: ShardId) -> Self {
        StoreInstance::with_custom(shard, CustomOps::standard(), 0)
    }

    pub fn with_custom(shard: ShardId, custom: CustomOps, seed: u64) -> Self {
        StoreInstance {
            shard,
            objects: BTreeMap::new(),
            update_log: BTreeMap::new(),
            log_by_clock: BTreeMap::new(),
            applied_ever: BTreeSet::new(),
            pending: VecDeque::new(),
            wal: Vec::new(),
            ts: Ts::new(),
            callbacks: BTreeMap::new(),
            nondet_log: BTreeMap::new(),
            checkpoints: Vec::new(),
            seq: 0,
            aliases: BTreeMap::new(),
            released_sessions: BTreeSet::new(),
            session_watchers: BTreeMap::new(),
            custom,
            rng: ChaCha8Rng::seed_from_u64(seed ^ (shard.0 as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
            effects: Vec::new(),
            errors: Vec::new(),
            emulation: true,
            history: None,
            stats: StoreStats::default(),
        }
    }

    /// Starts recording, per object, every first application of a mutation.
    pub fn record_history(&mut self) {
        self.history.get_or_insert_with(BTreeMap::new);
    }

    pub fn history(&self) -> Option<&BTreeMap<ObjectId, Vec<HistoryEntry>>> {
        self.history.as_ref()
    }

    /// Turns duplicate-update emulation off (for measuring what it prevents).
    pub fn set_emulation(&mut self, on: bool) {
        self.emulation = on;
    }

    /// Blocking application. Drains every accepted non-blocking update first.
    pub fn apply(&mut self, op: Operation) -> Result<ApplyResult, StoreError> {
        self.drain();
        self.apply_now(&op)
    }

    /// Accepts a non-blocking mutation for background application.
    pub fn apply_nonblocking(&mut self, op: Operation) -> Result<Ack, StoreError> {
        if !op.kind.is_mutation() {
            return Err(StoreError::NotMutation(op.key.object_id()));
        }
        let ack = Ack {
            clock: op.clock,
            issuer: op.issuer,
            seq: op.seq,
        };
        self.pending.push_back(op);
        Ok(ack)
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Applies all accepted non-blocking updates in arrival order. Failures
    /// go to the error log.
    pub fn drain(&mut self) {
        while let Some(op) = self.pending.pop_front() {
            if let Err(e) = self.apply_now(&op) {
                self.stats.nonblocking_errors += 1;
                self.errors.push(e);
            }
        }
    }

    pub fn errors(&self) -> &[StoreError] {
        &self.errors
    }

    fn principal(&self, i: InstanceId) -> InstanceId {
        let mut cur = i;
        // alias chains are short; bound the walk anyway
        for _ in 0..16 {
            match self.aliases.get(&cur) {
                Some(p) if *p != cur => cur = *p,
                _ => break,
            }
        }
        cur
    }

    fn check_owner(&mut self, oid: &ObjectId, issuer: InstanceId, claim: bool) -> Result<(), StoreError> {
        if oid.is_shared() {
            return Ok(());
        }
        let principal = self.principal(issuer);
        let owner = self.objects.get(oid).and_then(|o| o.owner);
        match owner {
            Some(o) if self.principal(o) != principal => Err(StoreError::OwnershipViolation {
                key: oid.clone(),
                owner: Some(o),
                issuer,
            }),
            Some(_) => Ok(()),
            None => {
                if claim {
                    self.objects
                        .entry(oid.clone())
                        .or_insert_with(|| StateObject::new(false))
                        .owner = Some(principal);
                }
                Ok(())
            }
        }
    }

    fn apply_now(&mut self, op: &Operation) -> Result<ApplyResult, StoreError> {
        let oid = op.key.object_id();
        self.check_owner(&oid, op.issuer, op.kind.is_mutation())?;

        if matches!(op.kind, OpKind::Read) {
            let obj = self
                .objects
                .get(&oid)
                .filter(|o| o.version > 0)
                .ok_or_else(|| StoreError::NotFound(oid.clone()))?;
            self.seq += 1;
            self.stats.reads += 1;
            return Ok(ApplyResult {
                value: obj.value.clone(),
                state: obj.value.clone(),
                version: obj.version,
                ts: self.ts.clone(),
                emulated: false,
                read_seq: Some(self.seq),
            });
        }

        let log_key = (oid.clone(), op.clock);
        if self.emulation {
            if let Some(logged) = self.update_log.get(&log_key) {
                self.stats.emulated += 1;
                return Ok(ApplyResult {
                    value: logged.reply.clone(),
                    state: logged.post.clone(),
                    version: logged.version,
                    ts: self.ts.clone(),
                    emulated: true,
                    read_seq: None,
                });
            }
        }

        let current = self.objects.get(&oid).map(|o| o.value.clone()).unwrap_or_default();
        let (next, reply) = self.exec(&oid, &op.kind, &current)?;
        let obj = self
            .objects
            .entry(oid.clone())
            .or_insert_with(|| StateObject::new(oid.is_shared()));
        obj.value = next.clone();
        obj.version += 1;
        let version = obj.version;
        self.seq += 1;
        self.stats.applied += 1;

        self.update_log.insert(
            log_key.clone(),
            LoggedUpdate {
                reply: reply.clone(),
                post: next.clone(),
                version,
            },
        );
        self.log_by_clock.entry(op.clock).or_default().insert(oid.clone());
        if !self.applied_ever.insert(log_key) {
            self.stats.duplicate_applications += 1;
        }
        if let Some(h) = self.history.as_mut() {
            h.entry(oid.clone()).or_default().push(HistoryEntry {
                clock: op.clock,
                issuer: op.issuer,
                kind: op.kind.clone(),
            });
        }

        if op.is_logged_shared() {
            self.ts.record(
                op.issuer,
                TsEntry {
                    clock: op.clock,
                    seq: op.seq,
                },
            );
            self.wal.push(WalEntry {
                seq: self.seq,
                op: op.clone(),
            });
        }
        if let Some(tag) = op.tag {
            self.effects.push(Effect::Commit {
                clock: op.clock,
                tag,
                issuer: op.issuer,
            });
        }
        if oid.is_shared() {
            if let Some(watchers) = self.callbacks.get(&oid) {
                for w in watchers {
                    if *w != op.issuer {
                        self.effects.push(Effect::Refresh {
                            instance: *w,
                            key: oid.clone(),
                            value: next.clone(),
                            version,
                        });
                    }
                }
            }
        }
        Ok(ApplyResult {
            value: reply,
            state: next,
            version,
            ts: self.ts.clone(),
            emulated: false,
            read_seq: None,
        })
    }

    fn exec(&self, oid: &ObjectId, kind: &OpKind, current: &Value) -> Result<(Value, Value), StoreError> {
        exec_kind(&self.custom, oid, kind, current)
    }

    /// Current value and TS of a shared object.
    pub fn read_shared(&mut self, key: &ObjectId, issuer: InstanceId) -> Result<(Value, Ts), StoreError> {
        self.drain();
        let obj = self
            .objects
            .get(key)
            .filter(|o| o.version > 0)
            .ok_or_else(|| StoreError::NotFound(key.clone()))?;
        let _ = issuer;
        self.seq += 1;
        self.stats.reads += 1;
        Ok((obj.value.clone(), self.ts.clone()))
    }

    pub fn register_callback(&mut self, key: &ObjectId, instance: InstanceId) {
        self.callbacks.entry(key.clone()).or_default().insert(instance);
        if let Some(o) = self.objects.get_mut(key) {
            o.cached_at.insert(instance);
        }
    }

    pub fn unregister_callbacks(&mut self, instance: InstanceId) {
        for set in self.callbacks.values_mut() {
            set.remove(&instance);
        }
        for o in self.objects.values_mut() {
            o.cached_at.remove(&instance);
        }
    }

    /// Store-computed non-deterministic value, stable per (clock, kind).
    pub fn nondet_value(&mut self, clock: LogicalClock, kind: NondetKind, now: Time) -> Value {
        if let Some(v) = self.nondet_log.get(&(clock, kind)) {
            return v.clone();
        }
        let v = match kind {
            NondetKind::Time => Value::Int(now as i64),
            NondetKind::Random => Value::Int(self.rng.gen::<u32>() as i64),
        };
        self.nondet_log.insert((clock, kind), v.clone());
        v
    }

    pub fn checkpoint_now(&mut self, now: Time) -> Checkpoint {
        self.drain();
        let shared_values = self
            .objects
            .iter()
            .filter(|(k, o)| k.is_shared() && o.version > 0)
            .map(|(k, o)| (k.clone(), o.value.clone()))
            .collect();
        let cp = Checkpoint {
            time: now,
            seq: self.seq,
            shared_values,
            ts: self.ts.clone(),
        };
        let seq = self.seq;
        self.wal.retain(|e| e.seq > seq);
        self.checkpoints.push(cp.clone());
        cp
    }

    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.checkpoints
    }

    pub fn last_checkpoint(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }

    /// Prunes emulation and non-determinism records for a deleted packet.
    pub fn prune_clock(&mut self, clock: LogicalClock) {
        if let Some(objs) = self.log_by_clock.remove(&clock) {
            for o in objs {
                self.update_log.remove(&(o, clock));
            }
        }
        self.nondet_log.remove(&(clock, NondetKind::Time));
        self.nondet_log.remove(&(clock, NondetKind::Random));
    }

    pub fn is_logged(&self, key: &ObjectId, clock: LogicalClock) -> bool {
        self.update_log.contains_key(&(key.clone(), clock))
    }

    pub fn update_log_len(&self) -> usize {
        self.update_log.len()
    }

    pub fn nondet_len(&self) -> usize {
        self.nondet_log.len()
    }

    pub fn take_effects(&mut self) -> Vec<Effect> {
        std::mem::take(&mut self.effects)
    }

    pub fn ts(&self) -> &Ts {
        &self.ts
    }

    pub fn wal(&self) -> &[WalEntry] {
        &self.wal
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn get(&self, key: &ObjectId) -> Option<&StateObject> {
        self.objects.get(key).filter(|o| o.version > 0 || o.owner.is_some())
    }

    pub fn value(&self, key: &ObjectId) -> Option<&Value> {
        self.objects.get(key).filter(|o| o.version > 0).map(|o| &o.value)
    }

    /// Every materialized object value.
    pub fn snapshot(&self) -> BTreeMap<ObjectId, Value> {
        self.objects
            .iter()
            .filter(|(_, o)| o.version > 0)
            .map(|(k, o)| (k.clone(), o.value.clone()))
            .collect()
    }

    pub fn objects(&self) -> impl Iterator<Item = (&ObjectId, &StateObject)> {
        self.objects.iter()
    }

    /// Installs a value directly (initial configuration and recovery).
    pub fn install(&mut self, key: ObjectId, value: Value, owner: Option<InstanceId>) {
        let shared = key.is_shared();
        let obj = self.objects.entry(key).or_insert_with(|| StateObject::new(shared));
        obj.value = value;
        obj.version += 1;
        obj.owner = owner;
    }

    pub(crate) fn bump_seq(&mut self, at_least: u64) {
        self.seq = self.seq.max(at_least);
    }

    pub fn set_ts(&mut self, ts: Ts) {
        self.ts = ts;
    }

    pub fn owner(&self, key: &ObjectId) -> Option<InstanceId> {
        self.objects.get(key).and_then(|o| o.owner)
    }

    /// Makes `alias` act as `principal` for ownership checks (clones and
    /// failover instances).
    pub fn add_alias(&mut self, alias: InstanceId, principal: InstanceId) {
        let p = self.principal(principal);
        if p != alias {
            self.aliases.insert(alias, p);
        }
    }

    /// Releases ownership of `keys` held by `issuer`.
    pub fn release(&mut self, keys: &[ObjectId], issuer: InstanceId) -> Result<(), StoreError> {
        let principal = self.principal(issuer);
        for k in keys {
            if let Some(o) = self.objects.get_mut(k) {
                match o.owner {
                    Some(owner) if owner == principal => o.owner = None,
                    None => {}
                    Some(owner) => {
                        return Err(StoreError::OwnershipViolation {
                            key: k.clone(),
                            owner: Some(owner),
                            issuer,
                        })
                    }
                }
            }
        }
        Ok(())
    }

    /// Claims ownership of per-flow objects for `instance`.
    pub fn associate(&mut self, keys: &[ObjectId], instance: InstanceId) -> Result<(), StoreError> {
        for k in keys {
            self.check_owner(k, instance, true)?;
        }
        Ok(())
    }

    /// Release step of a handover: releases the keys and notifies watchers.
    pub fn release_for_session(&mut self, session: u64, keys: &[ObjectId], issuer: InstanceId) -> Result<(), StoreError> {
        self.release(keys, issuer)?;
        self.released_sessions.insert(session);
        if let Some(ws) = self.session_watchers.remove(&session) {
            for w in ws {
                self.effects.push(Effect::HandoverReleased { instance: w, session });
            }
        }
        Ok(())
    }

    /// Registers for the release notification of `session`; fires at once if
    /// the release already happened.
    pub fn watch_session(&mut self, session: u64, watcher: InstanceId) {
        if self.released_sessions.contains(&session) {
            self.effects.push(Effect::HandoverReleased {
                instance: watcher,
                session,
            });
        } else {
            self.session_watchers.entry(session).or_default().insert(watcher);
        }
    }

    /// Rewrites per-flow ownership from `from` to `to`.
    pub fn reassign_owner(&mut self, from: InstanceId, to: InstanceId) {
        for o in self.objects.values_mut() {
            if o.owner == Some(from) {
                o.owner = Some(to);
            }
        }
        for p in self.aliases.values_mut() {
            if *p == from {
                *p = to;
            }
        }
        self.aliases.remove(&to);
    }

    pub fn objects_owned_by(&self, instance: InstanceId) -> Vec<ObjectId> {
        let p = self.principal(instance);
        self.objects
            .iter()
            .filter(|(_, o)| o.owner == Some(p))
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Submits a non-blocking operation and immediately drains it.
    pub fn apply_mode(&mut self, op: Operation) -> Result<ApplyResult, StoreError> {
        match op.mode {
            OpMode::Blocking => self.apply(op),
            OpMode::NonBlocking => {
                self.drain();
                self.apply_now(&op)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InstanceId, LogicalClock, StateKey, VertexId};

    fn clk(c: u64) -> LogicalClock {
        LogicalClock::new(0, c).unwrap()
    }

    fn shared(k: u8) -> StateKey {
        StateKey::shared(VertexId(1), vec![k])
    }

    fn op(kind: OpKind, key: StateKey, c: u64, issuer: u16) -> Operation {
        Operation::new(kind, key, OpMode::Blocking, clk(c), InstanceId(issuer))
    }

    #[test]
    fn increment_then_emulated_reissue() {
        let mut s = StoreInstance::new(ShardId(0));
        s.install(shared(1).object_id(), Value::Int(10), None);
        let r = s.apply(op(OpKind::Increment(5), shared(1), 1, 1)).unwrap();
        assert_eq!(r.value, Value::Int(15));
        assert!(!r.emulated);
        let r = s.apply(op(OpKind::Increment(5), shared(1), 1, 1)).unwrap();
        assert_eq!(r.value, Value::Int(15));
        assert!(r.emulated);
        assert_eq!(s.value(&shared(1).object_id()), Some(&Value::Int(15)));
    }

    #[test]
    fn pop_is_fifo() {
        let mut s = StoreInstance::new(ShardId(0));
        let k = shared(2);
        s.install(k.object_id(), Value::List(vec![Value::Int(2001), Value::Int(2002)]), None);
        let r = s.apply(op(OpKind::Pop, k.clone(), 1, 1)).unwrap();
        assert_eq!(r.value, Value::Int(2001));
        assert_eq!(s.value(&k.object_id()), Some(&Value::List(vec![Value::Int(2002)])));
        s.apply(op(OpKind::Pop, k.clone(), 2, 1)).unwrap();
        assert!(matches!(s.apply(op(OpKind::Pop, k, 3, 1)), Err(StoreError::EmptyList(_))));
    }

    #[test]
    fn pop_matches_reference_queue() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut s = StoreInstance::new(ShardId(0));
        let k = shared(3);
        let mut model = VecDeque::new();
        for c in 1..400u64 {
            if rng.gen_bool(0.6) {
                let v = Value::Int(rng.gen_range(0..1000));
                model.push_back(v.clone());
                s.apply(op(OpKind::Push(v), k.clone(), c, 1)).unwrap();
            } else {
                let got = s.apply(op(OpKind::Pop, k.clone(), c, 1)).ok().map(|r| r.value);
                assert_eq!(got, model.pop_front());
            }
        }
    }

    #[test]
    fn nonblocking_then_read_sees_both() {
        let mut s = StoreInstance::new(ShardId(0));
        let k = shared(4);
        for c in 1..=2 {
            let mut o = op(OpKind::Increment(1), k.clone(), c, 1);
            o.mode = OpMode::NonBlocking;
            s.apply_nonblocking(o).unwrap();
        }
        let r = s.apply(op(OpKind::Read, k, 3, 2)).unwrap();
        assert_eq!(r.value, Value::Int(2));
    }

    #[test]
    fn interleaved_nonblocking_sum() {
        let mut s = StoreInstance::new(ShardId(0));
        let k = shared(5);
        let mut c = 0;
        for round in 0..250u64 {
            for issuer in 0..4u16 {
                c += 1;
                let mut o = op(OpKind::Increment(1), k.clone(), c, issuer);
                o.mode = OpMode::NonBlocking;
                s.apply_nonblocking(o).unwrap();
                if round % 7 == 0 {
                    s.drain();
                }
            }
        }
        s.drain();
        assert_eq!(s.value(&k.object_id()), Some(&Value::Int(1000)));
    }

    #[test]
    fn read_returns_ts() {
        let mut s = StoreInstance::new(ShardId(0));
        let k = shared(6);
        s.apply(op(OpKind::Increment(1), k.clone(), 15, 1)).unwrap();
        s.apply(op(OpKind::Increment(1), k.clone(), 18, 3)).unwrap();
        let (v, ts) = s.read_shared(&k.object_id(), InstanceId(2)).unwrap();
        assert_eq!(v, Value::Int(2));
        assert_eq!(ts.get(InstanceId(1)).unwrap().clock, clk(15));
        assert_eq!(ts.get(InstanceId(3)).unwrap().clock, clk(18));
        assert_eq!(ts.entries.len(), 2);
        let (_, ts2) = s.read_shared(&k.object_id(), InstanceId(2)).unwrap();
        assert_eq!(ts, ts2);
        let cp = s.checkpoint_now(1);
        assert_eq!(cp.ts, ts);
        assert!(matches!(
            s.read_shared(&shared(99).object_id(), InstanceId(2)),
            Err(StoreError::NotFound(_))
        ));
    }

    #[test]
    fn checkpoints() {
        let mut s = StoreInstance::new(ShardId(0));
        let cp = s.checkpoint_now(0);
        assert!(cp.shared_values.is_empty() && cp.ts.is_empty());
        s.apply(op(OpKind::Increment(1), shared(1), 1, 1)).unwrap();
        let a = s.checkpoint_now(5);
        let b = s.checkpoint_now(9);
        assert_eq!(a.shared_values, b.shared_values);
        assert_eq!(a.ts, b.ts);
        assert!(s.wal().is_empty());
    }

    #[test]
    fn callbacks_go_to_others_only() {
        let mut s = StoreInstance::new(ShardId(0));
        let k = shared(7);
        s.register_callback(&k.object_id(), InstanceId(2));
        s.register_callback(&k.object_id(), InstanceId(1));
        s.apply(op(OpKind::Increment(1), k.clone(), 1, 1)).unwrap();
        let fx = s.take_effects();
        assert_eq!(fx.len(), 1);
        assert!(matches!(&fx[0], Effect::Refresh { instance, value, .. } if *instance == InstanceId(2) && *value == Value::Int(1)));
        assert!(s.take_effects().is_empty());
    }

    #[test]
    fn commit_signal_on_first_application_only() {
        let mut s = StoreInstance::new(ShardId(0));
        let o = op(OpKind::Increment(1), shared(8), 5, 3).with_tag(crate::model::update_tag(3, 9));
        s.apply(o.clone()).unwrap();
        s.apply(o).unwrap();
        let fx = s.take_effects();
        assert_eq!(fx, vec![Effect::Commit { clock: clk(5), tag: (3 << 16) | 9, issuer: InstanceId(3) }]);
    }

    #[test]
    fn nondet_values_repeat_and_prune() {
        let mut s = StoreInstance::new(ShardId(0));
        let a = s.nondet_value(clk(7), NondetKind::Random, 0);
        assert_eq!(s.nondet_value(clk(7), NondetKind::Random, 100), a);
        let _ = s.nondet_value(clk(8), NondetKind::Random, 0);
        assert_eq!(s.nondet_len(), 2);
        s.prune_clock(clk(7));
        assert_eq!(s.nondet_len(), 1);
    }

    #[test]
    fn ownership() {
        let mut s = StoreInstance::new(ShardId(0));
        let k = StateKey::per_flow(VertexId(1), InstanceId(1), vec![1]);
        s.apply(op(OpKind::Write(Value::Int(1)), k.clone(), 1, 1)).unwrap();
        let stolen = op(OpKind::Write(Value::Int(2)), k.with_instance(InstanceId(2)), 2, 2);
        assert!(matches!(s.apply(stolen.clone()), Err(StoreError::OwnershipViolation { .. })));
        s.add_alias(InstanceId(2), InstanceId(1));
        assert!(s.apply(stolen).is_ok());
        s.release(&[k.object_id()], InstanceId(1)).unwrap();
        assert_eq!(s.owner(&k.object_id()), None);
        s.apply(op(OpKind::Write(Value::Int(3)), k.with_instance(InstanceId(3)), 3, 3)).unwrap();
        assert_eq!(s.owner(&k.object_id()), Some(InstanceId(3)));
    }

    #[test]
    fn cas_and_types() {
        let mut s = StoreInstance::new(ShardId(0));
        let k = shared(9);
        s.install(k.object_id(), Value::Int(1), None);
        let r = s
            .apply(op(OpKind::CompareAndUpdate { expected: Value::Int(1), new: Value::Int(5) }, k.clone(), 1, 1))
            .unwrap();
        assert_eq!(r.value, Value::Int(1));
        assert_eq!(r.state, Value::Int(5));
        let bad = op(
            OpKind::CompareAndUpdate { expected: Value::List(vec![]), new: Value::Int(0) },
            k,
            2,
            1,
        );
        assert!(matches!(s.apply(bad), Err(StoreError::TypeError { .. })));
    }

    #[test]
    fn pick_least_loaded_ties_to_smallest() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), Value::Int(2));
        m.insert("b".to_string(), Value::Int(1));
        let (next, reply) = pick_least_loaded(&Value::Map(m), &Value::None).unwrap();
        assert_eq!(reply, Value::Bytes(b"b".to_vec()));
        let (_, reply) = pick_least_loaded(&next, &Value::None).unwrap();
        assert_eq!(reply, Value::Bytes(b"a".to_vec()));
    }
}
