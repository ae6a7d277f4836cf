//! Client-side state library embedded in every NF instance.
//!
//! Picks a caching strategy per declared object from its scope kind and
//! access pattern, keeps the instance-local write-ahead log and read log
//! that store recovery consumes, tracks unacknowledged non-blocking
//! operations for retransmission, and applies callback refreshes.
//!
//! Blocking operations go through a [`StoreAccess`] supplied by the host
//! runtime. Non-blocking operations (direct updates and cache flushes) are
//! queued in an outbox the runtime drains and ships.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::{
    obj_key, FlowKey, InstanceId, LogicalClock, ObjectId, OpKind, OpMode, Operation, Scope, ShardId, StateKey, Time,
    VertexId, Value,
};
use crate::store::recovery::{NfDump, ReadRecord};
use crate::store::{exec_kind, ApplyResult, CustomOps, NondetKind, StoreError};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeKind {
    PerFlow,
    CrossFlow,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessPattern {
    WriteMostlyReadRarely,
    WriteRarelyReadMostly,
    ReadHeavy,
    WriteReadOften,
    Any,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePolicy {
    NoCacheNonblocking,
    PerflowCachePeriodicFlush,
    CrossflowCacheCallbacks,
    CrossflowConditionalCache,
}

pub fn policy_for(kind: ScopeKind, pattern: AccessPattern) -> CachePolicy {
    match (kind, pattern) {
        (_, AccessPattern::WriteMostlyReadRarely) => CachePolicy::NoCacheNonblocking,
        (ScopeKind::PerFlow, _) => CachePolicy::PerflowCachePeriodicFlush,
        (ScopeKind::CrossFlow, AccessPattern::ReadHeavy) | (ScopeKind::CrossFlow, AccessPattern::WriteRarelyReadMostly) => {
            CachePolicy::CrossflowCacheCallbacks
        }
        (ScopeKind::CrossFlow, _) => CachePolicy::CrossflowConditionalCache,
    }
}

/// A state object an NF declares at registration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectDecl {
    pub name: String,
    pub kind: ScopeKind,
    pub pattern: AccessPattern,
    /// Header fields keying the object; `None` for a single global object.
    pub scope: Option<Scope>,
}

impl ObjectDecl {
    pub fn new(name: &str, kind: ScopeKind, pattern: AccessPattern, scope: Option<Scope>) -> Self {
        ObjectDecl {
            name: name.to_string(),
            kind,
            pattern,
            scope,
        }
    }

    pub fn policy(&self) -> CachePolicy {
        policy_for(self.kind, self.pattern)
    }
}

/// Whether a conditionally cached object may be cached under the current
/// partitioning: only one instance sees each object value.
pub fn conditional_cache_permitted(object_scope: Option<&Scope>, partition_scope: &Scope, parallelism: usize) -> bool {
    if parallelism <= 1 {
        return true;
    }
    match object_scope {
        Some(s) => partition_scope.is_subset_of(s),
        None => false,
    }
}

/// Stable shard assignment for an object.
pub fn shard_for(key: &ObjectId, shards: u16) -> ShardId {
    if shards <= 1 {
        return ShardId(0);
    }
    ShardId((crate::partition::stable_hash(&key.encode()) % shards as u64) as u16)
}

/// Synchronous round trip to the store, provided by the runtime.
pub trait StoreAccess {
    fn blocking(&mut self, shard: ShardId, op: Operation) -> Result<ApplyResult, StoreError>;
    fn nondet(&mut self, shard: ShardId, clock: LogicalClock, kind: NondetKind) -> Value;
    fn register_callback(&mut self, shard: ShardId, key: &ObjectId, instance: InstanceId);
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub value: Value,
    pub policy: CachePolicy,
    pub dirty: Vec<Operation>,
    pub dirty_since: Option<Time>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unacked {
    pub shard: ShardId,
    pub op: Operation,
    pub deadline: Time,
    pub interval: Time,
    pub tries: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub flush_every: u32,
    pub flush_interval: Time,
    pub store_rtt: Time,
    pub max_tries: u32,
    pub shards: u16,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            flush_every: 16,
            flush_interval: 200_000,
            store_rtt: 4_000,
            max_tries: 5,
            shards: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientStats {
    pub blocking_ops: u64,
    pub nonblocking_ops: u64,
    pub local_ops: u64,
    pub flushed_ops: u64,
    pub retransmissions: u64,
    pub refreshes: u64,
    pub ownership_violations: u64,
}

/// Per-packet processing mode.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Normal,
    /// Re-execution of a replayed packet at its target: every mutation is a
    /// blocking store round trip so the store can emulate, and the returned
    /// state is installed in the cache.
    Replay,
    /// Re-execution of a packet this instance already processed: reads only,
    /// mutations are suppressed.
    Dry,
}

const UNLOGGED_SEQ_BIT: u64 = 1 << 63;

#[derive(Clone, Debug)]
pub struct StoreClient {
    pub instance: InstanceId,
    pub vertex: VertexId,
    decls: Vec<ObjectDecl>,
    cfg: ClientConfig,
    custom: CustomOps,
    cache: BTreeMap<ObjectId, CacheEntry>,
    flow_index: BTreeMap<FlowKey, BTreeSet<ObjectId>>,
    wal: BTreeMap<ShardId, Vec<Operation>>,
    reads: BTreeMap<ShardId, Vec<ReadRecord>>,
    unacked: BTreeMap<(ShardId, u64), Unacked>,
    logged_seq: BTreeMap<ShardId, u64>,
    next_id: u64,
    outbox: Vec<(ShardId, Operation)>,
    permitted: BTreeMap<u16, bool>,
    issued_tags: BTreeMap<ShardId, Vec<(LogicalClock, u32)>>,
    callbacks: BTreeSet<ObjectId>,
    released: BTreeSet<ObjectId>,
    fatal: Vec<Operation>,
    pub stats: ClientStats,
}

impl StoreClient {
    pub fn new(instance: InstanceId, vertex: VertexId, decls: Vec<ObjectDecl>, cfg: ClientConfig) -> Self {
        StoreClient {
            instance,
            vertex,
            decls,
            cfg,
            custom: CustomOps::standard(),
            cache: BTreeMap::new(),
            flow_index: BTreeMap::new(),
            wal: BTreeMap::new(),
            reads: BTreeMap::new(),
            unacked: BTreeMap::new(),
            logged_seq: BTreeMap::new(),
            next_id: 0,
            outbox: Vec::new(),
            permitted: BTreeMap::new(),
            issued_tags: BTreeMap::new(),
            callbacks: BTreeSet::new(),
            released: BTreeSet::new(),
            fatal: Vec::new(),
            stats: ClientStats::default(),
        }
    }

    pub fn decls(&self) -> &[ObjectDecl] {
        &self.decls
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    /// Sets the conditional-cache permission for object `index`. Revoking
    /// flushes and drops cached copies.
    pub fn set_permission(&mut self, index: u16, permitted: bool, store: &mut dyn StoreAccess, now: Time) {
        let prev = self.permitted.insert(index, permitted);
        if prev == Some(true) && !permitted {
            let keys: Vec<ObjectId> = self
                .cache
                .iter()
                .filter(|(k, e)| e.policy == CachePolicy::CrossflowConditionalCache && object_index(k) == index)
                .map(|(k, _)| k.clone())
                .collect();
            self.flush_blocking(&keys, store, now);
            for k in keys {
                self.cache.remove(&k);
            }
        }
    }

    pub fn is_permitted(&self, index: u16) -> bool {
        self.permitted.get(&index).copied().unwrap_or(false)
    }

    pub fn state_key(&self, index: u16, sub: &[u8]) -> StateKey {
        let decl = &self.decls[index as usize];
        let k = obj_key(index, sub);
        match decl.kind {
            ScopeKind::PerFlow => StateKey::per_flow(self.vertex, self.instance, k),
            ScopeKind::CrossFlow => StateKey::shared(self.vertex, k),
        }
    }

    fn effective_policy(&self, index: u16) -> (CachePolicy, bool) {
        let policy = self.decls[index as usize].policy();
        let cached = match policy {
            CachePolicy::PerflowCachePeriodicFlush => true,
            CachePolicy::CrossflowConditionalCache => self.is_permitted(index),
            _ => false,
        };
        (policy, cached)
    }

    fn shard(&self, key: &ObjectId) -> ShardId {
        shard_for(key, self.cfg.shards)
    }

    fn next_unlogged(&mut self) -> u64 {
        self.next_id += 1;
        UNLOGGED_SEQ_BIT | self.next_id
    }

    fn stamp(&mut self, mut op: Operation, shard: ShardId) -> Operation {
        if op.is_logged_shared() {
            let s = self.logged_seq.entry(shard).or_insert(0);
            *s += 1;
            op.seq = *s;
            self.wal.entry(shard).or_default().push(op.clone());
        } else {
            op.seq = self.next_unlogged();
        }
        if let Some(tag) = op.tag {
            self.issued_tags.entry(shard).or_default().push((op.clock, tag));
        }
        op
    }

    fn index_flow(&mut self, flow: Option<FlowKey>, key: &ObjectId) {
        if key.per_flow {
            if let Some(f) = flow {
                self.flow_index.entry(f).or_default().insert(key.clone());
            }
        }
    }

    /// Reads object `index`/`sub`. Absent objects read as `Value::None`.
    pub fn read(
        &mut self,
        index: u16,
        sub: &[u8],
        clock: LogicalClock,
        flow: Option<FlowKey>,
        store: &mut dyn StoreAccess,
    ) -> Result<Value, StoreError> {
        let key = self.state_key(index, sub);
        let oid = key.object_id();
        self.index_flow(flow, &oid);
        let (policy, cached) = self.effective_policy(index);
        let cacheable = cached || policy == CachePolicy::CrossflowCacheCallbacks;
        if cacheable {
            if let Some(e) = self.cache.get(&oid) {
                return Ok(e.value.clone());
            }
        }
        let shard = self.shard(&oid);
        let op = Operation::new(OpKind::Read, key, OpMode::Blocking, clock, self.instance);
        self.stats.blocking_ops += 1;
        let value = match store.blocking(shard, op) {
            Ok(r) => {
                if oid.is_shared() && !cached {
                    if let Some(read_seq) = r.read_seq {
                        self.reads.entry(shard).or_default().push(ReadRecord {
                            key: oid.clone(),
                            value: r.value.clone(),
                            ts: r.ts.clone(),
                            read_seq,
                        });
                    }
                }
                r.value
            }
            Err(StoreError::NotFound(_)) => Value::None,
            Err(e) => return Err(self.note(e)),
        };
        if cacheable {
            self.cache.insert(
                oid.clone(),
                CacheEntry {
                    value: value.clone(),
                    policy,
                    dirty: Vec::new(),
                    dirty_since: None,
                },
            );
            if policy == CachePolicy::CrossflowCacheCallbacks && self.callbacks.insert(oid.clone()) {
                store.register_callback(shard, &oid, self.instance);
            }
        }
        Ok(value)
    }

    fn note(&mut self, e: StoreError) -> StoreError {
        if matches!(e, StoreError::OwnershipViolation { .. }) {
            self.stats.ownership_violations += 1;
        }
        e
    }

    /// Applies a mutation under the object's policy and returns its reply.
    /// Non-blocking uncached updates reply `Value::None`.
    #[allow(clippy::too_many_arguments)]
    pub fn update(
        &mut self,
        index: u16,
        sub: &[u8],
        kind: OpKind,
        clock: LogicalClock,
        tag: Option<u32>,
        flow: Option<FlowKey>,
        mode: Mode,
        now: Time,
        store: &mut dyn StoreAccess,
    ) -> Result<Value, StoreError> {
        let key = self.state_key(index, sub);
        let oid = key.object_id();
        self.index_flow(flow, &oid);
        if mode == Mode::Dry {
            return self.dry_reply(index, sub, &kind, clock, flow, store);
        }
        if self.released.contains(&oid) {
            return Err(self.note(StoreError::OwnershipViolation {
                key: oid,
                owner: None,
                issuer: self.instance,
            }));
        }
        let (policy, cached) = self.effective_policy(index);
        let shard = self.shard(&oid);
        let mut op = Operation::new(kind, key, OpMode::Blocking, clock, self.instance);
        op.tag = tag;
        op.cached = cached;

        if mode == Mode::Replay {
            if cached {
                self.flush_blocking(std::slice::from_ref(&oid), store, now);
            }
            let op = self.stamp(op, shard);
            self.stats.blocking_ops += 1;
            let r = store.blocking(shard, op).map_err(|e| self.note(e))?;
            if cached || policy == CachePolicy::CrossflowCacheCallbacks {
                self.install(oid, r.state.clone(), policy);
            }
            return Ok(r.value);
        }

        if cached {
            if !self.cache.contains_key(&oid) {
                self.read(index, sub, clock, flow, store)?;
            }
            let entry = self.cache.get_mut(&oid).expect("cached after read");
            let (next, reply) = exec_kind(&self.custom, &oid, &op.kind, &entry.value)?;
            entry.value = next;
            entry.dirty_since.get_or_insert(now);
            let op = self.stamp(op, shard);
            let entry = self.cache.get_mut(&oid).expect("cached");
            entry.dirty.push(op);
            self.stats.local_ops += 1;
            if entry.dirty.len() as u32 >= self.cfg.flush_every {
                self.flush_key(&oid, now);
            }
            return Ok(reply);
        }

        match policy {
            CachePolicy::NoCacheNonblocking => {
                op.mode = OpMode::NonBlocking;
                let op = self.stamp(op, shard);
                self.send_nonblocking(shard, op, now);
                Ok(Value::None)
            }
            _ => {
                let op = self.stamp(op, shard);
                self.stats.blocking_ops += 1;
                let r = store.blocking(shard, op).map_err(|e| self.note(e))?;
                if policy == CachePolicy::CrossflowCacheCallbacks {
                    self.install(oid.clone(), r.state.clone(), policy);
                    if self.callbacks.insert(oid.clone()) {
                        store.register_callback(shard, &oid, self.instance);
                    }
                }
                Ok(r.value)
            }
        }
    }

    /// Reply a mutation would produce, without mutating anything. Used when
    /// re-running a packet this instance already processed.
    fn dry_reply(
        &mut self,
        index: u16,
        sub: &[u8],
        kind: &OpKind,
        clock: LogicalClock,
        flow: Option<FlowKey>,
        store: &mut dyn StoreAccess,
    ) -> Result<Value, StoreError> {
        match kind {
            // Replies that depend on the state at original execution are not
            // recomputable locally; NFs only reach these for packets whose
            // first run left no mapping behind.
            OpKind::Pop | OpKind::Custom { .. } | OpKind::CompareAndUpdate { .. } => Ok(Value::None),
            _ => {
                let current = self.read(index, sub, clock, flow, store)?;
                let oid = self.state_key(index, sub).object_id();
                Ok(exec_kind(&self.custom, &oid, kind, &current).map(|(_, r)| r).unwrap_or_default())
            }
        }
    }

    fn install(&mut self, oid: ObjectId, value: Value, policy: CachePolicy) {
        let e = self.cache.entry(oid).or_insert(CacheEntry {
            value: Value::None,
            policy,
            dirty: Vec::new(),
            dirty_since: None,
        });
        e.value = value;
    }

    fn send_nonblocking(&mut self, shard: ShardId, mut op: Operation, now: Time) {
        op.mode = OpMode::NonBlocking;
        let interval = 4 * self.cfg.store_rtt;
        self.unacked.insert(
            (shard, op.seq),
            Unacked {
                shard,
                op: op.clone(),
                deadline: now.saturating_add(interval),
                interval,
                tries: 1,
            },
        );
        self.stats.nonblocking_ops += 1;
        self.outbox.push((shard, op));
    }

    fn flush_key(&mut self, oid: &ObjectId, now: Time) {
        let shard = self.shard(oid);
        let Some(entry) = self.cache.get_mut(oid) else { return };
        let ops = std::mem::take(&mut entry.dirty);
        entry.dirty_since = None;
        self.stats.flushed_ops += ops.len() as u64;
        for op in ops {
            self.send_nonblocking(shard, op, now);
        }
    }

    /// Ships every dirty op whose key has been dirty for at least the flush
    /// interval (or all of them with `force`).
    pub fn periodic_flush(&mut self, now: Time, force: bool) {
        let due: Vec<ObjectId> = self
            .cache
            .iter()
            .filter(|(_, e)| match e.dirty_since {
                Some(t) => force || now.saturating_sub(t) >= self.cfg.flush_interval,
                None => false,
            })
            .map(|(k, _)| k.clone())
            .collect();
        for k in due {
            self.flush_key(&k, now);
        }
    }

    pub fn has_dirty(&self) -> bool {
        self.cache.values().any(|e| !e.dirty.is_empty())
    }

    /// Sends the dirty ops of `keys` as blocking operations.
    pub fn flush_blocking(&mut self, keys: &[ObjectId], store: &mut dyn StoreAccess, _now: Time) {
        for k in keys {
            let shard = self.shard(k);
            let Some(entry) = self.cache.get_mut(k) else { continue };
            let ops = std::mem::take(&mut entry.dirty);
            entry.dirty_since = None;
            self.stats.flushed_ops += ops.len() as u64;
            for mut op in ops {
                op.mode = OpMode::Blocking;
                self.stats.blocking_ops += 1;
                if let Err(e) = store.blocking(shard, op) {
                    self.note(e);
                }
            }
        }
    }

    /// Handover step: flushes the per-flow state of `flows`, drops it from the
    /// cache and returns the released object ids.
    pub fn flush_and_disassociate(&mut self, flows: &BTreeSet<FlowKey>, store: &mut dyn StoreAccess, now: Time) -> Vec<ObjectId> {
        let mut keys = Vec::new();
        for f in flows {
            if let Some(set) = self.flow_index.remove(f) {
                keys.extend(set);
            }
        }
        self.flush_blocking(&keys, store, now);
        for k in &keys {
            self.cache.remove(k);
            self.released.insert(k.clone());
        }
        keys
    }

    /// Re-admits objects after this instance associates with them.
    pub fn associate(&mut self, keys: &[ObjectId]) {
        for k in keys {
            self.released.remove(k);
        }
    }

    /// Every released-and-moved object this instance dropped.
    pub fn forget_released(&mut self) {
        self.released.clear();
    }

    pub fn flows_with_state(&self) -> impl Iterator<Item = &FlowKey> {
        self.flow_index.keys()
    }

    pub fn take_outbox(&mut self) -> Vec<(ShardId, Operation)> {
        std::mem::take(&mut self.outbox)
    }

    pub fn on_ack(&mut self, shard: ShardId, seq: u64) {
        self.unacked.remove(&(shard, seq));
    }

    pub fn unacked_len(&self) -> usize {
        self.unacked.len()
    }

    /// Ops whose ACK deadline passed, re-armed with exponential backoff.
    /// Ops past the try budget are moved to the fatal list.
    pub fn due_retransmits(&mut self, now: Time) -> Vec<(ShardId, Operation)> {
        let mut out = Vec::new();
        let mut dead = Vec::new();
        for (k, u) in self.unacked.iter_mut() {
            if u.deadline <= now {
                if u.tries >= self.cfg.max_tries {
                    dead.push(*k);
                    continue;
                }
                u.tries += 1;
                u.interval *= 2;
                u.deadline = now + u.interval;
                out.push((u.shard, u.op.clone()));
            }
        }
        for k in dead {
            if let Some(u) = self.unacked.remove(&k) {
                self.fatal.push(u.op);
            }
        }
        self.stats.retransmissions += out.len() as u64;
        out
    }

    pub fn next_deadline(&self) -> Option<Time> {
        self.unacked.values().map(|u| u.deadline).min()
    }

    pub fn fatal(&self) -> &[Operation] {
        &self.fatal
    }

    /// Callback refresh from the store.
    pub fn on_refresh(&mut self, key: &ObjectId, value: Value) {
        if let Some(e) = self.cache.get_mut(key) {
            if e.policy == CachePolicy::CrossflowCacheCallbacks {
                e.value = value;
                self.stats.refreshes += 1;
            }
        }
    }

    pub fn cached(&self, key: &ObjectId) -> Option<&Value> {
        self.cache.get(key).map(|e| &e.value)
    }

    pub fn cache_entries(&self) -> impl Iterator<Item = (&ObjectId, &CacheEntry)> {
        self.cache.iter()
    }

    pub fn nondet(&mut self, clock: LogicalClock, kind: NondetKind, store: &mut dyn StoreAccess) -> Value {
        let probe = ObjectId {
            vertex: self.vertex,
            per_flow: false,
            obj_key: clock.raw().to_be_bytes().to_vec(),
        };
        let shard = self.shard(&probe);
        self.stats.blocking_ops += 1;
        store.nondet(shard, clock, kind)
    }

    pub fn wal(&self, shard: ShardId) -> &[Operation] {
        self.wal.get(&shard).map_or(&[], |v| v.as_slice())
    }

    pub fn read_log(&self, shard: ShardId) -> &[ReadRecord] {
        self.reads.get(&shard).map_or(&[], |v| v.as_slice())
    }

    /// Recovery input for a failed shard: authoritative cached objects, the
    /// WAL and the read log.
    pub fn dump(&self, shard: ShardId) -> NfDump {
        let cache = self
            .cache
            .iter()
            .filter(|(k, e)| {
                self.shard(k) == shard
                    && matches!(
                        e.policy,
                        CachePolicy::PerflowCachePeriodicFlush | CachePolicy::CrossflowConditionalCache
                    )
            })
            .map(|(k, e)| (k.clone(), e.value.clone()))
            .collect();
        NfDump {
            cache,
            wal: self.wal(shard).to_vec(),
            reads: self.read_log(shard).to_vec(),
        }
    }

    /// After the shard was rebuilt from dumps: outstanding and dirty ops for
    /// it are already reflected, so they are dropped. Returns the commit
    /// signals to repeat towards the roots.
    pub fn on_store_recovered(&mut self, shard: ShardId) -> Vec<(LogicalClock, u32)> {
        self.unacked.retain(|(s, _), _| *s != shard);
        self.outbox.retain(|(s, _)| *s != shard);
        let keys: Vec<ObjectId> = self.cache.keys().filter(|k| self.shard(k) == shard).cloned().collect();
        for k in keys {
            if let Some(e) = self.cache.get_mut(&k) {
                e.dirty.clear();
                e.dirty_since = None;
            }
        }
        self.issued_tags.get(&shard).cloned().unwrap_or_default()
    }
}

fn object_index(key: &ObjectId) -> u16 {
    if key.obj_key.len() < 2 {
        return u16::MAX;
    }
    u16::from_be_bytes([key.obj_key[0], key.obj_key[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::StoreInstance;

    struct Direct(StoreInstance);

    impl StoreAccess for Direct {
        fn blocking(&mut self, _shard: ShardId, op: Operation) -> Result<ApplyResult, StoreError> {
            self.0.apply(op)
        }
        fn nondet(&mut self, _shard: ShardId, clock: LogicalClock, kind: NondetKind) -> Value {
            self.0.nondet_value(clock, kind, 0)
        }
        fn register_callback(&mut self, _shard: ShardId, key: &ObjectId, instance: InstanceId) {
            self.0.register_callback(key, instance)
        }
    }

    impl Direct {
        fn deliver(&mut self, c: &mut StoreClient) {
            for (_, op) in c.take_outbox() {
                let ack = self.0.apply_nonblocking(op).unwrap();
                c.on_ack(ShardId(0), ack.seq);
            }
            self.0.drain();
        }
    }

    fn clk(c: u64) -> LogicalClock {
        LogicalClock::new(0, c).unwrap()
    }

    fn decls() -> Vec<ObjectDecl> {
        vec![
            ObjectDecl::new("total", ScopeKind::CrossFlow, AccessPattern::WriteMostlyReadRarely, None),
            ObjectDecl::new("mapping", ScopeKind::PerFlow, AccessPattern::WriteRarelyReadMostly, Some(Scope::five_tuple())),
            ObjectDecl::new("likelihood", ScopeKind::CrossFlow, AccessPattern::WriteReadOften, Some(Scope::single(crate::model::Field::SrcIp))),
            ObjectDecl::new("config", ScopeKind::CrossFlow, AccessPattern::ReadHeavy, None),
        ]
    }

    #[test]
    fn table_policies() {
        use AccessPattern::*;
        assert_eq!(policy_for(ScopeKind::CrossFlow, WriteMostlyReadRarely), CachePolicy::NoCacheNonblocking);
        assert_eq!(policy_for(ScopeKind::PerFlow, WriteRarelyReadMostly), CachePolicy::PerflowCachePeriodicFlush);
        assert_eq!(policy_for(ScopeKind::CrossFlow, WriteReadOften), CachePolicy::CrossflowConditionalCache);
        assert_eq!(policy_for(ScopeKind::CrossFlow, ReadHeavy), CachePolicy::CrossflowCacheCallbacks);
        assert_eq!(policy_for(ScopeKind::PerFlow, WriteMostlyReadRarely), CachePolicy::NoCacheNonblocking);
    }

    #[test]
    fn perflow_local_then_flush() {
        let mut s = Direct(StoreInstance::new(ShardId(0)));
        let mut c = StoreClient::new(InstanceId(1), VertexId(0), decls(), ClientConfig::default());
        c.update(1, b"f", OpKind::Write(Value::Int(7)), clk(1), None, None, Mode::Normal, 0, &mut s).unwrap();
        let r = c.update(1, b"f", OpKind::Increment(1), clk(2), None, None, Mode::Normal, 0, &mut s).unwrap();
        assert_eq!(r, Value::Int(8));
        let oid = c.state_key(1, b"f").object_id();
        assert_eq!(s.0.value(&oid), None);
        c.periodic_flush(0, true);
        s.deliver(&mut c);
        assert_eq!(s.0.value(&oid), Some(&Value::Int(8)));
        assert_eq!(c.unacked_len(), 0);
    }

    #[test]
    fn flush_every_f_ops() {
        let mut s = Direct(StoreInstance::new(ShardId(0)));
        let mut c = StoreClient::new(InstanceId(1), VertexId(0), decls(), ClientConfig::default());
        for i in 1..=16 {
            c.update(1, b"f", OpKind::Increment(1), clk(i), None, None, Mode::Normal, 0, &mut s).unwrap();
        }
        assert_eq!(c.take_outbox().len(), 16);
        assert!(!c.has_dirty());
    }

    #[test]
    fn nonblocking_is_logged_and_retransmitted() {
        let mut s = Direct(StoreInstance::new(ShardId(0)));
        let mut c = StoreClient::new(InstanceId(1), VertexId(0), decls(), ClientConfig::default());
        c.update(0, b"", OpKind::Increment(1), clk(1), Some(5), None, Mode::Normal, 0, &mut s).unwrap();
        assert_eq!(c.wal(ShardId(0)).len(), 1);
        let sent = c.take_outbox();
        assert_eq!(sent.len(), 1);
        // lost: deadline passes, same op comes back
        assert!(c.due_retransmits(1_000).is_empty());
        let again = c.due_retransmits(16_000);
        assert_eq!(again.len(), 1);
        assert_eq!(again[0].1.clock, clk(1));
        for (_, op) in sent.into_iter().chain(again) {
            s.0.apply_nonblocking(op).unwrap();
        }
        s.0.drain();
        assert_eq!(s.0.value(&c.state_key(0, b"").object_id()), Some(&Value::Int(1)));
    }

    #[test]
    fn retransmission_gives_up() {
        let mut s = Direct(StoreInstance::new(ShardId(0)));
        let mut c = StoreClient::new(InstanceId(1), VertexId(0), decls(), ClientConfig::default());
        c.update(0, b"", OpKind::Increment(1), clk(1), None, None, Mode::Normal, 0, &mut s).unwrap();
        let mut t = 0;
        for _ in 0..10 {
            t += 1_000_000;
            c.due_retransmits(t);
        }
        assert_eq!(c.fatal().len(), 1);
        assert_eq!(c.stats.retransmissions, 4);
    }

    #[test]
    fn conditional_cache_follows_permission() {
        let mut s = Direct(StoreInstance::new(ShardId(0)));
        let mut c = StoreClient::new(InstanceId(1), VertexId(0), decls(), ClientConfig::default());
        c.update(2, b"h", OpKind::Increment(3), clk(1), None, None, Mode::Normal, 0, &mut s).unwrap();
        let oid = c.state_key(2, b"h").object_id();
        assert_eq!(s.0.value(&oid), Some(&Value::Int(3)));
        c.set_permission(2, true, &mut s, 0);
        c.update(2, b"h", OpKind::Increment(1), clk(2), None, None, Mode::Normal, 0, &mut s).unwrap();
        assert_eq!(s.0.value(&oid), Some(&Value::Int(3)));
        c.set_permission(2, false, &mut s, 0);
        assert_eq!(s.0.value(&oid), Some(&Value::Int(4)));
        assert!(c.cached(&oid).is_none());
    }

    #[test]
    fn callbacks_keep_cache_coherent() {
        let mut s = Direct(StoreInstance::new(ShardId(0)));
        let mut a = StoreClient::new(InstanceId(1), VertexId(0), decls(), ClientConfig::default());
        let mut b = StoreClient::new(InstanceId(2), VertexId(0), decls(), ClientConfig::default());
        a.update(3, b"", OpKind::Write(Value::Int(1)), clk(1), None, None, Mode::Normal, 0, &mut s).unwrap();
        assert_eq!(b.read(3, b"", clk(2), None, &mut s).unwrap(), Value::Int(1));
        a.update(3, b"", OpKind::Increment(1), clk(3), None, None, Mode::Normal, 0, &mut s).unwrap();
        for fx in s.0.take_effects() {
            if let crate::store::Effect::Refresh { instance, key, value, .. } = fx {
                if instance == InstanceId(2) {
                    b.on_refresh(&key, value);
                }
            }
        }
        let oid = a.state_key(3, b"").object_id();
        assert_eq!(b.cached(&oid), Some(&Value::Int(2)));
        assert_eq!(a.cached(&oid), Some(&Value::Int(2)));
    }

    #[test]
    fn disassociate_blocks_further_updates() {
        let mut s = Direct(StoreInstance::new(ShardId(0)));
        let mut c = StoreClient::new(InstanceId(1), VertexId(0), decls(), ClientConfig::default());
        let flow = FlowKey::new([10, 0, 0, 1].into(), [10, 0, 0, 2].into(), 1, 2, crate::model::Protocol::Tcp);
        c.update(1, b"f", OpKind::Write(Value::Int(9)), clk(1), None, Some(flow), Mode::Normal, 0, &mut s).unwrap();
        let released = c.flush_and_disassociate(&[flow].into_iter().collect(), &mut s, 0);
        assert_eq!(released.len(), 1);
        assert_eq!(s.0.value(&released[0]), Some(&Value::Int(9)));
        let r = c.update(1, b"f", OpKind::Increment(1), clk(2), None, Some(flow), Mode::Normal, 0, &mut s);
        assert!(matches!(r, Err(StoreError::OwnershipViolation { .. })));
    }
}
