//! Core domain types shared by the store, the chain runtime and the NFs.
//!
//! Everything here is a plain value type. Canonical byte encodings
//! (`StateKey::encode`, [`scope_project`]) are length-prefixed field
//! concatenations and must stay bit-stable: logs, checkpoints and golden
//! files depend on them.

use std::collections::BTreeMap;
use std::fmt;
use std::net::Ipv4Addr;

use bitflags::bitflags;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time in integer nanoseconds.
pub type Time = u64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("root id {root} does not fit in {bits} bits")]
    RootOverflow { root: u64, bits: u32 },
    #[error("counter {counter} does not fit in {bits} bits")]
    CounterOverflow { counter: u64, bits: u32 },
    #[error("invalid root-id width {0}; must be in 1..=32")]
    BadRootBits(u32),
    #[error("scope must name at least one field")]
    EmptyScope,
    #[error("replay mark requires a target instance")]
    MissingTarget,
    #[error("only replay marks carry a target instance")]
    UnexpectedTarget,
}

macro_rules! id_type {
    ($(#[$m:meta])* $name:ident, $inner:ty, $prefix:literal) => {
        $(#[$m])*
        #[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(
    /// Logical vertex of the chain DAG.
    VertexId, u16, "V");
id_type!(
    /// Physical NF instance. Globally unique across vertices; 16 bits so it
    /// fits the update-tracking tag.
    InstanceId, u16, "I");
id_type!(RootId, u16, "R");
id_type!(ShardId, u16, "S");

/// Default number of high-order clock bits that carry the root id.
pub const DEFAULT_ROOT_BITS: u32 = 8;

/// A chain-wide packet clock: `root_id` in the top `k` bits, a per-root
/// monotone counter in the rest.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogicalClock(u64);

impl LogicalClock {
    pub const ZERO: LogicalClock = LogicalClock(0);

    pub fn new(root: u16, counter: u64) -> Result<Self, ModelError> {
        Self::with_bits(root as u64, counter, DEFAULT_ROOT_BITS)
    }

    pub fn with_bits(root: u64, counter: u64, bits: u32) -> Result<Self, ModelError> {
        if bits == 0 || bits > 32 {
            return Err(ModelError::BadRootBits(bits));
        }
        let counter_bits = 64 - bits;
        if root >= (1u64 << bits) {
            return Err(ModelError::RootOverflow { root, bits });
        }
        if counter >= (1u64 << counter_bits) {
            return Err(ModelError::CounterOverflow {
                counter,
                bits: counter_bits,
            });
        }
        Ok(LogicalClock((root << counter_bits) | counter))
    }

    pub const fn from_raw(raw: u64) -> Self {
        LogicalClock(raw)
    }

    pub const fn raw(self) -> u64 {
        self.0
    }

    pub fn root(self) -> RootId {
        self.root_with_bits(DEFAULT_ROOT_BITS)
    }

    pub fn root_with_bits(self, bits: u32) -> RootId {
        RootId((self.0 >> (64 - bits)) as u16)
    }

    pub fn counter(self) -> u64 {
        self.counter_with_bits(DEFAULT_ROOT_BITS)
    }

    pub fn counter_with_bits(self, bits: u32) -> u64 {
        self.0 & ((1u64 << (64 - bits)) - 1)
    }
}

impl fmt::Display for LogicalClock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.root().0, self.counter())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Tcp,
    Udp,
    Icmp,
}

impl Protocol {
    pub fn number(self) -> u8 {
        match self {
            Protocol::Tcp => 6,
            Protocol::Udp => 17,
            Protocol::Icmp => 1,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            6 => Some(Protocol::Tcp),
            17 => Some(Protocol::Udp),
            1 => Some(Protocol::Icmp),
            _ => None,
        }
    }
}

/// An IPv4 5-tuple, as carried on the wire.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowKey {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub proto: Protocol,
}

impl FlowKey {
    pub fn new(src_ip: Ipv4Addr, dst_ip: Ipv4Addr, src_port: u16, dst_port: u16, proto: Protocol) -> Self {
        FlowKey {
            src_ip,
            dst_ip,
            src_port,
            dst_port,
            proto,
        }
    }

    pub fn reversed(self) -> Self {
        FlowKey {
            src_ip: self.dst_ip,
            dst_ip: self.src_ip,
            src_port: self.dst_port,
            dst_port: self.src_port,
            proto: self.proto,
        }
    }

    /// The tuple as seen from the connection initiator: `src` is the client.
    pub fn client_view(self, direction: Direction) -> Self {
        match direction {
            Direction::Forward => self,
            Direction::Reverse => self.reversed(),
        }
    }

    fn field_bytes(&self, field: Field) -> Vec<u8> {
        match field {
            Field::SrcIp => self.src_ip.octets().to_vec(),
            Field::DstIp => self.dst_ip.octets().to_vec(),
            Field::SrcPort => self.src_port.to_be_bytes().to_vec(),
            Field::DstPort => self.dst_port.to_be_bytes().to_vec(),
            Field::Proto => vec![self.proto.number()],
        }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}->{}:{}/{:?}",
            self.src_ip, self.src_port, self.dst_ip, self.dst_port, self.proto
        )
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Reverse,
}

bitflags! {
    #[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
    pub struct TcpFlags: u8 {
        const FIN = 0x01;
        const SYN = 0x02;
        const RST = 0x04;
        const ACK = 0x10;
    }
}

impl Serialize for TcpFlags {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.bits())
    }
}

impl<'de> Deserialize<'de> for TcpFlags {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let bits = u8::deserialize(d)?;
        Ok(TcpFlags::from_bits_truncate(bits))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkKind {
    LastOfMove,
    FirstOfMove,
    LastReplay,
    Replay,
}

/// Protocol annotation carried by a packet.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Mark {
    pub kind: MarkKind,
    pub target: Option<InstanceId>,
}

impl Mark {
    pub fn new(kind: MarkKind, target: Option<InstanceId>) -> Result<Self, ModelError> {
        match (kind, target) {
            (MarkKind::Replay, None) => Err(ModelError::MissingTarget),
            (MarkKind::Replay, Some(_)) => Ok(Mark { kind, target }),
            (_, Some(_)) => Err(ModelError::UnexpectedTarget),
            (_, None) => Ok(Mark { kind, target }),
        }
    }

    pub fn replay(target: InstanceId) -> Self {
        Mark {
            kind: MarkKind::Replay,
            target: Some(target),
        }
    }

    pub fn plain(kind: MarkKind) -> Self {
        debug_assert!(kind != MarkKind::Replay);
        Mark { kind, target: None }
    }
}

/// Header fields a state object can be keyed on.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Field {
    SrcIp,
    DstIp,
    SrcPort,
    DstPort,
    #[serde(alias = "protocol")]
    Proto,
}

impl Field {
    pub const ALL: [Field; 5] = [Field::SrcIp, Field::DstIp, Field::SrcPort, Field::DstPort, Field::Proto];

    fn tag(self) -> u8 {
        match self {
            Field::SrcIp => 1,
            Field::DstIp => 2,
            Field::SrcPort => 3,
            Field::DstPort => 4,
            Field::Proto => 5,
        }
    }
}

/// A non-empty set of header fields, kept sorted.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Field>", into = "Vec<Field>")]
pub struct Scope(Vec<Field>);

impl Scope {
    pub fn new(fields: impl IntoIterator<Item = Field>) -> Result<Self, ModelError> {
        let mut fields: Vec<Field> = fields.into_iter().collect();
        fields.sort();
        fields.dedup();
        if fields.is_empty() {
            return Err(ModelError::EmptyScope);
        }
        Ok(Scope(fields))
    }

    pub fn five_tuple() -> Self {
        Scope(Field::ALL.to_vec())
    }

    pub fn single(field: Field) -> Self {
        Scope(vec![field])
    }

    pub fn fields(&self) -> &[Field] {
        &self.0
    }

    pub fn contains(&self, field: Field) -> bool {
        self.0.contains(&field)
    }

    /// Strict subset.
    pub fn is_coarser_than(&self, other: &Scope) -> bool {
        self.0.len() < other.0.len() && self.0.iter().all(|f| other.contains(*f))
    }

    pub fn is_subset_of(&self, other: &Scope) -> bool {
        self.0.iter().all(|f| other.contains(*f))
    }
}

impl TryFrom<Vec<Field>> for Scope {
    type Error = ModelError;
    fn try_from(v: Vec<Field>) -> Result<Self, Self::Error> {
        Scope::new(v)
    }
}

impl From<Scope> for Vec<Field> {
    fn from(s: Scope) -> Self {
        s.0
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self
            .0
            .iter()
            .map(|f| match f {
                Field::SrcIp => "src-ip",
                Field::DstIp => "dst-ip",
                Field::SrcPort => "src-port",
                Field::DstPort => "dst-port",
                Field::Proto => "protocol",
            })
            .collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

/// Canonical encoding of `scope`'s fields of `flow`: per field, a tag byte,
/// a length byte, then the big-endian field bytes.
pub fn scope_project(flow: &FlowKey, scope: &Scope) -> Vec<u8> {
    let mut out = Vec::with_capacity(scope.0.len() * 6);
    for field in &scope.0 {
        let bytes = flow.field_bytes(*field);
        out.push(field.tag());
        out.push(bytes.len() as u8);
        out.extend_from_slice(&bytes);
    }
    out
}

/// The unit of traffic moving through the chain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Packet {
    pub clock: LogicalClock,
    pub flow: FlowKey,
    pub direction: Direction,
    pub tcp_flags: TcpFlags,
    pub payload_len: u32,
    pub payload_tag: String,
    /// Update-tracking vector; zero at ingress.
    pub vec: u32,
    pub marks: Vec<Mark>,
    /// Root ingress time, stamped once.
    pub ingress_time: Time,
    /// Index of the originating trace record.
    pub trace_index: u64,
    /// Marker-only packet: carries protocol marks for a packet that was
    /// dropped or filtered, never processed by an NF nor output to a host.
    pub control: bool,
    /// Set on packets that originate from a root replay; survives clearing
    /// of the replay mark.
    pub replayed: bool,
    /// Protocol session a marker belongs to (handover or clone).
    pub session: Option<u64>,
}

impl Packet {
    pub fn client_flow(&self) -> FlowKey {
        self.flow.client_view(self.direction)
    }

    pub fn has_mark(&self, kind: MarkKind) -> bool {
        self.marks.iter().any(|m| m.kind == kind)
    }

    pub fn replay_target(&self) -> Option<InstanceId> {
        self.marks
            .iter()
            .find(|m| m.kind == MarkKind::Replay)
            .and_then(|m| m.target)
    }

    pub fn clear_mark(&mut self, kind: MarkKind) {
        self.marks.retain(|m| m.kind != kind);
    }

    /// Marker-only copy of this packet.
    pub fn to_control(&self) -> Packet {
        let mut p = self.clone();
        p.control = true;
        p
    }
}

/// Structural, self-describing state value.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
pub enum Value {
    #[default]
    None,
    Int(i64),
    List(Vec<Value>),
    Map(BTreeMap<String, Value>),
    Bytes(Vec<u8>),
}

impl Value {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&BTreeMap<String, Value>> {
        match self {
            Value::Map(m) => Some(m),
            _ => None,
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Value::None)
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Value::None => "none",
            Value::Int(_) => "int",
            Value::List(_) => "list",
            Value::Map(_) => "map",
            Value::Bytes(_) => "bytes",
        }
    }

    pub fn same_type(&self, other: &Value) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::None => write!(f, "none"),
            Value::Int(v) => write!(f, "{v}"),
            Value::List(items) => {
                write!(f, "[")?;
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{v}")?;
                }
                write!(f, "]")
            }
            Value::Map(m) => {
                write!(f, "{{")?;
                for (i, (k, v)) in m.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{k}={v}")?;
                }
                write!(f, "}}")
            }
            Value::Bytes(b) => write!(f, "0x{}", hex::encode(b)),
        }
    }
}

/// Key of a state object as addressed by an NF instance.
///
/// Per-flow keys carry the owning instance; shared keys carry none. The
/// store indexes objects by [`ObjectId`], which drops the owner so that
/// ownership can move between instances.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateKey {
    pub vertex: VertexId,
    pub instance: Option<InstanceId>,
    #[serde(with = "hex_bytes")]
    pub obj_key: Vec<u8>,
}

impl StateKey {
    pub fn per_flow(vertex: VertexId, instance: InstanceId, obj_key: Vec<u8>) -> Self {
        StateKey {
            vertex,
            instance: Some(instance),
            obj_key,
        }
    }

    pub fn shared(vertex: VertexId, obj_key: Vec<u8>) -> Self {
        StateKey {
            vertex,
            instance: None,
            obj_key,
        }
    }

    pub fn is_shared(&self) -> bool {
        self.instance.is_none()
    }

    pub fn object_id(&self) -> ObjectId {
        ObjectId {
            vertex: self.vertex,
            per_flow: self.instance.is_some(),
            obj_key: self.obj_key.clone(),
        }
    }

    pub fn with_instance(&self, instance: InstanceId) -> Self {
        StateKey {
            vertex: self.vertex,
            instance: Some(instance),
            obj_key: self.obj_key.clone(),
        }
    }

    /// Canonical bytes: vertex, a kind byte (1 per-flow, 0 shared), the
    /// instance when per-flow, then the length-prefixed object key.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + self.obj_key.len());
        out.extend_from_slice(&self.vertex.0.to_be_bytes());
        match self.instance {
            Some(i) => {
                out.push(1);
                out.extend_from_slice(&i.0.to_be_bytes());
            }
            None => out.push(0),
        }
        out.extend_from_slice(&(self.obj_key.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.obj_key);
        out
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.instance {
            Some(i) => write!(f, "{}/{}/{}", self.vertex, i, hex::encode(&self.obj_key)),
            None => write!(f, "{}/*/{}", self.vertex, hex::encode(&self.obj_key)),
        }
    }
}

/// Store-side identity of an object, independent of its current owner.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObjectId {
    pub vertex: VertexId,
    pub per_flow: bool,
    #[serde(with = "hex_bytes")]
    pub obj_key: Vec<u8>,
}

impl ObjectId {
    pub fn is_shared(&self) -> bool {
        !self.per_flow
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + self.obj_key.len());
        out.extend_from_slice(&self.vertex.0.to_be_bytes());
        out.push(self.per_flow as u8);
        out.extend_from_slice(&(self.obj_key.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.obj_key);
        out
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = if self.per_flow { "flow" } else { "shared" };
        write!(f, "{}/{}/{}", self.vertex, kind, hex::encode(&self.obj_key))
    }
}

/// Builds an object key from a declared-object index and a sub-key (for
/// example a scope projection or a backend name).
pub fn obj_key(object_index: u16, sub: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(2 + sub.len());
    out.extend_from_slice(&object_index.to_be_bytes());
    out.extend_from_slice(sub);
    out
}

/// 32-bit update-tracking tag: 16-bit id, 16-bit object id.
pub fn update_tag(id: u16, object: u16) -> u32 {
    ((id as u32) << 16) | object as u32
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpMode {
    Blocking,
    NonBlocking,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Increment(i64),
    Decrement(i64),
    Push(Value),
    Pop,
    CompareAndUpdate { expected: Value, new: Value },
    Read,
    Write(Value),
    Custom { name: String, arg: Value },
}

impl OpKind {
    pub fn is_mutation(&self) -> bool {
        !matches!(self, OpKind::Read)
    }

    pub fn name(&self) -> &str {
        match self {
            OpKind::Increment(_) => "increment",
            OpKind::Decrement(_) => "decrement",
            OpKind::Push(_) => "push",
            OpKind::Pop => "pop",
            OpKind::CompareAndUpdate { .. } => "compare_and_update",
            OpKind::Read => "read",
            OpKind::Write(_) => "write",
            OpKind::Custom { name, .. } => name,
        }
    }

    /// Whether two mutations of this kind on one object commute.
    pub fn is_commutative(&self) -> bool {
        matches!(self, OpKind::Increment(_) | OpKind::Decrement(_))
    }

    pub fn operand(&self) -> Value {
        match self {
            OpKind::Increment(v) | OpKind::Decrement(v) => Value::Int(*v),
            OpKind::Push(v) | OpKind::Write(v) => v.clone(),
            OpKind::Pop | OpKind::Read => Value::None,
            OpKind::CompareAndUpdate { expected, new } => Value::List(vec![expected.clone(), new.clone()]),
            OpKind::Custom { arg, .. } => arg.clone(),
        }
    }
}

/// An offloaded state operation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Operation {
    pub kind: OpKind,
    pub key: StateKey,
    pub mode: OpMode,
    pub clock: LogicalClock,
    pub issuer: InstanceId,
    /// Issuer-local sequence. For uncached shared mutations this is the
    /// contiguous WAL sequence of (issuer, shard); otherwise a unique id.
    pub seq: u64,
    /// Update-tracking tag to signal back to the root on commit.
    pub tag: Option<u32>,
    /// Applied from an instance-local cache (per-flow or conditionally
    /// cached shared object): not covered by TS or the WAL.
    pub cached: bool,
}

impl Operation {
    pub fn new(kind: OpKind, key: StateKey, mode: OpMode, clock: LogicalClock, issuer: InstanceId) -> Self {
        let mode = if matches!(kind, OpKind::Read) { OpMode::Blocking } else { mode };
        Operation {
            kind,
            key,
            mode,
            clock,
            issuer,
            seq: 0,
            tag: None,
            cached: false,
        }
    }

    pub fn with_seq(mut self, seq: u64) -> Self {
        self.seq = seq;
        self
    }

    pub fn with_tag(mut self, tag: u32) -> Self {
        self.tag = Some(tag);
        self
    }

    /// Whether this op is tracked by TS and the write-ahead log.
    pub fn is_logged_shared(&self) -> bool {
        self.key.is_shared() && self.kind.is_mutation() && !self.cached
    }
}

/// Position of one instance's last executed shared mutation.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TsEntry {
    pub clock: LogicalClock,
    pub seq: u64,
}

/// Timestamp-set: per instance, the last shared mutation the store executed
/// on its behalf.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ts {
    pub entries: BTreeMap<InstanceId, TsEntry>,
}

impl Ts {
    pub fn new() -> Self {
        Ts::default()
    }

    pub fn get(&self, instance: InstanceId) -> Option<TsEntry> {
        self.entries.get(&instance).copied()
    }

    pub fn record(&mut self, instance: InstanceId, entry: TsEntry) {
        self.entries.insert(instance, entry);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_clock(&self) -> Option<LogicalClock> {
        self.entries.values().map(|e| e.clock).max()
    }

    pub fn contains_entry(&self, instance: InstanceId, entry: TsEntry) -> bool {
        self.entries.get(&instance) == Some(&entry)
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow(a: [u8; 4], b: [u8; 4], sp: u16, dp: u16) -> FlowKey {
        FlowKey::new(Ipv4Addr::from(a), Ipv4Addr::from(b), sp, dp, Protocol::Tcp)
    }

    #[test]
    fn clock_zero() {
        assert_eq!(LogicalClock::new(0, 0).unwrap().raw(), 0);
    }

    #[test]
    fn clock_root_bits_match_shift_and_mask() {
        let c = LogicalClock::new(1, 5).unwrap();
        assert_eq!(c.raw(), (1u64 << 56) + 5);
        // independent decomposition
        assert_eq!(c.raw() >> 56, 1);
        assert_eq!(c.raw() & 0x00ff_ffff_ffff_ffff, 5);
        assert_eq!(c.root(), RootId(1));
        assert_eq!(c.counter(), 5);
    }

    #[test]
    fn clock_overflow() {
        assert!(matches!(
            LogicalClock::new(0, 1u64 << 56),
            Err(ModelError::CounterOverflow { .. })
        ));
        assert!(matches!(
            LogicalClock::new(256, 1),
            Err(ModelError::RootOverflow { .. })
        ));
        assert!(LogicalClock::new(255, (1u64 << 56) - 1).is_ok());
    }

    #[test]
    fn clock_same_root_orders_by_counter() {
        let a = LogicalClock::new(3, 10).unwrap();
        let b = LogicalClock::new(3, 11).unwrap();
        assert!(a < b);
    }

    #[test]
    fn single_field_projection() {
        let f = flow([10, 0, 0, 1], [10, 0, 0, 2], 80, 443);
        let p = scope_project(&f, &Scope::single(Field::SrcIp));
        assert_eq!(p, vec![1, 4, 10, 0, 0, 1]);
    }

    #[test]
    fn projection_ignores_other_fields() {
        let a = flow([10, 0, 0, 1], [10, 0, 0, 2], 80, 443);
        let b = flow([10, 0, 0, 1], [10, 0, 0, 2], 80, 8443);
        let s = Scope::single(Field::SrcIp);
        assert_eq!(scope_project(&a, &s), scope_project(&b, &s));
    }

    #[test]
    fn five_tuple_projection_is_injective() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut flows = std::collections::BTreeSet::new();
        while flows.len() < 1000 {
            let f = FlowKey::new(
                Ipv4Addr::from(rng.gen::<u32>() & 0x0a0000ff),
                Ipv4Addr::from(rng.gen::<u32>() & 0x0a0000ff),
                rng.gen_range(1..64),
                rng.gen_range(1..64),
                if rng.gen_bool(0.5) { Protocol::Tcp } else { Protocol::Udp },
            );
            flows.insert(f);
        }
        let s = Scope::five_tuple();
        let projected: std::collections::BTreeSet<Vec<u8>> = flows.iter().map(|f| scope_project(f, &s)).collect();
        assert_eq!(projected.len(), flows.len());
    }

    #[test]
    fn scope_ordering() {
        let ip = Scope::single(Field::SrcIp);
        let full = Scope::five_tuple();
        assert!(ip.is_coarser_than(&full));
        assert!(!full.is_coarser_than(&ip));
        assert!(!ip.is_coarser_than(&ip));
        assert_eq!(Scope::new(Vec::new()), Err(ModelError::EmptyScope));
    }

    #[test]
    fn mark_target_rules() {
        assert!(Mark::new(MarkKind::Replay, None).is_err());
        assert!(Mark::new(MarkKind::LastOfMove, Some(InstanceId(1))).is_err());
        assert!(Mark::new(MarkKind::Replay, Some(InstanceId(1))).is_ok());
    }

    #[test]
    fn per_flow_and_shared_keys_never_collide() {
        let a = StateKey::per_flow(VertexId(1), InstanceId(2), vec![0, 1]);
        let b = StateKey::shared(VertexId(1), vec![0, 1]);
        assert_ne!(a.encode(), b.encode());
        assert_ne!(a.object_id().encode(), b.object_id().encode());
        let c = StateKey::shared(VertexId(2), vec![0, 1]);
        assert_ne!(b.encode(), c.encode());
    }

    #[test]
    fn update_tag_layout() {
        assert_eq!(update_tag(3, 9), (3 << 16) | 9);
    }

    proptest::proptest! {
        #[test]
        fn xor_tag_is_self_inverse(v: u32, id: u16, obj: u16) {
            let t = update_tag(id, obj);
            proptest::prop_assert_eq!(v ^ t ^ t, v);
        }

        #[test]
        fn clock_roundtrip(root in 0u16..256, counter in 0u64..(1u64 << 56)) {
            let c = LogicalClock::new(root, counter).unwrap();
            proptest::prop_assert_eq!(c.root(), RootId(root));
            proptest::prop_assert_eq!(c.counter(), counter);
        }
    }
}
