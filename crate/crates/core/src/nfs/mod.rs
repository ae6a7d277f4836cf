//! Reference network functions.
//!
//! An NF is a stateless program: all of its state lives behind the
//! [`StoreClient`] handed to it through [`NfContext`]. The same program value
//! is shared by every instance of a vertex.

mod flowmon;
mod lb;
pub mod nat;
mod portscan;
mod scrubber;
mod trojan;

use std::net::Ipv4Addr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::client::{Mode, ObjectDecl, StoreAccess, StoreClient};
use crate::model::{update_tag, FlowKey, LogicalClock, OpKind, Packet, Scope, Time, Value};
use crate::store::{NondetKind, StoreError};

pub use flowmon::FlowMonitor;
pub use lb::LoadBalancer;
pub use nat::Nat;
pub use portscan::{PortscanDetector, TrwParams};
pub use scrubber::Scrubber;
pub use trojan::TrojanDetector;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Forward,
    Drop,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "alert", rename_all = "snake_case")]
pub enum Alert {
    PortsExhausted { flow: FlowKey },
    HostBlocked { host: Ipv4Addr },
    Trojan { host: Ipv4Addr },
    NoBackend { flow: FlowKey },
}

/// Everything an NF may touch while processing one packet.
pub struct NfContext<'a> {
    pub client: &'a mut StoreClient,
    pub store: &'a mut dyn StoreAccess,
    pub clock: LogicalClock,
    /// Client-view flow of the packet being processed.
    pub flow: FlowKey,
    pub mode: Mode,
    /// Local time at the instance.
    pub now: Time,
    /// XOR of the tags of every update this packet issued.
    pub vec: u32,
    pub alerts: Vec<Alert>,
    pub errors: Vec<StoreError>,
}

impl<'a> NfContext<'a> {
    pub fn new(
        client: &'a mut StoreClient,
        store: &'a mut dyn StoreAccess,
        pkt: &Packet,
        mode: Mode,
        now: Time,
    ) -> Self {
        NfContext {
            client,
            store,
            clock: pkt.clock,
            flow: pkt.client_flow(),
            mode,
            now,
            vec: 0,
            alerts: Vec::new(),
            errors: Vec::new(),
        }
    }

    fn flow_arg(&self, index: u16) -> Option<FlowKey> {
        match self.client.decls()[index as usize].kind {
            crate::client::ScopeKind::PerFlow => Some(self.flow),
            crate::client::ScopeKind::CrossFlow => None,
        }
    }

    /// Reads an object; store errors are recorded and read as `None`.
    pub fn read(&mut self, index: u16, sub: &[u8]) -> Value {
        let flow = self.flow_arg(index);
        match self.client.read(index, sub, self.clock, flow, self.store) {
            Ok(v) => v,
            Err(e) => {
                self.errors.push(e);
                Value::None
            }
        }
    }

    /// Issues a mutation. Its tag is folded into the packet's vector only if
    /// the update was accepted, so every tag on the vector will eventually be
    /// committed by the store.
    pub fn update(&mut self, index: u16, sub: &[u8], kind: OpKind) -> Result<Value, StoreError> {
        let flow = self.flow_arg(index);
        let tag = update_tag(self.client.vertex.0, index);
        let r = self.client.update(index, sub, kind, self.clock, Some(tag), flow, self.mode, self.now, self.store);
        match r {
            Ok(v) => {
                self.vec ^= tag;
                Ok(v)
            }
            Err(e) => {
                self.errors.push(e.clone());
                Err(e)
            }
        }
    }

    pub fn nondet(&mut self, kind: NondetKind) -> Value {
        self.client.nondet(self.clock, kind, self.store)
    }

    pub fn alert(&mut self, alert: Alert) {
        self.alerts.push(alert);
    }
}

pub trait NetworkFunction: Send + Sync {
    fn name(&self) -> &str;
    /// Candidate partitioning scopes, coarsest first.
    fn scopes(&self) -> Vec<Scope>;
    /// Declared state objects; the position of a declaration is its index.
    fn objects(&self) -> Vec<ObjectDecl>;
    /// Shared objects to install before traffic starts: (index, sub-key, value).
    fn initial_state(&self) -> Vec<(u16, Vec<u8>, Value)> {
        Vec::new()
    }
    fn process(&self, pkt: &mut Packet, ctx: &mut NfContext<'_>) -> Verdict;
}

/// Serializable NF configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NfSpec {
    Nat {
        #[serde(default = "nat_port_base")]
        port_base: u16,
        #[serde(default = "nat_port_count")]
        port_count: u16,
        #[serde(default)]
        public_ip: Option<Ipv4Addr>,
        /// Read the total-packets counter every this many clocks (0: never).
        #[serde(default)]
        stats_every: u64,
    },
    Portscan {
        #[serde(default)]
        params: TrwParams,
    },
    Trojan {
        /// Order events by local arrival time instead of logical clocks.
        #[serde(default)]
        degraded: bool,
    },
    Lb {
        backends: Vec<(String, Ipv4Addr)>,
    },
    Flowmon,
    Scrubber {
        #[serde(default)]
        scope: Option<Scope>,
    },
}

fn nat_port_base() -> u16 {
    20000
}

fn nat_port_count() -> u16 {
    4096
}

impl NfSpec {
    pub fn build(&self) -> Arc<dyn NetworkFunction> {
        match self {
            NfSpec::Nat {
                port_base,
                port_count,
                public_ip,
                stats_every,
            } => Arc::new(Nat::new(*port_base, *port_count, *public_ip, *stats_every)),
            NfSpec::Portscan { params } => Arc::new(PortscanDetector::new(*params)),
            NfSpec::Trojan { degraded } => Arc::new(TrojanDetector::new(*degraded)),
            NfSpec::Lb { backends } => Arc::new(LoadBalancer::new(backends.clone())),
            NfSpec::Flowmon => Arc::new(FlowMonitor),
            NfSpec::Scrubber { scope } => Arc::new(Scrubber::new(scope.clone())),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            NfSpec::Nat { .. } => "nat",
            NfSpec::Portscan { .. } => "portscan",
            NfSpec::Trojan { .. } => "trojan",
            NfSpec::Lb { .. } => "lb",
            NfSpec::Flowmon => "flowmon",
            NfSpec::Scrubber { .. } => "scrubber",
        }
    }
}

/// Whether the packet opens a connection from the client side.
pub(crate) fn opens_connection(pkt: &Packet) -> bool {
    use crate::model::{Direction, Protocol, TcpFlags};
    if pkt.direction != Direction::Forward {
        return false;
    }
    match pkt.flow.proto {
        Protocol::Tcp => pkt.tcp_flags.contains(TcpFlags::SYN) && !pkt.tcp_flags.contains(TcpFlags::ACK),
        _ => true,
    }
}

#[cfg(test)]
pub(crate) mod testkit {
    //! A single in-process store behind a [`StoreAccess`] for NF unit tests.

    use super::*;
    use crate::client::ClientConfig;
    use crate::model::{InstanceId, ObjectId, Operation, ShardId, VertexId};
    use crate::store::{ApplyResult, StoreInstance};

    pub struct Direct(pub StoreInstance);

    impl StoreAccess for Direct {
        fn blocking(&mut self, _shard: ShardId, op: Operation) -> Result<ApplyResult, StoreError> {
            self.0.apply(op)
        }
        fn nondet(&mut self, _shard: ShardId, clock: LogicalClock, kind: NondetKind) -> Value {
            self.0.nondet_value(clock, kind, 0)
        }
        fn register_callback(&mut self, _shard: ShardId, key: &ObjectId, instance: InstanceId) {
            self.0.register_callback(key, instance);
        }
    }

    pub struct Harness {
        pub nf: Arc<dyn NetworkFunction>,
        pub client: StoreClient,
        pub store: Direct,
        pub alerts: Vec<Alert>,
        next_clock: u64,
    }

    impl Harness {
        pub fn new(nf: Arc<dyn NetworkFunction>) -> Self {
            let vertex = VertexId(1);
            let mut store = StoreInstance::new(ShardId(0));
            let client = StoreClient::new(InstanceId(1), vertex, nf.objects(), ClientConfig::default());
            for (index, sub, value) in nf.initial_state() {
                store.install(client.state_key(index, &sub).object_id(), value, None);
            }
            Harness {
                nf,
                client,
                store: Direct(store),
                alerts: Vec::new(),
                next_clock: 1,
            }
        }

        pub fn run(&mut self, pkt: &mut Packet) -> Verdict {
            pkt.clock = LogicalClock::new(0, self.next_clock).unwrap();
            self.next_clock += 1;
            let now = pkt.ingress_time;
            let mut ctx = NfContext::new(&mut self.client, &mut self.store, pkt, Mode::Normal, now);
            let v = self.nf.process(pkt, &mut ctx);
            self.alerts.append(&mut ctx.alerts);
            v
        }

        /// Pushes out every queued non-blocking update.
        pub fn quiesce(&mut self) {
            self.client.periodic_flush(u64::MAX, true);
            for (_, op) in self.client.take_outbox() {
                let _ = self.store.0.apply_nonblocking(op);
            }
            self.store.0.drain();
        }

        pub fn shared(&self, index: u16, sub: &[u8]) -> Value {
            self.store.0.value(&self.client.state_key(index, sub).object_id()).cloned().unwrap_or_default()
        }
    }

    pub fn tcp(src: [u8; 4], sport: u16, dst: [u8; 4], dport: u16, flags: crate::model::TcpFlags) -> Packet {
        packet(FlowKey::new(src.into(), dst.into(), sport, dport, crate::model::Protocol::Tcp), flags)
    }

    pub fn packet(flow: FlowKey, flags: crate::model::TcpFlags) -> Packet {
        Packet {
            clock: LogicalClock::ZERO,
            flow,
            direction: crate::model::Direction::Forward,
            tcp_flags: flags,
            payload_len: 100,
            payload_tag: String::new(),
            vec: 0,
            marks: Vec::new(),
            ingress_time: 0,
            trace_index: 0,
            control: false,
            replayed: false,
            session: None,
        }
    }
}
