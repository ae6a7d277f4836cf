use std::net::Ipv4Addr;

use crate::client::{AccessPattern, ObjectDecl, ScopeKind};
use crate::model::{scope_project, Direction, OpKind, Packet, Protocol, Scope, Value};

use super::{opens_connection, Alert, NetworkFunction, NfContext, Verdict};

pub const PORTS: u16 = 0;
pub const TOTAL_TCP: u16 = 1;
pub const TOTAL: u16 = 2;
pub const MAPPING: u16 = 3;

/// Port-translating NAT. New connections pop a port from the shared pool.
#[derive(Clone, Debug)]
pub struct Nat {
    port_base: u16,
    port_count: u16,
    public_ip: Option<Ipv4Addr>,
    stats_every: u64,
}

impl Nat {
    pub fn new(port_base: u16, port_count: u16, public_ip: Option<Ipv4Addr>, stats_every: u64) -> Self {
        Nat {
            port_base,
            port_count,
            public_ip,
            stats_every,
        }
    }
}

impl NetworkFunction for Nat {
    fn name(&self) -> &str {
        "nat"
    }

    fn scopes(&self) -> Vec<Scope> {
        vec![Scope::five_tuple()]
    }

    fn objects(&self) -> Vec<ObjectDecl> {
        vec![
            ObjectDecl::new("available_ports", ScopeKind::CrossFlow, AccessPattern::WriteReadOften, None),
            ObjectDecl::new("total_tcp_packets", ScopeKind::CrossFlow, AccessPattern::WriteMostlyReadRarely, None),
            ObjectDecl::new("total_packets", ScopeKind::CrossFlow, AccessPattern::WriteMostlyReadRarely, None),
            ObjectDecl::new("port_mapping", ScopeKind::PerFlow, AccessPattern::WriteRarelyReadMostly, Some(Scope::five_tuple())),
        ]
    }

    fn initial_state(&self) -> Vec<(u16, Vec<u8>, Value)> {
        let ports = (0..self.port_count)
            .map(|i| Value::Int(self.port_base as i64 + i as i64))
            .collect();
        vec![
            (PORTS, Vec::new(), Value::List(ports)),
            (TOTAL_TCP, Vec::new(), Value::Int(0)),
            (TOTAL, Vec::new(), Value::Int(0)),
        ]
    }

    fn process(&self, pkt: &mut Packet, ctx: &mut NfContext<'_>) -> Verdict {
        let sub = scope_project(&ctx.flow, &Scope::five_tuple());
        let mut mapping = ctx.read(MAPPING, &sub);
        if mapping.is_none() && opens_connection(pkt) {
            match ctx.update(PORTS, &[], OpKind::Pop) {
                Ok(Value::None) => {}
                Ok(port) => {
                    if ctx.update(MAPPING, &sub, OpKind::Write(port.clone())).is_ok() {
                        mapping = port;
                    }
                }
                Err(_) => {
                    let flow = ctx.flow;
                    ctx.alert(Alert::PortsExhausted { flow });
                    return Verdict::Drop;
                }
            }
        }
        let _ = ctx.update(TOTAL, &[], OpKind::Increment(1));
        if pkt.flow.proto == Protocol::Tcp {
            let _ = ctx.update(TOTAL_TCP, &[], OpKind::Increment(1));
        }
        if self.stats_every > 0 && pkt.clock.counter().is_multiple_of(self.stats_every) {
            ctx.read(TOTAL, &[]);
        }
        if let Some(port) = mapping.as_int() {
            let port = port as u16;
            match pkt.direction {
                Direction::Forward => {
                    pkt.flow.src_port = port;
                    if let Some(ip) = self.public_ip {
                        pkt.flow.src_ip = ip;
                    }
                }
                Direction::Reverse => {
                    pkt.flow.dst_port = port;
                    if let Some(ip) = self.public_ip {
                        pkt.flow.dst_ip = ip;
                    }
                }
            }
        }
        Verdict::Forward
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TcpFlags;
    use crate::nfs::testkit::{tcp, Harness};
    use std::sync::Arc;

    #[test]
    fn first_syn_takes_head_of_pool() {
        let mut h = Harness::new(Arc::new(Nat::new(2001, 2, None, 0)));
        let mut p = tcp([10, 0, 0, 1], 5000, [8, 8, 8, 8], 80, TcpFlags::SYN);
        assert_eq!(h.run(&mut p), Verdict::Forward);
        assert_eq!(p.flow.src_port, 2001);
        h.quiesce();
        assert_eq!(h.shared(PORTS, &[]), Value::List(vec![Value::Int(2002)]));

        let mut q = tcp([10, 0, 0, 1], 5000, [8, 8, 8, 8], 80, TcpFlags::ACK);
        h.run(&mut q);
        assert_eq!(q.flow.src_port, 2001);
        h.quiesce();
        assert_eq!(h.shared(PORTS, &[]), Value::List(vec![Value::Int(2002)]));
        assert_eq!(h.shared(TOTAL, &[]), Value::Int(2));
    }

    #[test]
    fn reverse_direction_rewrites_destination() {
        let mut h = Harness::new(Arc::new(Nat::new(3000, 4, None, 0)));
        let mut p = tcp([10, 0, 0, 1], 5000, [8, 8, 8, 8], 80, TcpFlags::SYN);
        h.run(&mut p);
        let mut r = tcp([8, 8, 8, 8], 80, [10, 0, 0, 1], 5000, TcpFlags::SYN | TcpFlags::ACK);
        r.direction = Direction::Reverse;
        h.run(&mut r);
        assert_eq!(r.flow.dst_port, 3000);
    }

    #[test]
    fn exhausted_pool_drops() {
        let mut h = Harness::new(Arc::new(Nat::new(3000, 1, None, 0)));
        let mut a = tcp([10, 0, 0, 1], 1, [8, 8, 8, 8], 80, TcpFlags::SYN);
        let mut b = tcp([10, 0, 0, 1], 2, [8, 8, 8, 8], 80, TcpFlags::SYN);
        assert_eq!(h.run(&mut a), Verdict::Forward);
        assert_eq!(h.run(&mut b), Verdict::Drop);
        assert!(matches!(h.alerts[0], Alert::PortsExhausted { .. }));
    }

    #[test]
    fn counters_match_trace() {
        let mut h = Harness::new(Arc::new(Nat::new(1024, 512, None, 0)));
        for i in 0..100u16 {
            let mut p = tcp([10, 0, 0, 1], 1000 + i, [8, 8, 8, 8], 80, TcpFlags::SYN);
            h.run(&mut p);
        }
        for i in 0..50u16 {
            let mut p = tcp([10, 0, 0, 2], 1000 + i, [8, 8, 8, 8], 53, TcpFlags::empty());
            p.flow.proto = Protocol::Udp;
            h.run(&mut p);
        }
        h.quiesce();
        assert_eq!(h.shared(TOTAL, &[]), Value::Int(150));
        assert_eq!(h.shared(TOTAL_TCP, &[]), Value::Int(100));
    }
}
