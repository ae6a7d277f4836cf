use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use crate::client::{AccessPattern, ObjectDecl, ScopeKind};
use crate::model::{scope_project, Direction, OpKind, Packet, Scope, TcpFlags, Value};

use super::{opens_connection, Alert, NetworkFunction, NfContext, Verdict};

pub const ACTIVE: u16 = 0;
pub const BYTES: u16 = 1;
pub const MAPPING: u16 = 2;

/// Least-connections load balancer. Selection and the load increment run
/// atomically at the store as one custom operation.
#[derive(Clone, Debug)]
pub struct LoadBalancer {
    backends: BTreeMap<String, Ipv4Addr>,
}

impl LoadBalancer {
    pub fn new(backends: Vec<(String, Ipv4Addr)>) -> Self {
        LoadBalancer {
            backends: backends.into_iter().collect(),
        }
    }
}

fn mapping_value(name: &str, open: bool) -> Value {
    let mut m = BTreeMap::new();
    m.insert("backend".to_string(), Value::Bytes(name.as_bytes().to_vec()));
    m.insert("open".to_string(), Value::Int(open as i64));
    Value::Map(m)
}

fn parse_mapping(v: &Value) -> Option<(String, bool)> {
    let m = v.as_map()?;
    let name = match m.get("backend")? {
        Value::Bytes(b) => String::from_utf8(b.clone()).ok()?,
        _ => return None,
    };
    let open = m.get("open").and_then(Value::as_int).unwrap_or(0) != 0;
    Some((name, open))
}

impl NetworkFunction for LoadBalancer {
    fn name(&self) -> &str {
        "lb"
    }

    fn scopes(&self) -> Vec<Scope> {
        vec![Scope::five_tuple()]
    }

    fn objects(&self) -> Vec<ObjectDecl> {
        vec![
            ObjectDecl::new("active_connections", ScopeKind::CrossFlow, AccessPattern::WriteReadOften, None),
            ObjectDecl::new("backend_bytes", ScopeKind::CrossFlow, AccessPattern::WriteMostlyReadRarely, None),
            ObjectDecl::new("backend_mapping", ScopeKind::PerFlow, AccessPattern::WriteRarelyReadMostly, Some(Scope::five_tuple())),
        ]
    }

    fn initial_state(&self) -> Vec<(u16, Vec<u8>, Value)> {
        let loads = self.backends.keys().map(|k| (k.clone(), Value::Int(0))).collect();
        let mut out = vec![(ACTIVE, Vec::new(), Value::Map(loads))];
        for name in self.backends.keys() {
            out.push((BYTES, name.as_bytes().to_vec(), Value::Int(0)));
        }
        out
    }

    fn process(&self, pkt: &mut Packet, ctx: &mut NfContext<'_>) -> Verdict {
        let sub = scope_project(&ctx.flow, &Scope::five_tuple());
        let mut mapping = parse_mapping(&ctx.read(MAPPING, &sub));
        if mapping.is_none() && opens_connection(pkt) {
            let pick = OpKind::Custom {
                name: "pick_least_loaded".to_string(),
                arg: Value::None,
            };
            match ctx.update(ACTIVE, &[], pick) {
                Ok(Value::Bytes(b)) => {
                    let name = String::from_utf8_lossy(&b).into_owned();
                    if ctx.update(MAPPING, &sub, OpKind::Write(mapping_value(&name, true))).is_ok() {
                        mapping = Some((name, true));
                    }
                }
                Ok(_) => {}
                Err(_) => {
                    let flow = ctx.flow;
                    ctx.alert(Alert::NoBackend { flow });
                    return Verdict::Drop;
                }
            }
        }
        let Some((name, open)) = mapping else {
            return Verdict::Forward;
        };
        let _ = ctx.update(BYTES, name.as_bytes(), OpKind::Increment(pkt.payload_len as i64));
        if open && pkt.tcp_flags.intersects(TcpFlags::FIN | TcpFlags::RST) {
            let release = OpKind::Custom {
                name: "release_backend".to_string(),
                arg: Value::Bytes(name.as_bytes().to_vec()),
            };
            if ctx.update(ACTIVE, &[], release).is_ok() {
                let _ = ctx.update(MAPPING, &sub, OpKind::Write(mapping_value(&name, false)));
            }
        }
        if let Some(ip) = self.backends.get(&name) {
            match pkt.direction {
                Direction::Forward => pkt.flow.dst_ip = *ip,
                Direction::Reverse => pkt.flow.src_ip = *ip,
            }
        }
        Verdict::Forward
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nfs::testkit::{tcp, Harness};
    use std::sync::Arc;

    fn lb() -> Harness {
        Harness::new(Arc::new(LoadBalancer::new(vec![
            ("a".into(), [192, 168, 0, 1].into()),
            ("b".into(), [192, 168, 0, 2].into()),
        ])))
    }

    fn loads(h: &Harness) -> Vec<(String, i64)> {
        h.shared(ACTIVE, &[])
            .as_map()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_int().unwrap()))
            .collect()
    }

    #[test]
    fn ties_go_to_smallest_then_least_loaded() {
        let mut h = lb();
        let mut p = tcp([10, 0, 0, 1], 1000, [52, 0, 0, 1], 80, TcpFlags::SYN);
        h.run(&mut p);
        assert_eq!(p.flow.dst_ip, Ipv4Addr::new(192, 168, 0, 1));
        let mut q = tcp([10, 0, 0, 1], 1001, [52, 0, 0, 1], 80, TcpFlags::SYN);
        h.run(&mut q);
        assert_eq!(q.flow.dst_ip, Ipv4Addr::new(192, 168, 0, 2));
        assert_eq!(loads(&h), vec![("a".into(), 1), ("b".into(), 1)]);
    }

    #[test]
    fn fin_releases_once() {
        let mut h = lb();
        let mut p = tcp([10, 0, 0, 1], 1000, [52, 0, 0, 1], 80, TcpFlags::SYN);
        h.run(&mut p);
        for _ in 0..2 {
            let mut f = tcp([10, 0, 0, 1], 1000, [52, 0, 0, 1], 80, TcpFlags::FIN | TcpFlags::ACK);
            h.run(&mut f);
        }
        assert_eq!(loads(&h), vec![("a".into(), 0), ("b".into(), 0)]);
    }

    #[test]
    fn byte_counters_sum_payloads() {
        let mut h = lb();
        // occupy a so the next three flows land on b
        let mut first = tcp([10, 0, 0, 1], 999, [52, 0, 0, 1], 80, TcpFlags::SYN);
        first.payload_len = 0;
        h.run(&mut first);
        for i in 0..3u16 {
            let mut p = tcp([10, 0, 0, 2], 2000 + i, [52, 0, 0, 1], 80, TcpFlags::SYN);
            p.payload_len = 1000;
            h.run(&mut p);
            let mut fin = tcp([10, 0, 0, 2], 2000 + i, [52, 0, 0, 1], 80, TcpFlags::FIN);
            fin.payload_len = 0;
            h.run(&mut fin);
        }
        h.quiesce();
        assert_eq!(h.shared(BYTES, b"b"), Value::Int(3000));
        assert_eq!(h.shared(BYTES, b"a"), Value::Int(0));
    }

    #[test]
    fn no_backends_drops() {
        let mut h = Harness::new(Arc::new(LoadBalancer::new(Vec::new())));
        let mut p = tcp([10, 0, 0, 1], 1000, [52, 0, 0, 1], 80, TcpFlags::SYN);
        assert_eq!(h.run(&mut p), Verdict::Drop);
        assert!(matches!(h.alerts[0], Alert::NoBackend { .. }));
    }
}
