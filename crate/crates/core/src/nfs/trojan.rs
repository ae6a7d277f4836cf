use std::collections::BTreeMap;

use crate::client::{AccessPattern, ObjectDecl, ScopeKind};
use crate::model::{scope_project, Field, OpKind, Packet, Scope, Value};

use super::{Alert, NetworkFunction, NfContext, Verdict};

/// Earliest SSH and FTP-download events per host.
pub const FIRST_SEEN: u16 = 0;
/// Latest IRC activity per host.
pub const LAST_IRC: u16 = 1;

const DOWNLOADS: [&str; 3] = ["html", "zip", "exe"];

/// Detects SSH, then HTML/ZIP/EXE downloads over FTP, then IRC from one
/// host. Events are ordered by logical clock, or by local arrival time in
/// degraded mode.
#[derive(Clone, Debug)]
pub struct TrojanDetector {
    degraded: bool,
}

impl TrojanDetector {
    pub fn new(degraded: bool) -> Self {
        TrojanDetector { degraded }
    }
}

/// Maps a payload label onto the event field it records.
pub fn event_field(tag: &str) -> Option<&'static str> {
    match tag.to_ascii_lowercase().as_str() {
        "ssh" => Some("ssh"),
        "ftp:html" => Some("html"),
        "ftp:zip" => Some("zip"),
        "ftp:exe" => Some("exe"),
        "irc" => Some("irc"),
        _ => None,
    }
}

/// True when ssh < every download < irc.
pub fn signature_holds(first: &BTreeMap<String, Value>, irc: Option<i64>) -> bool {
    let get = |k: &str| first.get(k).and_then(Value::as_int);
    let (Some(ssh), Some(irc)) = (get("ssh"), irc) else {
        return false;
    };
    DOWNLOADS.iter().all(|d| get(d).is_some_and(|t| ssh < t && t < irc))
}

impl NetworkFunction for TrojanDetector {
    fn name(&self) -> &str {
        "trojan"
    }

    fn scopes(&self) -> Vec<Scope> {
        vec![Scope::single(Field::SrcIp), Scope::five_tuple()]
    }

    fn objects(&self) -> Vec<ObjectDecl> {
        let host = Some(Scope::single(Field::SrcIp));
        vec![
            ObjectDecl::new("first_seen", ScopeKind::CrossFlow, AccessPattern::WriteReadOften, host.clone()),
            ObjectDecl::new("last_irc", ScopeKind::CrossFlow, AccessPattern::WriteReadOften, host),
        ]
    }

    fn process(&self, pkt: &mut Packet, ctx: &mut NfContext<'_>) -> Verdict {
        let Some(field) = event_field(&pkt.payload_tag) else {
            return Verdict::Forward;
        };
        let host = scope_project(&ctx.flow, &Scope::single(Field::SrcIp));
        let stamp = if self.degraded {
            ctx.now.min(i64::MAX as u64) as i64
        } else {
            pkt.clock.raw().min(i64::MAX as u64) as i64
        };
        let mut arg = BTreeMap::new();
        arg.insert(field.to_string(), Value::Int(stamp));
        let (index, op) = if field == "irc" {
            (LAST_IRC, "max_clock")
        } else {
            (FIRST_SEEN, "min_clock")
        };
        let kind = OpKind::Custom {
            name: op.to_string(),
            arg: Value::Map(arg),
        };
        if ctx.update(index, &host, kind).is_err() {
            return Verdict::Forward;
        }
        let first = ctx.read(FIRST_SEEN, &host);
        let irc = ctx.read(LAST_IRC, &host);
        let irc = irc.as_map().and_then(|m| m.get("irc")).and_then(Value::as_int);
        if let Some(first) = first.as_map() {
            if signature_holds(first, irc) {
                let host = ctx.flow.src_ip;
                ctx.alert(Alert::Trojan { host });
            }
        }
        Verdict::Forward
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LogicalClock, TcpFlags};
    use crate::nfs::testkit::{tcp, Harness};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use std::sync::Arc;

    fn event(tag: &str, dport: u16) -> Packet {
        let mut p = tcp([10, 0, 0, 5], 40000 + dport, [52, 0, 0, 1], dport, TcpFlags::ACK);
        p.payload_tag = tag.to_string();
        p
    }

    /// Feeds events with fixed clocks in the given delivery order.
    fn detect(order: &[(u64, &str)], degraded: bool) -> bool {
        let mut h = Harness::new(Arc::new(TrojanDetector::new(degraded)));
        for (i, (clock, tag)) in order.iter().enumerate() {
            let mut p = event(tag, 20 + i as u16);
            p.ingress_time = i as u64 * 1000;
            let mut ctx_pkt = p.clone();
            ctx_pkt.clock = LogicalClock::new(0, *clock).unwrap();
            let mut ctx = crate::nfs::NfContext::new(
                &mut h.client,
                &mut h.store,
                &ctx_pkt,
                crate::client::Mode::Normal,
                p.ingress_time,
            );
            h.nf.process(&mut ctx_pkt, &mut ctx);
            let alerts = std::mem::take(&mut ctx.alerts);
            h.alerts.extend(alerts);
        }
        !h.alerts.is_empty()
    }

    const SIG: [(u64, &str); 5] = [(1, "ssh"), (2, "ftp:html"), (3, "ftp:zip"), (4, "ftp:exe"), (5, "irc")];

    #[test]
    fn signature_in_order_is_detected() {
        assert!(detect(&SIG, false));
        assert!(detect(&SIG, true));
    }

    #[test]
    fn irc_before_downloads_is_not() {
        let order = [(1, "ssh"), (2, "irc"), (3, "ftp:html"), (4, "ftp:zip"), (5, "ftp:exe")];
        assert!(!detect(&order, false));
    }

    #[test]
    fn verdict_ignores_delivery_order() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let mut order = SIG.to_vec();
            order.shuffle(&mut rng);
            assert!(detect(&order, false), "{order:?}");
        }
    }

    #[test]
    fn degraded_mode_follows_delivery() {
        let mut order = SIG.to_vec();
        order.swap(3, 4);
        assert!(detect(&order, false));
        assert!(!detect(&order, true));
    }
}
