use serde::{Deserialize, Serialize};

use crate::client::{AccessPattern, ObjectDecl, ScopeKind};
use crate::model::{scope_project, Direction, Field, OpKind, Packet, Protocol, Scope, TcpFlags, Time, Value};

use super::{Alert, NetworkFunction, NfContext, Verdict};

pub const LIKELIHOOD: u16 = 0;
pub const PENDING: u16 = 1;

/// Log-ratios are kept as integers in millionths of a nat so that the
/// store only ever adds integers.
const SCALE: f64 = 1e6;
const RESOLVED: i64 = -1;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrwParams {
    /// Probability that a benign host's connection attempt succeeds.
    pub theta0: f64,
    /// Probability that a scanner's connection attempt succeeds.
    pub theta1: f64,
    /// Upper likelihood-ratio threshold.
    pub eta1: f64,
    /// Initiations without a reply after this long count as failures.
    pub timeout: Time,
}

impl Default for TrwParams {
    fn default() -> Self {
        TrwParams {
            theta0: 0.8,
            theta1: 0.2,
            eta1: 99.0,
            timeout: 1_000_000_000,
        }
    }
}

impl TrwParams {
    pub fn failure_step(&self) -> i64 {
        (((1.0 - self.theta1) / (1.0 - self.theta0)).ln() * SCALE).round() as i64
    }

    pub fn success_step(&self) -> i64 {
        ((self.theta1 / self.theta0).ln() * SCALE).round() as i64
    }

    pub fn threshold(&self) -> i64 {
        (self.eta1.ln() * SCALE).round() as i64
    }
}

/// Threshold random walk over connection outcomes per source host.
#[derive(Clone, Debug)]
pub struct PortscanDetector {
    params: TrwParams,
}

impl PortscanDetector {
    pub fn new(params: TrwParams) -> Self {
        PortscanDetector { params }
    }
}

impl NetworkFunction for PortscanDetector {
    fn name(&self) -> &str {
        "portscan"
    }

    fn scopes(&self) -> Vec<Scope> {
        vec![Scope::single(Field::SrcIp), Scope::five_tuple()]
    }

    fn objects(&self) -> Vec<ObjectDecl> {
        vec![
            ObjectDecl::new(
                "likelihood",
                ScopeKind::CrossFlow,
                AccessPattern::WriteReadOften,
                Some(Scope::single(Field::SrcIp)),
            ),
            ObjectDecl::new("pending_initiation", ScopeKind::PerFlow, AccessPattern::WriteReadOften, Some(Scope::five_tuple())),
        ]
    }

    fn process(&self, pkt: &mut Packet, ctx: &mut NfContext<'_>) -> Verdict {
        let host_sub = scope_project(&ctx.flow, &Scope::single(Field::SrcIp));
        let threshold = self.params.threshold();
        let ratio = ctx.read(LIKELIHOOD, &host_sub).as_int().unwrap_or(0);
        if ratio >= threshold {
            return Verdict::Drop;
        }
        if pkt.flow.proto != Protocol::Tcp {
            return Verdict::Forward;
        }
        let flow_sub = scope_project(&ctx.flow, &Scope::five_tuple());
        let flags = pkt.tcp_flags;
        let pending = ctx.read(PENDING, &flow_sub);
        let started = pending.as_int().filter(|t| *t != RESOLVED);

        let outcome = match (started, pkt.direction) {
            (None, Direction::Forward) if pending.is_none() && flags.contains(TcpFlags::SYN) && !flags.contains(TcpFlags::ACK) => {
                let _ = ctx.update(PENDING, &flow_sub, OpKind::Write(Value::Int(pkt.ingress_time as i64)));
                None
            }
            (Some(t), _) if pkt.ingress_time.saturating_sub(t as Time) > self.params.timeout => Some(false),
            (Some(_), _) if flags.contains(TcpFlags::RST) => Some(false),
            (Some(_), Direction::Reverse) if flags.contains(TcpFlags::SYN | TcpFlags::ACK) => Some(true),
            _ => None,
        };
        if let Some(success) = outcome {
            let _ = ctx.update(PENDING, &flow_sub, OpKind::Write(Value::Int(RESOLVED)));
            let step = if success {
                self.params.success_step()
            } else {
                self.params.failure_step()
            };
            let _ = ctx.update(LIKELIHOOD, &host_sub, OpKind::Increment(step));
            if ratio + step >= threshold {
                let host = ctx.flow.src_ip;
                ctx.alert(Alert::HostBlocked { host });
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

    /// Straight-line TRW in floating point.
    fn trw_blocks(outcomes: &[bool], p: &TrwParams) -> bool {
        let mut ratio = 1.0f64;
        for ok in outcomes {
            ratio *= if *ok { p.theta1 / p.theta0 } else { (1.0 - p.theta1) / (1.0 - p.theta0) };
            if ratio >= p.eta1 {
                return true;
            }
        }
        false
    }

    fn attempt(h: &mut Harness, sport: u16, ok: bool, t: Time) -> Vec<Verdict> {
        let mut syn = tcp([10, 0, 0, 9], sport, [52, 0, 0, 1], 22, TcpFlags::SYN);
        syn.ingress_time = t;
        let mut reply = if ok {
            tcp([52, 0, 0, 1], 22, [10, 0, 0, 9], sport, TcpFlags::SYN | TcpFlags::ACK)
        } else {
            tcp([52, 0, 0, 1], 22, [10, 0, 0, 9], sport, TcpFlags::RST)
        };
        reply.direction = Direction::Reverse;
        reply.ingress_time = t + 1000;
        vec![h.run(&mut syn), h.run(&mut reply)]
    }

    #[test]
    fn ten_failures_block_the_host() {
        let params = TrwParams {
            eta1: 100.0,
            ..TrwParams::default()
        };
        let mut h = Harness::new(Arc::new(PortscanDetector::new(params)));
        for i in 0..10 {
            attempt(&mut h, 4000 + i, false, i as Time * 10_000);
        }
        assert!(trw_blocks(&[false; 10], &params));
        assert!(h.alerts.contains(&Alert::HostBlocked {
            host: [10, 0, 0, 9].into()
        }));
        let v = attempt(&mut h, 5000, true, 1_000_000);
        assert_eq!(v[0], Verdict::Drop);
    }

    #[test]
    fn alternating_outcomes_never_block() {
        let params = TrwParams::default();
        let mut h = Harness::new(Arc::new(PortscanDetector::new(params)));
        let outcomes: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        for (i, ok) in outcomes.iter().enumerate() {
            attempt(&mut h, 4000 + i as u16, *ok, i as Time * 10_000);
        }
        assert!(!trw_blocks(&outcomes, &params));
        assert!(h.alerts.is_empty());
    }

    #[test]
    fn integer_walk_agrees_with_float_walk() {
        let params = TrwParams::default();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        for _ in 0..200 {
            let n = rand::Rng::gen_range(&mut rng, 1..12);
            let outcomes: Vec<bool> = (0..n).map(|_| rand::Rng::gen_bool(&mut rng, 0.3)).collect();
            let mut h = Harness::new(Arc::new(PortscanDetector::new(params)));
            for (i, ok) in outcomes.iter().enumerate() {
                attempt(&mut h, 4000 + i as u16, *ok, i as Time * 10_000);
            }
            assert_eq!(!h.alerts.is_empty(), trw_blocks(&outcomes, &params), "{outcomes:?}");
        }
    }

    #[test]
    fn silence_times_out_as_failure() {
        let params = TrwParams {
            timeout: 5_000,
            ..TrwParams::default()
        };
        let mut h = Harness::new(Arc::new(PortscanDetector::new(params)));
        let mut syn = tcp([10, 0, 0, 9], 4000, [52, 0, 0, 1], 22, TcpFlags::SYN);
        h.run(&mut syn);
        let mut later = tcp([10, 0, 0, 9], 4000, [52, 0, 0, 1], 22, TcpFlags::ACK);
        later.ingress_time = 10_000;
        h.run(&mut later);
        h.quiesce();
        let host = scope_project(&syn.flow, &Scope::single(Field::SrcIp));
        assert_eq!(h.shared(LIKELIHOOD, &host), Value::Int(params.failure_step()));
    }

    #[test]
    fn no_attempts_leave_likelihood_alone() {
        let mut h = Harness::new(Arc::new(PortscanDetector::new(TrwParams::default())));
        let mut p = tcp([10, 0, 0, 9], 4000, [52, 0, 0, 1], 22, TcpFlags::ACK);
        h.run(&mut p);
        let host = scope_project(&p.flow, &Scope::single(Field::SrcIp));
        assert_eq!(h.shared(LIKELIHOOD, &host), Value::None);
    }
}
