use crate::client::{AccessPattern, ObjectDecl, ScopeKind};
use crate::model::{scope_project, OpKind, Packet, Scope};

use super::{NetworkFunction, NfContext, Verdict};

pub const PACKETS: u16 = 0;
pub const BYTES: u16 = 1;

/// Per-flow packet and byte accounting.
#[derive(Clone, Debug, Default)]
pub struct FlowMonitor;

impl NetworkFunction for FlowMonitor {
    fn name(&self) -> &str {
        "flowmon"
    }

    fn scopes(&self) -> Vec<Scope> {
        vec![Scope::five_tuple()]
    }

    fn objects(&self) -> Vec<ObjectDecl> {
        let five = Some(Scope::five_tuple());
        vec![
            ObjectDecl::new("packets", ScopeKind::PerFlow, AccessPattern::WriteReadOften, five.clone()),
            ObjectDecl::new("bytes", ScopeKind::PerFlow, AccessPattern::WriteReadOften, five),
        ]
    }

    fn process(&self, pkt: &mut Packet, ctx: &mut NfContext<'_>) -> Verdict {
        let sub = scope_project(&ctx.flow, &Scope::five_tuple());
        let _ = ctx.update(PACKETS, &sub, OpKind::Increment(1));
        let _ = ctx.update(BYTES, &sub, OpKind::Increment(pkt.payload_len as i64));
        Verdict::Forward
    }
}
