use crate::client::ObjectDecl;
use crate::model::{Packet, Scope};

use super::{NetworkFunction, NfContext, Verdict};

/// Stateless pass-through stage.
#[derive(Clone, Debug)]
pub struct Scrubber {
    scope: Scope,
}

impl Scrubber {
    pub fn new(scope: Option<Scope>) -> Self {
        Scrubber {
            scope: scope.unwrap_or_else(Scope::five_tuple),
        }
    }
}

impl NetworkFunction for Scrubber {
    fn name(&self) -> &str {
        "scrubber"
    }

    fn scopes(&self) -> Vec<Scope> {
        vec![self.scope.clone()]
    }

    fn objects(&self) -> Vec<ObjectDecl> {
        Vec::new()
    }

    fn process(&self, _pkt: &mut Packet, _ctx: &mut NfContext<'_>) -> Verdict {
        Verdict::Forward
    }
}
