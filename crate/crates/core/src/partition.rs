//! Scope-aware traffic partitioning.
//!
//! A vertex's plan maps the projection of a packet's client-view 5-tuple
//! under the chosen scope onto one of the vertex's instances. Both
//! directions of a connection therefore land on the same instance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{scope_project, FlowKey, InstanceId, Packet, Scope, VertexId};

/// Seedless 64-bit hash: FNV-1a followed by the splitmix64 finalizer.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

pub const DEFAULT_EVENNESS: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub vertex: VertexId,
    pub scope: Scope,
    /// Hash slots, one per instance at plan creation.
    pub slots: Vec<InstanceId>,
    /// Explicit placements that win over the hash (moved flows).
    #[serde(with = "override_map")]
    pub overrides: BTreeMap<Vec<u8>, InstanceId>,
    pub epoch: u64,
}

impl PartitionPlan {
    pub fn new(vertex: VertexId, scope: Scope, slots: Vec<InstanceId>) -> Self {
        assert!(!slots.is_empty(), "a plan needs at least one instance");
        PartitionPlan {
            vertex,
            scope,
            slots,
            overrides: BTreeMap::new(),
            epoch: 0,
        }
    }

    pub fn projection(&self, flow: &FlowKey) -> Vec<u8> {
        scope_project(flow, &self.scope)
    }

    /// Instance for a client-view flow.
    pub fn route_flow(&self, flow: &FlowKey) -> InstanceId {
        let proj = self.projection(flow);
        self.route_projection(&proj)
    }

    pub fn route_projection(&self, proj: &[u8]) -> InstanceId {
        if let Some(i) = self.overrides.get(proj) {
            return *i;
        }
        self.slots[(stable_hash(proj) % self.slots.len() as u64) as usize]
    }

    pub fn route(&self, pkt: &Packet) -> InstanceId {
        self.route_flow(&pkt.client_flow())
    }

    /// Pins `flows` to `to`; returns the previous owner of each projection.
    pub fn move_flows(&mut self, flows: &[FlowKey], to: InstanceId) -> BTreeMap<Vec<u8>, InstanceId> {
        let mut prev = BTreeMap::new();
        for f in flows {
            let proj = self.projection(f);
            let old = self.route_projection(&proj);
            prev.insert(proj.clone(), old);
            self.overrides.insert(proj, to);
        }
        self.epoch += 1;
        prev
    }

    /// Replaces every placement of `from` with `to` (failover, clone winner).
    pub fn replace_instance(&mut self, from: InstanceId, to: InstanceId) {
        for s in self.slots.iter_mut() {
            if *s == from {
                *s = to;
            }
        }
        for v in self.overrides.values_mut() {
            if *v == from {
                *v = to;
            }
        }
        self.epoch += 1;
    }

    pub fn instances(&self) -> Vec<InstanceId> {
        let mut v: Vec<InstanceId> = self.slots.iter().chain(self.overrides.values()).copied().collect();
        v.sort();
        v.dedup();
        v
    }

    /// Short digest of the assignment, for reports.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::new();
        for f in self.scope.fields() {
            bytes.push(*f as u8);
        }
        for s in &self.slots {
            bytes.extend_from_slice(&s.0.to_be_bytes());
        }
        for (k, v) in &self.overrides {
            bytes.extend_from_slice(k);
            bytes.extend_from_slice(&v.0.to_be_bytes());
        }
        format!("{:016x}", stable_hash(&bytes))
    }
}

/// Per-instance load induced by hashing `load` under `scope` onto
/// `instances` slots.
pub fn induced_load(scope: &Scope, load: &BTreeMap<FlowKey, u64>, instances: usize) -> Vec<u64> {
    let mut per = vec![0u64; instances.max(1)];
    for (flow, n) in load {
        let slot = (stable_hash(&scope_project(flow, scope)) % per.len() as u64) as usize;
        per[slot] += n;
    }
    per
}

/// Picks the coarsest scope whose hash assignment keeps max/mean instance
/// load within `evenness`; falls back to the finest scope.
pub fn choose_scope(scopes: &[Scope], load: &BTreeMap<FlowKey, u64>, instances: usize, evenness: f64) -> Scope {
    assert!(!scopes.is_empty(), "no scopes declared");
    let mut ordered: Vec<&Scope> = scopes.iter().collect();
    ordered.sort_by_key(|s| (s.fields().len(), (*s).clone()));
    for s in &ordered {
        if instances <= 1 {
            return (*s).clone();
        }
        let per = induced_load(s, load, instances);
        let total: u64 = per.iter().sum();
        if total == 0 {
            return (*s).clone();
        }
        let mean = total as f64 / per.len() as f64;
        let max = *per.iter().max().unwrap() as f64;
        if max / mean <= evenness {
            return (*s).clone();
        }
    }
    (*ordered.last().unwrap()).clone()
}

mod override_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::model::InstanceId;

    pub fn serialize<S: Serializer>(m: &BTreeMap<Vec<u8>, InstanceId>, s: S) -> Result<S::Ok, S::Error> {
        let v: BTreeMap<String, InstanceId> = m.iter().map(|(k, v)| (hex::encode(k), *v)).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<Vec<u8>, InstanceId>, D::Error> {
        let v = BTreeMap::<String, InstanceId>::deserialize(d)?;
        v.into_iter()
            .map(|(k, v)| hex::decode(k).map(|k| (k, v)).map_err(serde::de::Error::custom))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Direction, Field, Protocol};
    use rand::{Rng, SeedableRng};
    use std::net::Ipv4Addr;

    fn flow(host: u8, sp: u16) -> FlowKey {
        FlowKey::new(Ipv4Addr::new(10, 0, 0, host), Ipv4Addr::new(52, 0, 0, 1), sp, 80, Protocol::Tcp)
    }

    fn scopes() -> Vec<Scope> {
        vec![Scope::five_tuple(), Scope::single(Field::SrcIp)]
    }

    #[test]
    fn balanced_hosts_pick_src_ip() {
        let mut load = BTreeMap::new();
        for h in 1..=60u8 {
            for p in 0..5 {
                load.insert(flow(h, 1000 + p), 10);
            }
        }
        assert_eq!(choose_scope(&scopes(), &load, 3, DEFAULT_EVENNESS), Scope::single(Field::SrcIp));
    }

    #[test]
    fn heavy_host_forces_five_tuple() {
        let mut load = BTreeMap::new();
        for p in 0..90 {
            load.insert(flow(1, 1000 + p), 10);
        }
        for h in 2..=11u8 {
            load.insert(flow(h, 1000), 10);
        }
        // the heavy host alone is 90% of the load: max/mean >= 0.9 * 3 = 2.7 > 1.5
        let per = induced_load(&Scope::single(Field::SrcIp), &load, 3);
        let total: u64 = per.iter().sum();
        assert!(*per.iter().max().unwrap() as f64 / (total as f64 / 3.0) > 1.5);
        assert_eq!(choose_scope(&scopes(), &load, 3, DEFAULT_EVENNESS), Scope::five_tuple());
    }

    #[test]
    fn single_instance_takes_coarsest() {
        let load = BTreeMap::new();
        assert_eq!(choose_scope(&scopes(), &load, 1, DEFAULT_EVENNESS), Scope::single(Field::SrcIp));
    }

    #[test]
    fn both_directions_route_together() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let plan = PartitionPlan::new(
            VertexId(0),
            Scope::five_tuple(),
            vec![InstanceId(1), InstanceId(2), InstanceId(3)],
        );
        for _ in 0..500 {
            let f = FlowKey::new(
                Ipv4Addr::from(rng.gen::<u32>()),
                Ipv4Addr::from(rng.gen::<u32>()),
                rng.gen(),
                rng.gen(),
                Protocol::Tcp,
            );
            let rev = f.reversed();
            assert_eq!(plan.route_flow(&f.client_view(Direction::Forward)), plan.route_flow(&rev.client_view(Direction::Reverse)));
        }
    }

    #[test]
    fn moves_bump_epoch_and_override() {
        let mut plan = PartitionPlan::new(VertexId(0), Scope::five_tuple(), vec![InstanceId(1), InstanceId(2)]);
        let f = flow(3, 4000);
        let before = plan.route_flow(&f);
        let other = if before == InstanceId(1) { InstanceId(2) } else { InstanceId(1) };
        let prev = plan.move_flows(&[f], other);
        assert_eq!(prev.values().next(), Some(&before));
        assert_eq!(plan.route_flow(&f), other);
        assert_eq!(plan.epoch, 1);
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(stable_hash(b""), stable_hash(b""));
        assert_eq!(format!("{:016x}", stable_hash(b"abc")), format!("{:016x}", stable_hash(b"abc")));
        assert_ne!(stable_hash(b"a"), stable_hash(b"b"));
    }
}
