use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::ObjectDecl;
use crate::model::{FlowKey, InstanceId, RootId, Scope, VertexId};
use crate::nfs::{NetworkFunction, NfSpec};
use crate::partition::{choose_scope, PartitionPlan, DEFAULT_EVENNESS};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DagError {
    #[error("the chain has no vertices")]
    Empty,
    #[error("vertex {0} has parallelism 0")]
    ZeroParallelism(String),
    #[error("duplicate vertex name {0}")]
    DuplicateName(String),
    #[error("edge references unknown vertex {0}")]
    UnknownVertex(VertexId),
    #[error("cycle through vertex {0}")]
    Cycle(VertexId),
    #[error("vertex {0} has more than one successor or predecessor; only linear chains are supported")]
    NotAChain(VertexId),
    #[error("at least one root is required")]
    NoRoots,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexSpec {
    pub name: String,
    pub nf: NfSpec,
    pub parallelism: usize,
    /// Forces a partitioning scope instead of choosing one from load.
    #[serde(default)]
    pub scope: Option<Scope>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogicalDag {
    pub vertices: Vec<VertexSpec>,
    pub edges: Vec<(VertexId, VertexId)>,
}

impl LogicalDag {
    /// Vertices in order, each feeding the next.
    pub fn chain(vertices: Vec<VertexSpec>) -> Self {
        let edges = (1..vertices.len())
            .map(|i| (VertexId(i as u16 - 1), VertexId(i as u16)))
            .collect();
        LogicalDag { vertices, edges }
    }

    /// Topological order (Kahn). Rejects cycles.
    pub fn topo_order(&self) -> Result<Vec<VertexId>, DagError> {
        let n = self.vertices.len() as u16;
        let mut indeg: BTreeMap<VertexId, usize> = (0..n).map(|i| (VertexId(i), 0)).collect();
        let mut succ: BTreeMap<VertexId, Vec<VertexId>> = BTreeMap::new();
        for (a, b) in &self.edges {
            for v in [a, b] {
                if v.0 >= n {
                    return Err(DagError::UnknownVertex(*v));
                }
            }
            *indeg.get_mut(b).unwrap() += 1;
            succ.entry(*a).or_default().push(*b);
        }
        let mut ready: BTreeSet<VertexId> = indeg.iter().filter(|(_, d)| **d == 0).map(|(v, _)| *v).collect();
        let mut order = Vec::new();
        while let Some(v) = ready.pop_first() {
            order.push(v);
            for s in succ.get(&v).into_iter().flatten() {
                let d = indeg.get_mut(s).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.insert(*s);
                }
            }
        }
        if order.len() < n as usize {
            let stuck = indeg
                .iter()
                .find(|(v, _)| !order.contains(v))
                .map(|(v, _)| *v)
                .unwrap();
            return Err(DagError::Cycle(stuck));
        }
        Ok(order)
    }
}

#[derive(Clone)]
pub struct PhysicalVertex {
    pub id: VertexId,
    pub name: String,
    pub spec: NfSpec,
    pub nf: Arc<dyn NetworkFunction>,
    pub decls: Vec<ObjectDecl>,
    pub instances: Vec<InstanceId>,
    pub plan: PartitionPlan,
}

impl std::fmt::Debug for PhysicalVertex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PhysicalVertex")
            .field("id", &self.id)
            .field("name", &self.name)
            .field("instances", &self.instances)
            .field("plan", &self.plan)
            .finish()
    }
}

#[derive(Clone, Debug)]
pub struct PhysicalDag {
    /// Vertices in chain order.
    pub vertices: Vec<PhysicalVertex>,
    pub roots: Vec<RootId>,
    pub shards: u16,
}

impl PhysicalDag {
    pub fn vertex_of(&self, instance: InstanceId) -> Option<usize> {
        self.vertices.iter().position(|v| v.instances.contains(&instance))
    }

    pub fn instance_count(&self) -> usize {
        self.vertices.iter().map(|v| v.instances.len()).sum()
    }
}

/// Maps the logical chain onto instances. `load` (per-flow packet counts at
/// ingress) drives scope selection; without it the coarsest scope is used.
pub fn compile(
    dag: &LogicalDag,
    roots: u16,
    shards: u16,
    load: Option<&BTreeMap<FlowKey, u64>>,
) -> Result<PhysicalDag, DagError> {
    if dag.vertices.is_empty() {
        return Err(DagError::Empty);
    }
    if roots == 0 {
        return Err(DagError::NoRoots);
    }
    let mut names = BTreeSet::new();
    for v in &dag.vertices {
        if v.parallelism == 0 {
            return Err(DagError::ZeroParallelism(v.name.clone()));
        }
        if !names.insert(v.name.clone()) {
            return Err(DagError::DuplicateName(v.name.clone()));
        }
    }
    let order = dag.topo_order()?;
    let mut outs: BTreeMap<VertexId, usize> = BTreeMap::new();
    let mut ins: BTreeMap<VertexId, usize> = BTreeMap::new();
    for (a, b) in &dag.edges {
        *outs.entry(*a).or_default() += 1;
        *ins.entry(*b).or_default() += 1;
    }
    for v in &order {
        if outs.get(v).copied().unwrap_or(0) > 1 || ins.get(v).copied().unwrap_or(0) > 1 {
            return Err(DagError::NotAChain(*v));
        }
    }
    let sources = order.iter().filter(|v| ins.get(v).copied().unwrap_or(0) == 0).count();
    if sources > 1 {
        return Err(DagError::NotAChain(order[1]));
    }

    let empty = BTreeMap::new();
    let load = load.unwrap_or(&empty);
    let mut next_instance = 1u16;
    let mut vertices = Vec::new();
    for vid in order {
        let spec = &dag.vertices[vid.0 as usize];
        let nf = spec.nf.build();
        let instances: Vec<InstanceId> = (0..spec.parallelism)
            .map(|i| InstanceId(next_instance + i as u16))
            .collect();
        next_instance += spec.parallelism as u16;
        let scope = match &spec.scope {
            Some(s) => s.clone(),
            None => choose_scope(&nf.scopes(), load, spec.parallelism, DEFAULT_EVENNESS),
        };
        vertices.push(PhysicalVertex {
            id: vid,
            name: spec.name.clone(),
            spec: spec.nf.clone(),
            decls: nf.objects(),
            nf,
            plan: PartitionPlan::new(vid, scope, instances.clone()),
            instances,
        });
    }
    Ok(PhysicalDag {
        vertices,
        roots: (0..roots).map(RootId).collect(),
        shards: shards.max(1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(name: &str, p: usize) -> VertexSpec {
        VertexSpec {
            name: name.into(),
            nf: NfSpec::Flowmon,
            parallelism: p,
            scope: None,
        }
    }

    #[test]
    fn three_vertex_chain() {
        let dag = LogicalDag::chain(vec![v("a", 1), v("b", 1), v("c", 1)]);
        let phys = compile(&dag, 2, 1, None).unwrap();
        assert_eq!(phys.instance_count(), 3);
        assert_eq!(phys.roots.len(), 2);
    }

    #[test]
    fn parallel_vertex_gets_instances() {
        let dag = LogicalDag::chain(vec![v("a", 1), v("ids", 3)]);
        let phys = compile(&dag, 1, 1, None).unwrap();
        assert_eq!(phys.vertices[1].instances.len(), 3);
        assert_eq!(phys.vertices[1].plan.slots, phys.vertices[1].instances);
    }

    #[test]
    fn zero_parallelism_rejected() {
        let dag = LogicalDag::chain(vec![v("a", 0)]);
        assert_eq!(compile(&dag, 1, 1, None).unwrap_err(), DagError::ZeroParallelism("a".into()));
    }

    #[test]
    fn cycle_rejected() {
        let mut dag = LogicalDag::chain(vec![v("a", 1), v("b", 1)]);
        dag.edges.push((VertexId(1), VertexId(0)));
        assert!(matches!(dag.topo_order(), Err(DagError::Cycle(_))));
    }

    #[test]
    fn branching_rejected() {
        let mut dag = LogicalDag::chain(vec![v("a", 1), v("b", 1), v("c", 1)]);
        dag.edges = vec![(VertexId(0), VertexId(1)), (VertexId(0), VertexId(2))];
        assert!(matches!(compile(&dag, 1, 1, None), Err(DagError::NotAChain(_))));
    }
}
