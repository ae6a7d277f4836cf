//! Scenario files: a chain, a trace and a simulator configuration.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runtime::{compile, DagError, LogicalDag, PhysicalDag, VertexSpec};
use crate::sim::{simulate, SimConfig, SimOutcome};
use crate::trace::{self, TraceError, TraceRecord, TraceSpec};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("trace: {0}")]
    Trace(#[from] TraceError),
    #[error("chain: {0}")]
    Dag(#[from] DagError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Generated trace. Exactly one of `trace` and `trace_file` is set.
    #[serde(default)]
    pub trace: Option<TraceSpec>,
    /// Trace file, relative to the scenario file.
    #[serde(default)]
    pub trace_file: Option<PathBuf>,
    pub chain: Vec<VertexSpec>,
    #[serde(default)]
    pub sim: SimConfig,
}

impl Scenario {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ScenarioError> {
        check_trace_keys(text, path)?;
        let mut s: Scenario = toml::from_str(text).map_err(|source| ScenarioError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        if let (Some(f), Some(dir)) = (s.trace_file.as_mut(), path.parent()) {
            if f.is_relative() {
                *f = dir.join(&*f);
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Scenario::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        match (&self.trace, &self.trace_file) {
            (Some(_), Some(_)) => return Err(ScenarioError::Invalid("both trace and trace_file are set".into())),
            (None, None) => return Err(ScenarioError::Invalid("one of trace and trace_file is required".into())),
            _ => {}
        }
        if self.chain.is_empty() {
            return Err(ScenarioError::Invalid("empty chain".into()));
        }
        if self.sim.roots == 0 || self.sim.shards == 0 {
            return Err(ScenarioError::Invalid("roots and shards must be positive".into()));
        }
        Ok(())
    }

    pub fn records(&self) -> Result<Vec<TraceRecord>, ScenarioError> {
        match (&self.trace, &self.trace_file) {
            (Some(spec), _) => Ok(trace::generate(spec)?),
            (None, Some(path)) => Ok(trace::load(path)?),
            (None, None) => Err(ScenarioError::Invalid("no trace".into())),
        }
    }

    /// Compiles the chain, choosing partition scopes from the trace's load.
    pub fn compile(&self, records: &[TraceRecord]) -> Result<PhysicalDag, ScenarioError> {
        let load = trace::flow_load(records);
        Ok(compile(
            &LogicalDag::chain(self.chain.clone()),
            self.sim.roots,
            self.sim.shards,
            Some(&load),
        )?)
    }

    pub fn run(&self) -> Result<(SimOutcome, Arc<Vec<TraceRecord>>), ScenarioError> {
        let records = Arc::new(self.records()?);
        Ok((self.run_on(records.clone())?, records))
    }

    pub fn run_on(&self, records: Arc<Vec<TraceRecord>>) -> Result<SimOutcome, ScenarioError> {
        let dag = self.compile(&records)?;
        Ok(simulate(dag, records, self.sim.clone(), &self.name))
    }
}

/// Scenario files shipped with the crate, by name.
pub const BUILTIN: &[(&str, &str)] = &[
    ("coe-baseline", include_str!("../../../scenarios/coe-baseline.toml")),
    ("handover", include_str!("../../../scenarios/handover.toml")),
    ("counter", include_str!("../../../scenarios/counter.toml")),
    ("trojan", include_str!("../../../scenarios/trojan.toml")),
    ("clone", include_str!("../../../scenarios/clone.toml")),
    ("nf-failure", include_str!("../../../scenarios/nf-failure.toml")),
    ("root-failure", include_str!("../../../scenarios/root-failure.toml")),
    ("store-failure", include_str!("../../../scenarios/store-failure.toml")),
];

/// Parses a built-in scenario.
pub fn builtin(name: &str) -> Option<Result<Scenario, ScenarioError>> {
    BUILTIN
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(n, text)| Scenario::from_toml(text, Path::new(&format!("{n}.toml"))))
}

/// Loads `spec` as a path when such a file exists, otherwise as a built-in
/// name.
pub fn resolve(spec: &str) -> Result<Scenario, ScenarioError> {
    let path = Path::new(spec);
    if path.exists() {
        return Scenario::load(path);
    }
    builtin(spec).unwrap_or_else(|| Err(ScenarioError::Invalid(format!("no scenario file or built-in named `{spec}`"))))
}

/// The trace table is flattened, which serde cannot check for unknown keys;
/// compare against what a round trip of the parsed spec produces instead.
fn check_trace_keys(text: &str, path: &Path) -> Result<(), ScenarioError> {
    let parse = |source| ScenarioError::Parse {
        path: path.to_path_buf(),
        source,
    };
    let doc: toml::Table = toml::from_str(text).map_err(parse)?;
    let Some(toml::Value::Table(t)) = doc.get("trace") else { return Ok(()) };
    let spec: TraceSpec = t.clone().try_into().map_err(parse)?;
    let known = toml::Table::try_from(&spec).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    for key in t.keys() {
        if !known.contains_key(key) {
            return Err(ScenarioError::Invalid(format!("{}: unknown trace key `{key}`", path.display())));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = r#"
        name = "two-stage"

        [trace]
        profile = "uniform-flows"
        packets = 200
        flows = 10
        seed = 4

        [[chain]]
        name = "nat"
        parallelism = 2
        nf = { kind = "nat" }

        [[chain]]
        name = "mon"
        parallelism = 1
        nf = { kind = "flowmon" }

        [sim]
        seed = 4
        link_jitter = 500
    "#;

    #[test]
    fn parses_and_runs() {
        let s = Scenario::from_toml(TEXT, Path::new("x.toml")).unwrap();
        assert_eq!(s.chain.len(), 2);
        let (out, records) = s.run().unwrap();
        assert_eq!(out.report.metrics.ingested, records.len() as u64);
        assert!(out.report.metrics.outputs > 0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = TEXT.replace("link_jitter", "link_jiter");
        let e = Scenario::from_toml(&bad, Path::new("x.toml")).unwrap_err();
        assert!(e.to_string().contains("link_jiter"), "{e}");
    }

    #[test]
    fn unknown_trace_keys_are_rejected() {
        let bad = TEXT.replace("flows = 10", "flows = 10\n        flow = 3");
        let e = Scenario::from_toml(&bad, Path::new("x.toml")).unwrap_err();
        assert!(e.to_string().contains("`flow`"), "{e}");
    }

    #[test]
    fn builtins_parse() {
        for (name, _) in BUILTIN {
            let s = builtin(name).unwrap().unwrap();
            assert_eq!(s.name, *name);
        }
        assert!(builtin("nope").is_none());
    }

    #[test]
    fn trace_source_is_required() {
        let bad = TEXT.replace("[trace]", "[unused]");
        assert!(Scenario::from_toml(&bad, Path::new("x.toml")).is_err());
    }
}
