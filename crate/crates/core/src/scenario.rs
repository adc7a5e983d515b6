//! YAML scenario files: schema, dotted overrides and resolution into a
//! [`SimConfig`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_yaml::with::singleton_map_recursive;
use serde_yaml::{Mapping, Value};
use thiserror::Error;

use crate::autoscaler::{ScheduleError, WarmSchedule};
use crate::model::{validate_pipeline, DeploymentMode, LatencyClass, ModelSpec, PipelineSpec, Registry, ValidationError, Version};
use crate::report::ReportSettings;
use crate::router::{EndpointBinding, EndpointLookup, RouteError, RoutingTable};
use crate::simulation::{Policies, SimConfig, WorkloadSource};
use crate::workload::{load_trace, ArrivalKind, ArrivalProcess, TraceRecord, WorkloadError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse: {0}")]
    Yaml(#[from] serde_yaml::Error),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("endpoint: {0:?}")]
    Route(RouteError),
    #[error("schedule: {0}")]
    Schedule(#[from] ScheduleError),
    #[error("workload: {0}")]
    Workload(#[from] WorkloadError),
    #[error("override `{0}`: {1}")]
    Override(String, String),
    #[error("{0}")]
    Invalid(String),
}

impl From<RouteError> for ScenarioError {
    fn from(e: RouteError) -> Self {
        ScenarioError::Route(e)
    }
}

/// A later binding for an endpoint, effective from `at_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HotSwap {
    pub at_ms: u64,
    pub model: String,
    pub mode: DeploymentMode,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub versions: Vec<Version>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub model: String,
    pub mode: DeploymentMode,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub versions: Vec<Version>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub swaps: Vec<HotSwap>,
}

/// Exactly one of a generated arrival process, a trace file or inline records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<String>,
    /// Defaults to the pipeline's class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_class: Option<LatencyClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub process: Option<ArrivalKind>,
    /// CSV trace, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
    /// Trace records given inline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records: Option<Vec<TraceRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(alias = "seed", default)]
    pub master_seed: u64,
    pub horizon_ms: u64,
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub endpoints: BTreeMap<String, EndpointConfig>,
    pub pipelines: Vec<PipelineSpec>,
    #[serde(default)]
    pub workloads: Vec<WorkloadSpec>,
    #[serde(default)]
    pub schedules: WarmSchedule,
    #[serde(default)]
    pub policies: Policies,
    #[serde(default)]
    pub report: ReportSettings,
}

impl Scenario {
    pub fn from_yaml(text: &str) -> Result<Self, ScenarioError> {
        Ok(singleton_map_recursive::deserialize(serde_yaml::Deserializer::from_str(text))?)
    }

    /// Parses, applies `key=value` overrides in order, then deserializes.
    pub fn from_yaml_with_overrides(text: &str, overrides: &[String]) -> Result<Self, ScenarioError> {
        let mut doc: Value = serde_yaml::from_str(text)?;
        if let Value::Mapping(m) = &mut doc {
            if let Some(seed) = m.remove("seed") {
                m.insert(Value::String("master_seed".into()), seed);
            }
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        Ok(singleton_map_recursive::deserialize(doc)?)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
        Self::from_yaml_with_overrides(&text, overrides)
    }

    pub fn to_yaml(&self) -> Result<String, ScenarioError> {
        let mut buf = Vec::new();
        singleton_map_recursive::serialize(self, &mut serde_yaml::Serializer::new(&mut buf))?;
        Ok(String::from_utf8(buf).expect("yaml is utf-8"))
    }

    /// Validates everything and resolves trace paths against `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<SimConfig, ScenarioError> {
        let invalid = |s: String| ScenarioError::Invalid(s);
        if self.horizon_ms == 0 {
            return Err(invalid("horizon_ms must be positive".into()));
        }

        let mut registry = Registry::new();
        for m in &self.models {
            let mut m = m.clone();
            m.validate()?;
            if m.mode == DeploymentMode::Dedicated && m.dedicated_count == 0 {
                return Err(invalid(format!("model `{}` is dedicated with dedicated_count 0", m.id)));
            }
            if registry.insert(m.id.clone(), m.clone()).is_some() {
                return Err(invalid(format!("duplicate model `{}`", m.id)));
            }
        }

        let mut table = RoutingTable::from_registry(&registry);
        for (id, ep) in &self.endpoints {
            let binding = EndpointBinding { model: ep.model.clone(), mode: ep.mode, versions: ep.versions.clone() };
            table.bind(id, binding, &registry)?;
            for s in &ep.swaps {
                let binding = EndpointBinding { model: s.model.clone(), mode: s.mode, versions: s.versions.clone() };
                table.hot_swap(id, binding, s.at_ms, &registry)?;
            }
        }

        let lookup = EndpointLookup { table: &table, registry: &registry };
        let mut pipelines = Vec::with_capacity(self.pipelines.len());
        let mut ids = BTreeSet::new();
        for p in &self.pipelines {
            if !ids.insert(p.id.clone()) {
                return Err(invalid(format!("duplicate pipeline `{}`", p.id)));
            }
            pipelines.push(validate_pipeline(p.clone(), &lookup)?);
        }

        let mut workloads = Vec::with_capacity(self.workloads.len());
        for (i, w) in self.workloads.iter().enumerate() {
            match (&w.process, &w.trace, &w.records) {
                (Some(kind), None, None) => {
                    let pid = w.pipeline.as_ref().ok_or_else(|| invalid(format!("workload {i}: missing pipeline")))?;
                    let p = pipelines
                        .iter()
                        .find(|p| &p.id == pid)
                        .ok_or_else(|| invalid(format!("workload {i}: unknown pipeline `{pid}`")))?;
                    kind.validate()?;
                    workloads.push(WorkloadSource::Generated(ArrivalProcess {
                        pipeline: pid.clone(),
                        latency_class: w.latency_class.unwrap_or(p.latency_class),
                        process: kind.clone(),
                    }));
                }
                (None, Some(path), None) => {
                    let records = load_trace(&base_dir.join(path))?;
                    check_trace(&records, &ids)?;
                    workloads.push(WorkloadSource::Trace(records));
                }
                (None, None, Some(records)) => {
                    check_trace(records, &ids)?;
                    let mut records = records.clone();
                    records.sort_by_key(|r| r.arrival_ms);
                    workloads.push(WorkloadSource::Trace(records));
                }
                _ => {
                    return Err(invalid(format!("workload {i}: exactly one of `process`, `trace` or `records` is required")))
                }
            }
        }

        self.schedules.validate()?;
        for w in &self.schedules.windows {
            if !registry.contains_key(&w.model) {
                return Err(invalid(format!("schedule names unknown model `{}`", w.model)));
            }
        }
        for m in self.policies.max_instances.keys() {
            if !registry.contains_key(m) {
                return Err(invalid(format!("max_instances names unknown model `{m}`")));
            }
        }

        Ok(SimConfig {
            seed: self.master_seed,
            horizon_ms: self.horizon_ms,
            registry,
            table,
            pipelines,
            workloads,
            schedule: self.schedules.clone(),
            policies: self.policies.clone(),
        })
    }
}

/// Every trace record must name a configured pipeline.
pub fn check_trace(records: &[TraceRecord], pipelines: &BTreeSet<String>) -> Result<(), ScenarioError> {
    match records.iter().find(|r| !pipelines.contains(&r.pipeline_id)) {
        Some(r) => Err(ScenarioError::Invalid(format!("trace names unknown pipeline `{}`", r.pipeline_id))),
        None => Ok(()),
    }
}

/// Applies `a.b.c=value`. Sequence segments match an index or an element's
/// `id`; missing mapping keys are created.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), ScenarioError> {
    let fail = |msg: &str| ScenarioError::Override(assignment.to_string(), msg.to_string());
    let (path, raw) = assignment.split_once('=').ok_or_else(|| fail("expected key=value"))?;
    let value: Value = serde_yaml::from_str(raw).map_err(|e| fail(&e.to_string()))?;
    let segments: Vec<&str> = path.trim().split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(fail("empty path segment"));
    }
    let mut node = doc;
    for seg in &segments {
        node = match node {
            Value::Mapping(m) => {
                let key = Value::String((*seg).to_string());
                if !m.contains_key(&key) {
                    m.insert(key.clone(), Value::Mapping(Mapping::new()));
                }
                m.get_mut(&key).expect("inserted")
            }
            Value::Sequence(items) => {
                let pos = match seg.parse::<usize>() {
                    Ok(i) if i < items.len() => Some(i),
                    _ => items.iter().position(|it| it.get("id").and_then(Value::as_str) == Some(seg)),
                };
                let i = pos.ok_or_else(|| fail(&format!("no element `{seg}`")))?;
                &mut items[i]
            }
            Value::Null => {
                *node = Value::Mapping(Mapping::new());
                let Value::Mapping(m) = node else { unreachable!() };
                m.insert(Value::String((*seg).to_string()), Value::Mapping(Mapping::new()));
                m.get_mut(*seg).expect("inserted")
            }
            _ => return Err(fail(&format!("`{seg}` descends into a scalar"))),
        };
    }
    *node = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "
name: minimal
seed: 7
horizon_ms: 60000
models:
  - id: emb
    cold_start_ms: 1000
    service_time: {deterministic: 50}
    mode: serverless
  - id: llm
    cold_start_ms: 5000
    service_time: {lognormal: {median_ms: 400, p95_ms: 900}}
    mode: auto
    dedicated_count: 1
    per_instance_concurrency: 4
pipelines:
  - id: rag
    latency_class: interactive
    nodes:
      - {id: e, model: emb}
      - {id: g, model: llm, depends_on: [e]}
workloads:
  - pipeline: rag
    process: {poisson: {rate_per_s: 2.0}}
";

    #[test]
    fn minimal_builds() {
        let s = Scenario::from_yaml(MINIMAL).unwrap();
        assert_eq!(s.master_seed, 7);
        let cfg = s.build(Path::new(".")).unwrap();
        assert_eq!(cfg.registry.len(), 2);
        assert_eq!(cfg.workloads.len(), 1);
        let WorkloadSource::Generated(p) = &cfg.workloads[0] else { panic!() };
        assert_eq!(p.latency_class, LatencyClass::Interactive);
    }

    #[test]
    fn round_trip_is_identical() {
        let s = Scenario::from_yaml(MINIMAL).unwrap();
        let again = Scenario::from_yaml(&s.to_yaml().unwrap()).unwrap();
        assert_eq!(s, again);
        assert_eq!(s.build(Path::new(".")).unwrap(), again.build(Path::new(".")).unwrap());
    }

    #[test]
    fn overrides_by_key_and_id() {
        let s = Scenario::from_yaml_with_overrides(
            MINIMAL,
            &[
                "master_seed=42".into(),
                "models.llm.cold_start_ms=9000".into(),
                "models.0.failure_prob=0.5".into(),
                "policies.coordinated_prewarm=true".into(),
            ],
        )
        .unwrap();
        assert_eq!(s.master_seed, 42);
        assert_eq!(s.models[1].cold_start_ms, 9000);
        assert_eq!(s.models[0].failure_prob, 0.5);
        assert!(s.policies.coordinated_prewarm);
        assert!(Scenario::from_yaml_with_overrides(MINIMAL, &["models.nope.x=1".into()]).is_err());
        assert!(Scenario::from_yaml_with_overrides(MINIMAL, &["policies.no_such_knob=1".into()]).is_err());
        assert!(Scenario::from_yaml_with_overrides(MINIMAL, &["horizon_ms".into()]).is_err());
    }

    #[test]
    fn cycle_is_a_validation_error() {
        let text = MINIMAL.replace("{id: e, model: emb}", "{id: e, model: emb, depends_on: [g]}");
        let err = Scenario::from_yaml(&text).unwrap().build(Path::new(".")).unwrap_err();
        assert!(matches!(err, ScenarioError::Validation(ValidationError::CycleDetected(_))), "{err}");
    }

    #[test]
    fn rejects_bad_references() {
        let unknown = MINIMAL.replace("pipeline: rag", "pipeline: nope");
        assert!(Scenario::from_yaml(&unknown).unwrap().build(Path::new(".")).is_err());
        let dup = MINIMAL.replace("id: llm", "id: emb");
        assert!(Scenario::from_yaml(&dup).unwrap().build(Path::new(".")).is_err());
        let typo = MINIMAL.replace("horizon_ms", "horizon");
        assert!(Scenario::from_yaml(&typo).is_err());
    }

    #[test]
    fn endpoint_swap_resolves_by_time() {
        let text = format!(
            "{MINIMAL}endpoints:\n  gen:\n    model: llm\n    mode: auto\n    swaps:\n      - {{at_ms: 30000, model: emb, mode: serverless}}\n"
        )
        .replace("{id: g, model: llm, depends_on: [e]}", "{id: g, model: gen, depends_on: [e]}");
        let cfg = Scenario::from_yaml(&text).unwrap().build(Path::new(".")).unwrap();
        assert_eq!(cfg.table.resolve("gen", 0).unwrap().model, "llm");
        assert_eq!(cfg.table.resolve("gen", 30_000).unwrap().model, "emb");
    }
}
