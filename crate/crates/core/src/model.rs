//! Validated domain types shared by every other module: model endpoints,
//! pipelines, requests, latency classes and deployment modes.
//!
//! All durations are integer simulated milliseconds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// z-score of the 95th percentile of a standard normal.
const Z95: f64 = 1.644_853_626_951_472_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeploymentMode {
    Serverless,
    Dedicated,
    /// Dedicated first, spill over to serverless above the capacity threshold.
    Auto,
}

impl fmt::Display for DeploymentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeploymentMode::Serverless => "serverless",
            DeploymentMode::Dedicated => "dedicated",
            DeploymentMode::Auto => "auto",
        })
    }
}

/// Request tag governing queue priority. `Interactive` outranks `Batch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyClass {
    Interactive,
    Batch,
}

impl LatencyClass {
    /// Lower rank is served first.
    pub fn rank(self) -> u8 {
        match self {
            LatencyClass::Interactive => 0,
            LatencyClass::Batch => 1,
        }
    }
}

impl PartialOrd for LatencyClass {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// `Interactive > Batch`.
impl Ord for LatencyClass {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other.rank().cmp(&self.rank())
    }
}

impl fmt::Display for LatencyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LatencyClass::Interactive => "interactive",
            LatencyClass::Batch => "batch",
        })
    }
}

impl std::str::FromStr for LatencyClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "interactive" => Ok(LatencyClass::Interactive),
            "batch" => Ok(LatencyClass::Batch),
            other => Err(format!("unknown latency class `{other}`")),
        }
    }
}

/// Per-invocation service time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceTime {
    Deterministic(u64),
    /// Lognormal parameterized by its median and 95th percentile.
    Lognormal { median_ms: f64, p95_ms: f64 },
}

impl ServiceTime {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match *self {
            ServiceTime::Deterministic(ms) => ms,
            ServiceTime::Lognormal { median_ms, p95_ms } => {
                let mu = median_ms.ln();
                let sigma = (p95_ms.ln() - mu) / Z95;
                if sigma <= 0.0 {
                    return median_ms.round() as u64;
                }
                // sigma > 0 and finite was checked during validation
                let dist = LogNormal::new(mu, sigma).expect("valid lognormal");
                dist.sample(rng).round() as u64
            }
        }
    }

    /// Distribution mean in milliseconds.
    pub fn mean_ms(&self) -> f64 {
        match *self {
            ServiceTime::Deterministic(ms) => ms as f64,
            ServiceTime::Lognormal { median_ms, p95_ms } => {
                let sigma = (p95_ms.ln() - median_ms.ln()) / Z95;
                median_ms * (sigma * sigma / 2.0).exp()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Version {
    pub id: String,
    pub weight: f64,
}

fn default_versions() -> Vec<Version> {
    vec![Version { id: "v1".into(), weight: 1.0 }]
}

fn default_threshold() -> f64 {
    1.0
}

fn default_idle_timeout() -> u64 {
    15 * 60 * 1000
}

fn default_concurrency() -> u32 {
    1
}

/// Performance, capacity, cost and deployment profile of one model endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub id: String,
    pub cold_start_ms: u64,
    pub service_time: ServiceTime,
    #[serde(default = "default_concurrency")]
    pub per_instance_concurrency: u32,
    pub mode: DeploymentMode,
    #[serde(default)]
    pub dedicated_count: u32,
    /// Minimum warm serverless instances (provisioned concurrency).
    #[serde(default)]
    pub provisioned_min: u32,
    #[serde(default = "default_threshold")]
    pub capacity_threshold: f64,
    #[serde(default = "default_idle_timeout")]
    pub idle_timeout_ms: u64,
    #[serde(default)]
    pub failure_prob: f64,
    #[serde(default)]
    pub cost_dedicated_per_hour: f64,
    #[serde(default)]
    pub cost_serverless_per_busy_second: f64,
    #[serde(default = "default_versions")]
    pub versions: Vec<Version>,
}

impl ModelSpec {
    /// A serverless model with a deterministic service time; used heavily in tests.
    pub fn serverless(id: &str, cold_start_ms: u64, service_ms: u64, concurrency: u32) -> Self {
        ModelSpec {
            id: id.to_string(),
            cold_start_ms,
            service_time: ServiceTime::Deterministic(service_ms),
            per_instance_concurrency: concurrency,
            mode: DeploymentMode::Serverless,
            dedicated_count: 0,
            provisioned_min: 0,
            capacity_threshold: 1.0,
            idle_timeout_ms: default_idle_timeout(),
            failure_prob: 0.0,
            cost_dedicated_per_hour: 0.0,
            cost_serverless_per_busy_second: 0.0,
            versions: default_versions(),
        }
    }

    /// Checks field ranges and normalizes version weights in place.
    pub fn validate(&mut self) -> Result<(), ValidationError> {
        let bad = |reason: &str| ValidationError::InvalidModel {
            model_id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.is_empty() {
            return Err(bad("empty model id"));
        }
        if self.cold_start_ms == 0 {
            return Err(bad("cold_start_ms must be positive"));
        }
        if self.per_instance_concurrency == 0 {
            return Err(bad("per_instance_concurrency must be positive"));
        }
        if !(self.capacity_threshold > 0.0 && self.capacity_threshold <= 1.0) {
            return Err(bad("capacity_threshold must lie in (0, 1]"));
        }
        if self.idle_timeout_ms == 0 {
            return Err(bad("idle_timeout_ms must be positive"));
        }
        if !(0.0..=1.0).contains(&self.failure_prob) {
            return Err(bad("failure_prob must lie in [0, 1]"));
        }
        if self.cost_dedicated_per_hour < 0.0 || self.cost_serverless_per_busy_second < 0.0 {
            return Err(bad("costs must be nonnegative"));
        }
        if self.mode == DeploymentMode::Dedicated && self.provisioned_min > 0 {
            return Err(bad("provisioned_min applies only to serverless or auto mode"));
        }
        if let ServiceTime::Lognormal { median_ms, p95_ms } = self.service_time {
            if !(median_ms > 0.0 && p95_ms >= median_ms && p95_ms.is_finite()) {
                return Err(bad("lognormal needs 0 < median_ms <= p95_ms"));
            }
        }
        if self.versions.is_empty() {
            self.versions = default_versions();
        }
        self.versions = normalize_versions(&self.versions).map_err(|_| bad("version weights must sum to a positive value"))?;
        Ok(())
    }
}

/// Rescales weights to sum to one.
pub fn normalize_versions(versions: &[Version]) -> Result<Vec<Version>, ()> {
    if versions.iter().any(|v| !(v.weight >= 0.0) || !v.weight.is_finite()) {
        return Err(());
    }
    let total: f64 = versions.iter().map(|v| v.weight).sum();
    if !(total > 0.0) {
        return Err(());
    }
    Ok(versions
        .iter()
        .map(|v| Version { id: v.id.clone(), weight: v.weight / total })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPolicy {
    #[default]
    Skip,
    Substitute(String),
    Abort,
}

fn default_prob() -> f64 {
    1.0
}

/// One function node in a pipeline DAG. `model` names an endpoint; every
/// registered model is reachable through an endpoint of the same id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineNode {
    pub id: String,
    pub model: String,
    #[serde(default)]
    pub depends_on: BTreeSet<String>,
    #[serde(default = "default_prob")]
    pub invocation_prob: f64,
    #[serde(default)]
    pub fallback: FallbackPolicy,
}

impl PipelineNode {
    pub fn new(id: &str, model: &str, deps: &[&str]) -> Self {
        PipelineNode {
            id: id.into(),
            model: model.into(),
            depends_on: deps.iter().map(|d| d.to_string()).collect(),
            invocation_prob: 1.0,
            fallback: FallbackPolicy::Skip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preprocessing {
    /// Serverless function; no added latency, no standing cost.
    #[default]
    Lightweight,
    /// Persistent proxy microservice.
    Proxy { added_latency_ms: u64, always_on_cost_per_hour: f64 },
}

impl Preprocessing {
    pub fn added_latency_ms(&self) -> u64 {
        match self {
            Preprocessing::Lightweight => 0,
            Preprocessing::Proxy { added_latency_ms, .. } => *added_latency_ms,
        }
    }
}

fn default_fanout() -> (u64, u64) {
    (45, 80)
}

fn default_sla() -> u64 {
    8000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub id: String,
    pub nodes: Vec<PipelineNode>,
    pub latency_class: LatencyClass,
    #[serde(default = "default_fanout")]
    pub fanout_overhead_range_ms: (u64, u64),
    #[serde(default)]
    pub preprocessing: Preprocessing,
    #[serde(default = "default_sla")]
    pub sla_ms: u64,
}

impl PipelineSpec {
    pub fn new(id: &str, nodes: Vec<PipelineNode>) -> Self {
        PipelineSpec {
            id: id.into(),
            nodes,
            latency_class: LatencyClass::Interactive,
            fanout_overhead_range_ms: (0, 0),
            preprocessing: Preprocessing::Lightweight,
            sla_ms: default_sla(),
        }
    }

    pub fn node(&self, id: &str) -> Option<&PipelineNode> {
        self.nodes.iter().find(|n| n.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: u64,
    pub pipeline_id: String,
    pub arrival_ms: u64,
    pub latency_class: LatencyClass,
    /// Key for per-request random draws; stable under changes to other streams.
    pub draw_key: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("cycle detected among nodes {0:?}")]
    CycleDetected(Vec<String>),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("node `{0}` has an invocation probability outside [0, 1]")]
    InvalidProbability(String),
    #[error("pipeline `{pipeline_id}`: {reason}")]
    InvalidPipeline { pipeline_id: String, reason: String },
    #[error("model `{model_id}`: {reason}")]
    InvalidModel { model_id: String, reason: String },
}

/// Model registry keyed by model id.
pub type Registry = BTreeMap<String, ModelSpec>;

/// Anything that can tell whether an endpoint or model id resolves, and to
/// which model spec.
pub trait ModelLookup {
    fn resolve(&self, endpoint_or_model: &str) -> Option<&ModelSpec>;
}

impl ModelLookup for Registry {
    fn resolve(&self, id: &str) -> Option<&ModelSpec> {
        self.get(id)
    }
}

/// Returns the pipeline iff it is a well-formed DAG over resolvable models.
pub fn validate_pipeline<L: ModelLookup>(spec: PipelineSpec, registry: &L) -> Result<PipelineSpec, ValidationError> {
    let invalid = |reason: String| ValidationError::InvalidPipeline { pipeline_id: spec.id.clone(), reason };
    if spec.nodes.is_empty() {
        return Err(invalid("pipeline has no nodes".into()));
    }
    let (lo, hi) = spec.fanout_overhead_range_ms;
    if lo > hi {
        return Err(invalid(format!("fan-out overhead range ({lo}, {hi}) has min > max")));
    }
    if spec.sla_ms == 0 {
        return Err(invalid("sla_ms must be positive".into()));
    }
    let mut ids = BTreeSet::new();
    for node in &spec.nodes {
        if !ids.insert(node.id.as_str()) {
            return Err(invalid(format!("duplicate node id `{}`", node.id)));
        }
    }
    for node in &spec.nodes {
        if !(0.0..=1.0).contains(&node.invocation_prob) {
            return Err(ValidationError::InvalidProbability(node.id.clone()));
        }
        if registry.resolve(&node.model).is_none() {
            return Err(ValidationError::UnknownModel(node.model.clone()));
        }
        if let FallbackPolicy::Substitute(target) = &node.fallback {
            if registry.resolve(target).is_none() {
                return Err(ValidationError::UnknownModel(target.clone()));
            }
        }
        for dep in &node.depends_on {
            if dep == &node.id {
                return Err(ValidationError::CycleDetected(vec![node.id.clone()]));
            }
            if !ids.contains(dep.as_str()) {
                return Err(invalid(format!("node `{}` depends on unknown node `{dep}`", node.id)));
            }
        }
    }
    let levels = kahn_levels(&spec);
    let placed: usize = levels.iter().map(Vec::len).sum();
    if placed != spec.nodes.len() {
        let done: BTreeSet<&String> = levels.iter().flatten().collect();
        let cyclic = spec.nodes.iter().filter(|n| !done.contains(&n.id)).map(|n| n.id.clone()).collect();
        return Err(ValidationError::CycleDetected(cyclic));
    }
    Ok(spec)
}

/// Layered Kahn traversal; nodes on or behind a cycle are never emitted.
fn kahn_levels(spec: &PipelineSpec) -> Vec<Vec<String>> {
    let mut remaining: BTreeMap<&str, usize> = spec.nodes.iter().map(|n| (n.id.as_str(), n.depends_on.len())).collect();
    let mut levels = Vec::new();
    let mut done: BTreeSet<&str> = BTreeSet::new();
    loop {
        // declared node order keeps levels stable
        let frontier: Vec<&str> = spec
            .nodes
            .iter()
            .map(|n| n.id.as_str())
            .filter(|id| remaining.get(id) == Some(&0) && !done.contains(id))
            .collect();
        if frontier.is_empty() {
            break;
        }
        for id in &frontier {
            done.insert(id);
        }
        for node in &spec.nodes {
            if done.contains(node.id.as_str()) {
                continue;
            }
            let unmet = node.depends_on.iter().filter(|d| !done.contains(d.as_str())).count();
            remaining.insert(node.id.as_str(), unmet);
        }
        levels.push(frontier.into_iter().map(String::from).collect());
    }
    levels
}

/// Parallel frontiers: each node sits at the earliest level after all of its
/// dependencies.
pub fn topological_levels(spec: &PipelineSpec) -> Vec<Vec<String>> {
    kahn_levels(spec)
}

/// Longest dependency path measured in cold-start time, with every model cold
/// and warming beginning only when its node is dispatched.
pub fn naive_compound_cold_start<L: ModelLookup>(spec: &PipelineSpec, registry: &L) -> u64 {
    naive_with(spec, |model| registry.resolve(model).map_or(0, |m| m.cold_start_ms))
}

pub(crate) fn naive_with(spec: &PipelineSpec, cold: impl Fn(&str) -> u64) -> u64 {
    let mut finish: BTreeMap<&str, u64> = BTreeMap::new();
    for level in topological_levels(spec) {
        for id in &level {
            let node = spec.node(id).expect("level ids come from the pipeline");
            let ready = node.depends_on.iter().map(|d| finish[d.as_str()]).max().unwrap_or(0);
            finish.insert(node.id.as_str(), ready + cold(&node.model));
        }
    }
    finish.values().copied().max().unwrap_or(0)
}
