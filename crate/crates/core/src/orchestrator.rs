//! Per-request pipeline execution state: frontier planning, conditional node
//! sampling, fan-out overhead and fallback-driven degradation. The simulation
//! drives a [`PipelineRun`] through events; nothing here touches the clock.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::RngStreams;
use crate::metrics::RunOutcome;
use crate::model::{topological_levels, FallbackPolicy, PipelineSpec, Request};
use crate::router::RoutedTo;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrchestrationMode {
    /// Each frontier's nodes dispatch together.
    #[default]
    Parallel,
    /// One node at a time in topological order, no fan-out overhead.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    Conditional,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeState {
    Pending,
    Skipped(SkipReason),
    InFlight { invocation_id: u64 },
    Done { latency_ms: u64, cold: bool, degraded: bool },
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OrchestratorError {
    #[error("node `{0}` already ran on a substitute; substitutions do not chain")]
    SubstituteLoop(String),
}

/// What to do with a node that failed for good.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FallbackAction {
    Skip,
    /// Re-dispatch once against this endpoint.
    Substitute(String),
    Abort,
}

/// Per-node observability record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_id: String,
    pub model_id: String,
    pub latency_ms: u64,
    pub cold: bool,
    pub backend_mode: Option<RoutedTo>,
    pub version_id: String,
    pub state: String,
}

/// Frontiers as node indices into `spec.nodes`.
pub fn plan_frontiers(spec: &PipelineSpec, mode: OrchestrationMode) -> Vec<Vec<usize>> {
    let index = |id: &String| spec.nodes.iter().position(|n| &n.id == id).expect("level ids come from the pipeline");
    let levels = topological_levels(spec);
    match mode {
        OrchestrationMode::Parallel => levels.iter().map(|l| l.iter().map(index).collect()).collect(),
        OrchestrationMode::Sequential => levels.iter().flatten().map(|id| vec![index(id)]).collect(),
    }
}

/// Per-node bookkeeping beyond the coarse state.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeProgress {
    pub attempts: u32,
    pub first_dispatch_ms: Option<u64>,
    /// Endpoint of the substitute currently serving this node.
    pub substitute: Option<String>,
    pub model_id: String,
    pub backend: Option<RoutedTo>,
    pub version_id: String,
    pub cold: bool,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub request: Request,
    pub pipeline: usize,
    pub started_ms: u64,
    pub states: Vec<NodeState>,
    pub progress: Vec<NodeProgress>,
    frontiers: Vec<Vec<usize>>,
    next_frontier: usize,
    outstanding: usize,
    dispatched_in_frontier: usize,
    invoke: Vec<bool>,
    overheads: Vec<u64>,
    /// Fan-out overheads actually applied.
    pub applied_overheads: Vec<u64>,
    pub finished_ms: Option<u64>,
    pub outcome: Option<RunOutcome>,
}

impl PipelineRun {
    /// Draws every node's conditional invocation and every frontier's fan-out
    /// overhead up front from streams keyed by the request, so parallel and
    /// sequential runs of the same workload see the same draws.
    pub fn new(
        request: Request,
        pipeline: usize,
        spec: &PipelineSpec,
        mode: OrchestrationMode,
        streams: &RngStreams,
        now: u64,
    ) -> Self {
        let mut cond = streams.keyed("conditional", request.draw_key);
        let invoke = spec
            .nodes
            .iter()
            .map(|n| {
                let u: f64 = cond.gen();
                u < n.invocation_prob
            })
            .collect();
        let frontiers = plan_frontiers(spec, mode);
        let (lo, hi) = spec.fanout_overhead_range_ms;
        let mut fan = streams.keyed("fanout", request.draw_key);
        let overheads = frontiers.iter().map(|_| fan.gen_range(lo..=hi.max(lo))).collect();
        let n = spec.nodes.len();
        PipelineRun {
            request,
            pipeline,
            started_ms: now,
            states: vec![NodeState::Pending; n],
            progress: spec.nodes.iter().map(|node| NodeProgress { model_id: node.model.clone(), ..Default::default() }).collect(),
            frontiers,
            next_frontier: 0,
            outstanding: 0,
            dispatched_in_frontier: 0,
            invoke,
            overheads,
            applied_overheads: Vec::new(),
            finished_ms: None,
            outcome: None,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.outcome.is_some()
    }

    /// Opens the next frontier with at least one node to run. Nodes whose
    /// conditional draw missed are skipped here. Returns the node indices to
    /// dispatch; empty means the run has no frontiers left and is finished.
    pub fn open_next_frontier(&mut self, now: u64) -> Vec<usize> {
        while self.next_frontier < self.frontiers.len() {
            let f = self.next_frontier;
            self.next_frontier += 1;
            let mut dispatch = Vec::new();
            for &i in &self.frontiers[f] {
                if self.invoke[i] {
                    dispatch.push(i);
                } else {
                    self.states[i] = NodeState::Skipped(SkipReason::Conditional);
                }
            }
            if !dispatch.is_empty() {
                self.outstanding = dispatch.len();
                self.dispatched_in_frontier = dispatch.len();
                return dispatch;
            }
        }
        self.finish(now);
        Vec::new()
    }

    pub fn mark_in_flight(&mut self, node: usize, invocation_id: u64, now: u64) {
        self.states[node] = NodeState::InFlight { invocation_id };
        self.progress[node].first_dispatch_ms.get_or_insert(now);
    }

    /// Node finished successfully. Returns the fan-out overhead to wait
    /// before the next frontier when this closed the current one.
    pub fn node_done(&mut self, node: usize, now: u64) -> Option<u64> {
        let p = &self.progress[node];
        let latency_ms = now - p.first_dispatch_ms.unwrap_or(now);
        self.states[node] = NodeState::Done { latency_ms, cold: p.cold, degraded: p.substitute.is_some() };
        self.settle()
    }

    /// Applies the node's fallback policy after a breaker rejection or
    /// exhausted retries.
    pub fn apply_fallback(&mut self, node: usize, policy: &FallbackPolicy, node_id: &str) -> Result<FallbackAction, OrchestratorError> {
        let action = match policy {
            FallbackPolicy::Skip => FallbackAction::Skip,
            FallbackPolicy::Abort => FallbackAction::Abort,
            FallbackPolicy::Substitute(_) if self.progress[node].substitute.is_some() => {
                self.states[node] = NodeState::Failed;
                return Err(OrchestratorError::SubstituteLoop(node_id.to_string()));
            }
            FallbackPolicy::Substitute(target) => FallbackAction::Substitute(target.clone()),
        };
        match &action {
            FallbackAction::Skip => self.states[node] = NodeState::Skipped(SkipReason::Fallback),
            FallbackAction::Abort => self.states[node] = NodeState::Failed,
            FallbackAction::Substitute(target) => {
                let p = &mut self.progress[node];
                p.substitute = Some(target.clone());
                p.attempts = 0;
                self.states[node] = NodeState::Pending;
            }
        }
        Ok(action)
    }

    /// After a Skip fallback: the node counts as absent. Same return as
    /// [`Self::node_done`].
    pub fn node_skipped(&mut self) -> Option<u64> {
        self.settle()
    }

    fn settle(&mut self) -> Option<u64> {
        self.outstanding = self.outstanding.saturating_sub(1);
        if self.outstanding > 0 {
            return None;
        }
        let overhead = if self.dispatched_in_frontier >= 2 { self.overheads[self.next_frontier - 1] } else { 0 };
        if self.dispatched_in_frontier >= 2 {
            self.applied_overheads.push(overhead);
        }
        Some(overhead)
    }

    pub fn abort(&mut self, now: u64) {
        self.end(RunOutcome::Aborted, now);
    }

    pub fn drop_run(&mut self, now: u64) {
        self.end(RunOutcome::Dropped, now);
    }

    fn end(&mut self, outcome: RunOutcome, now: u64) {
        if self.outcome.is_none() {
            self.outcome = Some(outcome);
            self.finished_ms = Some(now);
        }
    }

    fn finish(&mut self, now: u64) {
        let degraded = self.states.iter().any(|s| {
            matches!(s, NodeState::Skipped(SkipReason::Fallback) | NodeState::Done { degraded: true, .. })
        });
        self.end(if degraded { RunOutcome::Degraded } else { RunOutcome::Success }, now);
    }

    pub fn end_to_end_ms(&self) -> Option<u64> {
        self.finished_ms.map(|f| f - self.request.arrival_ms)
    }

    pub fn any_cold(&self) -> bool {
        self.progress.iter().zip(&self.states).any(|(p, s)| p.cold && matches!(s, NodeState::Done { .. }))
    }

    pub fn node_records(&self, spec: &PipelineSpec) -> Vec<NodeRecord> {
        spec.nodes
            .iter()
            .zip(self.states.iter().zip(&self.progress))
            .map(|(node, (state, p))| {
                let (latency_ms, label) = match state {
                    NodeState::Pending => (0, "pending"),
                    NodeState::Skipped(SkipReason::Conditional) => (0, "skipped_conditional"),
                    NodeState::Skipped(SkipReason::Fallback) => (0, "skipped_fallback"),
                    NodeState::InFlight { .. } => (0, "in_flight"),
                    NodeState::Done { latency_ms, degraded: false, .. } => (*latency_ms, "done"),
                    NodeState::Done { latency_ms, degraded: true, .. } => (*latency_ms, "done_substituted"),
                    NodeState::Failed => (0, "failed"),
                };
                NodeRecord {
                    node_id: node.id.clone(),
                    model_id: p.model_id.clone(),
                    latency_ms,
                    cold: p.cold,
                    backend_mode: p.backend,
                    version_id: p.version_id.clone(),
                    state: label.to_string(),
                }
            })
            .collect()
    }
}
