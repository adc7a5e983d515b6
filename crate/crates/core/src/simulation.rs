//! The event loop: arrivals, frontier dispatch, routing, pool placement,
//! cold starts, service completion, retries, fallbacks, autoscaling and
//! warming, with per-run and per-model accounting.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoscaler::{
    schedule_tick, target_instances, tiered_provision_plan, CapacityView, RateTracker, ScalePolicy, Scaler, WarmSchedule,
    WarmingRegistry,
};
use crate::cost::{accrue_costs, CostLedger, Usage, UNATTRIBUTED_IDLE};
use crate::engine::{event_log_line, EventQueue, InstanceRef, RngStreams, Scheduled, SimEvent, WarmupCause};
use crate::metrics::RunOutcome;
use crate::model::{DeploymentMode, PipelineSpec, Registry, Request};
use crate::orchestrator::{FallbackAction, NodeRecord, NodeState, OrchestrationMode, PipelineRun};
use crate::pools::{Packing, Placement, Pool, PoolConfig, PoolKind};
use crate::router::{pick_version, route, Breaker, BreakerConfig, BreakerState, EndpointLookup, Outcome, RoutedTo, RoutingTable};
use crate::workload::{ArrivalProcess, ArrivalStream, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 2, delay_ms: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Policies {
    /// Proactive serverless scaling from the rate trackers.
    pub autoscale: bool,
    pub scale: ScalePolicy,
    /// Per-model serverless instance caps.
    pub max_instances: BTreeMap<String, u32>,
    pub coordinated_prewarm: bool,
    pub prewarm_dedupe_ms: u64,
    pub tiered_provisioning: bool,
    pub breaker: BreakerConfig,
    pub retry: RetryPolicy,
    pub orchestration: OrchestrationMode,
    pub packing: Packing,
    pub queue_depth_per_slot: usize,
    pub bill_cold_start: bool,
}

impl Default for Policies {
    fn default() -> Self {
        Policies {
            autoscale: true,
            scale: ScalePolicy::default(),
            max_instances: BTreeMap::new(),
            coordinated_prewarm: false,
            prewarm_dedupe_ms: 60_000,
            tiered_provisioning: false,
            breaker: BreakerConfig::default(),
            retry: RetryPolicy::default(),
            orchestration: OrchestrationMode::Parallel,
            packing: Packing::BestFit,
            queue_depth_per_slot: 100,
            bill_cold_start: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WorkloadSource {
    Generated(ArrivalProcess),
    Trace(Vec<TraceRecord>),
}

/// A fully resolved, validated simulation input.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub horizon_ms: u64,
    pub registry: Registry,
    /// Endpoint bindings with hot-swaps already applied.
    pub table: RoutingTable,
    pub pipelines: Vec<PipelineSpec>,
    pub workloads: Vec<WorkloadSource>,
    pub schedule: WarmSchedule,
    pub policies: Policies,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("config: {0}")]
    Config(String),
    #[error("event log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub arrival_ms: u64,
    /// End-to-end latency; `None` for dropped runs.
    pub latency_ms: Option<u64>,
    pub finished_ms: u64,
    pub outcome: RunOutcome,
    pub cold: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineMetrics {
    pub id: String,
    pub runs: Vec<RunSummary>,
    /// Fan-out overheads applied to frontiers of two or more nodes.
    pub overheads: Vec<u64>,
    /// Per node: runs in which the node was dispatched.
    pub node_invocations: Vec<u64>,
    /// Per node: runs that ended with the node skipped by fallback.
    pub node_fallback_skips: Vec<u64>,
    /// Requests still in flight at the horizon.
    pub unfinished: u64,
}

impl PipelineMetrics {
    /// `(arrival_ms, end-to-end ms)` for served runs.
    pub fn latencies(&self) -> Vec<(u64, u64)> {
        self.runs
            .iter()
            .filter(|r| matches!(r.outcome, RunOutcome::Success | RunOutcome::Degraded))
            .filter_map(|r| r.latency_ms.map(|l| (r.arrival_ms, l)))
            .collect()
    }

    pub fn outcome_counts(&self) -> BTreeMap<RunOutcome, u64> {
        let mut out = BTreeMap::new();
        for r in &self.runs {
            *out.entry(r.outcome).or_insert(0) += 1;
        }
        out
    }

    /// Served runs finishing in `[start, end)` per minute.
    pub fn completed_rpm(&self, (start, end): (u64, u64)) -> f64 {
        let n = self
            .runs
            .iter()
            .filter(|r| matches!(r.outcome, RunOutcome::Success | RunOutcome::Degraded))
            .filter(|r| (start..end).contains(&r.finished_ms))
            .count();
        n as f64 * 60_000.0 / end.saturating_sub(start).max(1) as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelMetrics {
    pub id: String,
    pub invocations: u64,
    pub cold_invocations: u64,
    pub failures: u64,
    pub breaker_trips: u64,
    /// `(completion ms, node latency ms)`.
    pub latencies: Vec<(u64, u64)>,
    /// Autoscaler target after each change: `(tick ms, target)`.
    pub targets: Vec<(u64, u32)>,
}

impl ModelMetrics {
    /// Time-weighted mean autoscaler target over `[start, end)`.
    pub fn mean_target(&self, (start, end): (u64, u64)) -> f64 {
        if end <= start {
            return 0.0;
        }
        let mut acc = 0.0;
        for (i, &(t, v)) in self.targets.iter().enumerate() {
            let next = self.targets.get(i + 1).map_or(u64::MAX, |e| e.0);
            let (lo, hi) = (t.max(start), next.min(end));
            if hi > lo {
                acc += f64::from(v) * (hi - lo) as f64;
            }
        }
        acc / (end - start) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub request_id: u64,
    pub pipeline_id: String,
    pub outcome: RunOutcome,
    pub end_to_end_ms: Option<u64>,
    pub nodes: Vec<NodeRecord>,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub seed: u64,
    pub horizon_ms: u64,
    pub events: u64,
    pub pipelines: Vec<PipelineMetrics>,
    pub models: Vec<ModelMetrics>,
    /// Two pools per model in registry order: serverless then dedicated.
    pub pools: Vec<Pool>,
    pub usage: Usage,
    pub ledger: CostLedger,
    pub run_records: Vec<RunRecord>,
    /// Models kept provisioned by tiered provisioning.
    pub tiered: Vec<String>,
}

impl SimOutput {
    pub fn pipeline(&self, id: &str) -> Option<&PipelineMetrics> {
        self.pipelines.iter().find(|p| p.id == id)
    }

    pub fn model(&self, id: &str) -> Option<&ModelMetrics> {
        self.models.iter().find(|m| m.id == id)
    }

    pub fn serverless_pool(&self, model: &str) -> Option<&Pool> {
        self.models.iter().position(|m| m.id == model).map(|i| &self.pools[2 * i])
    }

    pub fn dedicated_pool(&self, model: &str) -> Option<&Pool> {
        self.models.iter().position(|m| m.id == model).map(|i| &self.pools[2 * i + 1])
    }
}

#[derive(Debug, Clone)]
struct Invocation {
    request_id: u64,
    pipeline: usize,
    node: usize,
    model: usize,
    pool: usize,
    probe: bool,
    service_ms: u64,
    fails: bool,
    instance: Option<u32>,
    held_since: u64,
}

enum Source {
    Generated { stream: ArrivalStream<ChaCha8Rng>, pipeline: usize, class: crate::model::LatencyClass, emitted: u64 },
    Trace { records: Vec<(u64, usize, crate::model::LatencyClass)>, next: usize },
}

struct Pending {
    at: u64,
    pipeline: usize,
    class: crate::model::LatencyClass,
    seq: u64,
}

/// Draw key for one attempt of one node.
fn attempt_key(draw_key: u64, node: usize, attempt: u32, substitute: bool) -> u64 {
    draw_key.wrapping_shl(16) ^ ((node as u64) << 8) ^ (u64::from(attempt) << 1) ^ u64::from(substitute)
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    streams: RngStreams,
    registry: Registry,
    model_ids: Vec<String>,
    model_idx: BTreeMap<String, usize>,
    pools: Vec<Pool>,
    breakers: Vec<Breaker>,
    trackers: Vec<RateTracker>,
    scalers: Vec<Scaler>,
    scale_floor: Vec<u32>,
    schedule_floor: Vec<u32>,
    warming: WarmingRegistry,
    sources: Vec<Source>,
    pending: Vec<Option<Pending>>,
    runs: HashMap<u64, PipelineRun>,
    invocations: HashMap<u64, Invocation>,
    /// Provisioning instances → pipeline that caused them (for cold-start billing).
    cold_owner: HashMap<(usize, u32), usize>,
    next_request: u64,
    next_invocation: u64,
    pipeline_metrics: Vec<PipelineMetrics>,
    model_metrics: Vec<ModelMetrics>,
    usage: Usage,
    run_records: Option<Vec<RunRecord>>,
    violation: Option<String>,
    tiered: Vec<String>,
}

struct View<'s, 'a>(&'s Sim<'a>, u64);

impl CapacityView for View<'_, '_> {
    fn warm_or_provisioning(&self, model_id: &str) -> u32 {
        let sim = self.0;
        let Some(&m) = sim.model_idx.get(model_id) else { return 0 };
        let serverless = sim.pools[2 * m].live_count();
        let uses_dedicated = sim
            .cfg
            .table
            .resolve(model_id, self.1)
            .is_none_or(|b| b.mode != DeploymentMode::Serverless);
        serverless + if uses_dedicated { sim.pools[2 * m + 1].live_count() } else { 0 }
    }
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a SimConfig) -> Result<Self, SimError> {
        let streams = RngStreams::new(cfg.seed);
        let mut registry = cfg.registry.clone();
        let mut tiered = Vec::new();
        if cfg.policies.tiered_provisioning {
            let lookup = EndpointLookup { table: &cfg.table, registry: &cfg.registry };
            for p in &cfg.pipelines {
                for ep in tiered_provision_plan(p, &lookup).provision {
                    let model = cfg.table.resolve(&ep, 0).map(|b| b.model.clone()).unwrap_or(ep);
                    if let Some(spec) = registry.get_mut(&model) {
                        spec.provisioned_min = spec.provisioned_min.max(1);
                        if !tiered.contains(&model) {
                            tiered.push(model);
                        }
                    }
                }
            }
        }
        let model_ids: Vec<String> = registry.keys().cloned().collect();
        let model_idx: BTreeMap<String, usize> = model_ids.iter().enumerate().map(|(i, m)| (m.clone(), i)).collect();
        let pipeline_idx: BTreeMap<String, usize> = cfg.pipelines.iter().enumerate().map(|(i, p)| (p.id.clone(), i)).collect();
        let pol = &cfg.policies;

        let mut pools = Vec::new();
        for id in &model_ids {
            let spec = &registry[id];
            let cap = pol.max_instances.get(id).copied().unwrap_or(pol.scale.max_instances).max(1);
            let min = if spec.mode == DeploymentMode::Dedicated { 0 } else { spec.provisioned_min };
            let conc = spec.per_instance_concurrency as usize;
            let fleet = if spec.mode != DeploymentMode::Serverless || cfg.table.uses_dedicated(id) { spec.dedicated_count } else { 0 };
            pools.push(Pool::new(
                PoolConfig {
                    model_id: id.clone(),
                    kind: PoolKind::Serverless,
                    concurrency: spec.per_instance_concurrency,
                    cold_start_ms: spec.cold_start_ms,
                    idle_timeout_ms: spec.idle_timeout_ms,
                    provisioned_min: min,
                    initial_instances: min,
                    max_instances: cap.max(min),
                    max_queue_depth: pol.queue_depth_per_slot.saturating_mul(cap as usize).saturating_mul(conc),
                    packing: pol.packing,
                },
                0,
            ));
            pools.push(Pool::new(
                PoolConfig {
                    model_id: id.clone(),
                    kind: PoolKind::Dedicated,
                    concurrency: spec.per_instance_concurrency,
                    cold_start_ms: spec.cold_start_ms,
                    idle_timeout_ms: spec.idle_timeout_ms,
                    provisioned_min: 0,
                    initial_instances: fleet,
                    max_instances: fleet,
                    max_queue_depth: pol.queue_depth_per_slot.saturating_mul(fleet as usize).saturating_mul(conc),
                    packing: pol.packing,
                },
                0,
            ));
        }

        let mut sources = Vec::new();
        for (w, src) in cfg.workloads.iter().enumerate() {
            let lookup = |id: &str| pipeline_idx.get(id).copied().ok_or_else(|| SimError::Config(format!("workload {w}: unknown pipeline `{id}`")));
            sources.push(match src {
                WorkloadSource::Generated(p) => Source::Generated {
                    stream: ArrivalStream::new(p.process.clone(), cfg.horizon_ms, streams.stream(&format!("arrivals:{w}"))),
                    pipeline: lookup(&p.pipeline)?,
                    class: p.latency_class,
                    emitted: 0,
                },
                WorkloadSource::Trace(records) => {
                    let mut rs = Vec::with_capacity(records.len());
                    for r in records.iter().filter(|r| r.arrival_ms < cfg.horizon_ms) {
                        rs.push((r.arrival_ms, lookup(&r.pipeline_id)?, r.latency_class));
                    }
                    rs.sort_by_key(|r| r.0);
                    Source::Trace { records: rs, next: 0 }
                }
            });
        }

        let mut usage = Usage { span_ms: (0, cfg.horizon_ms), ..Default::default() };
        for id in &model_ids {
            let fleet = pools[2 * model_idx[id] + 1].cfg.max_instances;
            if fleet > 0 {
                usage.dedicated.insert(id.clone(), (fleet, registry[id].per_instance_concurrency));
            }
        }
        for p in &cfg.pipelines {
            if let crate::model::Preprocessing::Proxy { always_on_cost_per_hour, .. } = p.preprocessing {
                usage.proxies.insert(p.id.clone(), always_on_cost_per_hour);
            }
        }

        let n = model_ids.len();
        Ok(Sim {
            cfg,
            streams,
            breakers: vec![Breaker::new(pol.breaker); n],
            trackers: model_ids
                .iter()
                .map(|id| RateTracker::new(id, pol.scale.alpha, registry[id].service_time.mean_ms(), 0))
                .collect(),
            scalers: vec![Scaler::new(0); n],
            scale_floor: vec![0; n],
            schedule_floor: vec![0; n],
            warming: WarmingRegistry::new(&cfg.pipelines, pol.prewarm_dedupe_ms),
            pending: sources.iter().map(|_| None).collect(),
            sources,
            runs: HashMap::new(),
            invocations: HashMap::new(),
            cold_owner: HashMap::new(),
            next_request: 0,
            next_invocation: 0,
            pipeline_metrics: cfg
                .pipelines
                .iter()
                .map(|p| PipelineMetrics {
                    id: p.id.clone(),
                    node_invocations: vec![0; p.nodes.len()],
                    node_fallback_skips: vec![0; p.nodes.len()],
                    ..Default::default()
                })
                .collect(),
            model_metrics: model_ids.iter().map(|id| ModelMetrics { id: id.clone(), ..Default::default() }).collect(),
            usage,
            run_records: None,
            violation: None,
            tiered,
            registry,
            model_ids,
            model_idx,
            pools,
        })
    }

    fn violate(&mut self, msg: String) {
        self.violation.get_or_insert(msg);
    }

    fn pull_arrival(&mut self, q: &mut EventQueue<SimEvent>, w: usize) {
        let next = match &mut self.sources[w] {
            Source::Generated { stream, pipeline, class, emitted } => stream.next().map(|at| {
                *emitted += 1;
                Pending { at, pipeline: *pipeline, class: *class, seq: *emitted - 1 }
            }),
            Source::Trace { records, next } => records.get(*next).map(|&(at, pipeline, class)| {
                *next += 1;
                Pending { at, pipeline, class, seq: (*next - 1) as u64 }
            }),
        };
        if let Some(p) = next {
            let at = p.at.max(q.now());
            self.pending[w] = Some(p);
            q.schedule(SimEvent::RequestArrival { workload: w }, at).expect("arrival not in the past");
        }
    }

    fn handle(&mut self, q: &mut EventQueue<SimEvent>, ev: Scheduled<SimEvent>) {
        let now = ev.fire_at_ms;
        match ev.kind {
            SimEvent::RequestArrival { workload } => self.on_arrival(q, workload, now),
            SimEvent::AdvanceFrontier { request_id } => self.advance(q, request_id, now),
            SimEvent::DispatchNode { request_id, node } => self.dispatch(q, request_id, node, now),
            SimEvent::ColdStartComplete(r) => self.on_cold_start_complete(q, r, now),
            SimEvent::ServiceComplete { invocation_id } => self.on_service_complete(q, invocation_id, now),
            SimEvent::ScaleTick { model } => self.on_scale_tick(q, model, now),
            SimEvent::WarmupTrigger { model, .. } => self.start_warmup(q, model, None, now),
            SimEvent::IdleTimeout(r) => self.on_idle_timeout(q, r, now),
            SimEvent::BreakerTimer { model } => {
                self.breakers[model].on_timer(now);
            }
            SimEvent::ScheduleTick => self.on_schedule_tick(q, now),
        }
    }

    fn on_arrival(&mut self, q: &mut EventQueue<SimEvent>, w: usize, now: u64) {
        let Some(p) = self.pending[w].take() else { return };
        let spec = &self.cfg.pipelines[p.pipeline];
        let request_id = self.next_request;
        self.next_request += 1;
        let request = Request {
            request_id,
            pipeline_id: spec.id.clone(),
            arrival_ms: now,
            latency_class: p.class,
            draw_key: ((w as u64) << 40) | p.seq,
        };
        let run = PipelineRun::new(request, p.pipeline, spec, self.cfg.policies.orchestration, &self.streams, now);
        self.runs.insert(request_id, run);
        let delay = spec.preprocessing.added_latency_ms();
        if delay == 0 {
            self.advance(q, request_id, now);
        } else {
            q.schedule_in(SimEvent::AdvanceFrontier { request_id }, delay);
        }
        self.pull_arrival(q, w);
    }

    fn advance(&mut self, q: &mut EventQueue<SimEvent>, request_id: u64, now: u64) {
        let Some(run) = self.runs.get_mut(&request_id) else { return };
        if run.is_finished() {
            return;
        }
        let nodes = run.open_next_frontier(now);
        if nodes.is_empty() {
            self.finalize(request_id);
            return;
        }
        for n in nodes {
            self.dispatch(q, request_id, n, now);
        }
    }

    fn dispatch(&mut self, q: &mut EventQueue<SimEvent>, request_id: u64, node: usize, now: u64) {
        let Some(run) = self.runs.get_mut(&request_id) else { return };
        if run.is_finished() {
            return;
        }
        let pipeline = run.pipeline;
        let spec = &self.cfg.pipelines[pipeline];
        let substitute = run.progress[node].substitute.clone();
        let endpoint = substitute.clone().unwrap_or_else(|| spec.nodes[node].model.clone());
        let Some(binding) = self.cfg.table.resolve(&endpoint, now) else {
            self.violate(format!("endpoint `{endpoint}` does not resolve at {now}"));
            return;
        };
        let m = self.model_idx[&binding.model];
        let model_spec = &self.registry[&binding.model];
        let routed = route(&endpoint, binding, model_spec, &mut self.breakers[m], Some(&self.pools[2 * m + 1]));
        let (target, probe) = match routed {
            Ok(r) => r,
            Err(_) => {
                self.fallback(q, request_id, node, now);
                return;
            }
        };
        let run = self.runs.get_mut(&request_id).expect("checked above");
        let attempt = run.progress[node].attempts;
        run.progress[node].attempts += 1;
        let key = attempt_key(run.request.draw_key, node, attempt, substitute.is_some());
        let version = pick_version(&binding.versions, &mut self.streams.keyed("version", key)).to_string();
        let service_ms = model_spec.service_time.sample(&mut self.streams.keyed("service", key));
        let fails = self.streams.keyed("failure", key).gen::<f64>() < model_spec.failure_prob;
        let class = run.request.latency_class;

        let invocation_id = self.next_invocation;
        self.next_invocation += 1;
        let p = &mut run.progress[node];
        p.model_id = binding.model.clone();
        p.backend = Some(target);
        p.version_id = version;
        run.mark_in_flight(node, invocation_id, now);

        if self.cfg.policies.coordinated_prewarm {
            let mut warming = std::mem::take(&mut self.warming);
            let models = warming.coordinated_prewarm(&self.model_ids[m], &self.cfg.table, &View(self, now), now);
            self.warming = warming;
            for model in models {
                let idx = self.model_idx[&model];
                q.schedule_in(SimEvent::WarmupTrigger { model: idx, cause: WarmupCause::Coordinated }, 0);
            }
        }
        self.trackers[m].record_invocation();
        self.model_metrics[m].invocations += 1;

        let pool = match target {
            RoutedTo::Serverless => 2 * m,
            RoutedTo::Dedicated => 2 * m + 1,
        };
        self.invocations.insert(
            invocation_id,
            Invocation { request_id, pipeline, node, model: m, pool, probe, service_ms, fails, instance: None, held_since: now },
        );
        let before = self.pools[pool].instances().len();
        match self.pools[pool].acquire_slot(invocation_id, class, now) {
            Placement::WarmSlot(inst) => self.start_service(q, invocation_id, inst, now),
            Placement::ColdStartStarted { instance, ready_at_ms } => {
                if let Some(run) = self.runs.get_mut(&request_id) {
                    run.progress[node].cold = true;
                }
                self.model_metrics[m].cold_invocations += 1;
                if self.pools[pool].instances().len() > before {
                    self.cold_owner.insert((pool, instance), pipeline);
                    q.schedule(SimEvent::ColdStartComplete(InstanceRef { pool, instance }), ready_at_ms)
                        .expect("cold start completes in the future");
                }
            }
            Placement::Queued(_) => {}
            Placement::Rejected => {
                self.invocations.remove(&invocation_id);
                if probe {
                    self.breakers[m].cancel_probe();
                }
                if let Some(run) = self.runs.get_mut(&request_id) {
                    run.drop_run(now);
                }
                self.finalize(request_id);
            }
        }
    }

    fn start_service(&mut self, q: &mut EventQueue<SimEvent>, invocation_id: u64, instance: u32, now: u64) {
        let inv = self.invocations.get_mut(&invocation_id).expect("placed invocation exists");
        inv.instance = Some(instance);
        inv.held_since = now;
        q.schedule_in(SimEvent::ServiceComplete { invocation_id }, inv.service_ms);
    }

    fn start_warmup(&mut self, q: &mut EventQueue<SimEvent>, model: usize, owner: Option<usize>, now: u64) {
        let pool = 2 * model;
        if let Some((instance, ready)) = self.pools[pool].start_instance(now) {
            if let Some(p) = owner {
                self.cold_owner.insert((pool, instance), p);
            }
            q.schedule(SimEvent::ColdStartComplete(InstanceRef { pool, instance }), ready).expect("future");
        }
    }

    fn is_alive(runs: &HashMap<u64, PipelineRun>, request_id: u64) -> bool {
        runs.get(&request_id).is_some_and(|r| !r.is_finished())
    }

    fn on_cold_start_complete(&mut self, q: &mut EventQueue<SimEvent>, r: InstanceRef, now: u64) {
        let model = self.pools[r.pool].cfg.model_id.clone();
        let owner = self
            .cold_owner
            .remove(&(r.pool, r.instance))
            .map_or(UNATTRIBUTED_IDLE.to_string(), |p| self.cfg.pipelines[p].id.clone());
        *self.usage.cold_start_ms.entry((model, owner)).or_insert(0) += self.pools[r.pool].cfg.cold_start_ms;

        let (reserved, timer) = self.pools[r.pool].complete_cold_start(r.instance, now);
        if let Some(at) = timer {
            q.schedule(SimEvent::IdleTimeout(r), at).expect("future");
        }
        for inv_id in reserved {
            let alive = self.invocations.get(&inv_id).is_some_and(|inv| Self::is_alive(&self.runs, inv.request_id));
            if alive {
                self.start_service(q, inv_id, r.instance, now);
            } else if let Some(inv) = self.invocations.remove(&inv_id) {
                if inv.probe {
                    self.breakers[inv.model].cancel_probe();
                }
                match self.pools[r.pool].release_slot(r.instance, now, now) {
                    Ok(rel) => {
                        if let Some(at) = rel.idle_timer_at {
                            q.schedule(SimEvent::IdleTimeout(r), at).expect("future");
                        }
                    }
                    Err(e) => self.violate(e.to_string()),
                }
            }
        }
        self.drain(q, r.pool, now);
    }

    fn drain(&mut self, q: &mut EventQueue<SimEvent>, pool: usize, now: u64) {
        let Sim { pools, invocations, runs, breakers, .. } = self;
        let placed = pools[pool].drain_queue(now, |inv_id| {
            let alive = invocations.get(&inv_id).is_some_and(|inv| Self::is_alive(runs, inv.request_id));
            if !alive {
                if let Some(inv) = invocations.remove(&inv_id) {
                    if inv.probe {
                        breakers[inv.model].cancel_probe();
                    }
                }
            }
            alive
        });
        for (inv_id, inst, _) in placed {
            self.start_service(q, inv_id, inst, now);
        }
    }

    fn on_service_complete(&mut self, q: &mut EventQueue<SimEvent>, invocation_id: u64, now: u64) {
        let Some(inv) = self.invocations.remove(&invocation_id) else {
            self.violate(format!("completion for unknown invocation {invocation_id}"));
            return;
        };
        let instance = inv.instance.expect("completed invocations were placed");
        match self.pools[inv.pool].release_slot(instance, inv.held_since, now) {
            Ok(rel) => {
                let key = (self.model_ids[inv.model].clone(), self.cfg.pipelines[inv.pipeline].id.clone());
                let bucket = match self.pools[inv.pool].cfg.kind {
                    PoolKind::Serverless => &mut self.usage.serverless_busy_ms,
                    PoolKind::Dedicated => &mut self.usage.dedicated_busy_ms,
                };
                *bucket.entry(key).or_insert(0) += rel.busy_ms;
                if let Some(at) = rel.idle_timer_at {
                    q.schedule(SimEvent::IdleTimeout(InstanceRef { pool: inv.pool, instance }), at).expect("future");
                }
            }
            Err(e) => self.violate(e.to_string()),
        }
        self.drain(q, inv.pool, now);
        self.trackers[inv.model].record_service(inv.service_ms);

        let m = inv.model;
        let before = self.breakers[m].state();
        let outcome = if inv.fails { Outcome::Failure } else { Outcome::Success };
        let after = self.breakers[m].record(outcome, inv.probe, now);
        if let BreakerState::Open { until_ms } = after {
            if before != after {
                self.model_metrics[m].breaker_trips += 1;
                q.schedule(SimEvent::BreakerTimer { model: m }, until_ms).expect("future");
            }
        }
        if inv.fails {
            self.model_metrics[m].failures += 1;
        }

        let Some(run) = self.runs.get_mut(&inv.request_id) else { return };
        if run.is_finished() {
            return;
        }
        if !inv.fails {
            let first = run.progress[inv.node].first_dispatch_ms.unwrap_or(now);
            self.model_metrics[m].latencies.push((now, now - first));
            if let Some(overhead) = run.node_done(inv.node, now) {
                self.after_frontier(q, inv.request_id, overhead, now);
            }
        } else if run.progress[inv.node].attempts <= self.cfg.policies.retry.max_retries {
            let ev = SimEvent::DispatchNode { request_id: inv.request_id, node: inv.node };
            q.schedule_in(ev, self.cfg.policies.retry.delay_ms);
        } else {
            self.fallback(q, inv.request_id, inv.node, now);
        }
    }

    fn after_frontier(&mut self, q: &mut EventQueue<SimEvent>, request_id: u64, overhead: u64, now: u64) {
        if overhead == 0 {
            self.advance(q, request_id, now);
        } else {
            q.schedule_in(SimEvent::AdvanceFrontier { request_id }, overhead);
        }
    }

    fn fallback(&mut self, q: &mut EventQueue<SimEvent>, request_id: u64, node: usize, now: u64) {
        let Some(run) = self.runs.get_mut(&request_id) else { return };
        let spec = &self.cfg.pipelines[run.pipeline];
        let n = &spec.nodes[node];
        match run.apply_fallback(node, &n.fallback, &n.id) {
            Ok(FallbackAction::Skip) => {
                if let Some(overhead) = run.node_skipped() {
                    self.after_frontier(q, request_id, overhead, now);
                }
            }
            Ok(FallbackAction::Substitute(_)) => self.dispatch(q, request_id, node, now),
            Ok(FallbackAction::Abort) | Err(_) => {
                run.abort(now);
                self.finalize(request_id);
            }
        }
    }

    fn on_idle_timeout(&mut self, q: &mut EventQueue<SimEvent>, r: InstanceRef, now: u64) {
        let pool = &mut self.pools[r.pool];
        if pool.handle_idle_timeout(r.instance, now) {
            return;
        }
        // kept only by the floor: look again one timeout later
        let idle_for = pool.cfg.idle_timeout_ms;
        if let Some(inst) = pool.instance(r.instance) {
            let idle = matches!(inst.state, crate::pools::InstanceState::Warm { busy_slots: 0 });
            if idle && now >= inst.last_transition_ms + idle_for {
                q.schedule_in(SimEvent::IdleTimeout(r), idle_for);
            }
        }
    }

    fn apply_floor(&mut self, q: &mut EventQueue<SimEvent>, m: usize, now: u64) {
        let floor = self.scale_floor[m].max(self.schedule_floor[m]);
        let pool = &mut self.pools[2 * m];
        pool.set_floor(floor);
        let live = pool.live_count();
        for _ in live..floor.min(pool.cfg.max_instances) {
            self.start_warmup(q, m, None, now);
        }
    }

    fn on_scale_tick(&mut self, q: &mut EventQueue<SimEvent>, m: usize, now: u64) {
        self.trackers[m].tick(now);
        let id = &self.model_ids[m];
        let spec = &self.registry[id];
        let mode = self.cfg.table.resolve(id, now).map_or(spec.mode, |b| b.mode);
        let mut policy: ScalePolicy = self.cfg.policies.scale;
        if let Some(&cap) = self.cfg.policies.max_instances.get(id) {
            policy.max_instances = cap;
        }
        let proposed = match mode {
            DeploymentMode::Dedicated => 0,
            DeploymentMode::Serverless => target_instances(&self.trackers[m], spec, &policy),
            DeploymentMode::Auto => {
                let total = target_instances(&self.trackers[m], spec, &policy);
                total.saturating_sub(spec.dedicated_count).max(spec.provisioned_min)
            }
        };
        let target = self.scalers[m].step(proposed, now, policy.scale_down_cooldown_ms);
        let metrics = &mut self.model_metrics[m];
        if metrics.targets.last().is_none_or(|&(_, v)| v != target) {
            metrics.targets.push((now, target));
        }
        self.scale_floor[m] = target;
        self.apply_floor(q, m, now);
        let next = now + policy.scale_tick_ms.max(1);
        if next <= self.cfg.horizon_ms {
            q.schedule(SimEvent::ScaleTick { model: m }, next).expect("future");
        }
    }

    fn cold_of(&self) -> impl Fn(&str) -> u64 + '_ {
        move |model: &str| self.registry.get(model).map_or(0, |s| s.cold_start_ms)
    }

    fn on_schedule_tick(&mut self, q: &mut EventQueue<SimEvent>, now: u64) {
        let schedule = &self.cfg.schedule;
        let floors: Vec<(usize, u32)> = {
            let cold = self.cold_of();
            schedule
                .windows
                .iter()
                .filter_map(|w| self.model_idx.get(&w.model).map(|&m| (m, schedule.min_warm_at(&w.model, now, &cold))))
                .collect()
        };
        for &(m, f) in &floors {
            self.schedule_floor[m] = f;
            self.pools[2 * m].set_floor(self.scale_floor[m].max(f));
        }
        let owed = {
            let cold = self.cold_of();
            schedule_tick(schedule, &View(self, now), &cold, now)
        };
        for (model, count) in owed {
            let m = self.model_idx[&model];
            for _ in 0..count {
                q.schedule_in(SimEvent::WarmupTrigger { model: m, cause: WarmupCause::Schedule }, 0);
            }
        }
        let next = {
            let cold = self.cold_of();
            schedule.next_boundary(now, &cold)
        };
        if let Some(t) = next.filter(|t| *t <= self.cfg.horizon_ms) {
            q.schedule(SimEvent::ScheduleTick, t).expect("future");
        }
    }

    fn finalize(&mut self, request_id: u64) {
        let Some(run) = self.runs.remove(&request_id) else { return };
        let spec = &self.cfg.pipelines[run.pipeline];
        let outcome = run.outcome.expect("finalized runs have an outcome");
        let pm = &mut self.pipeline_metrics[run.pipeline];
        pm.runs.push(RunSummary {
            arrival_ms: run.request.arrival_ms,
            latency_ms: (outcome != RunOutcome::Dropped).then(|| run.end_to_end_ms()).flatten(),
            finished_ms: run.finished_ms.unwrap_or(run.request.arrival_ms),
            outcome,
            cold: run.any_cold(),
        });
        pm.overheads.extend_from_slice(&run.applied_overheads);
        for (i, s) in run.states.iter().enumerate() {
            match s {
                NodeState::Done { .. } | NodeState::Failed | NodeState::InFlight { .. } => pm.node_invocations[i] += 1,
                NodeState::Skipped(crate::orchestrator::SkipReason::Fallback) => {
                    pm.node_invocations[i] += 1;
                    pm.node_fallback_skips[i] += 1;
                }
                _ => {}
            }
        }
        if let Some(records) = &mut self.run_records {
            records.push(RunRecord {
                request_id,
                pipeline_id: spec.id.clone(),
                outcome,
                end_to_end_ms: run.end_to_end_ms(),
                nodes: run.node_records(spec),
            });
        }
    }

    fn check_invariants(&mut self) {
        let mut held: BTreeMap<usize, u32> = BTreeMap::new();
        for inv in self.invocations.values() {
            if inv.instance.is_some() {
                *held.entry(inv.pool).or_insert(0) += 1;
            }
        }
        for (i, pool) in self.pools.iter().enumerate() {
            let expect = held.get(&i).copied().unwrap_or(0);
            if pool.busy_slots() != expect {
                let msg = format!("pool {} ({}) has {} busy slots but {} placed invocations", i, pool.cfg.model_id, pool.busy_slots(), expect);
                self.violation.get_or_insert(msg);
            }
            if pool.cfg.kind == PoolKind::Serverless && pool.live_count() < pool.cfg.provisioned_min {
                self.violation.get_or_insert(format!("pool {} below provisioned minimum", pool.cfg.model_id));
            }
        }
    }
}

/// Every arrival the configured workloads produce within the horizon, in
/// time order, drawn from the same streams [`simulate`] uses.
pub fn workload_trace(cfg: &SimConfig) -> Vec<TraceRecord> {
    let streams = RngStreams::new(cfg.seed);
    let mut out = Vec::new();
    for (w, src) in cfg.workloads.iter().enumerate() {
        match src {
            WorkloadSource::Generated(p) => {
                let stream = ArrivalStream::new(p.process.clone(), cfg.horizon_ms, streams.stream(&format!("arrivals:{w}")));
                out.extend(stream.map(|t| TraceRecord { arrival_ms: t, pipeline_id: p.pipeline.clone(), latency_class: p.latency_class }));
            }
            WorkloadSource::Trace(records) => out.extend(records.iter().filter(|r| r.arrival_ms < cfg.horizon_ms).cloned()),
        }
    }
    out.sort_by_key(|r| r.arrival_ms);
    out
}

/// Runs one simulation to its horizon. Event-log lines go to `event_log`
/// when given; run records are kept when `record_runs` is set.
pub fn simulate(cfg: &SimConfig, mut event_log: Option<&mut dyn Write>, record_runs: bool) -> Result<SimOutput, SimError> {
    let mut sim = Sim::new(cfg)?;
    if record_runs {
        sim.run_records = Some(Vec::new());
    }
    let mut q: EventQueue<SimEvent> = EventQueue::new();
    for w in 0..sim.sources.len() {
        sim.pull_arrival(&mut q, w);
    }
    if cfg.policies.autoscale {
        for m in 0..sim.model_ids.len() {
            q.schedule(SimEvent::ScaleTick { model: m }, cfg.policies.scale.scale_tick_ms.max(1)).expect("future");
        }
    }
    if !cfg.schedule.windows.is_empty() {
        let first = cfg.schedule.first_boundary(0, &|m: &str| cfg.registry.get(m).map_or(0, |s| s.cold_start_ms));
        if let Some(t) = first.filter(|t| *t <= cfg.horizon_ms) {
            q.schedule(SimEvent::ScheduleTick, t).expect("future");
        }
    }

    let mut io_error = None;
    let events = q.run_until(cfg.horizon_ms, |q, ev| {
        if let Some(log) = event_log.as_deref_mut() {
            if io_error.is_none() {
                if let Err(e) = writeln!(log, "{}", event_log_line(&ev)) {
                    io_error = Some(e);
                }
            }
        }
        sim.handle(q, ev);
    });
    if let Some(e) = io_error {
        return Err(e.into());
    }
    sim.check_invariants();
    if let Some(v) = sim.violation.take() {
        return Err(SimError::Invariant(v));
    }

    for run in sim.runs.values() {
        sim.pipeline_metrics[run.pipeline].unfinished += 1;
    }
    for pm in &mut sim.pipeline_metrics {
        pm.runs.sort_by_key(|r| (r.arrival_ms, r.finished_ms));
    }
    if let Some(records) = &mut sim.run_records {
        records.sort_by_key(|r| r.request_id);
    }
    let ledger = accrue_costs(&sim.usage, &sim.registry, cfg.policies.bill_cold_start);
    Ok(SimOutput {
        seed: cfg.seed,
        horizon_ms: cfg.horizon_ms,
        events,
        pipelines: sim.pipeline_metrics,
        models: sim.model_metrics,
        pools: sim.pools,
        usage: sim.usage,
        ledger,
        run_records: sim.run_records.unwrap_or_default(),
        tiered: sim.tiered,
    })
}
