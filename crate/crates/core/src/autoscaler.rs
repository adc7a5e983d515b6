//! Per-model demand tracking and scaling targets, plus the three cold-start
//! mitigations: coordinated pre-warming, tiered provisioned concurrency and
//! scheduled warming.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{naive_with, topological_levels, ModelLookup, ModelSpec, PipelineSpec};
use crate::router::RoutingTable;

pub const DAY_MS: u64 = 86_400_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalePolicy {
    pub headroom: f64,
    pub alpha: f64,
    pub min_instances: u32,
    pub max_instances: u32,
    pub scale_tick_ms: u64,
    pub scale_down_cooldown_ms: u64,
}

impl Default for ScalePolicy {
    fn default() -> Self {
        ScalePolicy {
            headroom: 1.2,
            alpha: 0.3,
            min_instances: 0,
            max_instances: 1000,
            scale_tick_ms: 1000,
            scale_down_cooldown_ms: 120_000,
        }
    }
}

/// EWMA of one model's invocation rate and service time, folded in once per
/// scale tick.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTracker {
    pub model_id: String,
    pub ewma_rate_per_s: f64,
    pub ewma_service_ms: f64,
    pub alpha: f64,
    pub last_update_ms: u64,
    tick_invocations: u64,
    tick_service_sum: f64,
    tick_service_n: u64,
}

impl RateTracker {
    pub fn new(model_id: &str, alpha: f64, service_ms: f64, now: u64) -> Self {
        RateTracker {
            model_id: model_id.to_string(),
            ewma_rate_per_s: 0.0,
            ewma_service_ms: service_ms,
            alpha,
            last_update_ms: now,
            tick_invocations: 0,
            tick_service_sum: 0.0,
            tick_service_n: 0,
        }
    }

    pub fn record_invocation(&mut self) {
        self.tick_invocations += 1;
    }

    pub fn record_service(&mut self, service_ms: u64) {
        self.tick_service_sum += service_ms as f64;
        self.tick_service_n += 1;
    }

    pub fn tick(&mut self, now: u64) {
        let dt = now.saturating_sub(self.last_update_ms);
        if dt == 0 {
            return;
        }
        let rate = self.tick_invocations as f64 * 1000.0 / dt as f64;
        self.ewma_rate_per_s += self.alpha * (rate - self.ewma_rate_per_s);
        if self.tick_service_n > 0 {
            let mean = self.tick_service_sum / self.tick_service_n as f64;
            self.ewma_service_ms += self.alpha * (mean - self.ewma_service_ms);
        }
        self.tick_invocations = 0;
        self.tick_service_sum = 0.0;
        self.tick_service_n = 0;
        self.last_update_ms = now;
    }
}

/// Little's-law instance count with headroom, clamped to the policy range.
pub fn target_instances(tracker: &RateTracker, spec: &ModelSpec, policy: &ScalePolicy) -> u32 {
    let raw = raw_target(tracker.ewma_rate_per_s, tracker.ewma_service_ms, spec.per_instance_concurrency, policy.headroom);
    let lo = policy.min_instances.max(spec.provisioned_min);
    raw.clamp(lo, policy.max_instances.max(lo))
}

pub fn raw_target(rate_per_s: f64, service_ms: f64, concurrency: u32, headroom: f64) -> u32 {
    let x = rate_per_s * service_ms / 1000.0 / f64::from(concurrency.max(1)) * headroom;
    // shave float noise so exact products such as 3.0000000000000004 stay 3
    let x = (x * 1e9).round() / 1e9;
    x.ceil().max(0.0) as u32
}

/// Applies the scale-down cooldown to successive proposed targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub current: u32,
    pub last_scale_up_ms: Option<u64>,
}

impl Scaler {
    pub fn new(initial: u32) -> Self {
        Scaler { current: initial, last_scale_up_ms: None }
    }

    pub fn step(&mut self, proposed: u32, now: u64, cooldown_ms: u64) -> u32 {
        if proposed > self.current {
            self.current = proposed;
            self.last_scale_up_ms = Some(now);
        } else if proposed < self.current && self.last_scale_up_ms.is_none_or(|t| now.saturating_sub(t) >= cooldown_ms) {
            self.current = proposed;
        }
        self.current
    }
}

/// The strawman that scales every model by the user-traffic factor. Returns
/// `(scale factor, over-provision factor)` for a model invoked with `ratio`.
pub fn uniform_scaling_baseline(user_rate_factor: f64, ratio: f64) -> (f64, f64) {
    (user_rate_factor, user_rate_factor / (ratio * user_rate_factor))
}

/// Current capacity of a model across its pools.
pub trait CapacityView {
    fn warm_or_provisioning(&self, model_id: &str) -> u32;
}

impl CapacityView for BTreeMap<String, u32> {
    fn warm_or_provisioning(&self, model_id: &str) -> u32 {
        self.get(model_id).copied().unwrap_or(0)
    }
}

/// Pipeline → member endpoints, resolved to models at trigger time so that
/// hot-swaps are picked up.
#[derive(Debug, Clone, Default)]
pub struct WarmingRegistry {
    pipelines: BTreeMap<String, Vec<String>>,
    last_warmed: BTreeMap<String, u64>,
    pub dedupe_ms: u64,
}

impl WarmingRegistry {
    pub fn new(pipelines: &[PipelineSpec], dedupe_ms: u64) -> Self {
        let pipelines = pipelines
            .iter()
            .map(|p| {
                let mut endpoints: Vec<String> = Vec::new();
                for n in &p.nodes {
                    if !endpoints.contains(&n.model) {
                        endpoints.push(n.model.clone());
                    }
                }
                (p.id.clone(), endpoints)
            })
            .collect();
        WarmingRegistry { pipelines, last_warmed: BTreeMap::new(), dedupe_ms }
    }

    /// Ordered member models of a pipeline at time `now`.
    pub fn members(&self, pipeline_id: &str, table: &RoutingTable, now: u64) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for ep in self.pipelines.get(pipeline_id).into_iter().flatten() {
            if let Some(b) = table.resolve(ep, now) {
                if !out.contains(&b.model) {
                    out.push(b.model.clone());
                }
            }
        }
        out
    }

    /// Models to warm now because `touched_model` was invoked: every cold
    /// member of every pipeline containing it, at most once per dedupe window.
    pub fn coordinated_prewarm(
        &mut self,
        touched_model: &str,
        table: &RoutingTable,
        view: &impl CapacityView,
        now: u64,
    ) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let pipeline_ids: Vec<String> = self.pipelines.keys().cloned().collect();
        for pid in pipeline_ids {
            let members = self.members(&pid, table, now);
            if !members.iter().any(|m| m == touched_model) {
                continue;
            }
            for m in members {
                if m == touched_model || out.contains(&m) || view.warm_or_provisioning(&m) > 0 {
                    continue;
                }
                if self.last_warmed.get(&m).is_some_and(|t| now < t + self.dedupe_ms) {
                    continue;
                }
                self.last_warmed.insert(m.clone(), now);
                out.push(m);
            }
        }
        out
    }
}

/// Effective compound cold start when every member starts warming at once.
pub fn coordinated_compound_cold_start<L: ModelLookup>(spec: &PipelineSpec, registry: &L) -> u64 {
    spec.nodes.iter().filter_map(|n| registry.resolve(&n.model)).map(|m| m.cold_start_ms).max().unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TieredPlan {
    /// Endpoint ids of the nodes to keep provisioned.
    pub provision: BTreeSet<String>,
    pub predicted_cold_start_ms: u64,
}

/// Keeps the longest-cold-start model on a critical path provisioned and
/// predicts the remaining serial cold start.
pub fn tiered_provision_plan<L: ModelLookup>(spec: &PipelineSpec, registry: &L) -> TieredPlan {
    let cold = |model: &str| registry.resolve(model).map_or(0, |m| m.cold_start_ms);
    let levels = topological_levels(spec);
    let order: Vec<&str> = levels.iter().flatten().map(String::as_str).collect();

    let mut finish: BTreeMap<&str, u64> = BTreeMap::new();
    for id in &order {
        let node = spec.node(id).expect("level ids come from the pipeline");
        let ready = node.depends_on.iter().map(|d| finish[d.as_str()]).max().unwrap_or(0);
        finish.insert(id, ready + cold(&node.model));
    }
    let total = finish.values().copied().max().unwrap_or(0);
    let mut tail: BTreeMap<&str, u64> = BTreeMap::new();
    for id in order.iter().rev() {
        let node = spec.node(id).expect("level ids come from the pipeline");
        let after = spec
            .nodes
            .iter()
            .filter(|n| n.depends_on.contains(*id))
            .map(|n| tail[n.id.as_str()])
            .max()
            .unwrap_or(0);
        tail.insert(id, after + cold(&node.model));
    }

    let chosen = spec
        .nodes
        .iter()
        .filter(|n| finish[n.id.as_str()] + tail[n.id.as_str()] - cold(&n.model) == total)
        .max_by(|a, b| cold(&a.model).cmp(&cold(&b.model)).then_with(|| b.model.cmp(&a.model)))
        .map(|n| n.model.clone());
    let provision: BTreeSet<String> = chosen.into_iter().collect();
    let predicted = naive_with(spec, |m| if provision.contains(m) { 0 } else { cold(m) });
    TieredPlan { provision, predicted_cold_start_ms: predicted }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("bad time of day `{0}` (want HH:MM)")]
    BadTime(String),
    #[error("window for `{0}` ends before it starts")]
    EmptyWindow(String),
    #[error("overlapping warm windows for `{0}`")]
    Overlap(String),
}

pub fn parse_hhmm(s: &str) -> Result<u64, ScheduleError> {
    let bad = || ScheduleError::BadTime(s.to_string());
    let (h, m) = s.split_once(':').ok_or_else(bad)?;
    let h: u64 = h.trim().parse().map_err(|_| bad())?;
    let m: u64 = m.trim().parse().map_err(|_| bad())?;
    if h > 24 || m > 59 || (h == 24 && m > 0) {
        return Err(bad());
    }
    Ok((h * 60 + m) * 60_000)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmWindow {
    pub model: String,
    pub start: String,
    pub end: String,
    pub min_warm: u32,
}

impl WarmWindow {
    pub fn bounds(&self) -> Result<(u64, u64), ScheduleError> {
        let (s, e) = (parse_hhmm(&self.start)?, parse_hhmm(&self.end)?);
        if e <= s {
            return Err(ScheduleError::EmptyWindow(self.model.clone()));
        }
        Ok((s, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmSchedule {
    pub windows: Vec<WarmWindow>,
    #[serde(default = "yes")]
    pub daily: bool,
}

fn yes() -> bool {
    true
}

impl Default for WarmSchedule {
    fn default() -> Self {
        WarmSchedule { windows: Vec::new(), daily: true }
    }
}

impl WarmSchedule {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let mut by_model: BTreeMap<&str, Vec<(u64, u64)>> = BTreeMap::new();
        for w in &self.windows {
            by_model.entry(&w.model).or_default().push(w.bounds()?);
        }
        for (model, mut spans) in by_model {
            spans.sort_unstable();
            if spans.windows(2).any(|p| p[1].0 < p[0].1) {
                return Err(ScheduleError::Overlap(model.to_string()));
            }
        }
        Ok(())
    }

    /// Occurrences of each window as absolute `(lead_start, end)` spans that
    /// touch `[from, to)`, where `lead_start = start − cold_start`.
    fn spans<'a>(
        &'a self,
        cold: &'a impl Fn(&str) -> u64,
        from: u64,
        to: u64,
    ) -> impl Iterator<Item = (&'a WarmWindow, u64, u64)> + 'a {
        let days: Vec<u64> = if self.daily { (from / DAY_MS..=to / DAY_MS + 1).collect() } else { vec![0] };
        self.windows.iter().flat_map(move |w| {
            let (s, e) = w.bounds().unwrap_or((0, 0));
            let c = cold(&w.model);
            days.clone()
                .into_iter()
                .map(move |d| (w, (d * DAY_MS + s).saturating_sub(c), d * DAY_MS + e))
                .filter(move |&(_, lo, hi)| hi > lo && lo < to.max(from + 1) && hi > from)
        })
    }

    /// Minimum warm count demanded for `model` at `now`, lead time included.
    pub fn min_warm_at(&self, model: &str, now: u64, cold: &impl Fn(&str) -> u64) -> u32 {
        self.spans(cold, now, now + 1)
            .filter(|(w, lo, hi)| w.model == model && *lo <= now && now < *hi)
            .map(|(w, _, _)| w.min_warm)
            .max()
            .unwrap_or(0)
    }

    /// Next lead-start or window end strictly after `now`.
    pub fn next_boundary(&self, now: u64, cold: &impl Fn(&str) -> u64) -> Option<u64> {
        self.spans(cold, now, now + 2 * DAY_MS)
            .flat_map(|(_, lo, hi)| [lo, hi])
            .chain(self.spans(cold, now + DAY_MS, now + 2 * DAY_MS).flat_map(|(_, lo, hi)| [lo, hi]))
            .filter(|t| *t > now)
            .min()
    }

    /// The first boundary at or after `now`.
    pub fn first_boundary(&self, now: u64, cold: &impl Fn(&str) -> u64) -> Option<u64> {
        if now == 0 {
            return Some(0);
        }
        self.next_boundary(now - 1, cold)
    }
}

/// Warm-ups owed at `now`: `(model, min_warm − current)` for every model
/// whose window (shifted earlier by its cold start) is active.
pub fn schedule_tick(
    schedule: &WarmSchedule,
    view: &impl CapacityView,
    cold: &impl Fn(&str) -> u64,
    now: u64,
) -> Vec<(String, u32)> {
    let models: BTreeSet<&str> = schedule.windows.iter().map(|w| w.model.as_str()).collect();
    models
        .into_iter()
        .filter_map(|m| {
            let want = schedule.min_warm_at(m, now, cold);
            let have = view.warm_or_provisioning(m);
            (want > have).then(|| (m.to_string(), want - have))
        })
        .collect()
}
