//! Prediction Service layer: endpoint routing table with timed hot-swaps,
//! auto-mode spill-over, latency-class priority queueing, per-component
//! circuit breakers and weighted version selection.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{normalize_versions, DeploymentMode, LatencyClass, ModelLookup, ModelSpec, Registry, Version};
use crate::pools::Pool;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RouteError {
    #[error("circuit breaker open for endpoint `{endpoint_id}`")]
    BreakerOpen { endpoint_id: String },
    #[error("unknown endpoint `{0}`")]
    UnknownEndpoint(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("endpoint `{0}`: version weights must sum to a positive value")]
    BadVersions(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("queue is empty")]
pub struct Empty;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueueItem<T> {
    pub item: T,
    pub class: LatencyClass,
    pub enqueued_ms: u64,
    pub seq: u64,
}

/// Two-class queue: the oldest `Interactive` item always leaves first; each
/// class is FIFO by `(enqueued_ms, seq)`. No aging, so batch work can starve.
#[derive(Debug, Clone)]
pub struct PriorityQueue<T> {
    interactive: BTreeMap<(u64, u64), T>,
    batch: BTreeMap<(u64, u64), T>,
    next_seq: u64,
}

impl<T> Default for PriorityQueue<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> PriorityQueue<T> {
    pub fn new() -> Self {
        PriorityQueue { interactive: BTreeMap::new(), batch: BTreeMap::new(), next_seq: 0 }
    }

    pub fn len(&self) -> usize {
        self.interactive.len() + self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Returns the 1-based position in current dequeue order.
    pub fn enqueue(&mut self, item: T, class: LatencyClass, now: u64) -> usize {
        let key = (now, self.next_seq);
        self.next_seq += 1;
        let lane = match class {
            LatencyClass::Interactive => &mut self.interactive,
            LatencyClass::Batch => &mut self.batch,
        };
        lane.insert(key, item);
        let ahead_in_lane = lane.range(..key).count();
        match class {
            LatencyClass::Interactive => ahead_in_lane + 1,
            LatencyClass::Batch => self.interactive.len() + ahead_in_lane + 1,
        }
    }

    pub fn dequeue(&mut self) -> Result<QueueItem<T>, Empty> {
        let (class, lane) = if !self.interactive.is_empty() {
            (LatencyClass::Interactive, &mut self.interactive)
        } else {
            (LatencyClass::Batch, &mut self.batch)
        };
        let ((enqueued_ms, seq), item) = lane.pop_first().ok_or(Empty)?;
        Ok(QueueItem { item, class, enqueued_ms, seq })
    }
}

/// What an endpoint points at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointBinding {
    pub model: String,
    pub mode: DeploymentMode,
    #[serde(default)]
    pub versions: Vec<Version>,
}

/// Endpoint id → time-ordered bindings. A binding applies to invocations
/// dispatched at or after its effective time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoutingTable {
    endpoints: BTreeMap<String, Vec<(u64, EndpointBinding)>>,
}

impl RoutingTable {
    /// One endpoint per registered model, named after it.
    pub fn from_registry(registry: &Registry) -> Self {
        let mut table = RoutingTable::default();
        for (id, spec) in registry {
            let binding = EndpointBinding { model: id.clone(), mode: spec.mode, versions: spec.versions.clone() };
            table.endpoints.insert(id.clone(), vec![(0, binding)]);
        }
        table
    }

    fn check(endpoint_id: &str, mut binding: EndpointBinding, registry: &Registry) -> Result<EndpointBinding, RouteError> {
        let spec = registry.get(&binding.model).ok_or_else(|| RouteError::UnknownModel(binding.model.clone()))?;
        if binding.versions.is_empty() {
            binding.versions = spec.versions.clone();
        }
        binding.versions = normalize_versions(&binding.versions).map_err(|_| RouteError::BadVersions(endpoint_id.to_string()))?;
        Ok(binding)
    }

    /// Defines or replaces an endpoint from time zero.
    pub fn bind(&mut self, endpoint_id: &str, binding: EndpointBinding, registry: &Registry) -> Result<(), RouteError> {
        let binding = Self::check(endpoint_id, binding, registry)?;
        self.endpoints.insert(endpoint_id.to_string(), vec![(0, binding)]);
        Ok(())
    }

    /// Swaps the binding for dispatches at `t >= effective_at_ms`; in-flight
    /// work keeps the binding it was dispatched with.
    pub fn hot_swap(
        &mut self,
        endpoint_id: &str,
        new_binding: EndpointBinding,
        effective_at_ms: u64,
        registry: &Registry,
    ) -> Result<(), RouteError> {
        let binding = Self::check(endpoint_id, new_binding, registry)?;
        let history = self
            .endpoints
            .get_mut(endpoint_id)
            .ok_or_else(|| RouteError::UnknownEndpoint(endpoint_id.to_string()))?;
        history.retain(|(t, _)| *t != effective_at_ms);
        history.push((effective_at_ms, binding));
        history.sort_by_key(|(t, _)| *t);
        Ok(())
    }

    pub fn resolve(&self, endpoint_id: &str, now: u64) -> Option<&EndpointBinding> {
        self.endpoints
            .get(endpoint_id)?
            .iter()
            .take_while(|(t, _)| *t <= now)
            .last()
            .map(|(_, b)| b)
    }

    pub fn endpoint_ids(&self) -> impl Iterator<Item = &String> {
        self.endpoints.keys()
    }

    /// Every model an endpoint may point at over its history.
    pub fn models_of(&self, endpoint_id: &str) -> Vec<&str> {
        self.endpoints
            .get(endpoint_id)
            .map(|h| h.iter().map(|(_, b)| b.model.as_str()).collect())
            .unwrap_or_default()
    }

    /// Whether any binding, at any time, can route `model` to a dedicated pool.
    pub fn uses_dedicated(&self, model: &str) -> bool {
        self.endpoints
            .values()
            .flatten()
            .any(|(_, b)| b.model == model && b.mode != DeploymentMode::Serverless)
    }
}

/// Resolves endpoint ids (at time zero) to model specs for pipeline validation.
pub struct EndpointLookup<'a> {
    pub table: &'a RoutingTable,
    pub registry: &'a Registry,
}

impl ModelLookup for EndpointLookup<'_> {
    fn resolve(&self, id: &str) -> Option<&ModelSpec> {
        self.table.resolve(id, 0).and_then(|b| self.registry.get(&b.model))
    }
}

/// Weighted draw over normalized versions.
pub fn pick_version<'v, R: Rng + ?Sized>(versions: &'v [Version], rng: &mut R) -> &'v str {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for v in versions {
        acc += v.weight;
        if u < acc {
            return &v.id;
        }
    }
    // rounding left a sliver above the last cumulative weight
    versions.iter().rev().find(|v| v.weight > 0.0).map_or("", |v| v.id.as_str())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BreakerConfig {
    pub window: usize,
    pub min_samples: usize,
    pub failure_threshold: f64,
    pub cooldown_ms: u64,
    pub probe_budget: u32,
}

impl Default for BreakerConfig {
    fn default() -> Self {
        BreakerConfig { window: 20, min_samples: 10, failure_threshold: 0.5, cooldown_ms: 30_000, probe_budget: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BreakerState {
    Closed,
    Open { until_ms: u64 },
    HalfOpen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Failure,
}

/// Count-based circuit breaker for one component.
#[derive(Debug, Clone)]
pub struct Breaker {
    pub cfg: BreakerConfig,
    state: BreakerState,
    window: VecDeque<Outcome>,
    probes_in_flight: u32,
}

impl Breaker {
    pub fn new(cfg: BreakerConfig) -> Self {
        Breaker { cfg, state: BreakerState::Closed, window: VecDeque::new(), probes_in_flight: 0 }
    }

    pub fn state(&self) -> BreakerState {
        self.state
    }

    /// `Ok(true)` admits a half-open probe, `Ok(false)` a normal call.
    pub fn admit(&mut self) -> Result<bool, ()> {
        match self.state {
            BreakerState::Closed => Ok(false),
            BreakerState::Open { .. } => Err(()),
            BreakerState::HalfOpen if self.probes_in_flight < self.cfg.probe_budget => {
                self.probes_in_flight += 1;
                Ok(true)
            }
            BreakerState::HalfOpen => Err(()),
        }
    }

    /// A probe that never produced an outcome (dropped or cancelled).
    pub fn cancel_probe(&mut self) {
        self.probes_in_flight = self.probes_in_flight.saturating_sub(1);
    }

    /// Cooldown timer: Open → HalfOpen once `now >= until_ms`.
    pub fn on_timer(&mut self, now: u64) -> BreakerState {
        if let BreakerState::Open { until_ms } = self.state {
            if now >= until_ms {
                self.state = BreakerState::HalfOpen;
                self.probes_in_flight = 0;
            }
        }
        self.state
    }

    pub fn record(&mut self, outcome: Outcome, probe: bool, now: u64) -> BreakerState {
        match self.state {
            BreakerState::Closed => {
                self.window.push_back(outcome);
                while self.window.len() > self.cfg.window {
                    self.window.pop_front();
                }
                let failures = self.window.iter().filter(|o| **o == Outcome::Failure).count();
                if self.window.len() >= self.cfg.min_samples
                    && failures as f64 / self.window.len() as f64 >= self.cfg.failure_threshold
                {
                    self.trip(now);
                }
            }
            BreakerState::HalfOpen if probe => {
                self.cancel_probe();
                match outcome {
                    Outcome::Success => {
                        self.state = BreakerState::Closed;
                        self.window.clear();
                    }
                    Outcome::Failure => self.trip(now),
                }
            }
            // stale results from calls admitted before the breaker opened
            BreakerState::HalfOpen | BreakerState::Open { .. } => {}
        }
        self.state
    }

    fn trip(&mut self, now: u64) {
        self.state = BreakerState::Open { until_ms: now + self.cfg.cooldown_ms.max(1) };
        self.window.clear();
        self.probes_in_flight = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutedTo {
    Dedicated,
    Serverless,
}

/// Routing decision for one attempt. The breaker is consulted first and an
/// open breaker never touches the pools.
pub fn route(
    endpoint_id: &str,
    binding: &EndpointBinding,
    spec: &ModelSpec,
    breaker: &mut Breaker,
    dedicated: Option<&Pool>,
) -> Result<(RoutedTo, bool), RouteError> {
    let probe = breaker.admit().map_err(|_| RouteError::BreakerOpen { endpoint_id: endpoint_id.to_string() })?;
    let target = match binding.mode {
        DeploymentMode::Dedicated => RoutedTo::Dedicated,
        DeploymentMode::Serverless => RoutedTo::Serverless,
        DeploymentMode::Auto => {
            if dedicated.is_some_and(|p| p.has_instance_below(spec.capacity_threshold)) {
                RoutedTo::Dedicated
            } else {
                RoutedTo::Serverless
            }
        }
    };
    Ok((target, probe))
}
