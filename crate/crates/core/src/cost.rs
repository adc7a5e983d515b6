//! Pipeline-attributed cost ledger and break-even utilization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelSpec;

/// Pipeline that absorbs dedicated capacity nobody used.
pub const UNATTRIBUTED_IDLE: &str = "unattributed-idle";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CostKind {
    DedicatedWallClock,
    ServerlessBusy,
    ProxyAlwaysOn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLedgerEntry {
    pub start_ms: u64,
    pub end_ms: u64,
    /// Empty for proxy entries.
    pub model_id: String,
    pub kind: CostKind,
    pub pipeline_id: String,
    pub amount: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub entries: Vec<CostLedgerEntry>,
}

impl CostLedger {
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.amount).sum()
    }

    pub fn by_pipeline(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.pipeline_id.clone()).or_insert(0.0) += e.amount;
        }
        out
    }

    pub fn by_model(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for e in self.entries.iter().filter(|e| !e.model_id.is_empty()) {
            *out.entry(e.model_id.clone()).or_insert(0.0) += e.amount;
        }
        out
    }

    pub fn by_kind(&self) -> BTreeMap<CostKind, f64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.kind).or_insert(0.0) += e.amount;
        }
        out
    }
}

/// What a finished simulation consumed, per model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Usage {
    pub span_ms: (u64, u64),
    /// model → (dedicated instance count, slots per instance)
    pub dedicated: BTreeMap<String, (u32, u32)>,
    /// (model, pipeline) → busy slot-ms on dedicated capacity
    pub dedicated_busy_ms: BTreeMap<(String, String), u64>,
    /// (model, pipeline) → busy slot-ms on serverless instances
    pub serverless_busy_ms: BTreeMap<(String, String), u64>,
    /// (model, pipeline) → provisioning ms, billed only when asked to
    pub cold_start_ms: BTreeMap<(String, String), u64>,
    /// pipeline → always-on proxy cost per hour
    pub proxies: BTreeMap<String, f64>,
}

/// Builds the ledger: dedicated wall-clock split by busy share (idle remainder
/// to [`UNATTRIBUTED_IDLE`]), serverless busy time to the invoking pipeline,
/// and proxy always-on cost to its pipeline.
pub fn accrue_costs(usage: &Usage, specs: &BTreeMap<String, ModelSpec>, bill_cold_start: bool) -> CostLedger {
    let (start, end) = usage.span_ms;
    let span = end.saturating_sub(start);
    let hours = span as f64 / 3_600_000.0;
    let mut entries = Vec::new();
    let entry = |model: &str, kind, pipeline: &str, amount| CostLedgerEntry {
        start_ms: start,
        end_ms: end,
        model_id: model.to_string(),
        kind,
        pipeline_id: pipeline.to_string(),
        amount,
    };

    for (model, &(count, slots)) in &usage.dedicated {
        let Some(spec) = specs.get(model) else { continue };
        if count == 0 {
            continue;
        }
        let total = f64::from(count) * spec.cost_dedicated_per_hour * hours;
        let capacity = u128::from(count) * u128::from(slots) * u128::from(span);
        let mut attributed = 0.0;
        for ((m, pipeline), &busy) in &usage.dedicated_busy_ms {
            if m != model || busy == 0 || capacity == 0 {
                continue;
            }
            let amount = total * (busy as f64 / capacity as f64);
            attributed += amount;
            entries.push(entry(model, CostKind::DedicatedWallClock, pipeline, amount));
        }
        entries.push(entry(model, CostKind::DedicatedWallClock, UNATTRIBUTED_IDLE, total - attributed));
    }

    let mut serverless: BTreeMap<(&String, &String), u64> = BTreeMap::new();
    for ((m, p), ms) in &usage.serverless_busy_ms {
        *serverless.entry((m, p)).or_insert(0) += ms;
    }
    if bill_cold_start {
        for ((m, p), ms) in &usage.cold_start_ms {
            *serverless.entry((m, p)).or_insert(0) += ms;
        }
    }
    for ((model, pipeline), ms) in serverless {
        let Some(spec) = specs.get(model) else { continue };
        let amount = ms as f64 / 1000.0 * spec.cost_serverless_per_busy_second;
        entries.push(entry(model, CostKind::ServerlessBusy, pipeline, amount));
    }

    for (pipeline, rate) in &usage.proxies {
        entries.push(entry("", CostKind::ProxyAlwaysOn, pipeline, rate * hours));
    }
    CostLedger { entries }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("both cost rates must be positive")]
pub struct NonPositiveRate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakeven {
    /// Unclamped `u*`.
    pub raw: f64,
    pub utilization: f64,
    /// `u* > 1`: no sustainable load makes dedicated cheaper.
    pub serverless_always_cheaper: bool,
}

/// Sustained slot utilization above which a dedicated instance is cheaper
/// than the same work billed per busy second.
pub fn breakeven_utilization(spec: &ModelSpec) -> Result<Breakeven, NonPositiveRate> {
    let (ded, sl) = (spec.cost_dedicated_per_hour, spec.cost_serverless_per_busy_second);
    if !(ded > 0.0 && sl > 0.0) {
        return Err(NonPositiveRate);
    }
    let raw = ded / (sl * 3600.0 * f64::from(spec.per_instance_concurrency));
    Ok(Breakeven { raw, utilization: raw.min(1.0), serverless_always_cheaper: raw > 1.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn priced(id: &str, ded: f64, sl: f64, conc: u32) -> ModelSpec {
        let mut m = ModelSpec::serverless(id, 1000, 100, conc);
        m.cost_dedicated_per_hour = ded;
        m.cost_serverless_per_busy_second = sl;
        m
    }

    #[test]
    fn idle_dedicated_is_unattributed() {
        let specs = BTreeMap::from([("d".to_string(), priced("d", 2.0, 0.001, 1))]);
        let usage = Usage {
            span_ms: (0, 10 * 3_600_000),
            dedicated: BTreeMap::from([("d".to_string(), (1, 1))]),
            ..Default::default()
        };
        let ledger = accrue_costs(&usage, &specs, false);
        assert_eq!(ledger.total(), 20.0);
        assert_eq!(ledger.by_pipeline(), BTreeMap::from([(UNATTRIBUTED_IDLE.to_string(), 20.0)]));
    }

    #[test]
    fn serverless_busy_hour() {
        let specs = BTreeMap::from([("s".to_string(), priced("s", 2.0, 0.001, 1))]);
        let usage = Usage {
            span_ms: (0, 7_200_000),
            serverless_busy_ms: BTreeMap::from([(("s".to_string(), "p".to_string()), 3_600_000)]),
            cold_start_ms: BTreeMap::from([(("s".to_string(), "p".to_string()), 60_000)]),
            ..Default::default()
        };
        let ledger = accrue_costs(&usage, &specs, false);
        assert!((ledger.by_pipeline()["p"] - 3.6).abs() < 1e-12);
        let billed = accrue_costs(&usage, &specs, true);
        assert!((billed.total() - 3.66).abs() < 1e-12);
    }

    #[test]
    fn dedicated_split_by_busy_share() {
        let specs = BTreeMap::from([("d".to_string(), priced("d", 4.0, 0.001, 2))]);
        let usage = Usage {
            span_ms: (0, 3_600_000),
            dedicated: BTreeMap::from([("d".to_string(), (1, 2))]),
            dedicated_busy_ms: BTreeMap::from([
                (("d".to_string(), "a".to_string()), 3_600_000),
                (("d".to_string(), "b".to_string()), 1_800_000),
            ]),
            proxies: BTreeMap::from([("a".to_string(), 0.5)]),
            ..Default::default()
        };
        let ledger = accrue_costs(&usage, &specs, false);
        let by = ledger.by_pipeline();
        assert!((by["a"] - 2.5).abs() < 1e-12);
        assert!((by["b"] - 1.0).abs() < 1e-12);
        assert!((by[UNATTRIBUTED_IDLE] - 1.0).abs() < 1e-12);
        assert!((ledger.total() - 4.5).abs() < 1e-12);
    }

    #[test]
    fn breakeven_examples() {
        let b = breakeven_utilization(&priced("m", 2.0, 0.005, 1)).unwrap();
        assert!((b.utilization - 2.0 / 18.0).abs() < 1e-12);
        assert!(!b.serverless_always_cheaper);
        let pricey = breakeven_utilization(&priced("m", 2.0, 1e9, 1)).unwrap();
        assert!(pricey.utilization < 1e-9);
        let cheap = breakeven_utilization(&priced("m", 100.0, 0.001, 1)).unwrap();
        assert_eq!(cheap.utilization, 1.0);
        assert!(cheap.serverless_always_cheaper);
        assert_eq!(breakeven_utilization(&priced("m", 0.0, 0.1, 1)), Err(NonPositiveRate));
    }
}
