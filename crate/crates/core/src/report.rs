//! Summaries, CSV tables and run comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{breakeven_utilization, CostKind};
use crate::metrics::{availability_and_drop, breach_rate, interval_stats, quantile, RunOutcome};
use crate::pools::PoolKind;
use crate::simulation::{SimConfig, SimOutput, WorkloadSource};

const HOUR_MS: u64 = 3_600_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSettings {
    pub interval_ms: u64,
    pub breach_multiplier: f64,
    /// Time excluded from breach and steady-state statistics.
    pub warmup_ms: u64,
    /// Steady-state window; defaults to the first spike-free hour after warm-up.
    pub steady_window_ms: Option<(u64, u64)>,
    /// Baseline P95 for breach counting; defaults to the steady window's P95.
    pub steady_p95_ms: Option<f64>,
    /// Spike window; defaults to the first spike of any generated workload.
    pub spike_window_ms: Option<(u64, u64)>,
    /// Window for completed-RPM throughput; defaults to after warm-up.
    pub throughput_window_ms: Option<(u64, u64)>,
}

impl Default for ReportSettings {
    fn default() -> Self {
        ReportSettings {
            interval_ms: 60_000,
            breach_multiplier: 2.0,
            warmup_ms: 0,
            steady_window_ms: None,
            steady_p95_ms: None,
            spike_window_ms: None,
            throughput_window_ms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Windows {
    pub steady_ms: (u64, u64),
    pub spike_ms: Option<(u64, u64)>,
    pub throughput_ms: (u64, u64),
    pub breach_ms: (u64, u64),
}

pub fn spike_windows(cfg: &SimConfig) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    for w in &cfg.workloads {
        if let WorkloadSource::Generated(p) = w {
            p.process.spike_windows(&mut out);
        }
    }
    out.sort_unstable();
    out
}

/// Resolves the report windows for a configured run.
pub fn resolve_windows(cfg: &SimConfig, settings: &ReportSettings) -> Windows {
    let horizon = cfg.horizon_ms;
    let start = settings.warmup_ms.min(horizon);
    let spikes = spike_windows(cfg);
    let steady_ms = settings.steady_window_ms.unwrap_or_else(|| first_quiet_hour(&spikes, start, horizon));
    Windows {
        steady_ms,
        spike_ms: settings.spike_window_ms.or_else(|| spikes.first().map(|&(a, b)| (a, b.min(horizon)))),
        throughput_ms: settings.throughput_window_ms.unwrap_or((start, horizon)),
        breach_ms: (start, horizon),
    }
}

/// First spike-free hour at or after `start`; the longest spike-free gap
/// when no full hour exists.
fn first_quiet_hour(spikes: &[(u64, u64)], start: u64, end: u64) -> (u64, u64) {
    let mut gaps = Vec::new();
    let mut t = start;
    for &(a, b) in spikes {
        if b <= t {
            continue;
        }
        if a > t {
            gaps.push((t, a.min(end)));
        }
        t = t.max(b);
        if t >= end {
            break;
        }
    }
    if t < end {
        gaps.push((t, end));
    }
    gaps.iter()
        .find(|(a, b)| b - a >= HOUR_MS)
        .map(|&(a, _)| (a, a + HOUR_MS))
        .or_else(|| gaps.iter().copied().max_by_key(|(a, b)| (b - a, std::cmp::Reverse(*a))))
        .unwrap_or((start, end.max(start + 1)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub scenario: String,
    pub seed: u64,
    pub rng_algorithm: String,
    pub horizon_ms: u64,
    pub overrides: Vec<String>,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub id: String,
    pub requests: u64,
    pub success: u64,
    pub degraded: u64,
    pub aborted: u64,
    pub dropped: u64,
    pub unfinished: u64,
    pub availability: Option<f64>,
    pub drop_rate: Option<f64>,
    pub p50_ms: Option<u64>,
    pub p95_ms: Option<u64>,
    pub p99_ms: Option<u64>,
    pub mean_ms: Option<f64>,
    pub steady_p95_ms: Option<u64>,
    pub spike_p95_ms: Option<u64>,
    pub breach_rate: Option<f64>,
    pub breach_intervals: usize,
    pub throughput_rpm: f64,
    pub cold_run_fraction: Option<f64>,
    pub fanout_overhead_mean_ms: Option<f64>,
    pub fanout_frontiers: usize,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub id: String,
    pub invocations: u64,
    pub cold_invocations: u64,
    pub failures: u64,
    pub breaker_trips: u64,
    pub p95_ms: Option<u64>,
    pub steady_mean_target: f64,
    pub spike_mean_target: Option<f64>,
    pub peak_target: u32,
    pub serverless_instances_started: usize,
    pub serverless_utilization: Option<f64>,
    pub dedicated_utilization: Option<f64>,
    pub cost: f64,
    pub breakeven_utilization: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub component: String,
    pub invocation_ratio: f64,
    pub scale_factor: f64,
    pub uniform_factor: f64,
    pub over_provision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub total: f64,
    pub by_kind: BTreeMap<String, f64>,
    pub by_pipeline: BTreeMap<String, f64>,
    pub by_model: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub header: ReportHeader,
    pub windows: Windows,
    pub events: u64,
    pub pipelines: Vec<PipelineSummary>,
    pub models: Vec<ModelSummary>,
    pub scaling: Vec<ScalingRow>,
    pub cost: CostSummary,
}

impl Summary {
    pub fn pipeline(&self, id: &str) -> Option<&PipelineSummary> {
        self.pipelines.iter().find(|p| p.id == id)
    }

    pub fn model(&self, id: &str) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.id == id)
    }
}

fn p(samples: &[u64], q: f64) -> Option<u64> {
    quantile(samples, q).ok()
}

pub fn summarize(cfg: &SimConfig, out: &SimOutput, settings: &ReportSettings, header: ReportHeader) -> Summary {
    let win = resolve_windows(cfg, settings);
    let by_pipeline = out.ledger.by_pipeline();
    let by_model = out.ledger.by_model();

    let pipelines = out
        .pipelines
        .iter()
        .map(|pm| {
            let counts = pm.outcome_counts();
            let c = |o| counts.get(&o).copied().unwrap_or(0);
            let lat = pm.latencies();
            let all: Vec<u64> = lat.iter().map(|l| l.1).collect();
            let in_window = |(a, b): (u64, u64)| -> Vec<u64> { lat.iter().filter(|l| (a..b).contains(&l.0)).map(|l| l.1).collect() };
            let steady = p(&in_window(win.steady_ms), 0.95);
            let baseline = settings.steady_p95_ms.or(steady.map(|v| v as f64));
            let intervals = interval_stats(&lat, settings.interval_ms, win.breach_ms);
            let breach = baseline.and_then(|b| breach_rate(&intervals, b, settings.breach_multiplier).ok());
            let (availability, drop_rate) = match availability_and_drop(pm.runs.iter().map(|r| r.outcome)) {
                Ok((a, d)) => (Some(a), Some(d)),
                Err(_) => (None, None),
            };
            let served = lat.len();
            PipelineSummary {
                id: pm.id.clone(),
                requests: pm.runs.len() as u64 + pm.unfinished,
                success: c(RunOutcome::Success),
                degraded: c(RunOutcome::Degraded),
                aborted: c(RunOutcome::Aborted),
                dropped: c(RunOutcome::Dropped),
                unfinished: pm.unfinished,
                availability,
                drop_rate,
                p50_ms: p(&all, 0.5),
                p95_ms: p(&all, 0.95),
                p99_ms: p(&all, 0.99),
                mean_ms: (served > 0).then(|| all.iter().sum::<u64>() as f64 / served as f64),
                steady_p95_ms: steady,
                spike_p95_ms: win.spike_ms.and_then(|w| p(&in_window(w), 0.95)),
                breach_rate: breach,
                breach_intervals: intervals.iter().filter(|i| i.count > 0).count(),
                throughput_rpm: pm.completed_rpm(win.throughput_ms),
                cold_run_fraction: (!pm.runs.is_empty())
                    .then(|| pm.runs.iter().filter(|r| r.cold).count() as f64 / pm.runs.len() as f64),
                fanout_overhead_mean_ms: (!pm.overheads.is_empty())
                    .then(|| pm.overheads.iter().sum::<u64>() as f64 / pm.overheads.len() as f64),
                fanout_frontiers: pm.overheads.len(),
                cost: by_pipeline.get(&pm.id).copied().unwrap_or(0.0),
            }
        })
        .collect();

    let post_spike = win.spike_ms.map(|(a, b)| (a + (b - a) / 2, b));
    let models = out
        .models
        .iter()
        .enumerate()
        .map(|(i, mm)| {
            let spec = &cfg.registry[&mm.id];
            let lat: Vec<u64> = mm.latencies.iter().map(|l| l.1).collect();
            let sl = &out.pools[2 * i];
            let ded = &out.pools[2 * i + 1];
            ModelSummary {
                id: mm.id.clone(),
                invocations: mm.invocations,
                cold_invocations: mm.cold_invocations,
                failures: mm.failures,
                breaker_trips: mm.breaker_trips,
                p95_ms: p(&lat, 0.95),
                steady_mean_target: mm.mean_target(win.steady_ms),
                spike_mean_target: post_spike.map(|w| mm.mean_target(w)),
                peak_target: mm.targets.iter().map(|t| t.1).max().unwrap_or(0),
                serverless_instances_started: sl.instances().len(),
                serverless_utilization: sl.utilization(win.steady_ms).ok(),
                dedicated_utilization: ded.utilization(win.steady_ms).ok(),
                cost: by_model.get(&mm.id).copied().unwrap_or(0.0),
                breakeven_utilization: breakeven_utilization(spec).ok().map(|b| b.utilization),
            }
        })
        .collect();

    let ledger_kinds = out.ledger.by_kind();
    let kind_name = |k: &CostKind| format!("{k:?}");
    Summary {
        header,
        events: out.events,
        pipelines,
        models,
        scaling: scaling_rows(cfg, out, &win),
        cost: CostSummary {
            total: out.ledger.total(),
            by_kind: ledger_kinds.iter().map(|(k, v)| (kind_name(k), *v)).collect(),
            by_pipeline,
            by_model,
        },
        windows: win,
    }
}

/// Per-model scaling under the spike, in the layout of a scaling-dynamics
/// table: scale factor is the post-spike autoscaler target relative to the
/// capacity that baseline user traffic alone would need at ratio 1.
pub fn scaling_rows(cfg: &SimConfig, out: &SimOutput, win: &Windows) -> Vec<ScalingRow> {
    let Some((a, b)) = win.spike_ms else { return Vec::new() };
    let post = (a + (b - a) / 2, b);
    let steady = win.steady_ms;
    let rate = |pids: &[&str], (s, e): (u64, u64)| -> f64 {
        let n: usize = out
            .pipelines
            .iter()
            .filter(|p| pids.contains(&p.id.as_str()))
            .map(|p| p.runs.iter().filter(|r| (s..e).contains(&r.arrival_ms)).count())
            .sum();
        n as f64 * 1000.0 / e.saturating_sub(s).max(1) as f64
    };
    let headroom = cfg.policies.scale.headroom;
    out.models
        .iter()
        .filter(|mm| !mm.targets.is_empty())
        .filter_map(|mm| {
            let spec = &cfg.registry[&mm.id];
            let pids: Vec<&str> = cfg
                .pipelines
                .iter()
                .filter(|p| p.nodes.iter().any(|n| cfg.table.models_of(&n.model).contains(&mm.id.as_str())))
                .map(|p| p.id.as_str())
                .collect();
            let base_rate = rate(&pids, steady);
            let spike_rate = rate(&pids, post);
            if base_rate <= 0.0 {
                return None;
            }
            let requests = base_rate * (steady.1 - steady.0) as f64 / 1000.0;
            let invocations = mm.latencies.iter().filter(|l| (steady.0..steady.1).contains(&l.0)).count() as f64;
            let user_target =
                base_rate * spec.service_time.mean_ms() / 1000.0 / f64::from(spec.per_instance_concurrency) * headroom;
            let scale_factor = mm.mean_target(post) / user_target;
            let uniform_factor = spike_rate / base_rate;
            Some(ScalingRow {
                component: mm.id.clone(),
                invocation_ratio: invocations / requests,
                scale_factor,
                uniform_factor,
                over_provision: uniform_factor / scale_factor,
            })
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("pipelines differ between runs: {0:?} vs {1:?}")]
    PipelineMismatch(Vec<String>, Vec<String>),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `summary.json`, `pipelines.csv`, `models.csv`, `ledger.csv` and,
/// when a spike window exists, `scaling.csv`.
pub fn write_reports(dir: &Path, summary: &Summary, out: &SimOutput) -> Result<(), ReportError> {
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(summary)?;
    json.push('\n');
    fs::write(dir.join("summary.json"), json)?;
    write_csv(&dir.join("pipelines.csv"), &summary.pipelines)?;
    write_csv(&dir.join("models.csv"), &summary.models)?;
    write_csv(&dir.join("ledger.csv"), &out.ledger.entries)?;
    if !summary.scaling.is_empty() {
        write_csv(&dir.join("scaling.csv"), &summary.scaling)?;
    }
    Ok(())
}

pub fn write_run_records(path: &Path, out: &SimOutput) -> Result<(), ReportError> {
    let mut s = String::new();
    for r in &out.run_records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn load_summary(path: &Path) -> Result<Summary, ReportError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub pipeline: String,
    pub p95_a_ms: Option<u64>,
    pub p95_b_ms: Option<u64>,
    /// `(a − b) / a` in percent.
    pub p95_reduction_pct: Option<f64>,
    pub throughput_a_rpm: f64,
    pub throughput_b_rpm: f64,
    /// `b / a`.
    pub throughput_ratio: Option<f64>,
    pub cost_a: f64,
    pub cost_b: f64,
    /// `a / b`.
    pub cost_ratio: Option<f64>,
    pub cost_reduction_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub a: String,
    pub b: String,
    pub rows: Vec<ComparisonRow>,
    /// Whole-run cost including idle dedicated capacity.
    pub total: ComparisonRow,
}

fn reduction(a: f64, b: f64) -> Option<f64> {
    (a > 0.0).then(|| (a - b) / a * 100.0)
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

fn row(name: &str, p95: (Option<u64>, Option<u64>), tps: (f64, f64), cost: (f64, f64)) -> ComparisonRow {
    ComparisonRow {
        pipeline: name.to_string(),
        p95_a_ms: p95.0,
        p95_b_ms: p95.1,
        p95_reduction_pct: match p95 {
            (Some(a), Some(b)) => reduction(a as f64, b as f64),
            _ => None,
        },
        throughput_a_rpm: tps.0,
        throughput_b_rpm: tps.1,
        throughput_ratio: ratio(tps.1, tps.0),
        cost_a: cost.0,
        cost_b: cost.1,
        cost_ratio: ratio(cost.0, cost.1),
        cost_reduction_pct: reduction(cost.0, cost.1),
    }
}

/// Row per pipeline: P95 reduction, throughput ratio and cost ratio of `b`
/// (optimized) against `a` (legacy).
pub fn compare_runs(a: &Summary, b: &Summary) -> Result<ComparisonReport, ReportError> {
    let ids = |s: &Summary| -> Vec<String> {
        let mut v: Vec<String> = s.pipelines.iter().map(|p| p.id.clone()).collect();
        v.sort();
        v
    };
    if ids(a) != ids(b) {
        return Err(ReportError::PipelineMismatch(ids(a), ids(b)));
    }
    let rows = a
        .pipelines
        .iter()
        .map(|pa| {
            let pb = b.pipeline(&pa.id).expect("same pipeline ids");
            row(&pa.id, (pa.p95_ms, pb.p95_ms), (pa.throughput_rpm, pb.throughput_rpm), (pa.cost, pb.cost))
        })
        .collect();
    let tps = |s: &Summary| s.pipelines.iter().map(|p| p.throughput_rpm).sum::<f64>();
    Ok(ComparisonReport {
        a: a.header.scenario.clone(),
        b: b.header.scenario.clone(),
        rows,
        total: row("(total)", (None, None), (tps(a), tps(b)), (a.cost.total, b.cost.total)),
    })
}

fn fmt_opt(v: Option<f64>, suffix: &str) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.1}{suffix}"))
}

fn fmt_ratio(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.2}×"))
}

impl ComparisonReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>10} {:>10} {:>8} {:>8} {:>8} {:>8}", "Pipeline", "A P95", "B P95", "P95↓", "TPS↑", "Cost↓", "Cost↓%");
        for r in self.rows.iter().chain(std::iter::once(&self.total)) {
            let ms = |v: Option<u64>| v.map_or("-".to_string(), |x| format!("{x} ms"));
            let _ = writeln!(
                s,
                "{:<24} {:>10} {:>10} {:>8} {:>8} {:>8} {:>8}",
                r.pipeline,
                ms(r.p95_a_ms),
                ms(r.p95_b_ms),
                fmt_opt(r.p95_reduction_pct, "%"),
                fmt_ratio(r.throughput_ratio),
                fmt_ratio(r.cost_ratio),
                fmt_opt(r.cost_reduction_pct, "%"),
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ReportError> {
        let rows: Vec<&ComparisonRow> = self.rows.iter().chain(std::iter::once(&self.total)).collect();
        write_csv(path, &rows)
    }
}

/// Utilization of a model's pools by kind over a window.
pub fn pool_utilization(out: &SimOutput, model: &str, kind: PoolKind, window: (u64, u64)) -> Option<f64> {
    let pool = match kind {
        PoolKind::Serverless => out.serverless_pool(model)?,
        PoolKind::Dedicated => out.dedicated_pool(model)?,
    };
    pool.utilization(window).ok()
}
