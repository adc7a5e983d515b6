//! Request arrival streams and trace replay.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LatencyClass, Request};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("trace has fewer than 3 records")]
    TooShort,
    #[error("inter-arrival gaps have zero variance")]
    ZeroVariance,
    #[error("coefficient of variation multiplier {0} must be >= 1")]
    InvalidMultiplier(f64),
    #[error("target coefficient of variation {target:.3} cannot be reached with 1 ms gap clipping (max {reachable:.3})")]
    Unattainable { target: f64, reachable: f64 },
    #[error("trace line {line}: {message}")]
    ParseError { line: u64, message: String },
    #[error("trace contains no records")]
    EmptyTrace,
    #[error("invalid arrival process: {0}")]
    InvalidProcess(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rate shape of an arrival process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalKind {
    Poisson { rate_per_s: f64 },
    /// Piecewise-constant rate; each `(start_ms, rate_per_s)` holds until the next start.
    PiecewiseRate(Vec<(u64, f64)>),
    /// Multiplies the base rate by `factor` inside `[window.0, window.1)`.
    SpikeOverlay { base: Box<ArrivalKind>, factor: f64, window: (u64, u64) },
}

impl ArrivalKind {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::InvalidProcess(m.to_string()));
        match self {
            ArrivalKind::Poisson { rate_per_s } => {
                if !(*rate_per_s >= 0.0 && rate_per_s.is_finite()) {
                    return bad("rate must be >= 0");
                }
            }
            ArrivalKind::PiecewiseRate(segments) => {
                if segments.is_empty() {
                    return bad("piecewise rate needs at least one segment");
                }
                if segments.iter().any(|(_, r)| !(*r >= 0.0 && r.is_finite())) {
                    return bad("rates must be >= 0");
                }
                if segments.windows(2).any(|w| w[0].0 >= w[1].0) {
                    return bad("piecewise segments must be sorted and non-overlapping");
                }
            }
            ArrivalKind::SpikeOverlay { base, factor, window } => {
                base.validate()?;
                if !(*factor >= 1.0 && factor.is_finite()) {
                    return bad("spike factor must be >= 1");
                }
                if window.0 >= window.1 {
                    return bad("spike window must have start < end");
                }
            }
        }
        Ok(())
    }

    /// Instantaneous rate in requests per second.
    pub fn rate_at(&self, t_ms: u64) -> f64 {
        match self {
            ArrivalKind::Poisson { rate_per_s } => *rate_per_s,
            ArrivalKind::PiecewiseRate(segments) => segments
                .iter()
                .take_while(|(start, _)| *start <= t_ms)
                .last()
                .map_or(0.0, |(_, r)| *r),
            ArrivalKind::SpikeOverlay { base, factor, window } => {
                let r = base.rate_at(t_ms);
                if t_ms >= window.0 && t_ms < window.1 {
                    r * factor
                } else {
                    r
                }
            }
        }
    }

    fn breakpoints(&self, out: &mut Vec<u64>) {
        match self {
            ArrivalKind::Poisson { .. } => {}
            ArrivalKind::PiecewiseRate(segments) => out.extend(segments.iter().map(|(s, _)| *s)),
            ArrivalKind::SpikeOverlay { base, window, .. } => {
                base.breakpoints(out);
                out.push(window.0);
                out.push(window.1);
            }
        }
    }

    /// Expected arrival count over `[0, horizon_ms)`.
    pub fn expected_count(&self, horizon_ms: u64) -> f64 {
        let mut points = vec![0, horizon_ms];
        self.breakpoints(&mut points);
        points.retain(|p| *p <= horizon_ms);
        points.sort_unstable();
        points.dedup();
        points.windows(2).map(|w| self.rate_at(w[0]) * (w[1] - w[0]) as f64 / 1000.0).sum()
    }

    /// Spike windows, used to pick a spike-free steady-state window.
    pub fn spike_windows(&self, out: &mut Vec<(u64, u64)>) {
        if let ArrivalKind::SpikeOverlay { base, window, .. } = self {
            out.push(*window);
            base.spike_windows(out);
        }
    }
}

/// One workload: an arrival shape bound to a pipeline and latency class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalProcess {
    pub pipeline: String,
    pub latency_class: LatencyClass,
    pub process: ArrivalKind,
}

/// Lazy, strictly increasing arrival times for one process.
pub struct ArrivalStream<R> {
    kind: ArrivalKind,
    breakpoints: Vec<u64>,
    horizon_ms: u64,
    t: f64,
    last_ms: Option<u64>,
    rng: R,
}

impl<R: Rng> ArrivalStream<R> {
    pub fn new(kind: ArrivalKind, horizon_ms: u64, rng: R) -> Self {
        let mut breakpoints = Vec::new();
        kind.breakpoints(&mut breakpoints);
        breakpoints.sort_unstable();
        breakpoints.dedup();
        ArrivalStream { kind, breakpoints, horizon_ms, t: 0.0, last_ms: None, rng }
    }

    fn next_breakpoint(&self, t: f64) -> f64 {
        self.breakpoints
            .iter()
            .map(|b| *b as f64)
            .find(|b| *b > t)
            .unwrap_or(f64::INFINITY)
    }
}

impl<R: Rng> Iterator for ArrivalStream<R> {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        let horizon = self.horizon_ms as f64;
        loop {
            if self.t >= horizon {
                return None;
            }
            let rate_per_ms = self.kind.rate_at(self.t.floor() as u64) / 1000.0;
            let boundary = self.next_breakpoint(self.t);
            if rate_per_ms <= 0.0 {
                if boundary.is_infinite() {
                    self.t = horizon;
                    return None;
                }
                self.t = boundary;
                continue;
            }
            let gap = Exp::new(rate_per_ms).expect("positive rate").sample(&mut self.rng);
            if self.t + gap >= boundary {
                // memoryless: restart at the rate change
                self.t = boundary;
                continue;
            }
            self.t += gap;
            if self.t >= horizon {
                return None;
            }
            let mut ms = self.t.floor() as u64;
            if let Some(last) = self.last_ms {
                if ms <= last {
                    ms = last + 1;
                }
            }
            self.last_ms = Some(ms);
            return Some(ms);
        }
    }
}

/// Materializes a process over `[0, horizon_ms)` as requests with ids 0..n.
pub fn generate_arrivals<R: Rng>(process: &ArrivalProcess, horizon_ms: u64, rng: R) -> Vec<Request> {
    ArrivalStream::new(process.process.clone(), horizon_ms, rng)
        .enumerate()
        .map(|(i, t)| Request {
            request_id: i as u64,
            pipeline_id: process.pipeline.clone(),
            arrival_ms: t,
            latency_class: process.latency_class,
            draw_key: i as u64,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub arrival_ms: u64,
    pub pipeline_id: String,
    pub latency_class: LatencyClass,
}

/// Mean and population coefficient of variation.
pub fn mean_and_cov(gaps: &[f64]) -> (f64, f64) {
    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n;
    (mean, if mean > 0.0 { var.sqrt() / mean } else { 0.0 })
}

fn inter_arrival_gaps(trace: &[TraceRecord]) -> Vec<f64> {
    trace.windows(2).map(|w| (w[1].arrival_ms - w[0].arrival_ms) as f64).collect()
}

fn scaled_gaps(gaps: &[f64], mean: f64, k: f64) -> Vec<f64> {
    gaps.iter().map(|g| (mean + k * (g - mean)).max(1.0)).collect()
}

/// Scales every gap's deviation from the mean, clips at 1 ms and rescales the
/// span so the mean gap is unchanged.
///
/// Clipping lowers the achieved CoV, so the deviation factor starts at
/// `cov_multiplier` and is raised by bisection until the output CoV is
/// `cov_multiplier` times the input CoV.
pub fn amplify_variance(trace: &[TraceRecord], cov_multiplier: f64) -> Result<Vec<TraceRecord>, WorkloadError> {
    if trace.len() < 3 {
        return Err(WorkloadError::TooShort);
    }
    if !(cov_multiplier >= 1.0 && cov_multiplier.is_finite()) {
        return Err(WorkloadError::InvalidMultiplier(cov_multiplier));
    }
    let gaps = inter_arrival_gaps(trace);
    let (mean, cov) = mean_and_cov(&gaps);
    if cov == 0.0 {
        return Err(WorkloadError::ZeroVariance);
    }
    if cov_multiplier == 1.0 {
        return Ok(trace.to_vec());
    }
    let target = cov * cov_multiplier;
    let cov_at = |k: f64| mean_and_cov(&scaled_gaps(&gaps, mean, k)).1;

    let mut k = cov_multiplier;
    if cov_at(k) < target * 0.995 {
        let mut hi = cov_multiplier;
        let mut reachable = cov_at(hi);
        while reachable < target {
            hi *= 2.0;
            let next = cov_at(hi);
            if hi > 1e9 || next <= reachable * (1.0 + 1e-9) {
                return Err(WorkloadError::Unattainable { target, reachable: next });
            }
            reachable = next;
        }
        let mut lo = cov_multiplier;
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if cov_at(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        k = hi;
    }

    let clipped = scaled_gaps(&gaps, mean, k);
    let scale = gaps.iter().sum::<f64>() / clipped.iter().sum::<f64>();
    let start = trace[0].arrival_ms as f64;
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(trace.len());
    out.push(trace[0].clone());
    for (rec, gap) in trace[1..].iter().zip(&clipped) {
        acc += gap * scale;
        out.push(TraceRecord { arrival_ms: (start + acc).round() as u64, ..rec.clone() });
    }
    Ok(out)
}

pub fn parse_trace<R: Read>(reader: R) -> Result<Vec<TraceRecord>, WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| WorkloadError::ParseError { line: 1, message: e.to_string() })?
        .clone();
    let expected = ["arrival_ms", "pipeline_id", "latency_class"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(WorkloadError::ParseError {
            line: 1,
            message: format!("expected header `{}`", expected.join(",")),
        });
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| WorkloadError::ParseError {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let err = |message: String| WorkloadError::ParseError { line, message };
        let arrival_ms = row[0].parse::<u64>().map_err(|e| err(format!("arrival_ms `{}`: {e}", &row[0])))?;
        if row[1].is_empty() {
            return Err(err("empty pipeline_id".into()));
        }
        let latency_class = row[2].parse::<LatencyClass>().map_err(err)?;
        records.push(TraceRecord { arrival_ms, pipeline_id: row[1].to_string(), latency_class });
    }
    if records.is_empty() {
        return Err(WorkloadError::EmptyTrace);
    }
    records.sort_by_key(|r| r.arrival_ms);
    Ok(records)
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceRecord>, WorkloadError> {
    parse_trace(std::fs::File::open(path)?)
}

pub fn write_trace<W: Write>(writer: W, records: &[TraceRecord]) -> Result<(), WorkloadError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(["arrival_ms", "pipeline_id", "latency_class"]).map_err(csv_io)?;
    for r in records {
        w.write_record([r.arrival_ms.to_string(), r.pipeline_id.clone(), r.latency_class.to_string()]).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> WorkloadError {
    WorkloadError::Io(std::io::Error::other(e.to_string()))
}

/// Turns generated arrivals into trace records, merged in time order.
pub fn to_trace(requests: &[Request]) -> Vec<TraceRecord> {
    let mut out: Vec<TraceRecord> = requests
        .iter()
        .map(|r| TraceRecord { arrival_ms: r.arrival_ms, pipeline_id: r.pipeline_id.clone(), latency_class: r.latency_class })
        .collect();
    out.sort_by_key(|r| r.arrival_ms);
    out
}
