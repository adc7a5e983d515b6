//! Latency quantiles, interval breach rates, availability and drop rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no samples")]
    EmptySamples,
    #[error("quantile {0} outside (0, 1]")]
    InvalidQuantile(f64),
    #[error("no non-empty intervals")]
    NoIntervals,
    #[error("no requests")]
    NoRequests,
}

/// Nearest-rank quantile: the `ceil(q·n)`-th smallest sample.
pub fn quantile(samples: &[u64], q: f64) -> Result<u64, MetricsError> {
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    quantile_sorted(&sorted, q)
}

pub fn quantile_sorted(sorted: &[u64], q: f64) -> Result<u64, MetricsError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(MetricsError::InvalidQuantile(q));
    }
    if sorted.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let n = sorted.len();
    // 0.95 * 100 must land on 95, not 95.00000000000001
    let rank = ((q * n as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(n) - 1])
}

/// Exact `(timestamp, latency)` samples per key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatencyRecorder {
    samples: BTreeMap<String, Vec<(u64, u64)>>,
}

impl LatencyRecorder {
    pub fn record(&mut self, key: &str, at_ms: u64, latency_ms: u64) {
        match self.samples.get_mut(key) {
            Some(v) => v.push((at_ms, latency_ms)),
            None => {
                self.samples.insert(key.to_string(), vec![(at_ms, latency_ms)]);
            }
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.samples.keys()
    }

    pub fn samples(&self, key: &str) -> &[(u64, u64)] {
        self.samples.get(key).map_or(&[], Vec::as_slice)
    }

    /// Latencies of samples stamped in `[start, end)`.
    pub fn latencies_in(&self, key: &str, (start, end): (u64, u64)) -> Vec<u64> {
        self.samples(key).iter().filter(|(t, _)| (start..end).contains(t)).map(|(_, l)| *l).collect()
    }

    pub fn quantile(&self, key: &str, q: f64) -> Result<u64, MetricsError> {
        quantile(&self.samples(key).iter().map(|s| s.1).collect::<Vec<_>>(), q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntervalStat {
    pub start_ms: u64,
    pub count: usize,
    pub p95_ms: u64,
}

impl IntervalStat {
    pub fn breached(&self, steady_p95: f64, multiplier: f64) -> bool {
        self.count > 0 && self.p95_ms as f64 > multiplier * steady_p95
    }
}

/// Buckets samples by timestamp into fixed intervals over `[start, end)`.
pub fn interval_stats(samples: &[(u64, u64)], interval_ms: u64, (start, end): (u64, u64)) -> Vec<IntervalStat> {
    let interval_ms = interval_ms.max(1);
    let n = end.saturating_sub(start).div_ceil(interval_ms) as usize;
    let mut buckets: Vec<Vec<u64>> = vec![Vec::new(); n];
    for &(t, l) in samples {
        if (start..end).contains(&t) {
            buckets[((t - start) / interval_ms) as usize].push(l);
        }
    }
    buckets
        .into_iter()
        .enumerate()
        .map(|(i, b)| IntervalStat {
            start_ms: start + i as u64 * interval_ms,
            count: b.len(),
            p95_ms: quantile(&b, 0.95).unwrap_or(0),
        })
        .collect()
}

/// Fraction of non-empty intervals whose P95 exceeds `multiplier × steady_p95`.
pub fn breach_rate(intervals: &[IntervalStat], steady_p95: f64, multiplier: f64) -> Result<f64, MetricsError> {
    let live: Vec<&IntervalStat> = intervals.iter().filter(|i| i.count > 0).collect();
    if live.is_empty() {
        return Err(MetricsError::NoIntervals);
    }
    let breached = live.iter().filter(|i| i.breached(steady_p95, multiplier)).count();
    Ok(breached as f64 / live.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Success,
    Degraded,
    Aborted,
    Dropped,
}

/// `(availability, drop rate)`. When every request was dropped availability
/// is reported as 1.0 over an empty denominator.
pub fn availability_and_drop(outcomes: impl IntoIterator<Item = RunOutcome>) -> Result<(f64, f64), MetricsError> {
    let (mut ok, mut dropped, mut total) = (0u64, 0u64, 0u64);
    for o in outcomes {
        total += 1;
        match o {
            RunOutcome::Success | RunOutcome::Degraded => ok += 1,
            RunOutcome::Dropped => dropped += 1,
            RunOutcome::Aborted => {}
        }
    }
    if total == 0 {
        return Err(MetricsError::NoRequests);
    }
    let served = total - dropped;
    let availability = if served == 0 { 1.0 } else { ok as f64 / served as f64 };
    Ok((availability, dropped as f64 / total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_examples() {
        let hundred: Vec<u64> = (1..=100).collect();
        assert_eq!(quantile(&hundred, 0.95), Ok(95));
        assert_eq!(quantile(&[7; 13], 0.3), Ok(7));
        assert_eq!(quantile(&[7; 13], 1.0), Ok(7));
        assert_eq!(quantile(&[20, 10], 0.5), Ok(10));
        assert_eq!(quantile(&[], 0.5), Err(MetricsError::EmptySamples));
        assert_eq!(quantile(&[1], 0.0), Err(MetricsError::InvalidQuantile(0.0)));
    }

    #[test]
    fn breach_rate_examples() {
        let steady: Vec<IntervalStat> = (0..50).map(|i| IntervalStat { start_ms: i * 60_000, count: 10, p95_ms: 100 }).collect();
        assert_eq!(breach_rate(&steady, 100.0, 2.0), Ok(0.0));
        let mut one = steady.clone();
        one[17].p95_ms = 250;
        assert_eq!(breach_rate(&one, 100.0, 2.0), Ok(0.02));
        // exactly 2x is not a breach
        one[17].p95_ms = 200;
        assert_eq!(breach_rate(&one, 100.0, 2.0), Ok(0.0));
        let empty = vec![IntervalStat { start_ms: 0, count: 0, p95_ms: 0 }];
        assert_eq!(breach_rate(&empty, 1.0, 2.0), Err(MetricsError::NoIntervals));
    }

    #[test]
    fn interval_bucketing() {
        let samples = [(0, 5), (59_999, 7), (60_000, 100), (200_000, 1)];
        let iv = interval_stats(&samples, 60_000, (0, 180_000));
        assert_eq!(iv.len(), 3);
        assert_eq!((iv[0].count, iv[0].p95_ms), (2, 7));
        assert_eq!((iv[1].count, iv[1].p95_ms), (1, 100));
        assert_eq!(iv[2].count, 0);
    }

    #[test]
    fn availability_examples() {
        assert_eq!(availability_and_drop(vec![RunOutcome::Success; 10]), Ok((1.0, 0.0)));
        let mut v = vec![RunOutcome::Success; 97];
        v.extend([RunOutcome::Aborted; 3]);
        assert_eq!(availability_and_drop(v), Ok((0.97, 0.0)));
        assert_eq!(availability_and_drop(vec![]), Err(MetricsError::NoRequests));
        let (a, d) = availability_and_drop(vec![RunOutcome::Degraded, RunOutcome::Dropped]).unwrap();
        assert_eq!((a, d), (1.0, 0.5));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn quantile_monotone(samples in proptest::collection::vec(0u64..10_000, 1..200), a in 0.001f64..=1.0, b in 0.001f64..=1.0) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(quantile(&samples, lo).unwrap() <= quantile(&samples, hi).unwrap());
            }

            #[test]
            fn quantile_matches_rank_definition(samples in proptest::collection::vec(0u64..1000, 1..100), k in 1usize..100) {
                let n = samples.len();
                let k = k.min(n);
                let mut sorted = samples.clone();
                sorted.sort_unstable();
                // q = k/n names the k-th order statistic exactly
                prop_assert_eq!(quantile(&samples, k as f64 / n as f64).unwrap(), sorted[k - 1]);
                prop_assert!(samples.contains(&quantile(&samples, 0.95).unwrap()));
            }
        }
    }
}
