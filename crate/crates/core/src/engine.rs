//! Deterministic discrete-event scheduler.
//!
//! Events are ordered by `(fire_at_ms, seq)` where `seq` is assigned at
//! schedule time, so simultaneous events fire in FIFO order. Random numbers
//! come from label-partitioned ChaCha8 streams derived from one master seed.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Recorded in report headers so event logs from different builds are comparable.
pub const RNG_ALGORITHM: &str = "ChaCha8 (rand_chacha 0.3); seed=master, stream=FNV-1a-64(label); keyed draws seed=splitmix64(master^key)";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("cannot schedule at {fire_at_ms} ms, clock is already at {now_ms} ms")]
    PastTime { fire_at_ms: u64, now_ms: u64 },
}

/// A scheduled event.
#[derive(Debug, Clone)]
pub struct Scheduled<K> {
    pub fire_at_ms: u64,
    pub seq: u64,
    pub kind: K,
}

impl<K> PartialEq for Scheduled<K> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at_ms == other.fire_at_ms && self.seq == other.seq
    }
}

impl<K> Eq for Scheduled<K> {}

impl<K> PartialOrd for Scheduled<K> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<K> Ord for Scheduled<K> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.fire_at_ms, self.seq).cmp(&(other.fire_at_ms, other.seq))
    }
}

/// Clock plus a min-heap of pending events.
#[derive(Debug)]
pub struct EventQueue<K> {
    now_ms: u64,
    next_seq: u64,
    heap: BinaryHeap<Reverse<Scheduled<K>>>,
}

impl<K> Default for EventQueue<K> {
    fn default() -> Self {
        Self::new()
    }
}

impl<K> EventQueue<K> {
    pub fn new() -> Self {
        EventQueue { now_ms: 0, next_seq: 0, heap: BinaryHeap::new() }
    }

    pub fn now(&self) -> u64 {
        self.now_ms
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, kind: K, fire_at_ms: u64) -> Result<u64, EngineError> {
        if fire_at_ms < self.now_ms {
            return Err(EngineError::PastTime { fire_at_ms, now_ms: self.now_ms });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Scheduled { fire_at_ms, seq, kind }));
        Ok(seq)
    }

    /// Schedules `delay_ms` after the current clock; cannot fail.
    pub fn schedule_in(&mut self, kind: K, delay_ms: u64) -> u64 {
        let at = self.now_ms + delay_ms;
        self.schedule(kind, at).expect("relative schedule is never in the past")
    }

    pub fn peek_time(&self) -> Option<u64> {
        self.heap.peek().map(|Reverse(e)| e.fire_at_ms)
    }

    /// Pops the next event if it fires at or before `t_end`, advancing the clock.
    pub fn pop_until(&mut self, t_end: u64) -> Option<Scheduled<K>> {
        match self.heap.peek() {
            Some(Reverse(e)) if e.fire_at_ms <= t_end => {
                let Reverse(e) = self.heap.pop().expect("peeked");
                self.now_ms = e.fire_at_ms;
                Some(e)
            }
            _ => None,
        }
    }

    /// Advances the clock without processing anything; never moves backwards.
    pub fn advance_to(&mut self, t: u64) {
        self.now_ms = self.now_ms.max(t);
    }

    /// Drains every event with `fire_at_ms <= t_end` in `(time, seq)` order.
    /// The handler may schedule further events through the queue it is
    /// given. Afterwards the clock rests at `t_end`.
    pub fn run_until<F>(&mut self, t_end: u64, mut handler: F) -> u64
    where
        F: FnMut(&mut Self, Scheduled<K>),
    {
        let mut processed = 0;
        while let Some(ev) = self.pop_until(t_end) {
            handler(self, ev);
            processed += 1;
        }
        self.advance_to(t_end);
        processed
    }
}

fn fnv1a64(label: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Factory for independent, reproducible random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStreams {
    master_seed: u64,
}

impl RngStreams {
    pub fn new(master_seed: u64) -> Self {
        RngStreams { master_seed }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// A long-lived stream, e.g. `"arrivals:0"`.
    pub fn stream(&self, label: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(fnv1a64(label));
        rng
    }

    /// A short stream for one `(label, key)` pair; used for per-request draws
    /// so that pairing holds across runs that interleave events differently.
    pub fn keyed(&self, label: &str, key: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.master_seed ^ splitmix64(key)));
        rng.set_stream(fnv1a64(label));
        rng
    }
}

/// Identifies one instance: pool index plus an id local to that pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InstanceRef {
    pub pool: usize,
    pub instance: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarmupCause {
    Coordinated,
    Schedule,
}

/// Every kind of simulation event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimEvent {
    /// Arrival of the next request from workload `workload`.
    RequestArrival { workload: usize },
    /// Preprocessing finished or a frontier completed (after fan-out overhead).
    AdvanceFrontier { request_id: u64 },
    DispatchNode { request_id: u64, node: usize },
    ColdStartComplete(InstanceRef),
    ServiceComplete { invocation_id: u64 },
    ScaleTick { model: usize },
    WarmupTrigger { model: usize, cause: WarmupCause },
    IdleTimeout(InstanceRef),
    BreakerTimer { model: usize },
    ScheduleTick,
}

impl SimEvent {
    pub fn kind_name(&self) -> &'static str {
        match self {
            SimEvent::RequestArrival { .. } => "RequestArrival",
            SimEvent::AdvanceFrontier { .. } => "AdvanceFrontier",
            SimEvent::DispatchNode { .. } => "DispatchNode",
            SimEvent::ColdStartComplete(_) => "ColdStartComplete",
            SimEvent::ServiceComplete { .. } => "ServiceComplete",
            SimEvent::ScaleTick { .. } => "ScaleTick",
            SimEvent::WarmupTrigger { .. } => "WarmupTrigger",
            SimEvent::IdleTimeout(_) => "IdleTimeout",
            SimEvent::BreakerTimer { .. } => "BreakerTimer",
            SimEvent::ScheduleTick => "ScheduleTick",
        }
    }
}

impl fmt::Display for SimEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimEvent::RequestArrival { workload } => write!(f, "workload={workload}"),
            SimEvent::AdvanceFrontier { request_id } => write!(f, "request={request_id}"),
            SimEvent::DispatchNode { request_id, node } => write!(f, "request={request_id} node={node}"),
            SimEvent::ColdStartComplete(i) | SimEvent::IdleTimeout(i) => write!(f, "pool={} instance={}", i.pool, i.instance),
            SimEvent::ServiceComplete { invocation_id } => write!(f, "invocation={invocation_id}"),
            SimEvent::ScaleTick { model } | SimEvent::BreakerTimer { model } => write!(f, "model={model}"),
            SimEvent::WarmupTrigger { model, cause } => write!(f, "model={model} cause={cause:?}"),
            SimEvent::ScheduleTick => f.write_str("-"),
        }
    }
}

/// One tab-separated line per event: `fire_at_ms  seq  kind  payload`.
pub fn event_log_line(ev: &Scheduled<SimEvent>) -> String {
    format!("{}\t{}\t{}\t{}", ev.fire_at_ms, ev.seq, ev.kind.kind_name(), ev.kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn past_time_rejected() {
        let mut q: EventQueue<u32> = EventQueue::new();
        q.schedule(1, 10).unwrap();
        q.run_until(10, |_, _| {});
        assert_eq!(q.schedule(2, 9), Err(EngineError::PastTime { fire_at_ms: 9, now_ms: 10 }));
        assert!(q.schedule(3, 10).is_ok());
    }

    #[test]
    fn ties_fire_in_schedule_order() {
        let mut q = EventQueue::new();
        q.schedule("late-seq", 100).unwrap();
        q.schedule("first-at-50", 50).unwrap();
        q.schedule("later-seq", 100).unwrap();
        let mut seen = Vec::new();
        q.run_until(1000, |_, e| seen.push(e.kind));
        assert_eq!(seen, vec!["first-at-50", "late-seq", "later-seq"]);
    }

    #[test]
    fn schedule_at_now_fires_before_later_same_time_events() {
        let mut q = EventQueue::new();
        q.schedule(0u32, 0).unwrap();
        let mut seen = Vec::new();
        q.run_until(0, |q, e| {
            seen.push(e.kind);
            if e.kind == 0 {
                q.schedule(1, 0).unwrap();
                q.schedule(2, 0).unwrap();
            }
        });
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn run_until_counts_and_clock() {
        let mut q: EventQueue<()> = EventQueue::new();
        assert_eq!(q.run_until(100, |_, _| {}), 0);
        assert_eq!(q.now(), 100);

        let mut q: EventQueue<()> = EventQueue::new();
        q.schedule((), 50).unwrap();
        q.schedule((), 150).unwrap();
        assert_eq!(q.run_until(100, |_, _| {}), 1);
        assert_eq!(q.now(), 100);
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn streams_are_reproducible_and_label_partitioned() {
        let s = RngStreams::new(42);
        let a: Vec<u64> = (0..4).map(|_| s.stream("arrivals").gen()).collect();
        let mut r1 = s.stream("arrivals");
        let mut r2 = s.stream("arrivals");
        let mut r3 = s.stream("service");
        let x1: Vec<u64> = (0..4).map(|_| r1.gen()).collect();
        let x2: Vec<u64> = (0..4).map(|_| r2.gen()).collect();
        let x3: Vec<u64> = (0..4).map(|_| r3.gen()).collect();
        assert_eq!(x1, x2);
        assert_ne!(x1, x3);
        assert_eq!(a[0], x1[0]);
        assert_ne!(s.keyed("service", 1).gen::<u64>(), s.keyed("service", 2).gen::<u64>());
        assert_ne!(RngStreams::new(43).stream("arrivals").gen::<u64>(), x1[0]);
    }

    #[test]
    fn labelled_streams_look_independent() {
        // correlation between two streams' uniforms should be ~0
        let s = RngStreams::new(7);
        let mut a = s.stream("a");
        let mut b = s.stream("b");
        let n = 20_000;
        let (xs, ys): (Vec<f64>, Vec<f64>) = (0..n).map(|_| (a.gen::<f64>(), b.gen::<f64>())).unzip();
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n as f64;
        let corr = cov / (1.0 / 12.0);
        assert!(corr.abs() < 0.03, "corr {corr}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn drain_touches_each_once_in_order(times in proptest::collection::vec(0u64..1000, 0..200)) {
                let mut q = EventQueue::new();
                for (i, t) in times.iter().enumerate() {
                    q.schedule(i, *t).unwrap();
                }
                let mut seen = Vec::new();
                let mut last = (0u64, 0u64);
                let mut clock_ok = true;
                let n = q.run_until(u64::MAX, |q, e| {
                    clock_ok &= (e.fire_at_ms, e.seq) >= last && q.now() == e.fire_at_ms;
                    last = (e.fire_at_ms, e.seq);
                    seen.push(e.kind);
                });
                prop_assert!(clock_ok);
                prop_assert_eq!(n as usize, times.len());
                seen.sort();
                prop_assert_eq!(seen, (0..times.len()).collect::<Vec<_>>());
            }
        }
    }
}
