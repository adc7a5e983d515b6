//! Instance lifecycle and slot management for one `(model, backend)` pool.
//!
//! Serverless pools start instances on demand, reserve slots on instances
//! that are still provisioning, and retire idle instances after
//! `idle_timeout_ms`. Dedicated pools hold a fixed instance count and queue
//! work when every slot is busy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::LatencyClass;
use crate::router::PriorityQueue;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Serverless,
    Dedicated,
}

impl std::fmt::Display for PoolKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolKind::Serverless => "serverless",
            PoolKind::Dedicated => "dedicated",
        })
    }
}

/// Slot selection among warm instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Packing {
    /// Fewest free slots remaining; ties go to the lowest instance id.
    #[default]
    BestFit,
    /// Lowest instance id with a free slot.
    FirstAvailable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InstanceState {
    /// Cold starting; `reserved` invocations get their slots at `ready_at_ms`.
    Provisioning { ready_at_ms: u64, reserved: Vec<u64> },
    Warm { busy_slots: u32 },
    Retired,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub id: u32,
    pub state: InstanceState,
    pub created_ms: u64,
    pub ready_ms: Option<u64>,
    pub retired_ms: Option<u64>,
    pub last_transition_ms: u64,
    /// Busy slot-milliseconds accumulated on release.
    pub billed_busy_ms: u64,
}

impl Instance {
    pub fn is_live(&self) -> bool {
        !matches!(self.state, InstanceState::Retired)
    }

    pub fn busy_slots(&self) -> u32 {
        match self.state {
            InstanceState::Warm { busy_slots } => busy_slots,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    WarmSlot(u32),
    ColdStartStarted { instance: u32, ready_at_ms: u64 },
    Queued(usize),
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PoolError {
    #[error("instance {0} has no busy slot to release")]
    NotBusy(u32),
    #[error("no provisioned capacity in the utilization window")]
    EmptyWindow,
    #[error("unknown instance {0}")]
    UnknownInstance(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolConfig {
    pub model_id: String,
    pub kind: PoolKind,
    pub concurrency: u32,
    pub cold_start_ms: u64,
    pub idle_timeout_ms: u64,
    /// Serverless floor; dedicated pools ignore it.
    pub provisioned_min: u32,
    /// Warm instances created at initialization.
    pub initial_instances: u32,
    pub max_instances: u32,
    pub max_queue_depth: usize,
    pub packing: Packing,
}

/// What a release did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Release {
    /// Set when a serverless instance went idle; the caller schedules the timer.
    pub idle_timer_at: Option<u64>,
    pub busy_ms: u64,
}

#[derive(Debug, Clone)]
pub struct Pool {
    pub cfg: PoolConfig,
    instances: Vec<Instance>,
    pub pending: PriorityQueue<u64>,
    /// Extra floor set by autoscaler targets and warm schedules.
    floor: u32,
    timeline: Vec<(u64, u32, u32)>,
    busy_total: u32,
    provisioned_total: u32,
}

impl Pool {
    pub fn new(cfg: PoolConfig, now: u64) -> Self {
        let mut pool = Pool {
            instances: Vec::new(),
            pending: PriorityQueue::new(),
            floor: 0,
            timeline: Vec::new(),
            busy_total: 0,
            provisioned_total: 0,
            cfg,
        };
        let initial = match pool.cfg.kind {
            PoolKind::Dedicated => pool.cfg.initial_instances,
            PoolKind::Serverless => pool.cfg.initial_instances.max(pool.cfg.provisioned_min),
        };
        for _ in 0..initial {
            let id = pool.instances.len() as u32;
            pool.instances.push(Instance {
                id,
                state: InstanceState::Warm { busy_slots: 0 },
                created_ms: now,
                ready_ms: Some(now),
                retired_ms: None,
                last_transition_ms: now,
                billed_busy_ms: 0,
            });
            pool.provisioned_total += pool.cfg.concurrency;
        }
        pool.mark(now);
        pool
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn instance(&self, id: u32) -> Option<&Instance> {
        self.instances.get(id as usize)
    }

    /// Non-retired instances, warm or provisioning.
    pub fn live_count(&self) -> u32 {
        self.instances.iter().filter(|i| i.is_live()).count() as u32
    }

    pub fn warm_count(&self) -> u32 {
        self.instances.iter().filter(|i| matches!(i.state, InstanceState::Warm { .. })).count() as u32
    }

    pub fn busy_slots(&self) -> u32 {
        self.busy_total
    }

    pub fn total_warm_slots(&self) -> u32 {
        self.warm_count() * self.cfg.concurrency
    }

    /// In-flight plus reserved invocations.
    pub fn reserved_slots(&self) -> u32 {
        self.instances
            .iter()
            .map(|i| match &i.state {
                InstanceState::Provisioning { reserved, .. } => reserved.len() as u32,
                _ => 0,
            })
            .sum()
    }

    pub fn set_floor(&mut self, floor: u32) {
        self.floor = floor;
    }

    pub fn floor(&self) -> u32 {
        match self.cfg.kind {
            PoolKind::Serverless => self.floor.max(self.cfg.provisioned_min),
            PoolKind::Dedicated => u32::MAX,
        }
    }

    /// Any warm instance whose own busy fraction is below `threshold`.
    pub fn has_instance_below(&self, threshold: f64) -> bool {
        let conc = f64::from(self.cfg.concurrency);
        self.instances.iter().any(|i| match i.state {
            InstanceState::Warm { busy_slots } => f64::from(busy_slots) / conc < threshold,
            _ => false,
        })
    }

    fn mark(&mut self, now: u64) {
        let entry = (now, self.busy_total, self.provisioned_total);
        match self.timeline.last_mut() {
            Some(last) if last.0 == now => *last = entry,
            _ => self.timeline.push(entry),
        }
    }

    fn pick_warm(&self) -> Option<u32> {
        let conc = self.cfg.concurrency;
        let free = self.instances.iter().filter_map(|i| match i.state {
            InstanceState::Warm { busy_slots } if busy_slots < conc => Some((conc - busy_slots, i.id)),
            _ => None,
        });
        match self.cfg.packing {
            Packing::BestFit => free.min().map(|(_, id)| id),
            Packing::FirstAvailable => free.map(|(_, id)| id).min(),
        }
    }

    fn occupy(&mut self, id: u32, now: u64) {
        let inst = &mut self.instances[id as usize];
        if let InstanceState::Warm { busy_slots } = &mut inst.state {
            *busy_slots += 1;
        }
        inst.last_transition_ms = now;
        self.busy_total += 1;
        self.mark(now);
    }

    /// Starts a fresh instance; `None` at the instance cap or for dedicated pools.
    pub fn start_instance(&mut self, now: u64) -> Option<(u32, u64)> {
        if self.cfg.kind == PoolKind::Dedicated || self.live_count() >= self.cfg.max_instances {
            return None;
        }
        let id = self.instances.len() as u32;
        let ready_at_ms = now + self.cfg.cold_start_ms;
        self.instances.push(Instance {
            id,
            state: InstanceState::Provisioning { ready_at_ms, reserved: Vec::new() },
            created_ms: now,
            ready_ms: None,
            retired_ms: None,
            last_transition_ms: now,
            billed_busy_ms: 0,
        });
        self.provisioned_total += self.cfg.concurrency;
        self.mark(now);
        Some((id, ready_at_ms))
    }

    /// Places one invocation: warm slot, then a reservation on a provisioning
    /// (or newly started) serverless instance, then the wait queue.
    pub fn acquire_slot(&mut self, invocation_id: u64, class: LatencyClass, now: u64) -> Placement {
        if let Some(id) = self.pick_warm() {
            self.occupy(id, now);
            return Placement::WarmSlot(id);
        }
        if self.cfg.kind == PoolKind::Serverless {
            let conc = self.cfg.concurrency as usize;
            let provisioning = self.instances.iter_mut().find_map(|i| match &mut i.state {
                InstanceState::Provisioning { ready_at_ms, reserved } if reserved.len() < conc => {
                    reserved.push(invocation_id);
                    Some((i.id, *ready_at_ms))
                }
                _ => None,
            });
            if let Some((instance, ready_at_ms)) = provisioning {
                return Placement::ColdStartStarted { instance, ready_at_ms };
            }
            if let Some((instance, ready_at_ms)) = self.start_instance(now) {
                if let InstanceState::Provisioning { reserved, .. } = &mut self.instances[instance as usize].state {
                    reserved.push(invocation_id);
                }
                return Placement::ColdStartStarted { instance, ready_at_ms };
            }
        }
        if self.pending.len() >= self.cfg.max_queue_depth {
            return Placement::Rejected;
        }
        Placement::Queued(self.pending.enqueue(invocation_id, class, now))
    }

    pub fn release_slot(&mut self, id: u32, held_since_ms: u64, now: u64) -> Result<Release, PoolError> {
        let kind = self.cfg.kind;
        let idle_timeout = self.cfg.idle_timeout_ms;
        let inst = self.instances.get_mut(id as usize).ok_or(PoolError::UnknownInstance(id))?;
        let busy = match &mut inst.state {
            InstanceState::Warm { busy_slots } if *busy_slots > 0 => busy_slots,
            _ => return Err(PoolError::NotBusy(id)),
        };
        *busy -= 1;
        let idle = *busy == 0;
        let busy_ms = now.saturating_sub(held_since_ms);
        inst.billed_busy_ms += busy_ms;
        inst.last_transition_ms = now;
        self.busy_total -= 1;
        self.mark(now);
        let idle_timer_at = (idle && kind == PoolKind::Serverless).then_some(now + idle_timeout);
        Ok(Release { idle_timer_at, busy_ms })
    }

    /// Provisioning → Warm. Returns the reserved invocations (now occupying
    /// slots) and, when the instance came up empty, its idle timer.
    pub fn complete_cold_start(&mut self, id: u32, now: u64) -> (Vec<u64>, Option<u64>) {
        let Some(inst) = self.instances.get_mut(id as usize) else {
            return (Vec::new(), None);
        };
        let reserved = match &mut inst.state {
            InstanceState::Provisioning { reserved, .. } => std::mem::take(reserved),
            _ => return (Vec::new(), None),
        };
        let n = reserved.len() as u32;
        inst.state = InstanceState::Warm { busy_slots: n };
        inst.ready_ms = Some(now);
        inst.last_transition_ms = now;
        self.busy_total += n;
        self.mark(now);
        let timer = (n == 0 && self.cfg.kind == PoolKind::Serverless).then_some(now + self.cfg.idle_timeout_ms);
        (reserved, timer)
    }

    /// Moves queued invocations onto free warm slots in priority order.
    /// Invocations for which `alive` is false are discarded.
    pub fn drain_queue(&mut self, now: u64, mut alive: impl FnMut(u64) -> bool) -> Vec<(u64, u32, u64)> {
        let mut placed = Vec::new();
        while !self.pending.is_empty() {
            let Some(id) = self.pick_warm() else { break };
            let item = self.pending.dequeue().expect("non-empty");
            if !alive(item.item) {
                continue;
            }
            self.occupy(id, now);
            placed.push((item.item, id, item.enqueued_ms));
        }
        placed
    }

    /// Retires the instance if it is still idle since its timer was armed and
    /// the floor allows it.
    pub fn handle_idle_timeout(&mut self, id: u32, now: u64) -> bool {
        if self.cfg.kind == PoolKind::Dedicated {
            return false;
        }
        let live = self.live_count();
        let floor = self.floor();
        let idle_timeout = self.cfg.idle_timeout_ms;
        let Some(inst) = self.instances.get_mut(id as usize) else { return false };
        let idle = matches!(inst.state, InstanceState::Warm { busy_slots: 0 });
        if !idle || now < inst.last_transition_ms + idle_timeout || live <= floor {
            return false;
        }
        inst.state = InstanceState::Retired;
        inst.retired_ms = Some(now);
        inst.last_transition_ms = now;
        self.provisioned_total -= self.cfg.concurrency;
        self.mark(now);
        true
    }

    /// Busy slot-ms over provisioned slot-ms in `[start, end)`.
    pub fn utilization(&self, window: (u64, u64)) -> Result<f64, PoolError> {
        let (busy, provisioned) = self.slot_ms(window);
        if provisioned == 0 {
            return Err(PoolError::EmptyWindow);
        }
        Ok(busy as f64 / provisioned as f64)
    }

    /// `(busy slot-ms, provisioned slot-ms)` integrated over the window.
    pub fn slot_ms(&self, (start, end): (u64, u64)) -> (u128, u128) {
        if start >= end {
            return (0, 0);
        }
        let mut busy = 0u128;
        let mut prov = 0u128;
        for (i, &(t, b, p)) in self.timeline.iter().enumerate() {
            let next = self.timeline.get(i + 1).map_or(u64::MAX, |e| e.0);
            let lo = t.max(start);
            let hi = next.min(end);
            if hi > lo {
                let d = u128::from(hi - lo);
                busy += d * u128::from(b);
                prov += d * u128::from(p);
            }
        }
        (busy, prov)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: PoolKind, conc: u32, initial: u32) -> PoolConfig {
        PoolConfig {
            model_id: "m".into(),
            kind,
            concurrency: conc,
            cold_start_ms: 30_000,
            idle_timeout_ms: 900_000,
            provisioned_min: 0,
            initial_instances: initial,
            max_instances: 100,
            max_queue_depth: 100,
            packing: Packing::BestFit,
        }
    }

    const I: LatencyClass = LatencyClass::Interactive;

    #[test]
    fn best_fit_fills_partially_busy_instance() {
        let mut p = Pool::new(cfg(PoolKind::Dedicated, 4, 1), 0);
        p.acquire_slot(1, I, 0);
        p.acquire_slot(2, I, 0);
        assert_eq!(p.acquire_slot(3, I, 0), Placement::WarmSlot(0));
        assert_eq!(p.instance(0).unwrap().busy_slots(), 3);
    }

    #[test]
    fn best_fit_prefers_tightest_instance() {
        let mut p = Pool::new(cfg(PoolKind::Dedicated, 4, 2), 0);
        p.acquire_slot(1, I, 0); // inst 0 (tie → lowest id)
        assert_eq!(p.acquire_slot(2, I, 0), Placement::WarmSlot(0));
        let mut f = Pool::new(PoolConfig { packing: Packing::FirstAvailable, ..cfg(PoolKind::Dedicated, 4, 2) }, 0);
        f.acquire_slot(1, I, 0);
        assert_eq!(f.acquire_slot(2, I, 0), Placement::WarmSlot(0));
    }

    #[test]
    fn empty_serverless_pool_cold_starts() {
        let mut p = Pool::new(cfg(PoolKind::Serverless, 4, 0), 0);
        assert_eq!(p.acquire_slot(1, I, 0), Placement::ColdStartStarted { instance: 0, ready_at_ms: 30_000 });
        // later arrivals reserve the same provisioning instance
        assert_eq!(p.acquire_slot(2, I, 10), Placement::ColdStartStarted { instance: 0, ready_at_ms: 30_000 });
        assert_eq!(p.live_count(), 1);
        let (reserved, timer) = p.complete_cold_start(0, 30_000);
        assert_eq!(reserved, vec![1, 2]);
        assert_eq!(timer, None);
        assert_eq!(p.busy_slots(), 2);
    }

    #[test]
    fn reservations_overflow_to_new_instance() {
        let mut p = Pool::new(cfg(PoolKind::Serverless, 2, 0), 0);
        p.acquire_slot(1, I, 0);
        p.acquire_slot(2, I, 0);
        assert_eq!(p.acquire_slot(3, I, 5), Placement::ColdStartStarted { instance: 1, ready_at_ms: 30_005 });
    }

    #[test]
    fn full_dedicated_pool_without_queue_rejects() {
        let mut p = Pool::new(PoolConfig { max_queue_depth: 0, ..cfg(PoolKind::Dedicated, 1, 1) }, 0);
        assert_eq!(p.acquire_slot(1, I, 0), Placement::WarmSlot(0));
        assert_eq!(p.acquire_slot(2, I, 0), Placement::Rejected);
    }

    #[test]
    fn queued_work_drains_in_priority_order() {
        let mut p = Pool::new(cfg(PoolKind::Dedicated, 1, 1), 0);
        p.acquire_slot(1, I, 0);
        assert_eq!(p.acquire_slot(2, LatencyClass::Batch, 1), Placement::Queued(1));
        assert_eq!(p.acquire_slot(3, I, 2), Placement::Queued(1));
        p.release_slot(0, 0, 10).unwrap();
        let placed = p.drain_queue(10, |_| true);
        assert_eq!(placed, vec![(3, 0, 2)]);
    }

    #[test]
    fn release_examples() {
        let mut p = Pool::new(cfg(PoolKind::Serverless, 4, 1), 0);
        p.acquire_slot(1, I, 0);
        let r = p.release_slot(0, 0, 100).unwrap();
        assert_eq!(r.idle_timer_at, Some(900_100));
        assert_eq!(r.busy_ms, 100);
        assert_eq!(p.instance(0).unwrap().state, InstanceState::Warm { busy_slots: 0 });

        for i in 0..4 {
            p.acquire_slot(i, I, 200);
        }
        let r = p.release_slot(0, 200, 300).unwrap();
        assert_eq!(r.idle_timer_at, None);
        assert_eq!(p.instance(0).unwrap().state, InstanceState::Warm { busy_slots: 3 });
        assert_eq!(p.instance(0).unwrap().billed_busy_ms, 200);
    }

    #[test]
    fn release_on_retired_is_not_busy() {
        let mut p = Pool::new(cfg(PoolKind::Serverless, 1, 1), 0);
        assert!(p.handle_idle_timeout(0, 900_000));
        assert_eq!(p.release_slot(0, 0, 900_001), Err(PoolError::NotBusy(0)));
    }

    #[test]
    fn idle_timeout_rules() {
        let mut p = Pool::new(cfg(PoolKind::Serverless, 1, 1), 0);
        assert!(!p.handle_idle_timeout(0, 899_999));
        assert!(p.handle_idle_timeout(0, 900_000));
        assert_eq!(p.live_count(), 0);

        let mut floor = Pool::new(PoolConfig { provisioned_min: 1, ..cfg(PoolKind::Serverless, 1, 0) }, 0);
        assert_eq!(floor.live_count(), 1);
        assert!(!floor.handle_idle_timeout(0, 900_000));

        let mut stale = Pool::new(cfg(PoolKind::Serverless, 1, 1), 0);
        stale.acquire_slot(1, I, 500_000);
        stale.release_slot(0, 500_000, 600_000).unwrap();
        assert!(!stale.handle_idle_timeout(0, 900_000));
        assert!(stale.handle_idle_timeout(0, 1_500_000));
    }

    #[test]
    fn dedicated_never_retires() {
        let mut p = Pool::new(cfg(PoolKind::Dedicated, 1, 1), 0);
        assert!(!p.handle_idle_timeout(0, u64::MAX / 2));
    }

    #[test]
    fn utilization_examples() {
        let mut p = Pool::new(cfg(PoolKind::Dedicated, 4, 1), 0);
        for i in 0..4 {
            p.acquire_slot(i, I, 0);
        }
        assert_eq!(p.utilization((0, 1000)).unwrap(), 1.0);
        let mut q = Pool::new(cfg(PoolKind::Dedicated, 4, 1), 0);
        for i in 0..3 {
            q.acquire_slot(i, I, 0);
        }
        assert_eq!(q.utilization((0, 1000)).unwrap(), 0.75);
        let empty = Pool::new(cfg(PoolKind::Serverless, 4, 0), 0);
        assert_eq!(empty.utilization((0, 1000)), Err(PoolError::EmptyWindow));
    }

    #[test]
    fn provisioning_counts_as_provisioned_not_busy() {
        let mut p = Pool::new(cfg(PoolKind::Serverless, 2, 0), 0);
        p.acquire_slot(1, I, 0);
        p.complete_cold_start(0, 30_000);
        // 30 s provisioning idle, then 1 of 2 slots busy for 30 s
        let u = p.utilization((0, 60_000)).unwrap();
        assert!((u - 0.25).abs() < 1e-12);
    }

    /// Two warm serverless instances, two slots each, idle timeout 1000 ms.
    /// a,b land on inst0 and c on inst1 at t=0; a,b release at t=100
    /// (inst0 idle, inst1 one busy). d arrives at t=200: best-fit packs it
    /// onto inst1 and inst0 retires at t=1100; first-available wakes inst0.
    /// c,d release at t=1500. Over [0, 2000):
    ///   busy = 100 + 100 + 1500 + 1300 = 3000 slot-ms for both policies
    ///   provisioned best-fit = 2*1100 + 2*2000 = 6200, first-available = 8000
    #[test]
    fn best_fit_beats_first_available_on_micro_sequence() {
        let run = |packing: Packing| {
            let mut p = Pool::new(PoolConfig { packing, idle_timeout_ms: 1000, ..cfg(PoolKind::Serverless, 2, 2) }, 0);
            assert_eq!(p.acquire_slot(1, I, 0), Placement::WarmSlot(0));
            assert_eq!(p.acquire_slot(2, I, 0), Placement::WarmSlot(0));
            assert_eq!(p.acquire_slot(3, I, 0), Placement::WarmSlot(1));
            p.release_slot(0, 0, 100).unwrap();
            p.release_slot(0, 0, 100).unwrap();
            let d = p.acquire_slot(4, I, 200);
            p.handle_idle_timeout(0, 1100);
            let Placement::WarmSlot(d_on) = d else { panic!("{d:?}") };
            p.release_slot(1, 0, 1500).unwrap();
            p.release_slot(d_on, 200, 1500).unwrap();
            (d_on, p.utilization((0, 2000)).unwrap())
        };
        let (best_inst, best) = run(Packing::BestFit);
        let (first_inst, first) = run(Packing::FirstAvailable);
        assert_eq!((best_inst, first_inst), (1, 0));
        assert_eq!(best, 3000.0 / 6200.0);
        assert_eq!(first, 3000.0 / 8000.0);
        assert!(best >= first);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        #[derive(Debug, Clone)]
        enum Op {
            Acquire,
            Release(usize),
            Ready,
            Idle(u32),
        }

        fn op() -> impl Strategy<Value = Op> {
            prop_oneof![
                3 => Just(Op::Acquire),
                2 => any::<usize>().prop_map(Op::Release),
                1 => Just(Op::Ready),
                1 => (0u32..8).prop_map(Op::Idle),
            ]
        }

        proptest! {
            #[test]
            fn slot_conservation(ops in proptest::collection::vec(op(), 1..120), conc in 1u32..4, min in 0u32..3, dedicated in any::<bool>()) {
                let kind = if dedicated { PoolKind::Dedicated } else { PoolKind::Serverless };
                let mut p = Pool::new(PoolConfig {
                    provisioned_min: if dedicated { 0 } else { min },
                    initial_instances: if dedicated { 2 } else { 0 },
                    max_instances: 6,
                    idle_timeout_ms: 5,
                    ..cfg(kind, conc, 0)
                }, 0);
                let mut in_flight: Vec<(u64, u32)> = Vec::new();
                let mut waiting: Vec<u64> = Vec::new();
                let mut now = 0u64;
                for (n, o) in ops.into_iter().enumerate() {
                    now += 3;
                    match o {
                        Op::Acquire => match p.acquire_slot(n as u64, I, now) {
                            Placement::WarmSlot(id) => in_flight.push((n as u64, id)),
                            Placement::ColdStartStarted { .. } | Placement::Queued(_) => waiting.push(n as u64),
                            Placement::Rejected => {}
                        },
                        Op::Release(k) if !in_flight.is_empty() => {
                            let (_, id) = in_flight.remove(k % in_flight.len());
                            p.release_slot(id, 0, now).unwrap();
                            for (inv, id, _) in p.drain_queue(now, |_| true) {
                                waiting.retain(|w| *w != inv);
                                in_flight.push((inv, id));
                            }
                        }
                        Op::Release(_) => {}
                        Op::Ready => {
                            let ids: Vec<u32> = p.instances().iter().filter(|i| matches!(i.state, InstanceState::Provisioning { .. })).map(|i| i.id).collect();
                            for id in ids {
                                let (res, _) = p.complete_cold_start(id, now);
                                for inv in res {
                                    waiting.retain(|w| *w != inv);
                                    in_flight.push((inv, id));
                                }
                            }
                            for (inv, id, _) in p.drain_queue(now, |_| true) {
                                waiting.retain(|w| *w != inv);
                                in_flight.push((inv, id));
                            }
                        }
                        Op::Idle(id) => { p.handle_idle_timeout(id, now); }
                    }
                    prop_assert_eq!(p.busy_slots() as usize, in_flight.len());
                    let per_instance: u32 = p.instances().iter().map(|i| i.busy_slots()).sum();
                    prop_assert_eq!(per_instance, p.busy_slots());
                    prop_assert!(p.instances().iter().all(|i| i.busy_slots() <= conc));
                    if !dedicated {
                        prop_assert!(p.live_count() >= min);
                    }
                }
            }
        }
    }
}
