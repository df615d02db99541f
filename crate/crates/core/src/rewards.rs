//! Per-intersection reward functions, computed from ground-truth state.
//!
//! Each function is a stateless trait object selected by name. The one
//! differenced reward reads the previous snapshot carried in the context.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::microsim::SimState;

/// Everything a reward may look at for one intersection at one instant.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RewardContext {
    pub intersection: usize,
    /// W for each incoming lane: summed accumulated waiting of vehicles on it.
    pub incoming_waiting: Vec<f64>,
    /// Vehicle count per incoming lane.
    pub incoming_counts: Vec<u32>,
    /// Stopped vehicle count per incoming lane.
    pub incoming_stopped: Vec<u32>,
    /// Vehicle count per outgoing lane.
    pub outgoing_counts: Vec<u32>,
    /// Speeds of vehicles near the intersection.
    pub speeds: Vec<f64>,
    pub v_max: f64,
    /// Total incoming waiting at the previous reward call, if any.
    pub previous_total_waiting: Option<f64>,
}

impl RewardContext {
    /// Snapshot from the simulation. `vicinity` limits the speed sample to
    /// vehicles within that many meters of the intersection.
    pub fn from_sim(
        sim: &SimState,
        intersection: usize,
        vicinity: Option<f64>,
        previous_total_waiting: Option<f64>,
    ) -> Self {
        let net = sim.net();
        let incoming = net.incoming(intersection);
        let outgoing = net.outgoing(intersection);
        let mut speeds = Vec::new();
        for &lane in incoming {
            let len = net.lane(lane).length;
            speeds.extend(
                sim.lane_vehicles(lane)
                    .filter(|v| vicinity.map_or(true, |r| len - v.position <= r))
                    .map(|v| v.speed),
            );
        }
        for &lane in outgoing {
            speeds.extend(
                sim.lane_vehicles(lane)
                    .filter(|v| vicinity.map_or(true, |r| v.position <= r))
                    .map(|v| v.speed),
            );
        }
        let v_max = incoming
            .iter()
            .chain(outgoing)
            .map(|&l| net.lane(l).speed_limit)
            .fold(0.0, f64::max);
        Self {
            intersection,
            incoming_waiting: incoming.iter().map(|&l| sim.lane_waiting(l)).collect(),
            incoming_counts: incoming.iter().map(|&l| sim.lane_len(l) as u32).collect(),
            incoming_stopped: incoming.iter().map(|&l| sim.lane_stopped(l)).collect(),
            outgoing_counts: outgoing.iter().map(|&l| sim.lane_len(l) as u32).collect(),
            speeds,
            v_max,
            previous_total_waiting,
        }
    }

    pub fn total_waiting(&self) -> f64 {
        self.incoming_waiting.iter().sum()
    }
}

pub trait RewardFunction: Send + Sync {
    fn name(&self) -> &'static str;
    fn compute(&self, ctx: &RewardContext) -> f64;
}

/// Previous incoming waiting minus current: shrinking waits pay off.
pub struct DiffWaiting;

impl RewardFunction for DiffWaiting {
    fn name(&self) -> &'static str {
        "diff_wait"
    }

    fn compute(&self, ctx: &RewardContext) -> f64 {
        match ctx.previous_total_waiting {
            Some(prev) => prev - ctx.total_waiting(),
            None => 0.0,
        }
    }
}

/// Mean speed near the intersection over the speed limit. 1.0 with nobody around.
pub struct AverageSpeed;

impl RewardFunction for AverageSpeed {
    fn name(&self) -> &'static str {
        "avg_speed"
    }

    fn compute(&self, ctx: &RewardContext) -> f64 {
        if ctx.speeds.is_empty() {
            return 1.0;
        }
        let mean = ctx.speeds.iter().map(|v| v / ctx.v_max).sum::<f64>() / ctx.speeds.len() as f64;
        mean.clamp(0.0, 1.0)
    }
}

pub struct QueueLength;

impl RewardFunction for QueueLength {
    fn name(&self) -> &'static str {
        "queue"
    }

    fn compute(&self, ctx: &RewardContext) -> f64 {
        -(ctx.incoming_stopped.iter().map(|&n| n as f64).sum::<f64>())
    }
}

/// Outgoing minus incoming vehicle count.
pub struct Pressure;

impl RewardFunction for Pressure {
    fn name(&self) -> &'static str {
        "pressure"
    }

    fn compute(&self, ctx: &RewardContext) -> f64 {
        let out: u32 = ctx.outgoing_counts.iter().sum();
        let inc: u32 = ctx.incoming_counts.iter().sum();
        out as f64 - inc as f64
    }
}

pub const REWARD_NAMES: [&str; 4] = ["diff_wait", "avg_speed", "queue", "pressure"];

/// Looks up a reward function by name.
pub fn reward_by_name(name: &str) -> Result<Arc<dyn RewardFunction>> {
    let f: Arc<dyn RewardFunction> = match name {
        "diff_wait" => Arc::new(DiffWaiting),
        "avg_speed" => Arc::new(AverageSpeed),
        "queue" => Arc::new(QueueLength),
        "pressure" => Arc::new(Pressure),
        _ => {
            return Err(Error::UnknownName {
                kind: "reward",
                name: name.to_string(),
                known: REWARD_NAMES.iter().map(|s| s.to_string()).collect(),
            })
        }
    };
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ctx() -> RewardContext {
        RewardContext {
            v_max: 13.89,
            ..Default::default()
        }
    }

    #[test]
    fn diff_wait_sign_and_bootstrap() {
        let mut c = ctx();
        c.incoming_waiting = vec![30.0, 30.0];
        assert_eq!(DiffWaiting.compute(&c), 0.0);
        c.previous_total_waiting = Some(100.0);
        assert_eq!(DiffWaiting.compute(&c), 40.0);
        c.previous_total_waiting = Some(60.0);
        assert_eq!(DiffWaiting.compute(&c), 0.0);
    }

    #[test]
    fn average_speed_cases() {
        let mut c = ctx();
        assert_eq!(AverageSpeed.compute(&c), 1.0);
        c.speeds = vec![0.0, 0.0];
        assert_eq!(AverageSpeed.compute(&c), 0.0);
        c.speeds = vec![13.89 / 2.0, 13.89];
        assert!((AverageSpeed.compute(&c) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn queue_cases() {
        let mut c = ctx();
        assert_eq!(QueueLength.compute(&c), 0.0);
        c.incoming_stopped = vec![3, 0, 2];
        assert_eq!(QueueLength.compute(&c), -5.0);
        c.incoming_stopped = vec![0, 0, 0, 7];
        assert_eq!(QueueLength.compute(&c), -7.0);
    }

    #[test]
    fn pressure_cases() {
        let mut c = ctx();
        assert_eq!(Pressure.compute(&c), 0.0);
        c.outgoing_counts = vec![2, 3];
        c.incoming_counts = vec![1, 4];
        assert_eq!(Pressure.compute(&c), 0.0);
        c.outgoing_counts = vec![7];
        c.incoming_counts = vec![1, 2];
        assert_eq!(Pressure.compute(&c), 4.0);
    }

    #[test]
    fn registry_names() {
        for name in REWARD_NAMES {
            assert_eq!(reward_by_name(name).unwrap().name(), name);
        }
        let err = reward_by_name("speedy").err().unwrap().to_string();
        for name in REWARD_NAMES {
            assert!(err.contains(name));
        }
    }

    proptest! {
        #[test]
        fn average_speed_in_unit_interval(speeds in prop::collection::vec(0.0..13.89f64, 0..30)) {
            let c = RewardContext { speeds, v_max: 13.89, ..Default::default() };
            let r = AverageSpeed.compute(&c);
            prop_assert!((0.0..=1.0).contains(&r));
        }

        #[test]
        fn queue_nonpositive(stopped in prop::collection::vec(0u32..30, 0..6)) {
            let c = RewardContext { incoming_stopped: stopped.clone(), ..Default::default() };
            let r = QueueLength.compute(&c);
            prop_assert!(r <= 0.0);
            prop_assert_eq!(r == 0.0, stopped.iter().all(|&s| s == 0));
        }

        #[test]
        fn pressure_antisymmetric(a in prop::collection::vec(0u32..30, 0..6), b in prop::collection::vec(0u32..30, 0..6)) {
            let c = RewardContext { incoming_counts: a.clone(), outgoing_counts: b.clone(), ..Default::default() };
            let swapped = RewardContext { incoming_counts: b, outgoing_counts: a, ..Default::default() };
            prop_assert_eq!(Pressure.compute(&c), -Pressure.compute(&swapped));
        }

        #[test]
        fn diff_wait_telescopes(totals in prop::collection::vec(0.0..500.0f64, 2..20)) {
            let mut prev = None;
            let mut sum = 0.0;
            for &t in &totals {
                let c = RewardContext { incoming_waiting: vec![t], previous_total_waiting: prev, ..Default::default() };
                sum += DiffWaiting.compute(&c);
                prev = Some(t);
            }
            let expected = totals[0] - totals[totals.len() - 1];
            prop_assert!((sum - expected).abs() < 1e-9);
        }
    }
}
