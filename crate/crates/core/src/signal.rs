//! Per-intersection phase state machine.
//!
//! Switching between two different green phases always passes through a
//! yellow interval. There is no all-red interval. Requests made before the
//! current green has run for `min_green` are ignored.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::microsim::Light;
use crate::network::RoadNetwork;

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SignalControllerState {
    pub intersection: usize,
    pub num_phases: usize,
    pub current_phase: usize,
    pub in_yellow: bool,
    pub yellow_remaining: f64,
    /// Seconds since the current green started. Not advanced during yellow.
    pub phase_elapsed: f64,
    pub pending_phase: Option<usize>,
    pub min_green: f64,
    pub yellow_duration: f64,
    pub max_stuck: f64,
}

/// What happened to a phase request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestOutcome {
    /// Target is the current phase.
    Unchanged,
    /// Yellow started towards the target.
    Started,
    /// Already in yellow: the pending target was replaced.
    Retargeted,
    /// Current green has not reached its minimum yet.
    HeldByMinGreen,
}

impl SignalControllerState {
    pub fn new(intersection: usize, num_phases: usize, min_green: f64, yellow_duration: f64, max_stuck: f64) -> Self {
        Self {
            intersection,
            num_phases,
            current_phase: 0,
            in_yellow: false,
            yellow_remaining: 0.0,
            phase_elapsed: 0.0,
            pending_phase: None,
            min_green,
            yellow_duration,
            max_stuck,
        }
    }

    /// One controller per intersection of `net`, all starting in phase 0.
    pub fn for_network(net: &RoadNetwork, min_green: f64, max_stuck: f64) -> Vec<Self> {
        net.intersections()
            .iter()
            .enumerate()
            .map(|(k, int)| Self::new(k, net.num_phases(k), min_green, int.yellow_duration, max_stuck))
            .collect()
    }

    /// The boolean exposed to agents.
    pub fn min_green_elapsed(&self) -> bool {
        !self.in_yellow && self.phase_elapsed + EPS >= self.min_green
    }

    pub fn request_phase(&mut self, target: usize) -> Result<RequestOutcome> {
        if target >= self.num_phases {
            return Err(Error::PhaseOutOfRange {
                target,
                phases: self.num_phases,
            });
        }
        if self.in_yellow {
            self.pending_phase = Some(target);
            return Ok(RequestOutcome::Retargeted);
        }
        if target == self.current_phase {
            return Ok(RequestOutcome::Unchanged);
        }
        if !self.min_green_elapsed() {
            return Ok(RequestOutcome::HeldByMinGreen);
        }
        self.start_yellow(target);
        Ok(RequestOutcome::Started)
    }

    fn start_yellow(&mut self, target: usize) {
        self.in_yellow = true;
        self.yellow_remaining = self.yellow_duration;
        self.pending_phase = Some(target);
    }

    /// Advances the clock by `dt`, completing a yellow interval if it ran
    /// out, then applies the lock-in watchdog. Returns true when the watchdog
    /// forced a change.
    pub fn watchdog_tick(&mut self, dt: f64) -> bool {
        if self.in_yellow {
            self.yellow_remaining -= dt;
            if self.yellow_remaining <= EPS {
                let target = self.pending_phase.take().expect("yellow has a target");
                self.in_yellow = false;
                self.yellow_remaining = 0.0;
                // A retarget back to the current phase ends up here too.
                self.current_phase = target;
                self.phase_elapsed = 0.0;
            }
            return false;
        }
        self.phase_elapsed += dt;
        if self.phase_elapsed > self.max_stuck + EPS && self.num_phases > 1 {
            self.start_yellow((self.current_phase + 1) % self.num_phases);
            return true;
        }
        false
    }

    /// Indication for the incoming lane at `approach` (position in the
    /// intersection's incoming order).
    pub fn light(&self, net: &RoadNetwork, approach: usize) -> Light {
        let current = net.phase_mask(self.intersection, self.current_phase)[approach];
        if !current {
            return Light::Red;
        }
        match (self.in_yellow, self.pending_phase) {
            (true, Some(next)) if !net.phase_mask(self.intersection, next)[approach] => Light::Yellow,
            _ => Light::Green,
        }
    }
}

/// Light at the end of every lane. Lanes that do not end at a signal are green.
pub fn lights_for(net: &RoadNetwork, signals: &[SignalControllerState], out: &mut Vec<Light>) {
    out.clear();
    out.extend((0..net.lanes().len()).map(|lane| match net.approach_of(lane) {
        Some((int, pos)) => signals[int].light(net, pos),
        None => Light::Green,
    }));
}

/// Lane pairs from the conflict table that are both showing green or yellow.
pub fn conflict_violations(net: &RoadNetwork, lights: &[Light]) -> Vec<(usize, usize)> {
    net.conflict_pairs()
        .iter()
        .copied()
        .filter(|&(a, b)| lights[a] != Light::Red && lights[b] != Light::Red)
        .collect()
}

/// One row of the signal trace log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignalTraceRow {
    pub clock: f64,
    pub intersection: String,
    pub phase: usize,
    pub in_yellow: bool,
    pub forced: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::grid_generator;

    fn ctrl() -> SignalControllerState {
        SignalControllerState::new(0, 2, 5.0, 3.0, 60.0)
    }

    fn run(c: &mut SignalControllerState, seconds: f64) -> bool {
        let mut forced = false;
        for _ in 0..(seconds / 0.05).round() as usize {
            forced |= c.watchdog_tick(0.05);
        }
        forced
    }

    #[test]
    fn same_phase_is_noop() {
        let mut c = ctrl();
        run(&mut c, 10.0);
        let before = c.clone();
        assert_eq!(c.request_phase(0).unwrap(), RequestOutcome::Unchanged);
        assert_eq!(c, before);
    }

    #[test]
    fn switch_goes_through_three_second_yellow() {
        let mut c = ctrl();
        run(&mut c, 10.0);
        assert_eq!(c.request_phase(1).unwrap(), RequestOutcome::Started);
        assert!(c.in_yellow);
        run(&mut c, 2.95);
        assert!(c.in_yellow);
        assert_eq!(c.current_phase, 0);
        run(&mut c, 0.05);
        assert!(!c.in_yellow);
        assert_eq!(c.current_phase, 1);
        assert_eq!(c.phase_elapsed, 0.0);
    }

    #[test]
    fn out_of_range_target() {
        let mut c = ctrl();
        assert!(matches!(
            c.request_phase(5),
            Err(Error::PhaseOutOfRange { target: 5, phases: 2 })
        ));
    }

    #[test]
    fn request_during_yellow_replaces_pending() {
        let mut c = SignalControllerState::new(0, 3, 5.0, 3.0, 60.0);
        run(&mut c, 10.0);
        c.request_phase(1).unwrap();
        assert_eq!(c.request_phase(2).unwrap(), RequestOutcome::Retargeted);
        run(&mut c, 3.0);
        assert_eq!(c.current_phase, 2);
    }

    #[test]
    fn min_green_holds_requests() {
        let mut c = ctrl();
        run(&mut c, 4.0);
        assert!(!c.min_green_elapsed());
        assert_eq!(c.request_phase(1).unwrap(), RequestOutcome::HeldByMinGreen);
        assert!(!c.in_yellow);
        run(&mut c, 1.0);
        assert!(c.min_green_elapsed());
    }

    #[test]
    fn watchdog_strictly_over_limit() {
        let mut c = ctrl();
        c.phase_elapsed = 59.95;
        assert!(!c.watchdog_tick(0.05));
        assert!((c.phase_elapsed - 60.0).abs() < 1e-9);
        assert!(c.watchdog_tick(0.05));
        assert!(c.in_yellow);
        assert_eq!(c.pending_phase, Some(1));
    }

    #[test]
    fn watchdog_quiet_early() {
        let mut c = ctrl();
        c.phase_elapsed = 10.0;
        assert!(!c.watchdog_tick(0.05));
        assert!(!c.in_yellow);
    }

    #[test]
    fn watchdog_wraps_to_phase_zero() {
        let mut c = ctrl();
        c.current_phase = 1;
        c.phase_elapsed = 61.0;
        assert!(c.watchdog_tick(0.05));
        assert_eq!(c.pending_phase, Some(0));
    }

    #[test]
    fn watchdog_alone_visits_every_phase() {
        let mut c = SignalControllerState::new(0, 3, 5.0, 3.0, 60.0);
        let mut seen = [false; 3];
        let bound = 3.0 * (60.0 + 3.0);
        let mut t = 0.0;
        while t <= bound {
            seen[c.current_phase] = true;
            c.watchdog_tick(0.05);
            t += 0.05;
        }
        assert_eq!(seen, [true; 3]);
    }

    #[test]
    fn yellow_only_on_lanes_losing_green() {
        let net = grid_generator(1, 1, 45.0, 45.0, 13.89).unwrap();
        let mut signals = SignalControllerState::for_network(&net, 5.0, 60.0);
        let mut lights = Vec::new();
        lights_for(&net, &signals, &mut lights);
        let n = net.lane_idx("N0-i0_0").unwrap();
        let e = net.lane_idx("E0-i0_0").unwrap();
        let out = net.lane_idx("i0_0-E0").unwrap();
        assert_eq!(
            (lights[n], lights[e], lights[out]),
            (Light::Green, Light::Red, Light::Green)
        );
        signals[0].phase_elapsed = 10.0;
        signals[0].request_phase(1).unwrap();
        lights_for(&net, &signals, &mut lights);
        assert_eq!((lights[n], lights[e]), (Light::Yellow, Light::Red));
        assert!(conflict_violations(&net, &lights).is_empty());
    }
}
