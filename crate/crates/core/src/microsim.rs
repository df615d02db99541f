//! Discrete-time vehicle dynamics on the lane network.
//!
//! Every lane holds its vehicles front to back (index 0 is closest to the stop
//! line). A vehicle's `position` is its front bumper, measured from the lane
//! start. Vehicles follow a Krauss-type safe speed behind their leader and stop
//! at a red or yellow stop line with a constant-deceleration braking rule.
//! Crossing an intersection takes a fixed delay during which the vehicle is
//! off-lane but holds a space reservation on its next lane.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::network::{shortest_time_route, RoadNetwork};
use crate::scenario::DemandFlow;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// m/s^2
    pub accel: f64,
    /// m/s^2, comfortable braking used for safe speeds.
    pub decel: f64,
    /// m, bumper to bumper when stopped.
    pub min_gap: f64,
    /// m
    pub vehicle_length: f64,
    /// s, driver reaction time in the safe-speed rule.
    pub tau: f64,
    /// m/s; slower vehicles count as stopped.
    pub waiting_threshold: f64,
    /// s spent inside an intersection.
    pub crossing_delay: f64,
    /// Smoothing factor for per-lane travel-time estimates used by routing.
    pub travel_time_smoothing: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            accel: 2.6,
            decel: 4.5,
            min_gap: 2.5,
            vehicle_length: 5.0,
            tau: 1.0,
            waiting_threshold: 0.1,
            crossing_delay: 2.0,
            travel_time_smoothing: 0.1,
        }
    }
}

impl SimParams {
    fn spacing(&self) -> f64 {
        self.vehicle_length + self.min_gap
    }

    /// Highest speed from which a vehicle can still stop within `gap` after
    /// travelling one more tick at that speed.
    pub fn stopping_speed(&self, gap: f64, dt: f64) -> f64 {
        if gap <= 0.0 {
            return 0.0;
        }
        let b = self.decel;
        b * (-dt + (dt * dt + 2.0 * gap / b).sqrt())
    }

    /// Krauss safe speed behind a leader `gap` meters ahead moving at `leader_speed`.
    pub fn following_speed(&self, speed: f64, gap: f64, leader_speed: f64) -> f64 {
        let b = self.decel;
        let v = leader_speed + (gap - leader_speed * self.tau) / ((speed + leader_speed) / (2.0 * b) + self.tau);
        v.max(0.0)
    }

    pub fn braking_distance(&self, speed: f64) -> f64 {
        speed * speed / (2.0 * self.decel)
    }
}

/// Signal indication at the downstream end of a lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Light {
    Green,
    Yellow,
    Red,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vehicle {
    pub id: u32,
    pub route: Arc<[usize]>,
    pub route_index: usize,
    pub position: f64,
    pub speed: f64,
    pub depart_time: f64,
    pub arrive_time: Option<f64>,
    pub accumulated_waiting: f64,
    pub free_flow_time: f64,
    pub route_length: f64,
    /// Distance driven on lanes so far.
    pub distance: f64,
    lane_entry_time: f64,
    transit_remaining: f64,
    inserted: bool,
}

impl Vehicle {
    pub fn lane(&self) -> usize {
        self.route[self.route_index]
    }

    pub fn in_transit(&self) -> bool {
        self.transit_remaining > 0.0
    }

    /// False while the vehicle waits for space at its entry lane.
    pub fn inserted(&self) -> bool {
        self.inserted
    }

    fn is_last_lane(&self) -> bool {
        self.route_index + 1 == self.route.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub vehicle_id: u32,
    pub depart_time: f64,
    pub arrive_time: f64,
    pub accumulated_waiting: f64,
    pub time_lost: f64,
    pub trip_duration: f64,
    pub route_length: f64,
    pub free_flow_time: f64,
}

/// A vehicle that should start its trip at `time`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpawnRequest {
    pub flow: usize,
    pub time: f64,
}

/// Poisson arrivals of every active flow over the window `[t0, t1)`.
pub fn spawn_from_flows(flows: &[DemandFlow], t0: f64, t1: f64, rng: &mut impl rand::Rng) -> Vec<SpawnRequest> {
    let mut out = Vec::new();
    for (k, flow) in flows.iter().enumerate() {
        let overlap = t1.min(flow.end_time) - t0.max(flow.start_time);
        if overlap <= 0.0 || flow.rate <= 0.0 {
            continue;
        }
        let lambda = flow.rate / 3600.0 * overlap;
        let n = Poisson::new(lambda).expect("positive rate").sample(rng) as u64;
        for _ in 0..n {
            out.push(SpawnRequest { flow: k, time: t1 });
        }
    }
    out
}

/// One row of the optional trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub clock: f64,
    pub vehicle_id: u32,
    pub lane_id: String,
    pub position: f64,
    pub speed: f64,
}

#[derive(Debug, Clone)]
pub struct SimState {
    net: Arc<RoadNetwork>,
    params: SimParams,
    dt: f64,
    tick: u64,
    flows: Vec<DemandFlow>,
    rng: ChaCha8Rng,
    vehicles: Vec<Vehicle>,
    lanes: Vec<VecDeque<u32>>,
    reserved: Vec<u32>,
    transit: Vec<u32>,
    /// Per entry lane, vehicles waiting for insertion.
    deferred: Vec<VecDeque<u32>>,
    completed: Vec<TripRecord>,
    travel_time: Vec<f64>,
    active: usize,
}

impl SimState {
    pub fn new(net: Arc<RoadNetwork>, flows: Vec<DemandFlow>, params: SimParams, dt: f64, seed: u64) -> Self {
        let n = net.lanes().len();
        let travel_time = net.lanes().iter().map(|l| l.free_flow_time()).collect();
        Self {
            net,
            params,
            dt,
            tick: 0,
            flows,
            rng: ChaCha8Rng::seed_from_u64(seed),
            vehicles: Vec::new(),
            lanes: vec![VecDeque::new(); n],
            reserved: vec![0; n],
            transit: Vec::new(),
            deferred: vec![VecDeque::new(); n],
            completed: Vec::new(),
            travel_time,
            active: 0,
        }
    }

    pub fn net(&self) -> &RoadNetwork {
        &self.net
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    /// Seconds since the start; always `tick * dt`.
    pub fn clock(&self) -> f64 {
        self.tick as f64 * self.dt
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    pub fn completed(&self) -> &[TripRecord] {
        &self.completed
    }

    /// Vehicles on the network or crossing an intersection.
    pub fn active_count(&self) -> usize {
        self.active
    }

    pub fn deferred_count(&self) -> usize {
        self.deferred.iter().map(VecDeque::len).sum()
    }

    pub fn spawned_count(&self) -> usize {
        self.vehicles.len()
    }

    /// Vehicles not yet arrived (on lanes, crossing, or waiting to enter).
    pub fn unfinished(&self) -> impl Iterator<Item = &Vehicle> {
        self.vehicles.iter().filter(|v| v.arrive_time.is_none())
    }

    /// True once every flow has ended and every vehicle has arrived.
    pub fn finished(&self) -> bool {
        let demand_end = self.flows.iter().map(|f| f.end_time).fold(0.0, f64::max);
        self.clock() >= demand_end && self.completed.len() == self.vehicles.len()
    }

    /// Vehicles on `lane`, closest to the stop line first.
    pub fn lane_vehicles(&self, lane: usize) -> impl Iterator<Item = &Vehicle> + '_ {
        self.lanes[lane].iter().map(move |&id| &self.vehicles[id as usize])
    }

    pub fn lane_len(&self, lane: usize) -> usize {
        self.lanes[lane].len()
    }

    /// Vehicles queued (not yet inserted) behind the entry of `lane`.
    pub fn deferred_on(&self, lane: usize) -> usize {
        self.deferred[lane].len()
    }

    pub fn travel_time_estimates(&self) -> &[f64] {
        &self.travel_time
    }

    /// (occupancy, queue) inside the last `detection_zone` meters of `lane`.
    pub fn lane_ground_truth(&self, lane: usize, detection_zone: f64) -> (u32, u32) {
        let length = self.net.lane(lane).length;
        let mut occupancy = 0;
        let mut queue = 0;
        for v in self.lane_vehicles(lane) {
            if length - v.position > detection_zone {
                break;
            }
            occupancy += 1;
            if v.speed < self.params.waiting_threshold {
                queue += 1;
            }
        }
        (occupancy, queue)
    }

    /// Stopped vehicles anywhere on `lane`.
    pub fn lane_stopped(&self, lane: usize) -> u32 {
        let thr = self.params.waiting_threshold;
        self.lane_vehicles(lane).filter(|v| v.speed < thr).count() as u32
    }

    /// Sum of accumulated waiting of vehicles currently on `lane`.
    pub fn lane_waiting(&self, lane: usize) -> f64 {
        self.lane_vehicles(lane).map(|v| v.accumulated_waiting).sum()
    }

    pub fn trajectory_rows(&self) -> Vec<TrajectoryRow> {
        let clock = self.clock();
        let mut rows = Vec::new();
        for (lane, queue) in self.lanes.iter().enumerate() {
            for &id in queue {
                let v = &self.vehicles[id as usize];
                rows.push(TrajectoryRow {
                    clock,
                    vehicle_id: v.id,
                    lane_id: self.net.lane(lane).id.clone(),
                    position: v.position,
                    speed: v.speed,
                });
            }
        }
        rows.sort_by_key(|r| r.vehicle_id);
        rows
    }

    /// Advances the simulation by one tick. `lights` gives the indication at
    /// the end of every lane; lanes that end at a boundary node are ignored.
    pub fn step(&mut self, lights: &[Light]) {
        assert_eq!(lights.len(), self.lanes.len(), "one light per lane");
        let t0 = self.clock();
        let t1 = (self.tick + 1) as f64 * self.dt;

        let requests = spawn_from_flows(&self.flows, t0, t1, &mut self.rng);
        for req in requests {
            self.enqueue(req);
        }

        for lane in 0..self.lanes.len() {
            self.move_lane(lane, lights[lane], t1);
        }
        self.advance_transit(t1);
        self.insert_deferred(t1);
        self.tick += 1;

        #[cfg(debug_assertions)]
        self.check_gaps();
    }

    fn enqueue(&mut self, req: SpawnRequest) {
        let flow = &self.flows[req.flow];
        let route = match shortest_time_route(&self.net, &flow.origin, &flow.destination, &self.travel_time) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("dropping spawn: {e}");
                return;
            }
        };
        let crossings = (route.len() - 1) as f64;
        let route_length: f64 = route.iter().map(|&l| self.net.lane(l).length).sum();
        let free_flow_time = route.iter().map(|&l| self.net.lane(l).free_flow_time()).sum::<f64>()
            + crossings * self.params.crossing_delay;
        let id = self.vehicles.len() as u32;
        let entry = route[0];
        self.vehicles.push(Vehicle {
            id,
            route: route.into(),
            route_index: 0,
            position: 0.0,
            speed: 0.0,
            depart_time: req.time,
            arrive_time: None,
            accumulated_waiting: 0.0,
            free_flow_time,
            route_length,
            distance: 0.0,
            lane_entry_time: req.time,
            transit_remaining: 0.0,
            inserted: false,
        });
        self.deferred[entry].push_back(id);
    }

    /// Back bumper of the last vehicle on `lane`, minus the space promised to
    /// vehicles currently crossing into it. Infinite for an empty lane.
    fn entry_tail(&self, lane: usize) -> f64 {
        let tail = match self.lanes[lane].back() {
            Some(&id) => self.vehicles[id as usize].position - self.params.vehicle_length,
            None => f64::INFINITY,
        };
        tail - self.reserved[lane] as f64 * self.params.spacing()
    }

    fn tail_speed(&self, lane: usize) -> f64 {
        match self.lanes[lane].back() {
            Some(&id) => self.vehicles[id as usize].speed,
            None => self.net.lane(lane).speed_limit,
        }
    }

    fn move_lane(&mut self, lane: usize, light: Light, now: f64) {
        if self.lanes[lane].is_empty() {
            return;
        }
        let p = self.params.clone();
        let dt = self.dt;
        let length = self.net.lane(lane).length;
        let vmax = self.net.lane(lane).speed_limit;
        // (back bumper, speed) of the vehicle ahead after its update
        let mut leader: Option<(f64, f64)> = None;
        let mut crossed = 0;
        // The front vehicle must stay behind the line this tick.
        let mut held = false;
        for k in 0..self.lanes[lane].len() {
            let id = self.lanes[lane][k] as usize;
            let (pos, speed, last_lane, next) = {
                let v = &self.vehicles[id];
                let next = (!v.is_last_lane()).then(|| v.route[v.route_index + 1]);
                (v.position, v.speed, v.is_last_lane(), next)
            };
            let mut target = (vmax).min(speed + p.accel * dt);
            match leader {
                Some((back, leader_speed)) => {
                    let gap = (back - p.min_gap - pos).max(0.0);
                    target = target.min(p.following_speed(speed, gap, leader_speed)).min(gap / dt);
                }
                None if last_lane => {}
                None => {
                    let next = next.expect("not last lane");
                    let to_line = (length - pos).max(0.0);
                    let stop = match light {
                        Light::Red => true,
                        Light::Yellow => p.braking_distance(speed) <= to_line,
                        Light::Green => false,
                    } || self.entry_tail(next) < p.min_gap;
                    if stop {
                        held = true;
                        target = target.min(p.stopping_speed(to_line, dt)).min(to_line / dt);
                    } else {
                        let gap = to_line + self.entry_tail(next) - p.min_gap;
                        if gap.is_finite() {
                            target = target.min(p.following_speed(speed, gap, self.tail_speed(next)));
                        }
                    }
                }
            }
            let new_speed = target.max(0.0);
            let v = &mut self.vehicles[id];
            v.speed = new_speed;
            v.position = pos + new_speed * dt;
            v.distance += new_speed * dt;
            if new_speed < p.waiting_threshold {
                v.accumulated_waiting += dt;
            }
            if held && v.position >= length {
                v.distance -= v.position - length;
                v.position = length;
                v.speed = 0.0;
            } else if v.position >= length {
                crossed += 1;
            }
            leader = Some((v.position - p.vehicle_length, new_speed));
        }

        // Vehicles past the end leave the lane, in order from the front.
        for _ in 0..crossed {
            let id = *self.lanes[lane].front().expect("crossed vehicle") as usize;
            if self.vehicles[id].position < length {
                break;
            }
            let last_lane = self.vehicles[id].is_last_lane();
            if !last_lane {
                let next = self.vehicles[id].route[self.vehicles[id].route_index + 1];
                if self.entry_tail(next) < p.min_gap {
                    // No room after all: hold at the line.
                    let v = &mut self.vehicles[id];
                    v.distance -= v.position - length;
                    v.position = length;
                    v.speed = 0.0;
                    break;
                }
                self.reserved[next] += 1;
            }
            self.lanes[lane].pop_front();
            let observed = now - self.vehicles[id].lane_entry_time;
            let a = p.travel_time_smoothing;
            self.travel_time[lane] = (1.0 - a) * self.travel_time[lane] + a * observed;
            let v = &mut self.vehicles[id];
            let overshoot = v.position - length;
            if last_lane {
                v.distance -= overshoot;
                v.arrive_time = Some(now);
                v.position = length;
                let duration = now - v.depart_time;
                self.completed.push(TripRecord {
                    vehicle_id: v.id,
                    depart_time: v.depart_time,
                    arrive_time: now,
                    accumulated_waiting: v.accumulated_waiting,
                    time_lost: (duration - v.free_flow_time).max(0.0),
                    trip_duration: duration,
                    route_length: v.route_length,
                    free_flow_time: v.free_flow_time,
                });
                self.active -= 1;
            } else {
                v.position = overshoot;
                v.route_index += 1;
                v.transit_remaining = p.crossing_delay;
                self.transit.push(id as u32);
            }
        }
    }

    fn advance_transit(&mut self, now: f64) {
        let dt = self.dt;
        let mut still = Vec::with_capacity(self.transit.len());
        let pending = std::mem::take(&mut self.transit);
        for id in pending {
            let v = &mut self.vehicles[id as usize];
            v.transit_remaining -= dt;
            if v.transit_remaining > 1e-9 {
                still.push(id);
                continue;
            }
            let lane = v.lane();
            if !self.has_entry_room(lane) {
                // Blocked inside the intersection until the lane clears.
                self.vehicles[id as usize].transit_remaining = f64::MIN_POSITIVE;
                still.push(id);
                continue;
            }
            self.vehicles[id as usize].transit_remaining = 0.0;
            self.reserved[lane] -= 1;
            self.place_at_entry(id, lane, now);
        }
        self.transit = still;
    }

    fn has_entry_room(&self, lane: usize) -> bool {
        match self.lanes[lane].back() {
            Some(&b) => self.vehicles[b as usize].position - self.params.vehicle_length >= self.params.min_gap,
            None => true,
        }
    }

    /// Puts vehicle `id` at the start of `lane` behind its last vehicle.
    fn place_at_entry(&mut self, id: u32, lane: usize, now: f64) {
        let p = &self.params;
        let (tail, tail_speed) = match self.lanes[lane].back() {
            Some(&b) => {
                let lv = &self.vehicles[b as usize];
                (lv.position - p.vehicle_length, lv.speed)
            }
            None => (f64::INFINITY, 0.0),
        };
        let vmax = self.net.lane(lane).speed_limit;
        let v = &mut self.vehicles[id as usize];
        let limit = tail - p.min_gap;
        v.position = v.position.min(limit).max(0.0);
        if tail.is_finite() {
            let gap = (tail - p.min_gap - v.position).max(0.0);
            v.speed = v.speed.min(p.following_speed(v.speed, gap, tail_speed));
        }
        v.speed = v.speed.min(vmax);
        v.lane_entry_time = now;
        self.lanes[lane].push_back(id);
    }

    fn insert_deferred(&mut self, now: f64) {
        for lane in 0..self.deferred.len() {
            while let Some(&id) = self.deferred[lane].front() {
                if self.entry_tail(lane) < self.params.min_gap {
                    break;
                }
                self.deferred[lane].pop_front();
                let vmax = self.net.lane(lane).speed_limit;
                let v = &mut self.vehicles[id as usize];
                v.inserted = true;
                v.speed = vmax;
                v.position = 0.0;
                self.active += 1;
                self.place_at_entry(id, lane, now);
            }
            // Vehicles still waiting at the entry are stopped.
            for &id in &self.deferred[lane] {
                let v = &mut self.vehicles[id as usize];
                if v.depart_time < now {
                    v.accumulated_waiting += self.dt;
                }
            }
        }
    }

    #[cfg(debug_assertions)]
    fn check_gaps(&self) {
        for (lane, queue) in self.lanes.iter().enumerate() {
            for pair in queue.iter().collect::<Vec<_>>().windows(2) {
                let (a, b) = (&self.vehicles[*pair[0] as usize], &self.vehicles[*pair[1] as usize]);
                let gap = a.position - self.params.vehicle_length - b.position;
                debug_assert!(
                    gap >= self.params.min_gap - 1e-6,
                    "overlap on lane {}: gap {gap} between {} and {}",
                    self.net.lane(lane).id,
                    a.id,
                    b.id
                );
            }
        }
    }
}
