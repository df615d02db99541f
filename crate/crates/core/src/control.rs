//! Signal controllers, selected by name: a fixed-time plan, a gap-actuated
//! controller, and Q-table agents (deployed or learning).

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::marl::{
    act_deployment, encode_state, epsilon_schedule, q_update, select_action, AgentParams, AgentStateKey, TableSet,
};
use crate::microsim::SimState;
use crate::network::RoadNetwork;
use crate::perception::SensorReading;
use crate::rewards::{RewardContext, RewardFunction};
use crate::scenario::{ActuatedConfig, ScenarioConfig, StaticPlanConfig};
use crate::signal::SignalControllerState;

const EPS: f64 = 1e-9;

/// One coherent sensor snapshot, taken at a decision boundary.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub clock: f64,
    /// One reading per monitored lane.
    pub readings: &'a [SensorReading],
    /// Lane index -> position in `readings`.
    pub index: &'a [Option<usize>],
}

impl Observation<'_> {
    pub fn for_lanes(&self, lanes: &[usize]) -> Vec<SensorReading> {
        lanes
            .iter()
            .filter_map(|&l| self.index.get(l).copied().flatten().map(|k| self.readings[k]))
            .collect()
    }
}

pub trait Controller: Send {
    fn name(&self) -> &str;

    /// Called before every episode.
    fn reset(&mut self) {}

    /// Called every decision period with a fresh snapshot.
    fn on_decision(
        &mut self,
        _sim: &SimState,
        _obs: &Observation,
        _signals: &mut [SignalControllerState],
    ) -> Result<()> {
        Ok(())
    }

    /// Called every simulation tick.
    fn on_tick(&mut self, _sim: &SimState, _signals: &mut [SignalControllerState]) -> Result<()> {
        Ok(())
    }
}

pub const CONTROLLER_NAMES: [&str; 3] = ["static", "actuated", "agents"];

/// What a controller may be built from.
pub struct ControllerContext<'a> {
    pub scenario: &'a ScenarioConfig,
    pub net: &'a RoadNetwork,
    /// Required by `agents`.
    pub tables: Option<Arc<TableSet>>,
}

pub fn controller_by_name(name: &str, ctx: &ControllerContext) -> Result<Box<dyn Controller>> {
    match name {
        "static" => Ok(Box::new(FixedTime::new(&ctx.scenario.static_plan, ctx.net)?)),
        "actuated" => Ok(Box::new(Actuated::new(ctx.scenario.actuated.clone(), ctx.net))),
        "agents" => {
            let tables = ctx
                .tables
                .clone()
                .ok_or_else(|| Error::Config("the agents controller needs a Q-table file".to_string()))?;
            Ok(Box::new(Agents::new(tables, ctx.net)?))
        }
        other => Err(Error::UnknownName {
            kind: "controller",
            name: other.to_string(),
            known: CONTROLLER_NAMES.iter().map(|s| s.to_string()).collect(),
        }),
    }
}

/// Cycles through the phases with fixed green times; every intersection runs
/// the same plan from time zero.
pub struct FixedTime {
    greens: Vec<f64>,
}

impl FixedTime {
    pub fn new(plan: &StaticPlanConfig, net: &RoadNetwork) -> Result<Self> {
        for (k, int) in net.intersections().iter().enumerate() {
            let phases = net.num_phases(k);
            if plan.greens.len() != phases {
                return Err(Error::SignalPlan(format!(
                    "{} has {phases} phases, plan has {} greens",
                    int.id,
                    plan.greens.len()
                )));
            }
            let total = plan.greens.iter().sum::<f64>() + phases as f64 * int.yellow_duration;
            if (total - plan.cycle).abs() > 1e-6 {
                return Err(Error::SignalPlan(format!(
                    "greens plus yellows at {} add up to {total} s, cycle is {} s",
                    int.id, plan.cycle
                )));
            }
        }
        if plan.greens.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::SignalPlan("green times must be positive".to_string()));
        }
        Ok(Self {
            greens: plan.greens.clone(),
        })
    }
}

impl Controller for FixedTime {
    fn name(&self) -> &str {
        "static"
    }

    fn on_tick(&mut self, _sim: &SimState, signals: &mut [SignalControllerState]) -> Result<()> {
        for s in signals {
            if !s.in_yellow && s.phase_elapsed + EPS >= self.greens[s.current_phase] {
                s.request_phase((s.current_phase + 1) % s.num_phases)?;
            }
        }
        Ok(())
    }
}

/// Extends the green while vehicles keep arriving over the presence
/// detectors. After min green, switches to the next phase once no green lane
/// has seen a vehicle for `gap_threshold` seconds, or at `max_green`.
pub struct Actuated {
    cfg: ActuatedConfig,
    /// Green time elapsed at the last detection, per intersection.
    last_seen: Vec<f64>,
}

impl Actuated {
    pub fn new(cfg: ActuatedConfig, net: &RoadNetwork) -> Self {
        Self {
            cfg,
            last_seen: vec![0.0; net.intersections().len()],
        }
    }

    fn detected(&self, sim: &SimState, lane: usize) -> bool {
        let len = sim.net().lane(lane).length;
        sim.lane_vehicles(lane)
            .next()
            .is_some_and(|v| len - v.position <= self.cfg.detector_length)
    }
}

impl Controller for Actuated {
    fn name(&self) -> &str {
        "actuated"
    }

    fn reset(&mut self) {
        self.last_seen.iter_mut().for_each(|t| *t = 0.0);
    }

    fn on_tick(&mut self, sim: &SimState, signals: &mut [SignalControllerState]) -> Result<()> {
        let net = sim.net();
        for (k, s) in signals.iter_mut().enumerate() {
            if s.in_yellow {
                self.last_seen[k] = 0.0;
                continue;
            }
            let green = net.phase_mask(k, s.current_phase);
            let active = net
                .incoming(k)
                .iter()
                .zip(green)
                .any(|(&lane, &g)| g && self.detected(sim, lane));
            if active {
                self.last_seen[k] = s.phase_elapsed;
            }
            if !s.min_green_elapsed() {
                continue;
            }
            // the gap clock starts no earlier than the end of min green
            let gap = s.phase_elapsed - self.last_seen[k].max(s.min_green);
            let gapped = gap + EPS >= self.cfg.gap_threshold;
            let maxed = s.phase_elapsed + EPS >= self.cfg.max_green;
            if gapped || maxed {
                s.request_phase((s.current_phase + 1) % s.num_phases)?;
            }
        }
        Ok(())
    }
}

/// Deployed Q-table agents: greedy on known states, no action on unseen ones.
pub struct Agents {
    tables: Arc<TableSet>,
    lanes: Vec<Vec<usize>>,
    /// (clock, intersection) of every decision made in an unseen state.
    pub unseen: Vec<(f64, usize)>,
    /// (clock, intersection, state) of every decision.
    pub visited: Vec<(f64, usize, AgentStateKey)>,
    record_states: bool,
}

impl Agents {
    pub fn new(tables: Arc<TableSet>, net: &RoadNetwork) -> Result<Self> {
        tables.check_network(net)?;
        Ok(Self {
            tables,
            lanes: (0..net.intersections().len())
                .map(|k| net.incoming(k).to_vec())
                .collect(),
            unseen: Vec::new(),
            visited: Vec::new(),
            record_states: false,
        })
    }

    /// Keep every visited state in `visited`.
    pub fn record_states(mut self) -> Self {
        self.record_states = true;
        self
    }
}

impl Controller for Agents {
    fn name(&self) -> &str {
        "agents"
    }

    fn reset(&mut self) {
        self.unseen.clear();
        self.visited.clear();
    }

    fn on_decision(&mut self, _sim: &SimState, obs: &Observation, signals: &mut [SignalControllerState]) -> Result<()> {
        let cap = self.tables.params.count_cap;
        for (k, s) in signals.iter_mut().enumerate() {
            let readings = obs.for_lanes(&self.lanes[k]);
            let key = encode_state(s.current_phase, s.min_green_elapsed(), &readings, &self.lanes[k], cap)?;
            let action = act_deployment(&self.tables.agents[k].table, &key);
            if self.record_states {
                self.visited.push((obs.clock, k, key));
            }
            match action {
                Some(a) if !s.in_yellow => {
                    s.request_phase(a)?;
                }
                Some(_) => {}
                None => self.unseen.push((obs.clock, k)),
            }
        }
        Ok(())
    }
}

/// Agents that explore and update their tables from ground-truth rewards.
/// The reward for an action taken at one decision is collected at the next.
pub struct LearningAgents {
    pub tables: TableSet,
    params: AgentParams,
    reward: Arc<dyn RewardFunction>,
    vicinity: Option<f64>,
    rng: ChaCha8Rng,
    lanes: Vec<Vec<usize>>,
    pending: Vec<Option<(AgentStateKey, usize)>>,
    previous_waiting: Vec<Option<f64>>,
    /// Global decision counter driving the exploration schedule.
    pub step: u64,
    pub horizon: u64,
    wait_sum: Vec<f64>,
    decisions: u64,
}

impl LearningAgents {
    pub fn new(
        tables: TableSet,
        reward: Arc<dyn RewardFunction>,
        vicinity: Option<f64>,
        horizon: u64,
        seed: u64,
        net: &RoadNetwork,
    ) -> Result<Self> {
        tables.check_network(net)?;
        let n = net.intersections().len();
        Ok(Self {
            params: tables.params.clone(),
            tables,
            reward,
            vicinity,
            rng: ChaCha8Rng::seed_from_u64(seed),
            lanes: (0..n).map(|k| net.incoming(k).to_vec()).collect(),
            pending: vec![None; n],
            previous_waiting: vec![None; n],
            step: 0,
            horizon,
            wait_sum: vec![0.0; n],
            decisions: 0,
        })
    }

    /// Per intersection: mean over this episode's decisions of the summed
    /// accumulated waiting on its incoming lanes.
    pub fn episode_mean_waits(&self) -> Vec<f64> {
        let n = self.decisions.max(1) as f64;
        self.wait_sum.iter().map(|w| w / n).collect()
    }
}

impl Controller for LearningAgents {
    fn name(&self) -> &str {
        "agents"
    }

    fn reset(&mut self) {
        self.pending.iter_mut().for_each(|p| *p = None);
        self.previous_waiting.iter_mut().for_each(|p| *p = None);
        self.wait_sum.iter_mut().for_each(|w| *w = 0.0);
        self.decisions = 0;
    }

    fn on_decision(&mut self, sim: &SimState, obs: &Observation, signals: &mut [SignalControllerState]) -> Result<()> {
        let epsilon = epsilon_schedule(self.step, self.horizon, &self.params);
        self.step += 1;
        self.decisions += 1;
        let cap = self.params.count_cap;
        for (k, s) in signals.iter_mut().enumerate() {
            let ctx = RewardContext::from_sim(sim, k, self.vicinity, self.previous_waiting[k]);
            let readings = obs.for_lanes(&self.lanes[k]);
            let key = encode_state(s.current_phase, s.min_green_elapsed(), &readings, &self.lanes[k], cap)?;
            let table = &mut self.tables.agents[k].table;
            if let Some((prev, a)) = self.pending[k].take() {
                let r = self.reward.compute(&ctx);
                q_update(table, &prev, a, r, &key, self.params.alpha, self.params.gamma)?;
            }
            let waiting = ctx.total_waiting();
            self.previous_waiting[k] = Some(waiting);
            self.wait_sum[k] += waiting;
            if s.in_yellow {
                continue;
            }
            let a = select_action(table, &key, epsilon, &mut self.rng);
            s.request_phase(a)?;
            self.pending[k] = Some((key, a));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::grid_generator;

    #[test]
    fn plan_must_fill_cycle() {
        let net = grid_generator(1, 1, 45.0, 45.0, 13.89).unwrap();
        assert!(FixedTime::new(&StaticPlanConfig::default(), &net).is_ok());
        let bad = StaticPlanConfig {
            greens: vec![20.0, 22.0],
            cycle: 50.0,
        };
        assert!(matches!(FixedTime::new(&bad, &net), Err(Error::SignalPlan(_))));
        let short = StaticPlanConfig {
            greens: vec![44.0],
            cycle: 47.0,
        };
        assert!(matches!(FixedTime::new(&short, &net), Err(Error::SignalPlan(_))));
    }

    #[test]
    fn registry_lists_names() {
        let cfg = crate::scenario::builtin("single-asymmetric").unwrap();
        let net = cfg.build_network().unwrap();
        let ctx = ControllerContext {
            scenario: &cfg,
            net: &net,
            tables: None,
        };
        assert_eq!(controller_by_name("static", &ctx).unwrap().name(), "static");
        assert_eq!(controller_by_name("actuated", &ctx).unwrap().name(), "actuated");
        assert!(matches!(controller_by_name("agents", &ctx), Err(Error::Config(_))));
        let err = controller_by_name("maxpressure", &ctx).err().unwrap().to_string();
        assert!(CONTROLLER_NAMES.iter().all(|n| err.contains(n)));
    }
}
