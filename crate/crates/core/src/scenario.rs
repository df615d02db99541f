//! Scenario configuration: network, demand, timing and baseline-controller
//! parameters in one versioned TOML document.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{canonical_json, GridSpec, NetworkSpec, RoadNetwork};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandFlow {
    pub origin: String,
    pub destination: String,
    /// Vehicles per hour.
    pub rate: f64,
    pub start_time: f64,
    pub end_time: f64,
}

impl DemandFlow {
    pub fn expected_vehicles(&self) -> f64 {
        self.rate * (self.end_time - self.start_time).max(0.0) / 3600.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetworkConfig {
    Grid(GridSpec),
    Explicit(NetworkSpec),
}

impl NetworkConfig {
    pub fn build(&self) -> Result<RoadNetwork> {
        match self {
            NetworkConfig::Grid(g) => g.build(),
            NetworkConfig::Explicit(spec) => RoadNetwork::new(spec.clone()),
        }
    }

    fn violations(&self) -> Vec<String> {
        match self {
            NetworkConfig::Grid(g) => g.violations(),
            NetworkConfig::Explicit(spec) => spec.violations(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Timing {
    /// Seconds per simulation tick.
    pub sim_tick: f64,
    /// Seconds between agent decisions (and sensor captures).
    pub decision_period: f64,
    pub min_green: f64,
    /// A green held longer than this is forced to change.
    pub max_stuck: f64,
    /// Hard cap on simulated time per run; episodes that reach it are truncated.
    pub max_sim_time: f64,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            sim_tick: 0.05,
            decision_period: 5.0,
            min_green: 5.0,
            max_stuck: 60.0,
            max_sim_time: 7200.0,
        }
    }
}

impl Timing {
    /// Ticks per decision period. Only meaningful for a validated config.
    pub fn ticks_per_decision(&self) -> u64 {
        (self.decision_period / self.sim_tick).round() as u64
    }

    pub fn max_ticks(&self) -> u64 {
        (self.max_sim_time / self.sim_tick).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticPlanConfig {
    /// Green seconds per phase, in phase order.
    pub greens: Vec<f64>,
    pub cycle: f64,
}

impl Default for StaticPlanConfig {
    fn default() -> Self {
        Self {
            greens: vec![22.0, 22.0],
            cycle: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActuatedConfig {
    /// Seconds without a detection on any green lane before gapping out.
    pub gap_threshold: f64,
    pub max_green: f64,
    /// Presence detector length upstream of the stop line, meters.
    pub detector_length: f64,
}

impl Default for ActuatedConfig {
    fn default() -> Self {
        Self {
            gap_threshold: 3.0,
            max_green: 60.0,
            detector_length: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    pub network: NetworkConfig,
    #[serde(default)]
    pub flows: Vec<DemandFlow>,
    #[serde(default)]
    pub timing: Timing,
    #[serde(default)]
    pub static_plan: StaticPlanConfig,
    #[serde(default)]
    pub actuated: ActuatedConfig,
    /// Radius around the intersection (meters along in/out lanes) for the
    /// average-speed reward. `None` takes every vehicle on those lanes.
    #[serde(default)]
    pub reward_vicinity: Option<f64>,
    #[serde(default)]
    pub rng_seed: u64,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::format(path, e))?;
        if cfg.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: cfg.schema_version,
                expected: SCENARIO_SCHEMA_VERSION,
            });
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    /// Builds the network after checking every invariant.
    pub fn build_network(&self) -> Result<RoadNetwork> {
        let violations = validate_scenario(self);
        if !violations.is_empty() {
            return Err(Error::Scenario(violations));
        }
        self.network.build()
    }

    /// Identity of everything that affects a simulation run.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(canonical_json(self).as_bytes()))
    }

    /// Last instant at which any flow inserts vehicles.
    pub fn demand_end(&self) -> f64 {
        self.flows.iter().map(|f| f.end_time).fold(0.0, f64::max)
    }

    /// Same scenario with every flow window moved by `offset` seconds.
    pub fn shifted(&self, name: &str, offset: f64) -> Self {
        let mut out = self.clone();
        out.name = name.to_string();
        for f in &mut out.flows {
            f.start_time += offset;
            f.end_time += offset;
        }
        out
    }
}

/// All broken invariants of `config`. Empty means the scenario is usable.
pub fn validate_scenario(config: &ScenarioConfig) -> Vec<String> {
    let mut out = Vec::new();
    if config.schema_version != SCENARIO_SCHEMA_VERSION {
        out.push(format!(
            "schema_version {} unsupported (expected {SCENARIO_SCHEMA_VERSION})",
            config.schema_version
        ));
    }
    let t = &config.timing;
    if !(t.sim_tick > 0.0) {
        out.push("sim_tick must be > 0".to_string());
    } else {
        let ratio = t.decision_period / t.sim_tick;
        if !(t.decision_period > 0.0) || (ratio - ratio.round()).abs() > 1e-6 {
            out.push("decision_period not a multiple of sim_tick".to_string());
        }
        if !(t.max_sim_time > 0.0) {
            out.push("max_sim_time must be > 0".to_string());
        }
    }
    if !(t.min_green >= 0.0) {
        out.push("min_green must be >= 0".to_string());
    }
    if !(t.max_stuck > 0.0) {
        out.push("max_stuck must be > 0".to_string());
    }
    if config.actuated.gap_threshold <= 0.0 {
        out.push("actuated gap_threshold must be > 0".to_string());
    }
    let net_violations = config.network.violations();
    let net = if net_violations.is_empty() {
        config.network.build().ok()
    } else {
        out.extend(net_violations);
        None
    };
    for (k, flow) in config.flows.iter().enumerate() {
        if !(flow.rate >= 0.0) {
            out.push(format!("flow {k}: rate must be >= 0"));
        }
        if !(flow.start_time < flow.end_time) {
            out.push(format!("flow {k}: start_time must be < end_time"));
        }
        let Some(net) = &net else { continue };
        let o = net.node_idx(&flow.origin);
        let d = net.node_idx(&flow.destination);
        if o.is_none() {
            out.push(format!("unknown origin node {} in flow {k}", flow.origin));
        }
        if d.is_none() {
            out.push(format!("unknown destination node {} in flow {k}", flow.destination));
        }
        if let (Some(o), Some(d)) = (o, d) {
            if !net.connected(o, d) {
                out.push(format!(
                    "flow {k}: {} is not connected to {}",
                    flow.origin, flow.destination
                ));
            }
        }
    }
    out
}

const BUILTIN: &[(&str, &str)] = &[
    (
        "grid3x3-medium-train",
        include_str!("../../../scenarios/grid3x3-medium-train.toml"),
    ),
    (
        "grid3x3-medium-eval",
        include_str!("../../../scenarios/grid3x3-medium-eval.toml"),
    ),
    (
        "grid3x3-heavy-train",
        include_str!("../../../scenarios/grid3x3-heavy-train.toml"),
    ),
    (
        "grid3x3-heavy-eval",
        include_str!("../../../scenarios/grid3x3-heavy-eval.toml"),
    ),
    (
        "single-asymmetric",
        include_str!("../../../scenarios/single-asymmetric.toml"),
    ),
    (
        "single-spillback",
        include_str!("../../../scenarios/single-spillback.toml"),
    ),
];

pub fn builtin_names() -> Vec<String> {
    BUILTIN.iter().map(|(n, _)| n.to_string()).collect()
}

/// One of the shipped scenarios, by name.
pub fn builtin(name: &str) -> Result<ScenarioConfig> {
    let text = BUILTIN
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| Error::UnknownName {
            kind: "scenario",
            name: name.to_string(),
            known: builtin_names(),
        })?;
    ScenarioConfig::from_toml(text).map_err(|e| Error::format(format!("builtin:{name}"), e))
}

/// Loads `builtin:NAME` or a TOML file path.
pub fn resolve(spec: &str) -> Result<ScenarioConfig> {
    match spec.strip_prefix("builtin:") {
        Some(name) => builtin(name),
        None => ScenarioConfig::load(Path::new(spec)),
    }
}
