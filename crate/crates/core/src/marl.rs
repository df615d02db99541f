//! Independent tabular Q-learning agents, one per signalized intersection.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{canonical_json, RoadNetwork};
use crate::perception::SensorReading;

pub use crate::experiment::{train, TrainSpec, TrainingResult};

pub const TABLE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Per-lane counts above this are stored as the cap.
    pub count_cap: u32,
}

impl Default for AgentParams {
    fn default() -> Self {
        Self {
            alpha: 0.0071,
            gamma: 0.97,
            epsilon_start: 0.05,
            epsilon_end: 0.005,
            count_cap: 20,
        }
    }
}

impl AgentParams {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            out.push("alpha must lie in (0, 1]".to_string());
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            out.push("gamma must lie in [0, 1)".to_string());
        }
        if !(0.0 < self.epsilon_end && self.epsilon_end <= self.epsilon_start && self.epsilon_start <= 1.0) {
            out.push("need 0 < epsilon_end <= epsilon_start <= 1".to_string());
        }
        out
    }
}

/// `(p, m, d, q)`: phase, min-green flag, occupancy and queue per incoming lane.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgentStateKey {
    pub phase: u32,
    pub min_green_elapsed: bool,
    pub occupancy: Vec<u32>,
    pub queue: Vec<u32>,
}

impl AgentStateKey {
    /// `(p, m, d_1..d_n, q_1..q_n)`.
    pub fn flatten(&self) -> Vec<u32> {
        let mut out = vec![self.phase, self.min_green_elapsed as u32];
        out.extend(&self.occupancy);
        out.extend(&self.queue);
        out
    }

    pub fn unflatten(flat: &[u32]) -> Option<Self> {
        if flat.len() < 2 || flat.len() % 2 != 0 || flat[1] > 1 {
            return None;
        }
        let (d, q) = flat[2..].split_at((flat.len() - 2) / 2);
        Some(Self {
            phase: flat[0],
            min_green_elapsed: flat[1] == 1,
            occupancy: d.to_vec(),
            queue: q.to_vec(),
        })
    }
}

/// Builds the agent state from readings of exactly `lanes`, in that order.
pub fn encode_state(
    phase: usize,
    min_green_elapsed: bool,
    readings: &[SensorReading],
    lanes: &[usize],
    count_cap: u32,
) -> Result<AgentStateKey> {
    if readings.len() != lanes.len() || readings.iter().zip(lanes).any(|(r, &l)| r.lane != l) {
        return Err(Error::LaneOrder(format!(
            "expected lanes {lanes:?}, got {:?}",
            readings.iter().map(|r| r.lane).collect::<Vec<_>>()
        )));
    }
    let occupancy: Vec<u32> = readings.iter().map(|r| r.occupancy.min(count_cap)).collect();
    let queue = readings
        .iter()
        .zip(&occupancy)
        .map(|(r, &d)| r.queue.min(count_cap).min(d))
        .collect();
    Ok(AgentStateKey {
        phase: phase as u32,
        min_green_elapsed,
        occupancy,
        queue,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QEntry {
    pub values: Vec<f64>,
    pub visits: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    actions: usize,
    entries: BTreeMap<AgentStateKey, QEntry>,
}

impl QTable {
    pub fn new(actions: usize) -> Self {
        Self {
            actions,
            entries: BTreeMap::new(),
        }
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, s: &AgentStateKey) -> Option<&QEntry> {
        self.entries.get(s)
    }

    pub fn remove(&mut self, s: &AgentStateKey) -> Option<QEntry> {
        self.entries.remove(s)
    }

    pub fn insert(&mut self, s: AgentStateKey, values: Vec<f64>) -> Result<()> {
        if values.len() != self.actions {
            return Err(Error::TableMismatch(format!(
                "value vector of length {} for {} actions",
                values.len(),
                self.actions
            )));
        }
        self.entries
            .entry(s)
            .or_insert(QEntry {
                values: Vec::new(),
                visits: 0,
            })
            .values = values;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&AgentStateKey, &QEntry)> {
        self.entries.iter()
    }

    /// Values of `s`, all zero when unseen.
    pub fn values(&self, s: &AgentStateKey) -> Vec<f64> {
        match self.entries.get(s) {
            Some(e) => e.values.clone(),
            None => vec![0.0; self.actions],
        }
    }

    fn max_value(&self, s: &AgentStateKey) -> f64 {
        match self.entries.get(s) {
            Some(e) => e.values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            None => 0.0,
        }
    }
}

/// `Q(s,a) <- Q(s,a) + alpha * (r + gamma * max_a' Q(s',a') - Q(s,a))`.
pub fn q_update(
    table: &mut QTable,
    s: &AgentStateKey,
    a: usize,
    r: f64,
    s_next: &AgentStateKey,
    alpha: f64,
    gamma: f64,
) -> Result<()> {
    if !r.is_finite() {
        return Err(Error::NonFiniteReward(r));
    }
    if a >= table.actions {
        return Err(Error::ActionOutOfRange {
            action: a,
            actions: table.actions,
        });
    }
    let future = table.max_value(s_next);
    let actions = table.actions;
    let entry = table.entries.entry(s.clone()).or_insert_with(|| QEntry {
        values: vec![0.0; actions],
        visits: 0,
    });
    let q = entry.values[a];
    entry.values[a] = q + alpha * (r + gamma * future - q);
    entry.visits += 1;
    Ok(())
}

/// Index of the largest value; ties go to the lowest index.
pub fn greedy(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

pub fn select_action(table: &QTable, s: &AgentStateKey, epsilon: f64, rng: &mut impl Rng) -> usize {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return rng.gen_range(0..table.actions);
    }
    match table.get(s) {
        Some(e) => greedy(&e.values),
        None => 0,
    }
}

/// Exponential decay from `epsilon_start` at step 0 to `epsilon_end` at
/// `horizon` steps, flat afterwards.
pub fn epsilon_schedule(step: u64, horizon: u64, params: &AgentParams) -> f64 {
    if horizon == 0 {
        return params.epsilon_end;
    }
    let frac = (step as f64 / horizon as f64).min(1.0);
    if frac >= 1.0 {
        return params.epsilon_end;
    }
    params.epsilon_start * (params.epsilon_end / params.epsilon_start).powf(frac)
}

/// Greedy action for a known state, nothing for an unseen one.
pub fn act_deployment(table: &QTable, s: &AgentStateKey) -> Option<usize> {
    table.get(s).map(|e| greedy(&e.values))
}

/// One agent's table plus the layout it was trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentTable {
    pub intersection: String,
    pub incoming_lanes: Vec<String>,
    pub table: QTable,
}

/// All agents of a trained network.
#[derive(Debug, Clone, PartialEq)]
pub struct TableSet {
    pub params: AgentParams,
    pub network_hash: String,
    pub reward: String,
    pub agents: Vec<AgentTable>,
}

impl TableSet {
    /// Empty tables for every intersection of `net`.
    pub fn for_network(net: &RoadNetwork, params: AgentParams, reward: &str) -> Self {
        let agents = net
            .intersections()
            .iter()
            .enumerate()
            .map(|(k, int)| AgentTable {
                intersection: int.id.clone(),
                incoming_lanes: net.incoming(k).iter().map(|&l| net.lane(l).id.clone()).collect(),
                table: QTable::new(net.num_phases(k)),
            })
            .collect();
        Self {
            params,
            network_hash: net.hash().to_string(),
            reward: reward.to_string(),
            agents,
        }
    }

    /// Checks that these tables fit `net`: same hash, agents, lane order and phase counts.
    pub fn check_network(&self, net: &RoadNetwork) -> Result<()> {
        if self.network_hash != net.hash() {
            return Err(Error::NetworkHashMismatch {
                expected: self.network_hash.clone(),
                found: net.hash().to_string(),
            });
        }
        if self.agents.len() != net.intersections().len() {
            return Err(Error::TableMismatch(format!(
                "{} agents for {} intersections",
                self.agents.len(),
                net.intersections().len()
            )));
        }
        for (k, agent) in self.agents.iter().enumerate() {
            let int = &net.intersections()[k];
            if agent.intersection != int.id {
                return Err(Error::TableMismatch(format!(
                    "agent {k} is for {}, network has {}",
                    agent.intersection, int.id
                )));
            }
            let lanes: Vec<&str> = net.incoming(k).iter().map(|&l| net.lane(l).id.as_str()).collect();
            if agent.incoming_lanes != lanes {
                return Err(Error::TableMismatch(format!("lane order differs at {}", int.id)));
            }
            if agent.table.actions != net.num_phases(k) {
                return Err(Error::TableMismatch(format!(
                    "{} has {} actions, intersection has {} phases",
                    int.id,
                    agent.table.actions,
                    net.num_phases(k)
                )));
            }
        }
        Ok(())
    }

    pub fn to_canonical_json(&self) -> String {
        canonical_json(&self.to_file())
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::format(origin, e))?;
        let version = value.get("schema_version").and_then(|v| v.as_u64());
        match version {
            Some(v) if v == TABLE_SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::SchemaVersion {
                    found: v as u32,
                    expected: TABLE_SCHEMA_VERSION,
                })
            }
            None => return Err(Error::format(origin, "missing schema_version")),
        }
        let file: TableFile = serde_json::from_value(value).map_err(|e| Error::format(origin, e))?;
        Self::from_file(file, origin)
    }

    fn to_file(&self) -> TableFile {
        TableFile {
            schema_version: TABLE_SCHEMA_VERSION,
            params: self.params.clone(),
            network_hash: self.network_hash.clone(),
            reward: self.reward.clone(),
            agents: self
                .agents
                .iter()
                .map(|a| AgentFile {
                    intersection: a.intersection.clone(),
                    incoming_lanes: a.incoming_lanes.clone(),
                    actions: a.table.actions,
                    states: a
                        .table
                        .iter()
                        .map(|(k, e)| StateFile {
                            key: k.flatten(),
                            values: e.values.clone(),
                            visits: e.visits,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    fn from_file(file: TableFile, origin: &Path) -> Result<Self> {
        let mut agents = Vec::with_capacity(file.agents.len());
        for a in file.agents {
            let mut table = QTable::new(a.actions);
            let lanes = a.incoming_lanes.len();
            for s in a.states {
                let key = AgentStateKey::unflatten(&s.key)
                    .filter(|k| k.occupancy.len() == lanes)
                    .ok_or_else(|| Error::format(origin, format!("bad state key {:?} at {}", s.key, a.intersection)))?;
                if s.values.len() != a.actions || s.values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::TableMismatch(format!(
                        "state {:?} at {} has values {:?} for {} actions",
                        s.key, a.intersection, s.values, a.actions
                    )));
                }
                table.entries.insert(
                    key,
                    QEntry {
                        values: s.values,
                        visits: s.visits,
                    },
                );
            }
            agents.push(AgentTable {
                intersection: a.intersection,
                incoming_lanes: a.incoming_lanes,
                table,
            });
        }
        Ok(Self {
            params: file.params,
            network_hash: file.network_hash,
            reward: file.reward,
            agents,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    schema_version: u32,
    params: AgentParams,
    network_hash: String,
    reward: String,
    agents: Vec<AgentFile>,
}

#[derive(Serialize, Deserialize)]
struct AgentFile {
    intersection: String,
    incoming_lanes: Vec<String>,
    actions: usize,
    states: Vec<StateFile>,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    key: Vec<u32>,
    values: Vec<f64>,
    visits: u64,
}

pub fn save_tables(tables: &TableSet, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, tables.to_canonical_json().as_bytes())
}

pub fn load_tables(path: &Path) -> Result<TableSet> {
    let text = std::fs::read_to_string(path)?;
    TableSet::from_json(&text, path)
}
