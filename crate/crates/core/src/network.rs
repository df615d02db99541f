//! Static road topology: nodes, single-lane directed links, signalized
//! intersections with their green phases, and the conflict table used by the
//! safety checks.
//!
//! Lanes are kept sorted by id, so comparing lane-index sequences is the same
//! as comparing lane-id sequences. Route tie-breaking relies on this.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_DETECTION_ZONE: f64 = 50.0;
pub const DEFAULT_STUB_LENGTH: f64 = 200.0;
pub const DEFAULT_YELLOW: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub signalized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub id: String,
    pub from_node: String,
    pub to_node: String,
    /// Meters.
    pub length: f64,
    /// m/s.
    pub speed_limit: f64,
    /// Meters upstream of the stop line that a sensor can see.
    pub detection_zone: f64,
}

impl Lane {
    pub fn free_flow_time(&self) -> f64 {
        self.length / self.speed_limit
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub green_lanes: Vec<String>,
}

/// A signalized node. The order of `incoming_lanes` is the observation order
/// used by the agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub id: String,
    pub incoming_lanes: Vec<String>,
    pub outgoing_lanes: Vec<String>,
    pub green_phases: Vec<Phase>,
    pub yellow_duration: f64,
}

/// Serialized form of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub nodes: Vec<Node>,
    pub lanes: Vec<Lane>,
    pub intersections: Vec<Intersection>,
    /// Pairs of incoming lanes that may never be green at the same time.
    #[serde(default)]
    pub conflicts: Vec<(String, String)>,
}

impl NetworkSpec {
    /// Every broken invariant, as human readable strings.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut node_ids = HashMap::new();
        for node in &self.nodes {
            if node_ids.insert(node.id.as_str(), node).is_some() {
                out.push(format!("duplicate node id {}", node.id));
            }
        }
        let mut lanes = HashMap::new();
        for lane in &self.lanes {
            if lanes.insert(lane.id.as_str(), lane).is_some() {
                out.push(format!("duplicate lane id {}", lane.id));
            }
            if !(lane.length > 0.0) {
                out.push(format!("lane {} length must be > 0", lane.id));
            }
            if !(lane.speed_limit > 0.0) {
                out.push(format!("lane {} speed_limit must be > 0", lane.id));
            }
            if !(lane.detection_zone >= 0.0 && lane.detection_zone <= lane.length) {
                out.push(format!("lane {} detection_zone must lie in [0, length]", lane.id));
            }
            for end in [&lane.from_node, &lane.to_node] {
                if !node_ids.contains_key(end.as_str()) {
                    out.push(format!("lane {} references unknown node {}", lane.id, end));
                }
            }
        }
        let conflicts: BTreeSet<(&str, &str)> = self
            .conflicts
            .iter()
            .flat_map(|(a, b)| [(a.as_str(), b.as_str()), (b.as_str(), a.as_str())])
            .collect();
        let mut seen_int = BTreeSet::new();
        for int in &self.intersections {
            if !seen_int.insert(int.id.as_str()) {
                out.push(format!("duplicate intersection {}", int.id));
            }
            match node_ids.get(int.id.as_str()) {
                None => out.push(format!("intersection {} has no node", int.id)),
                Some(n) if !n.signalized => out.push(format!("intersection {} node is not signalized", int.id)),
                _ => {}
            }
            if int.green_phases.len() < 2 {
                out.push(format!("intersection {} needs at least 2 green phases", int.id));
            }
            if !(int.yellow_duration > 0.0) {
                out.push(format!("intersection {} yellow_duration must be > 0", int.id));
            }
            for l in &int.incoming_lanes {
                match lanes.get(l.as_str()) {
                    Some(lane) if lane.to_node == int.id => {}
                    Some(_) => out.push(format!("lane {l} does not end at intersection {}", int.id)),
                    None => out.push(format!("intersection {} references unknown lane {l}", int.id)),
                }
            }
            for l in &int.outgoing_lanes {
                match lanes.get(l.as_str()) {
                    Some(lane) if lane.from_node == int.id => {}
                    Some(_) => out.push(format!("lane {l} does not start at intersection {}", int.id)),
                    None => out.push(format!("intersection {} references unknown lane {l}", int.id)),
                }
            }
            let mut covered = BTreeSet::new();
            for (p, phase) in int.green_phases.iter().enumerate() {
                if phase.green_lanes.is_empty() {
                    out.push(format!("intersection {} phase {p} has no green lanes", int.id));
                }
                for l in &phase.green_lanes {
                    if !int.incoming_lanes.contains(l) {
                        out.push(format!(
                            "intersection {} phase {p} grants non-incoming lane {l}",
                            int.id
                        ));
                    }
                    covered.insert(l.as_str());
                }
                for (i, a) in phase.green_lanes.iter().enumerate() {
                    for b in &phase.green_lanes[i + 1..] {
                        if conflicts.contains(&(a.as_str(), b.as_str())) {
                            out.push(format!(
                                "intersection {} phase {p} has conflicting lanes {a} and {b}",
                                int.id
                            ));
                        }
                    }
                }
            }
            for l in &int.incoming_lanes {
                if !covered.contains(l.as_str()) {
                    out.push(format!("intersection {} never serves lane {l}", int.id));
                }
            }
        }
        // A signalized node must be described by an intersection.
        for node in &self.nodes {
            if node.signalized && !seen_int.contains(node.id.as_str()) {
                out.push(format!("signalized node {} has no intersection", node.id));
            }
        }
        out
    }

    /// Canonical sorted-key JSON text.
    pub fn to_canonical_json(&self) -> String {
        canonical_json(self)
    }
}

pub(crate) fn canonical_json<T: Serialize>(value: &T) -> String {
    // serde_json's Map is a BTreeMap unless `preserve_order` is enabled, so
    // going through Value sorts every object's keys.
    let value = serde_json::to_value(value).expect("serializable");
    let mut text = serde_json::to_string_pretty(&value).expect("serializable");
    text.push('\n');
    text
}

/// Indexed, validated network. Immutable after construction.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    spec: NetworkSpec,
    lane_index: HashMap<String, usize>,
    node_index: HashMap<String, usize>,
    lane_from: Vec<usize>,
    lane_to: Vec<usize>,
    out_lanes: Vec<Vec<usize>>,
    node_intersection: Vec<Option<usize>>,
    /// For each lane: (intersection, position among its incoming lanes).
    lane_approach: Vec<Option<(usize, usize)>>,
    incoming: Vec<Vec<usize>>,
    outgoing: Vec<Vec<usize>>,
    /// [intersection][phase] -> green flag per incoming position.
    phase_masks: Vec<Vec<Vec<bool>>>,
    conflict_pairs: Vec<(usize, usize)>,
    hash: String,
}

impl RoadNetwork {
    pub fn new(mut spec: NetworkSpec) -> Result<Self> {
        let violations = spec.violations();
        if !violations.is_empty() {
            return Err(Error::Network(violations.join("; ")));
        }
        spec.nodes.sort_by(|a, b| a.id.cmp(&b.id));
        spec.lanes.sort_by(|a, b| a.id.cmp(&b.id));
        spec.intersections.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in &mut spec.conflicts {
            if pair.1 < pair.0 {
                std::mem::swap(&mut pair.0, &mut pair.1);
            }
        }
        spec.conflicts.sort();
        spec.conflicts.dedup();

        let node_index: HashMap<String, usize> =
            spec.nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
        let lane_index: HashMap<String, usize> =
            spec.lanes.iter().enumerate().map(|(i, l)| (l.id.clone(), i)).collect();
        let lane_from: Vec<usize> = spec.lanes.iter().map(|l| node_index[&l.from_node]).collect();
        let lane_to: Vec<usize> = spec.lanes.iter().map(|l| node_index[&l.to_node]).collect();
        let mut out_lanes = vec![Vec::new(); spec.nodes.len()];
        for (i, &from) in lane_from.iter().enumerate() {
            out_lanes[from].push(i);
        }
        let mut node_intersection = vec![None; spec.nodes.len()];
        let mut lane_approach = vec![None; spec.lanes.len()];
        let mut incoming = Vec::new();
        let mut outgoing = Vec::new();
        let mut phase_masks = Vec::new();
        for (k, int) in spec.intersections.iter().enumerate() {
            node_intersection[node_index[&int.id]] = Some(k);
            let inc: Vec<usize> = int.incoming_lanes.iter().map(|l| lane_index[l]).collect();
            for (pos, &l) in inc.iter().enumerate() {
                lane_approach[l] = Some((k, pos));
            }
            let masks = int
                .green_phases
                .iter()
                .map(|p| int.incoming_lanes.iter().map(|l| p.green_lanes.contains(l)).collect())
                .collect();
            phase_masks.push(masks);
            incoming.push(inc);
            outgoing.push(int.outgoing_lanes.iter().map(|l| lane_index[l]).collect());
        }
        let conflict_pairs = spec
            .conflicts
            .iter()
            .filter_map(|(a, b)| Some((*lane_index.get(a)?, *lane_index.get(b)?)))
            .collect();
        let hash = hex::encode(Sha256::digest(spec.to_canonical_json().as_bytes()));
        Ok(Self {
            spec,
            lane_index,
            node_index,
            lane_from,
            lane_to,
            out_lanes,
            node_intersection,
            lane_approach,
            incoming,
            outgoing,
            phase_masks,
            conflict_pairs,
            hash,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn lanes(&self) -> &[Lane] {
        &self.spec.lanes
    }

    pub fn lane(&self, idx: usize) -> &Lane {
        &self.spec.lanes[idx]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.spec.nodes
    }

    pub fn intersections(&self) -> &[Intersection] {
        &self.spec.intersections
    }

    pub fn lane_idx(&self, id: &str) -> Option<usize> {
        self.lane_index.get(id).copied()
    }

    pub fn node_idx(&self, id: &str) -> Option<usize> {
        self.node_index.get(id).copied()
    }

    pub fn lane_from(&self, lane: usize) -> usize {
        self.lane_from[lane]
    }

    pub fn lane_to(&self, lane: usize) -> usize {
        self.lane_to[lane]
    }

    pub fn out_lanes(&self, node: usize) -> &[usize] {
        &self.out_lanes[node]
    }

    pub fn intersection_at(&self, node: usize) -> Option<usize> {
        self.node_intersection[node]
    }

    /// Intersection controlling the stop line at the end of `lane`, with the
    /// lane's position in that intersection's observation order.
    pub fn approach_of(&self, lane: usize) -> Option<(usize, usize)> {
        self.lane_approach[lane]
    }

    pub fn incoming(&self, intersection: usize) -> &[usize] {
        &self.incoming[intersection]
    }

    pub fn outgoing(&self, intersection: usize) -> &[usize] {
        &self.outgoing[intersection]
    }

    pub fn num_phases(&self, intersection: usize) -> usize {
        self.phase_masks[intersection].len()
    }

    /// Green flag per incoming position for `phase`.
    pub fn phase_mask(&self, intersection: usize, phase: usize) -> &[bool] {
        &self.phase_masks[intersection][phase]
    }

    pub fn conflict_pairs(&self) -> &[(usize, usize)] {
        &self.conflict_pairs
    }

    /// Incoming lanes of all intersections, in intersection then approach order.
    pub fn monitored_lanes(&self) -> Vec<usize> {
        self.incoming.iter().flatten().copied().collect()
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn to_canonical_json(&self) -> String {
        self.spec.to_canonical_json()
    }

    pub fn max_speed_limit(&self) -> f64 {
        self.spec.lanes.iter().map(|l| l.speed_limit).fold(0.0, f64::max)
    }

    /// True if some route of length >= 1 leads from `origin` to `destination`.
    pub fn connected(&self, origin: usize, destination: usize) -> bool {
        let estimates: Vec<f64> = self.lanes().iter().map(Lane::free_flow_time).collect();
        self.route_by_index(origin, destination, &estimates).is_some()
    }

    fn route_by_index(&self, origin: usize, destination: usize, estimates: &[f64]) -> Option<Vec<usize>> {
        if origin == destination {
            return None;
        }
        let cost_key = |lane: usize| (estimates[lane].max(0.0) * 1e6).round() as i64;
        let mut settled = vec![false; self.spec.lanes.len()];
        let mut heap = BinaryHeap::new();
        for &l in &self.out_lanes[origin] {
            heap.push(Reverse((cost_key(l), vec![l])));
        }
        while let Some(Reverse((cost, path))) = heap.pop() {
            let last = *path.last().expect("non-empty path");
            if settled[last] {
                continue;
            }
            settled[last] = true;
            let node = self.lane_to[last];
            if node == destination {
                return Some(path);
            }
            // Routes only pass through signalized nodes.
            if !self.spec.nodes[node].signalized {
                continue;
            }
            for &next in &self.out_lanes[node] {
                if settled[next] || self.lane_to[next] == self.lane_from[last] {
                    continue;
                }
                let mut extended = path.clone();
                extended.push(next);
                heap.push(Reverse((cost + cost_key(next), extended)));
            }
        }
        None
    }
}

impl Serialize for RoadNetwork {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.spec.serialize(s)
    }
}

impl<'de> Deserialize<'de> for RoadNetwork {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let spec = NetworkSpec::deserialize(d)?;
        RoadNetwork::new(spec).map_err(serde::de::Error::custom)
    }
}

/// Grid layout parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub ew_spacing: f64,
    pub ns_spacing: f64,
    pub speed_limit: f64,
    #[serde(default = "default_stub_length")]
    pub stub_length: f64,
    #[serde(default = "default_detection_zone")]
    pub detection_zone: f64,
    #[serde(default = "default_yellow")]
    pub yellow_duration: f64,
}

fn default_stub_length() -> f64 {
    DEFAULT_STUB_LENGTH
}
fn default_detection_zone() -> f64 {
    DEFAULT_DETECTION_ZONE
}
fn default_yellow() -> f64 {
    DEFAULT_YELLOW
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, ew_spacing: f64, ns_spacing: f64, speed_limit: f64) -> Self {
        Self {
            rows,
            cols,
            ew_spacing,
            ns_spacing,
            speed_limit,
            stub_length: DEFAULT_STUB_LENGTH,
            detection_zone: DEFAULT_DETECTION_ZONE,
            yellow_duration: DEFAULT_YELLOW,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.rows == 0 || self.cols == 0 {
            out.push("grid rows and cols must be >= 1".to_string());
        }
        for (name, v) in [
            ("ew_spacing", self.ew_spacing),
            ("ns_spacing", self.ns_spacing),
            ("speed_limit", self.speed_limit),
            ("stub_length", self.stub_length),
            ("yellow_duration", self.yellow_duration),
        ] {
            if !(v > 0.0) {
                out.push(format!("grid {name} must be > 0"));
            }
        }
        if !(self.detection_zone >= 0.0) {
            out.push("grid detection_zone must be >= 0".to_string());
        }
        out
    }

    /// Lays out a rows x cols signalized grid. Every intersection gets four
    /// approaches ordered N, S, E, W and two phases: 0 = north/south through,
    /// 1 = east/west through. Perimeter approaches are `stub_length` source
    /// and sink links to boundary nodes `N{c}`, `S{c}`, `W{r}`, `E{r}`.
    pub fn build(&self) -> Result<RoadNetwork> {
        let violations = self.violations();
        if !violations.is_empty() {
            return Err(Error::Network(violations.join("; ")));
        }
        let (rows, cols) = (self.rows, self.cols);
        let inter = |r: usize, c: usize| format!("i{r}_{c}");
        let mut nodes = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                nodes.push(Node {
                    id: inter(r, c),
                    x: c as f64 * self.ew_spacing,
                    y: -(r as f64) * self.ns_spacing,
                    signalized: true,
                });
            }
        }
        let bottom = -((rows - 1) as f64) * self.ns_spacing;
        let right = (cols - 1) as f64 * self.ew_spacing;
        for c in 0..cols {
            let x = c as f64 * self.ew_spacing;
            nodes.push(boundary(format!("N{c}"), x, self.stub_length));
            nodes.push(boundary(format!("S{c}"), x, bottom - self.stub_length));
        }
        for r in 0..rows {
            let y = -(r as f64) * self.ns_spacing;
            nodes.push(boundary(format!("W{r}"), -self.stub_length, y));
            nodes.push(boundary(format!("E{r}"), right + self.stub_length, y));
        }

        // Neighbour in each direction, with the link length towards it.
        let neighbours = |r: usize, c: usize| -> [(String, f64); 4] {
            let stub = self.stub_length;
            [
                if r == 0 {
                    (format!("N{c}"), stub)
                } else {
                    (inter(r - 1, c), self.ns_spacing)
                },
                if r + 1 == rows {
                    (format!("S{c}"), stub)
                } else {
                    (inter(r + 1, c), self.ns_spacing)
                },
                if c + 1 == cols {
                    (format!("E{r}"), stub)
                } else {
                    (inter(r, c + 1), self.ew_spacing)
                },
                if c == 0 {
                    (format!("W{r}"), stub)
                } else {
                    (inter(r, c - 1), self.ew_spacing)
                },
            ]
        };
        let lane_id = |from: &str, to: &str| format!("{from}-{to}");
        let mut lanes: Vec<Lane> = Vec::new();
        let mut seen = BTreeSet::new();
        let mut push_lane = |lanes: &mut Vec<Lane>, from: &str, to: &str, length: f64| {
            let id = lane_id(from, to);
            if seen.insert(id.clone()) {
                lanes.push(Lane {
                    id,
                    from_node: from.to_string(),
                    to_node: to.to_string(),
                    length,
                    speed_limit: self.speed_limit,
                    detection_zone: self.detection_zone.min(length),
                });
            }
        };
        let mut intersections = Vec::new();
        let mut conflicts = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let me = inter(r, c);
                let nb = neighbours(r, c);
                let mut incoming = Vec::new();
                let mut outgoing = Vec::new();
                for (other, length) in &nb {
                    push_lane(&mut lanes, other, &me, *length);
                    push_lane(&mut lanes, &me, other, *length);
                    incoming.push(lane_id(other, &me));
                    outgoing.push(lane_id(&me, other));
                }
                for ns in &incoming[0..2] {
                    for ew in &incoming[2..4] {
                        conflicts.push((ns.clone(), ew.clone()));
                    }
                }
                intersections.push(Intersection {
                    id: me,
                    green_phases: vec![
                        Phase {
                            green_lanes: incoming[0..2].to_vec(),
                        },
                        Phase {
                            green_lanes: incoming[2..4].to_vec(),
                        },
                    ],
                    incoming_lanes: incoming,
                    outgoing_lanes: outgoing,
                    yellow_duration: self.yellow_duration,
                });
            }
        }
        RoadNetwork::new(NetworkSpec {
            nodes,
            lanes,
            intersections,
            conflicts,
        })
    }
}

fn boundary(id: String, x: f64, y: f64) -> Node {
    Node {
        id,
        x,
        y,
        signalized: false,
    }
}

/// Convenience wrapper around [`GridSpec::build`] with default stub length,
/// detection zone and yellow duration.
pub fn grid_generator(
    rows: usize,
    cols: usize,
    ew_spacing: f64,
    ns_spacing: f64,
    speed_limit: f64,
) -> Result<RoadNetwork> {
    GridSpec::new(rows, cols, ew_spacing, ns_spacing, speed_limit).build()
}

/// Minimum estimated-time route between two nodes, as lane indices. Equal-cost
/// routes are ordered by their lane-id sequence. U-turns are not allowed and
/// routes never pass through unsignalized nodes.
pub fn shortest_time_route(
    net: &RoadNetwork,
    origin: &str,
    destination: &str,
    travel_time_estimates: &[f64],
) -> Result<Vec<usize>> {
    let no_route = || Error::NoRoute {
        origin: origin.to_string(),
        destination: destination.to_string(),
    };
    let o = net.node_idx(origin).ok_or_else(no_route)?;
    let d = net.node_idx(destination).ok_or_else(no_route)?;
    assert_eq!(travel_time_estimates.len(), net.lanes().len());
    net.route_by_index(o, d, travel_time_estimates).ok_or_else(no_route)
}
