//! Count sensing: batched per-lane captures that are either exact or corrupted
//! by a camera-style detection-noise profile, with last-known-state fallback
//! for failed captures, plus calibration of noise profiles against
//! network-level error statistics.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microsim::SimState;

pub const PROFILE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub lane: usize,
    pub capture_time: f64,
    pub occupancy: u32,
    pub queue: u32,
    /// The capture failed and the previous reading was replayed.
    pub stale: bool,
}

/// Truncated geometric distribution on `{1, ..., max}`:
/// `P(k) ∝ (1 - decay)^(k - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeDist {
    pub decay: f64,
    pub max: u32,
}

impl MagnitudeDist {
    pub fn pmf(&self) -> Vec<f64> {
        let q = 1.0 - self.decay;
        let w: Vec<f64> = (0..self.max).map(|k| q.powi(k as i32)).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }

    fn sample(&self, pmf: &[f64], rng: &mut impl Rng) -> i64 {
        let mut u: f64 = rng.gen();
        for (k, p) in pmf.iter().enumerate() {
            if u < *p {
                return k as i64 + 1;
            }
            u -= p;
        }
        self.max as i64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub schema_version: u32,
    pub name: String,
    /// Probability per lane and capture of counting extra vehicles.
    pub over_count_rate: f64,
    pub over_count_magnitude: MagnitudeDist,
    /// Probability per lane and capture of missing vehicles.
    pub under_count_rate: f64,
    pub under_count_magnitude: MagnitudeDist,
    /// Probability that a capture fails outright.
    pub drop_rate: f64,
}

impl NoiseProfile {
    pub fn ground_truth() -> Self {
        Self {
            schema_version: PROFILE_SCHEMA_VERSION,
            name: "ground_truth".to_string(),
            over_count_rate: 0.0,
            over_count_magnitude: MagnitudeDist { decay: 1.0, max: 1 },
            under_count_rate: 0.0,
            under_count_magnitude: MagnitudeDist { decay: 1.0, max: 1 },
            drop_rate: 0.0,
        }
    }

    /// Fitted to network-level errors of 2.21 MAE / 3.48 RMSE over 43 approaches.
    pub fn v5() -> Self {
        Self {
            schema_version: PROFILE_SCHEMA_VERSION,
            name: "v5".to_string(),
            over_count_rate: V5_PARAMS[0],
            over_count_magnitude: MagnitudeDist {
                decay: V5_PARAMS[1],
                max: DEFAULT_MAX_MAGNITUDE,
            },
            under_count_rate: V5_PARAMS[2],
            under_count_magnitude: MagnitudeDist {
                decay: V5_PARAMS[3],
                max: DEFAULT_MAX_MAGNITUDE,
            },
            drop_rate: 0.0,
        }
    }

    /// Fitted to network-level errors of 1.73 MAE / 2.80 RMSE over 43 approaches.
    pub fn v8() -> Self {
        Self {
            schema_version: PROFILE_SCHEMA_VERSION,
            name: "v8".to_string(),
            over_count_rate: V8_PARAMS[0],
            over_count_magnitude: MagnitudeDist {
                decay: V8_PARAMS[1],
                max: DEFAULT_MAX_MAGNITUDE,
            },
            under_count_rate: V8_PARAMS[2],
            under_count_magnitude: MagnitudeDist {
                decay: V8_PARAMS[3],
                max: DEFAULT_MAX_MAGNITUDE,
            },
            drop_rate: 0.0,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, p) in [
            ("over_count_rate", self.over_count_rate),
            ("under_count_rate", self.under_count_rate),
            ("drop_rate", self.drop_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                out.push(format!("{name} must lie in [0, 1]"));
            }
        }
        for (name, m) in [
            ("over_count_magnitude", &self.over_count_magnitude),
            ("under_count_magnitude", &self.under_count_magnitude),
        ] {
            if !(m.decay > 0.0 && m.decay <= 1.0) {
                out.push(format!("{name}.decay must lie in (0, 1]"));
            }
            if m.max == 0 {
                out.push(format!("{name}.max must be >= 1"));
            }
        }
        out
    }

    pub fn is_exact(&self) -> bool {
        self.over_count_rate == 0.0 && self.under_count_rate == 0.0 && self.drop_rate == 0.0
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("profile serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let profile: Self = toml::from_str(&text).map_err(|e| Error::format(path, e))?;
        if profile.schema_version != PROFILE_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: profile.schema_version,
                expected: PROFILE_SCHEMA_VERSION,
            });
        }
        let v = profile.violations();
        if !v.is_empty() {
            return Err(Error::format(path, v.join("; ")));
        }
        Ok(profile)
    }

    fn sampler(&self) -> ErrorSampler {
        ErrorSampler {
            over_rate: self.over_count_rate,
            over: self.over_count_magnitude,
            over_pmf: self.over_count_magnitude.pmf(),
            under_rate: self.under_count_rate,
            under: self.under_count_magnitude,
            under_pmf: self.under_count_magnitude.pmf(),
        }
    }
}

pub const DEFAULT_MAX_MAGNITUDE: u32 = 10;
// (over rate, over decay, under rate, under decay), from `calibrate_profile`.
const V5_PARAMS: [f64; 4] = [
    0.013274436773255785,
    0.26943359375000175,
    0.015136718749999948,
    0.5030273437500014,
];
const V8_PARAMS: [f64; 4] = [
    0.011138206304505925,
    0.30861816406250125,
    0.021609284156976927,
    0.9001708984375126,
];

pub const PROFILE_NAMES: [&str; 3] = ["ground_truth", "v5", "v8"];

/// Built-in profile by name, or a profile file path.
pub fn resolve_profile(spec: &str) -> Result<NoiseProfile> {
    match spec {
        "ground_truth" => Ok(NoiseProfile::ground_truth()),
        "v5" => Ok(NoiseProfile::v5()),
        "v8" => Ok(NoiseProfile::v8()),
        path if Path::new(path).exists() => NoiseProfile::load(Path::new(path)),
        other => Err(Error::UnknownName {
            kind: "sensing profile",
            name: other.to_string(),
            known: PROFILE_NAMES.iter().map(|s| s.to_string()).collect(),
        }),
    }
}

struct ErrorSampler {
    over_rate: f64,
    over: MagnitudeDist,
    over_pmf: Vec<f64>,
    under_rate: f64,
    under: MagnitudeDist,
    under_pmf: Vec<f64>,
}

impl ErrorSampler {
    /// Signed additive count error.
    fn sample(&self, rng: &mut impl Rng) -> i64 {
        let mut e = 0;
        if rng.gen::<f64>() < self.over_rate {
            e += self.over.sample(&self.over_pmf, rng);
        }
        if rng.gen::<f64>() < self.under_rate {
            e -= self.under.sample(&self.under_pmf, rng);
        }
        e
    }

    fn perturb(&self, occupancy: u32, queue: u32, rng: &mut impl Rng) -> (u32, u32) {
        let occ = (occupancy as i64 + self.sample(rng)).max(0);
        let q = (queue as i64 + self.sample(rng)).max(0).min(occ);
        (occ as u32, q as u32)
    }
}

/// Random stream for one lane in one capture, independent of evaluation order.
fn capture_rng(seed: u64, capture_tick: u64, lane: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((capture_tick << 20) | lane as u64);
    rng
}

/// Camera-style counter over a fixed set of lanes.
#[derive(Debug, Clone)]
pub struct Sensor {
    profile: NoiseProfile,
    seed: u64,
    last: BTreeMap<usize, SensorReading>,
}

impl Sensor {
    pub fn new(profile: NoiseProfile, seed: u64) -> Self {
        Self {
            profile,
            seed,
            last: BTreeMap::new(),
        }
    }

    pub fn profile(&self) -> &NoiseProfile {
        &self.profile
    }

    /// One coherent snapshot of `lanes`. Call at decision boundaries only.
    pub fn batched_capture(&mut self, sim: &SimState, lanes: &[usize]) -> Vec<SensorReading> {
        let truth: Vec<(u32, u32)> = lanes
            .iter()
            .map(|&l| sim.lane_ground_truth(l, sim.net().lane(l).detection_zone))
            .collect();
        self.capture_from_truth(sim.tick(), sim.clock(), lanes, &truth)
    }

    /// Applies the profile to given true (occupancy, queue) counts.
    pub fn capture_from_truth(
        &mut self,
        capture_tick: u64,
        capture_time: f64,
        lanes: &[usize],
        truth: &[(u32, u32)],
    ) -> Vec<SensorReading> {
        let sampler = self.profile.sampler();
        let exact = self.profile.is_exact();
        lanes
            .iter()
            .zip(truth)
            .map(|(&lane, &(occupancy, queue))| {
                let reading = if exact {
                    SensorReading {
                        lane,
                        capture_time,
                        occupancy,
                        queue: queue.min(occupancy),
                        stale: false,
                    }
                } else {
                    let mut rng = capture_rng(self.seed, capture_tick, lane);
                    if rng.gen::<f64>() < self.profile.drop_rate {
                        let prev = self.last.get(&lane);
                        SensorReading {
                            lane,
                            capture_time,
                            occupancy: prev.map_or(0, |r| r.occupancy),
                            queue: prev.map_or(0, |r| r.queue),
                            stale: true,
                        }
                    } else {
                        let (occupancy, queue) = sampler.perturb(occupancy, queue, &mut rng);
                        SensorReading {
                            lane,
                            capture_time,
                            occupancy,
                            queue,
                            stale: false,
                        }
                    }
                };
                self.last.insert(lane, reading);
                reading
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetworkErrorStats {
    /// Network-total occupancy error per snapshot.
    pub samples: Vec<i64>,
    pub mae: f64,
    pub rmse: f64,
    pub mean_error: f64,
}

impl NetworkErrorStats {
    pub fn from_samples(samples: Vec<i64>) -> Self {
        let n = samples.len().max(1) as f64;
        let mae = samples.iter().map(|e| e.abs() as f64).sum::<f64>() / n;
        let rmse = (samples.iter().map(|&e| (e * e) as f64).sum::<f64>() / n).sqrt();
        let mean_error = samples.iter().map(|&e| e as f64).sum::<f64>() / n;
        Self {
            samples,
            mae,
            rmse,
            mean_error,
        }
    }

    /// error value -> number of snapshots.
    pub fn histogram(&self) -> BTreeMap<i64, u64> {
        let mut h = BTreeMap::new();
        for &e in &self.samples {
            *h.entry(e).or_insert(0) += 1;
        }
        h
    }
}

/// Network-level occupancy error statistics of a reading stream against the
/// matching ground-truth stream (one inner vector per snapshot).
pub fn error_stats(readings: &[Vec<SensorReading>], truth: &[Vec<SensorReading>]) -> Result<NetworkErrorStats> {
    if readings.len() != truth.len() {
        return Err(Error::Misaligned(format!(
            "{} snapshots vs {} ground-truth snapshots",
            readings.len(),
            truth.len()
        )));
    }
    let mut samples = Vec::with_capacity(readings.len());
    for (k, (noisy, exact)) in readings.iter().zip(truth).enumerate() {
        if noisy.len() != exact.len() {
            return Err(Error::Misaligned(format!("snapshot {k}: lane counts differ")));
        }
        let mut total = 0i64;
        for (a, b) in noisy.iter().zip(exact) {
            if a.lane != b.lane || a.capture_time != b.capture_time {
                return Err(Error::Misaligned(format!(
                    "snapshot {k}: lane {} at {} vs lane {} at {}",
                    a.lane, a.capture_time, b.lane, b.capture_time
                )));
            }
            total += a.occupancy as i64 - b.occupancy as i64;
        }
        samples.push(total);
    }
    Ok(NetworkErrorStats::from_samples(samples))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTargets {
    pub mae: f64,
    pub rmse: f64,
    pub mean: f64,
}

/// Exact moments of the network-total error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorMoments {
    pub mae: f64,
    pub rmse: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub profile: NoiseProfile,
    pub achieved: ErrorMoments,
    /// Relative residuals (achieved - target) / target for mae, rmse, mean.
    pub residuals: [f64; 3],
    /// All three residuals within the tolerance.
    pub converged: bool,
}

/// Options for [`calibrate_profile`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    pub max_magnitude: u32,
    /// Synthetic snapshots draw each lane's true occupancy uniformly from
    /// `0..=max_true_occupancy`; matters only through clamping at zero.
    pub max_true_occupancy: u32,
    pub tolerance: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            max_magnitude: DEFAULT_MAX_MAGNITUDE,
            max_true_occupancy: 10,
            tolerance: 0.05,
        }
    }
}

/// Exact distribution of one lane's occupancy error under `profile`, over
/// offsets `-max..=max`, with the clamp at zero applied to a uniform truth.
fn lane_error_pmf(profile: &NoiseProfile, max_true: u32) -> (Vec<f64>, i64) {
    let over = profile.over_count_magnitude.pmf();
    let under = profile.under_count_magnitude.pmf();
    let span = over.len().max(under.len()) as i64;
    let mut over_terms = vec![(0i64, 1.0 - profile.over_count_rate)];
    over_terms.extend(
        over.iter()
            .enumerate()
            .map(|(k, p)| (k as i64 + 1, profile.over_count_rate * p)),
    );
    let mut under_terms = vec![(0i64, 1.0 - profile.under_count_rate)];
    under_terms.extend(
        under
            .iter()
            .enumerate()
            .map(|(k, p)| (k as i64 + 1, profile.under_count_rate * p)),
    );
    let mut pmf = vec![0.0; (2 * span + 1) as usize];
    let truth_weight = 1.0 / (max_true + 1) as f64;
    for t in 0..=max_true as i64 {
        for &(o, po) in &over_terms {
            for &(u, pu) in &under_terms {
                let e = (o - u).max(-t);
                pmf[(e + span) as usize] += po * pu * truth_weight;
            }
        }
    }
    (pmf, span)
}

/// Exact MAE / RMSE / mean of the sum of `lanes` independent lane errors.
pub fn exact_moments(profile: &NoiseProfile, lanes: usize, max_true_occupancy: u32) -> ErrorMoments {
    let (lane, span) = lane_error_pmf(profile, max_true_occupancy);
    let mut total = vec![1.0];
    for _ in 0..lanes {
        let mut next = vec![0.0; total.len() + lane.len() - 1];
        for (i, a) in total.iter().enumerate() {
            if *a == 0.0 {
                continue;
            }
            for (j, b) in lane.iter().enumerate() {
                next[i + j] += a * b;
            }
        }
        total = next;
    }
    let offset = span * lanes as i64;
    let (mut mae, mut ms, mut mean) = (0.0, 0.0, 0.0);
    for (k, p) in total.iter().enumerate() {
        let x = (k as i64 - offset) as f64;
        mae += p * x.abs();
        ms += p * x * x;
        mean += p * x;
    }
    ErrorMoments {
        mae,
        rmse: ms.sqrt(),
        mean,
    }
}

fn profile_from(params: [f64; 4], max_magnitude: u32, name: &str) -> NoiseProfile {
    NoiseProfile {
        schema_version: PROFILE_SCHEMA_VERSION,
        name: name.to_string(),
        over_count_rate: params[0],
        over_count_magnitude: MagnitudeDist {
            decay: params[1],
            max: max_magnitude,
        },
        under_count_rate: params[2],
        under_count_magnitude: MagnitudeDist {
            decay: params[3],
            max: max_magnitude,
        },
        drop_rate: 0.0,
    }
}

/// Fits over/under-count rates and magnitude decays so that the network-total
/// error over `lanes` approaches has the target MAE, RMSE and mean. Returns
/// the best profile found; `converged` tells whether it is within tolerance.
pub fn calibrate_profile(
    name: &str,
    targets: CalibrationTargets,
    lanes: usize,
    options: CalibrationOptions,
) -> Result<Calibration> {
    let CalibrationTargets { mae, rmse, mean } = targets;
    if mae == 0.0 && rmse == 0.0 && mean == 0.0 {
        let mut profile = NoiseProfile::ground_truth();
        profile.name = name.to_string();
        return Ok(Calibration {
            profile,
            achieved: ErrorMoments {
                mae: 0.0,
                rmse: 0.0,
                mean: 0.0,
            },
            residuals: [0.0; 3],
            converged: true,
        });
    }
    if !(mae > 0.0) || !(rmse >= mae) {
        return Err(Error::CalibrationPrecondition(format!(
            "need rmse >= mae > 0, got mae {mae}, rmse {rmse}"
        )));
    }
    if mean.abs() > mae {
        return Err(Error::CalibrationPrecondition(format!(
            "|mean| {mean} cannot exceed mae {mae}"
        )));
    }
    if lanes == 0 {
        return Err(Error::CalibrationPrecondition("need at least one lane".to_string()));
    }
    let eval = |p: [f64; 4]| -> (f64, ErrorMoments) {
        let m = exact_moments(
            &profile_from(p, options.max_magnitude, name),
            lanes,
            options.max_true_occupancy,
        );
        let r = residuals(&m, &targets);
        (r.iter().map(|x| x * x).sum(), m)
    };
    let lower = [0.0, 0.02, 0.0, 0.02];
    let upper = [1.0, 1.0, 1.0, 1.0];

    // Coarse multi-start, then compass search from the best few.
    let mut starts = Vec::new();
    for &ro in &[0.2, 0.5, 1.0, 2.0] {
        for &ru in &[0.0, 0.25, 0.5, 1.0] {
            for &po in &[0.1, 0.3, 0.6] {
                for &pu in &[0.1, 0.5, 0.9] {
                    let p = [(ro / lanes as f64).min(1.0), po, (ru / lanes as f64).min(1.0), pu];
                    starts.push((eval(p).0, p));
                }
            }
        }
    }
    starts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = (f64::INFINITY, [0.0; 4]);
    for &(_, start) in starts.iter().take(4) {
        let mut x = start;
        let mut fx = eval(x).0;
        let mut step = [0.5 * x[0].max(0.002), 0.1, 0.5 * x[2].max(0.002), 0.1];
        for _ in 0..400 {
            let mut improved = false;
            for i in 0..4 {
                for dir in [1.0, -1.0] {
                    let mut y = x;
                    y[i] = (y[i] + dir * step[i]).clamp(lower[i], upper[i]);
                    if y[i] == x[i] {
                        continue;
                    }
                    let fy = eval(y).0;
                    if fy < fx {
                        x = y;
                        fx = fy;
                        improved = true;
                    }
                }
            }
            if !improved {
                for s in &mut step {
                    *s *= 0.5;
                }
                if step.iter().all(|&s| s < 1e-6) {
                    break;
                }
            }
        }
        if fx < best.0 {
            best = (fx, x);
        }
    }
    let (_, achieved) = eval(best.1);
    let residuals = residuals(&achieved, &targets);
    Ok(Calibration {
        profile: profile_from(best.1, options.max_magnitude, name),
        achieved,
        converged: residuals.iter().all(|r| r.abs() <= options.tolerance),
        residuals,
    })
}

fn residuals(m: &ErrorMoments, t: &CalibrationTargets) -> [f64; 3] {
    let rel = |a: f64, b: f64| if b == 0.0 { a } else { (a - b) / b };
    [rel(m.mae, t.mae), rel(m.rmse, t.rmse), rel(m.mean, t.mean)]
}

/// Monte-Carlo replay: pushes `snapshots` synthetic network snapshots through
/// a [`Sensor`] with `profile` and measures the network-level error.
pub fn replay_profile(
    profile: &NoiseProfile,
    lanes: usize,
    snapshots: usize,
    max_true_occupancy: u32,
    seed: u64,
) -> NetworkErrorStats {
    let mut truth_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut sensor = Sensor::new(profile.clone(), seed);
    let lane_ids: Vec<usize> = (0..lanes).collect();
    let mut samples = Vec::with_capacity(snapshots);
    for s in 0..snapshots {
        let truth: Vec<(u32, u32)> = (0..lanes)
            .map(|_| {
                let occ = truth_rng.gen_range(0..=max_true_occupancy);
                (occ, truth_rng.gen_range(0..=occ))
            })
            .collect();
        let readings = sensor.capture_from_truth(s as u64, s as f64, &lane_ids, &truth);
        let total: i64 = readings
            .iter()
            .zip(&truth)
            .map(|(r, t)| r.occupancy as i64 - t.0 as i64)
            .sum();
        samples.push(total);
    }
    NetworkErrorStats::from_samples(samples)
}
