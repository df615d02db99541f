//! Episode runner shared by training and evaluation, seed fan-out, and the
//! artifacts each command writes.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::control::{controller_by_name, Controller, ControllerContext, LearningAgents, Observation};
use crate::error::{Error, Result};
use crate::io::{write_atomic, write_csv, write_csv_records};
use crate::marl::{save_tables, AgentParams, TableSet};
use crate::metrics::{aggregate, compute_report, MetricsReport};
use crate::microsim::{Light, SimParams, SimState};
use crate::network::{canonical_json, RoadNetwork};
use crate::perception::{error_stats, NetworkErrorStats, NoiseProfile, Sensor, SensorReading};
use crate::rewards::reward_by_name;
use crate::scenario::ScenarioConfig;
use crate::signal::{conflict_violations, lights_for, SignalControllerState, SignalTraceRow};

/// Environment variable holding the number of worker threads for seed fan-out.
pub const WORKERS_ENV: &str = "TRAFFICBED_WORKERS";
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Mixes two words into an independent seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        ^ stream
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One row of the observation log: what the sensor reported for a lane at a
/// decision boundary next to what was actually there.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObservationRow {
    pub clock: f64,
    pub lane: String,
    pub observed_occupancy: u32,
    pub observed_queue: u32,
    pub stale: bool,
    pub true_occupancy: u32,
    pub true_queue: u32,
    /// Stopped vehicles over the whole lane.
    pub lane_stopped: u32,
    /// Vehicles waiting to enter the lane from outside the network.
    pub lane_deferred: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LogOptions {
    pub signal_trace: bool,
    pub observations: bool,
    /// Keep noisy and exact snapshots for error statistics.
    pub readings: bool,
}

impl LogOptions {
    pub fn all() -> Self {
        Self {
            signal_trace: true,
            observations: true,
            readings: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeLog {
    pub signal_trace: Vec<SignalTraceRow>,
    pub observations: Vec<ObservationRow>,
    pub noisy: Vec<Vec<SensorReading>>,
    pub truth: Vec<Vec<SensorReading>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub report: MetricsReport,
    /// Hit `max_sim_time` before every vehicle arrived.
    pub truncated: bool,
    pub sim_time: f64,
    pub decisions: u64,
    /// Ticks on which two conflicting lanes were both not red. Always zero
    /// unless the network tables are inconsistent.
    pub conflict_ticks: u64,
}

/// Runs one simulation of `cfg` under `controller` until every vehicle has
/// arrived or the time cap is hit.
pub fn run_episode(
    cfg: &ScenarioConfig,
    net: &Arc<RoadNetwork>,
    controller: &mut dyn Controller,
    sensing: &NoiseProfile,
    seed: u64,
    options: LogOptions,
    log: &mut EpisodeLog,
) -> Result<EpisodeOutcome> {
    let timing = &cfg.timing;
    let sim_seed = derive_seed(cfg.rng_seed, seed);
    let mut sim = SimState::new(
        net.clone(),
        cfg.flows.clone(),
        SimParams::default(),
        timing.sim_tick,
        sim_seed,
    );
    let mut sensor = Sensor::new(sensing.clone(), derive_seed(sim_seed, 1));
    let mut signals = SignalControllerState::for_network(net, timing.min_green, timing.max_stuck);
    let monitored = net.monitored_lanes();
    let mut index = vec![None; net.lanes().len()];
    for (k, &lane) in monitored.iter().enumerate() {
        index[lane] = Some(k);
    }
    let per_decision = timing.ticks_per_decision().max(1);
    let max_ticks = timing.max_ticks();
    let mut lights: Vec<Light> = Vec::new();
    let mut shown: Vec<(usize, bool)> = signals.iter().map(|s| (s.current_phase, s.in_yellow)).collect();
    let mut forced = vec![false; signals.len()];
    let mut decisions = 0;
    let mut conflict_ticks = 0;
    controller.reset();
    if options.signal_trace {
        for s in &signals {
            log.signal_trace.push(trace_row(net, 0.0, s, false));
        }
    }

    while !sim.finished() && sim.tick() < max_ticks {
        if sim.tick() % per_decision == 0 {
            let readings = sensor.batched_capture(&sim, &monitored);
            if options.readings || options.observations {
                let truth: Vec<SensorReading> = monitored
                    .iter()
                    .map(|&l| {
                        let (occupancy, queue) = sim.lane_ground_truth(l, net.lane(l).detection_zone);
                        SensorReading {
                            lane: l,
                            capture_time: sim.clock(),
                            occupancy,
                            queue,
                            stale: false,
                        }
                    })
                    .collect();
                if options.observations {
                    for (r, t) in readings.iter().zip(&truth) {
                        log.observations.push(ObservationRow {
                            clock: sim.clock(),
                            lane: net.lane(r.lane).id.clone(),
                            observed_occupancy: r.occupancy,
                            observed_queue: r.queue,
                            stale: r.stale,
                            true_occupancy: t.occupancy,
                            true_queue: t.queue,
                            lane_stopped: sim.lane_stopped(r.lane),
                            lane_deferred: sim.deferred_on(r.lane) as u32,
                        });
                    }
                }
                if options.readings {
                    log.noisy.push(readings.clone());
                    log.truth.push(truth);
                }
            }
            let obs = Observation {
                clock: sim.clock(),
                readings: &readings,
                index: &index,
            };
            controller.on_decision(&sim, &obs, &mut signals)?;
            decisions += 1;
        }
        controller.on_tick(&sim, &mut signals)?;
        for (k, s) in signals.iter().enumerate() {
            let now = (s.current_phase, s.in_yellow);
            if now != shown[k] {
                if options.signal_trace {
                    log.signal_trace.push(trace_row(net, sim.clock(), s, false));
                }
                shown[k] = now;
            }
        }
        lights_for(net, &signals, &mut lights);
        if !conflict_violations(net, &lights).is_empty() {
            conflict_ticks += 1;
        }
        sim.step(&lights);
        for (k, s) in signals.iter_mut().enumerate() {
            forced[k] |= s.watchdog_tick(timing.sim_tick);
            let now = (s.current_phase, s.in_yellow);
            if now != shown[k] {
                if options.signal_trace {
                    log.signal_trace.push(trace_row(net, sim.clock(), s, forced[k]));
                }
                shown[k] = now;
                forced[k] = false;
            }
        }
    }
    let truncated = !sim.finished();
    if truncated {
        log::warn!(
            "{}: episode truncated at {} s with {} vehicles unfinished",
            cfg.name,
            sim.clock(),
            sim.unfinished().count()
        );
    }
    Ok(EpisodeOutcome {
        report: compute_report(sim.completed(), sim.unfinished(), sim.clock()),
        truncated,
        sim_time: sim.clock(),
        decisions,
        conflict_ticks,
    })
}

fn trace_row(net: &RoadNetwork, clock: f64, s: &SignalControllerState, forced: bool) -> SignalTraceRow {
    SignalTraceRow {
        clock,
        intersection: net.intersections()[s.intersection].id.clone(),
        phase: s.current_phase,
        in_yellow: s.in_yellow,
        forced,
    }
}

/// Thread pool sized by [`WORKERS_ENV`], defaulting to the machine's parallelism.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let workers = match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got '{v}'")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}

pub struct TrainSpec {
    pub scenario: ScenarioConfig,
    pub reward: String,
    pub episodes: usize,
    pub params: AgentParams,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeStats {
    pub episode: usize,
    pub mean_system_speed: f64,
    /// Per intersection, in network order.
    pub mean_waits: Vec<f64>,
    pub mean_waiting_time: f64,
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct TrainingResult {
    pub tables: TableSet,
    pub curve: Vec<EpisodeStats>,
    pub network: Arc<RoadNetwork>,
}

/// Trains one agent per intersection for `spec.episodes` episodes, observing
/// ground truth. Tables carry over between episodes; every episode draws new
/// demand from its own seed.
pub fn train(spec: &TrainSpec, mut progress: impl FnMut(&EpisodeStats)) -> Result<TrainingResult> {
    let v = spec.params.violations();
    if !v.is_empty() {
        return Err(Error::Config(v.join("; ")));
    }
    let net = Arc::new(spec.scenario.build_network()?);
    let reward = reward_by_name(&spec.reward)?;
    let tables = TableSet::for_network(&net, spec.params.clone(), &spec.reward);
    let steps_per_episode = (spec.scenario.demand_end() / spec.scenario.timing.decision_period).ceil() as u64;
    let horizon = spec.episodes as u64 * steps_per_episode;
    let mut agents = LearningAgents::new(
        tables,
        reward,
        spec.scenario.reward_vicinity,
        horizon,
        derive_seed(spec.seed, u64::MAX),
        &net,
    )?;
    let ground_truth = NoiseProfile::ground_truth();
    let mut curve = Vec::with_capacity(spec.episodes);
    for episode in 0..spec.episodes {
        let mut log = EpisodeLog::default();
        let outcome = run_episode(
            &spec.scenario,
            &net,
            &mut agents,
            &ground_truth,
            derive_seed(spec.seed, episode as u64),
            LogOptions::default(),
            &mut log,
        )?;
        let stats = EpisodeStats {
            episode,
            mean_system_speed: outcome.report.mean_speed,
            mean_waits: agents.episode_mean_waits(),
            mean_waiting_time: outcome.report.mean_waiting_time,
            truncated: outcome.truncated,
        };
        progress(&stats);
        curve.push(stats);
    }
    Ok(TrainingResult {
        tables: agents.tables,
        curve,
        network: net,
    })
}

/// Writes `tables.json` and `learning_curve.csv` into `out`.
pub fn write_training(result: &TrainingResult, out: &Path) -> Result<()> {
    save_tables(&result.tables, &out.join("tables.json"))?;
    let mut header = vec![
        "episode".to_string(),
        "mean_system_speed".to_string(),
        "mean_waiting_time".to_string(),
        "truncated".to_string(),
    ];
    header.extend(
        result
            .network
            .intersections()
            .iter()
            .map(|i| format!("mean_wait_{}", i.id)),
    );
    let rows: Vec<Vec<String>> = result
        .curve
        .iter()
        .map(|s| {
            let mut row = vec![
                s.episode.to_string(),
                s.mean_system_speed.to_string(),
                s.mean_waiting_time.to_string(),
                s.truncated.to_string(),
            ];
            row.extend(s.mean_waits.iter().map(|w| w.to_string()));
            row
        })
        .collect();
    write_csv_records(&out.join("learning_curve.csv"), &header, &rows)
}

#[derive(Clone)]
pub struct EvalSpec {
    pub scenario: ScenarioConfig,
    pub controller: String,
    pub tables: Option<Arc<TableSet>>,
    pub sensing: NoiseProfile,
    pub seeds: Vec<u64>,
    pub logs: LogOptions,
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub outcome: EpisodeOutcome,
    pub log: EpisodeLog,
    /// Present when readings were logged.
    pub error_stats: Option<NetworkErrorStats>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub scenario_name: String,
    pub scenario_hash: String,
    pub per_seed: Vec<SeedResult>,
    pub mean: MetricsReport,
    pub stdev: MetricsReport,
}

/// One run per seed, fanned out over the worker pool.
pub fn evaluate(spec: &EvalSpec) -> Result<Evaluation> {
    let net = Arc::new(spec.scenario.build_network()?);
    let ctx = ControllerContext {
        scenario: &spec.scenario,
        net: &net,
        tables: spec.tables.clone(),
    };
    // Surface configuration errors before any work is spawned.
    controller_by_name(&spec.controller, &ctx)?;
    let pool = worker_pool()?;
    let results: Vec<Result<SeedResult>> = pool.install(|| {
        spec.seeds
            .par_iter()
            .map(|&seed| {
                let ctx = ControllerContext {
                    scenario: &spec.scenario,
                    net: &net,
                    tables: spec.tables.clone(),
                };
                let mut controller = controller_by_name(&spec.controller, &ctx)?;
                let mut log = EpisodeLog::default();
                let outcome = run_episode(
                    &spec.scenario,
                    &net,
                    controller.as_mut(),
                    &spec.sensing,
                    seed,
                    spec.logs,
                    &mut log,
                )?;
                let error_stats = if spec.logs.readings {
                    Some(error_stats(&log.noisy, &log.truth)?)
                } else {
                    None
                };
                Ok(SeedResult {
                    seed,
                    outcome,
                    log,
                    error_stats,
                })
            })
            .collect()
    });
    let per_seed = results.into_iter().collect::<Result<Vec<_>>>()?;
    let reports: Vec<MetricsReport> = per_seed.iter().map(|r| r.outcome.report).collect();
    let (mean, stdev) = aggregate(&reports);
    Ok(Evaluation {
        scenario_name: spec.scenario.name.clone(),
        scenario_hash: spec.scenario.hash(),
        per_seed,
        mean,
        stdev,
    })
}

#[derive(Serialize)]
struct ReportRow<'a> {
    row: &'a str,
    mean_speed: f64,
    total_travel_time: f64,
    mean_waiting_time: f64,
    mean_time_lost: f64,
    mean_trip_duration: f64,
    trips_completed: u64,
    trips_unfinished: u64,
}

impl<'a> ReportRow<'a> {
    fn new(row: &'a str, r: &MetricsReport) -> Self {
        Self {
            row,
            mean_speed: r.mean_speed,
            total_travel_time: r.total_travel_time,
            mean_waiting_time: r.mean_waiting_time,
            mean_time_lost: r.mean_time_lost,
            mean_trip_duration: r.mean_trip_duration,
            trips_completed: r.trips_completed,
            trips_unfinished: r.trips_unfinished,
        }
    }
}

/// Manifest written next to evaluation artifacts; `compare` reads it back.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct EvaluationManifest {
    pub scenario: String,
    pub scenario_hash: String,
    pub controller: String,
    pub sensing: String,
    pub seeds: Vec<u64>,
    pub mean: MetricsReport,
    pub stdev: MetricsReport,
}

/// Writes `report.csv`, `signal_trace.csv`, `observations.csv`,
/// `manifest.json` and, for noisy sensing, `error_stats.csv` and
/// `error_histogram.csv` into `out`.
pub fn write_evaluation(eval: &Evaluation, spec: &EvalSpec, out: &Path) -> Result<()> {
    let labels: Vec<String> = eval.per_seed.iter().map(|r| format!("seed{}", r.seed)).collect();
    let mut rows: Vec<ReportRow> = eval
        .per_seed
        .iter()
        .zip(&labels)
        .map(|(r, label)| ReportRow::new(label, &r.outcome.report))
        .collect();
    rows.push(ReportRow::new("mean", &eval.mean));
    rows.push(ReportRow::new("stdev", &eval.stdev));
    write_csv(&out.join("report.csv"), &rows)?;

    if spec.logs.signal_trace {
        let header: Vec<String> = ["seed", "clock", "intersection", "phase", "in_yellow", "forced"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows: Vec<Vec<String>> = eval
            .per_seed
            .iter()
            .flat_map(|r| {
                r.log.signal_trace.iter().map(move |t| {
                    vec![
                        r.seed.to_string(),
                        t.clock.to_string(),
                        t.intersection.clone(),
                        t.phase.to_string(),
                        t.in_yellow.to_string(),
                        t.forced.to_string(),
                    ]
                })
            })
            .collect();
        write_csv_records(&out.join("signal_trace.csv"), &header, &rows)?;
    }
    if spec.logs.observations {
        let header: Vec<String> = [
            "seed",
            "clock",
            "lane",
            "observed_occupancy",
            "observed_queue",
            "stale",
            "true_occupancy",
            "true_queue",
            "lane_stopped",
            "lane_deferred",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let rows: Vec<Vec<String>> = eval
            .per_seed
            .iter()
            .flat_map(|r| {
                r.log.observations.iter().map(move |o| {
                    vec![
                        r.seed.to_string(),
                        o.clock.to_string(),
                        o.lane.clone(),
                        o.observed_occupancy.to_string(),
                        o.observed_queue.to_string(),
                        o.stale.to_string(),
                        o.true_occupancy.to_string(),
                        o.true_queue.to_string(),
                        o.lane_stopped.to_string(),
                        o.lane_deferred.to_string(),
                    ]
                })
            })
            .collect();
        write_csv_records(&out.join("observations.csv"), &header, &rows)?;
    }
    if !spec.sensing.is_exact() && spec.logs.readings {
        #[derive(Serialize)]
        struct StatsRow {
            seed: u64,
            snapshots: usize,
            mae: f64,
            rmse: f64,
            mean_error: f64,
        }
        let mut all = Vec::new();
        let mut rows = Vec::new();
        for r in &eval.per_seed {
            if let Some(s) = &r.error_stats {
                rows.push(StatsRow {
                    seed: r.seed,
                    snapshots: s.samples.len(),
                    mae: s.mae,
                    rmse: s.rmse,
                    mean_error: s.mean_error,
                });
                all.extend_from_slice(&s.samples);
            }
        }
        write_csv(&out.join("error_stats.csv"), &rows)?;
        write_histogram(&out.join("error_histogram.csv"), &NetworkErrorStats::from_samples(all))?;
    }
    let manifest = EvaluationManifest {
        scenario: eval.scenario_name.clone(),
        scenario_hash: eval.scenario_hash.clone(),
        controller: spec.controller.clone(),
        sensing: spec.sensing.name.clone(),
        seeds: spec.seeds.clone(),
        mean: eval.mean,
        stdev: eval.stdev,
    };
    write_atomic(&out.join("manifest.json"), canonical_json(&manifest).as_bytes())
}

/// `error_value,frequency` rows in ascending error order.
pub fn write_histogram(path: &Path, stats: &NetworkErrorStats) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        error_value: i64,
        frequency: u64,
    }
    let rows: Vec<Row> = stats
        .histogram()
        .into_iter()
        .map(|(error_value, frequency)| Row { error_value, frequency })
        .collect();
    write_csv(path, &rows)
}

pub fn load_manifest(dir: &Path) -> Result<EvaluationManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}
