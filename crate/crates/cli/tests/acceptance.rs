//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails. Pass criterion numbers as arguments to run
//! a subset.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trafficbed::control::{controller_by_name, Agents, ControllerContext};
use trafficbed::experiment::{
    evaluate, run_episode, train, EpisodeLog, EvalSpec, LogOptions, TrainSpec, DEFAULT_SEEDS,
};
use trafficbed::marl::{q_update, AgentParams, AgentStateKey, QTable, TableSet};
use trafficbed::metrics::{v_over_c, Los};
use trafficbed::perception::{replay_profile, NoiseProfile};
use trafficbed::scenario::builtin;

type Outcome = Result<String, String>;

/// Trained tables shared between criteria.
#[derive(Default)]
struct Cache {
    tables: HashMap<(String, String, u64), (Arc<TableSet>, Vec<f64>)>,
}

impl Cache {
    /// Tables and per-episode mean speeds for (scenario, reward, seed), 300 episodes.
    fn trained(&mut self, scenario: &str, reward: &str, seed: u64) -> (Arc<TableSet>, Vec<f64>) {
        self.tables
            .entry((scenario.to_string(), reward.to_string(), seed))
            .or_insert_with(|| {
                let r = train(
                    &TrainSpec {
                        scenario: builtin(scenario).unwrap(),
                        reward: reward.to_string(),
                        episodes: 300,
                        params: AgentParams::default(),
                        seed,
                    },
                    |_| {},
                )
                .unwrap();
                let speeds = r.curve.iter().map(|e| e.mean_system_speed).collect();
                (Arc::new(r.tables), speeds)
            })
            .clone()
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    check(
        elapsed <= limit,
        format!("{detail}; {:.1} s of {} s", elapsed.as_secs_f64(), limit.as_secs()),
    )
}

fn c1(_: &mut Cache) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let states: Vec<AgentStateKey> = (0..16u32)
        .map(|i| AgentStateKey {
            phase: i % 2,
            min_green_elapsed: i % 3 == 0,
            occupancy: vec![i, 20 - i],
            queue: vec![i / 2, 0],
        })
        .collect();
    let mut table = QTable::new(2);
    let mut reference: HashMap<Vec<u32>, [f64; 2]> = HashMap::new();
    for _ in 0..1000 {
        let s = &states[rng.gen_range(0..states.len())];
        let s2 = &states[rng.gen_range(0..states.len())];
        let a = rng.gen_range(0..2);
        let r: f64 = rng.gen_range(-100.0..100.0);
        let alpha: f64 = rng.gen_range(0.0001..1.0);
        let gamma: f64 = rng.gen_range(0.0..0.999);
        q_update(&mut table, s, a, r, s2, alpha, gamma).map_err(|e| e.to_string())?;
        let next = reference.get(&s2.flatten()).map_or(0.0, |q| q[0].max(q[1]));
        let q = reference.entry(s.flatten()).or_insert([0.0; 2]);
        q[a] = q[a] + alpha * (r + gamma * next - q[a]);
    }
    let mismatches = table
        .iter()
        .filter(|(k, e)| {
            let want = reference[&k.flatten()];
            e.values.iter().zip(want).any(|(x, y)| x.to_bits() != y.to_bits())
        })
        .count();
    if mismatches > 0 || table.len() != reference.len() {
        return Err(format!("{mismatches} states differ from the reference"));
    }
    within(
        start.elapsed(),
        Duration::from_secs(1),
        format!("{} states bitwise equal", table.len()),
    )
}

fn c2(_: &mut Cache) -> Outcome {
    let start = Instant::now();
    let (m, lm) = v_over_c(700.0, 1800.0, 22.0, 50.0).map_err(|e| e.to_string())?;
    let (h, lh) = v_over_c(1000.0, 1800.0, 22.0, 50.0).map_err(|e| e.to_string())?;
    let ok = (m - 0.88).abs() <= 0.005 && lm == Los::E && (h - 1.26).abs() <= 0.005 && lh == Los::F;
    let detail = format!("medium {m:.4} {lm}, heavy {h:.4} {lh}");
    check(ok, detail.clone())?;
    within(start.elapsed(), Duration::from_secs(1), detail)
}

fn c3(_: &mut Cache) -> Outcome {
    let start = Instant::now();
    let v5 = replay_profile(&NoiseProfile::v5(), 43, 10_000, 10, 3);
    let v8 = replay_profile(&NoiseProfile::v8(), 43, 10_000, 10, 4);
    let ok = (v5.mae - 2.21).abs() <= 0.15
        && (v5.rmse - 3.48).abs() <= 0.25
        && v5.mean_error > 0.0
        && (v8.mae - 1.73).abs() <= 0.15
        && (v8.rmse - 2.80).abs() <= 0.25
        && v8.mean_error > 0.0;
    let detail = format!(
        "v5 MAE {:.3} RMSE {:.3} mean {:+.3}; v8 MAE {:.3} RMSE {:.3} mean {:+.3}",
        v5.mae, v5.rmse, v5.mean_error, v8.mae, v8.rmse, v8.mean_error
    );
    check(ok, detail.clone())?;
    within(start.elapsed(), Duration::from_secs(120), detail)
}

fn c4(cache: &mut Cache) -> Outcome {
    let start = Instant::now();
    let mut ratios = Vec::new();
    for seed in DEFAULT_SEEDS {
        let (_, speeds) = cache.trained("grid3x3-medium-train", "avg_speed", seed);
        let first = speeds[..20].iter().sum::<f64>() / 20.0;
        let last = speeds[speeds.len() - 20..].iter().sum::<f64>() / 20.0;
        ratios.push(last / first);
    }
    let good = ratios.iter().filter(|&&r| r >= 1.15).count();
    let detail = format!(
        "last-20/first-20 speed {:?}, {good}/5 seeds >= 1.15",
        ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()
    );
    check(good >= 4, detail.clone())?;
    within(start.elapsed(), Duration::from_secs(1800), detail)
}

/// Per-seed reports of `controller` on `scenario`.
fn eval(
    scenario: &str,
    controller: &str,
    tables: Option<Arc<TableSet>>,
    sensing: NoiseProfile,
) -> Vec<trafficbed::metrics::MetricsReport> {
    let e = evaluate(&EvalSpec {
        scenario: builtin(scenario).unwrap(),
        controller: controller.to_string(),
        tables,
        sensing,
        seeds: DEFAULT_SEEDS.to_vec(),
        logs: LogOptions::default(),
    })
    .unwrap();
    e.per_seed.iter().map(|r| r.outcome.report).collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn c5(cache: &mut Cache) -> Outcome {
    let start = Instant::now();
    let (tables, _) = cache.trained("grid3x3-medium-train", "avg_speed", 0);
    let gt = NoiseProfile::ground_truth;
    let agents = mean(
        eval("grid3x3-medium-eval", "agents", Some(tables), gt())
            .iter()
            .map(|r| r.mean_waiting_time),
    );
    let fixed = mean(
        eval("grid3x3-medium-eval", "static", None, gt())
            .iter()
            .map(|r| r.mean_waiting_time),
    );
    let actuated = mean(
        eval("grid3x3-medium-eval", "actuated", None, gt())
            .iter()
            .map(|r| r.mean_waiting_time),
    );
    let detail = format!(
        "mean wait: agents {agents:.1} s, static {fixed:.1} s (ratio {:.2}), actuated {actuated:.1} s",
        agents / fixed
    );
    check(agents <= 0.5 * fixed && agents < actuated, detail.clone())?;
    within(start.elapsed(), Duration::from_secs(600), detail)
}

/// Per-seed relative change in trip duration from ground truth to v5.
fn degradation(cache: &mut Cache, reward: &str) -> Vec<f64> {
    let (tables, _) = cache.trained("grid3x3-medium-train", reward, 0);
    let clean = eval(
        "grid3x3-medium-eval",
        "agents",
        Some(tables.clone()),
        NoiseProfile::ground_truth(),
    );
    let noisy = eval("grid3x3-medium-eval", "agents", Some(tables), NoiseProfile::v5());
    clean
        .iter()
        .zip(&noisy)
        .map(|(c, n)| (n.mean_trip_duration - c.mean_trip_duration) / c.mean_trip_duration)
        .collect()
}

fn fmt_pct(xs: &[f64]) -> String {
    xs.iter()
        .map(|x| format!("{:+.1}%", 100.0 * x))
        .collect::<Vec<_>>()
        .join(" ")
}

fn c6(cache: &mut Cache) -> Outcome {
    let speed = degradation(cache, "avg_speed");
    let wait = degradation(cache, "diff_wait");
    let pressure = degradation(cache, "pressure");
    let speed_mean = mean(speed.iter().copied());
    let worse = |other: &[f64]| other.iter().zip(&speed).filter(|(o, s)| o > s).count();
    let (w, p) = (worse(&wait), worse(&pressure));
    let detail = format!(
        "avg_speed [{}] mean {:+.1}%; diff_wait [{}] worse in {w}/5; pressure [{}] worse in {p}/5",
        fmt_pct(&speed),
        100.0 * speed_mean,
        fmt_pct(&wait),
        fmt_pct(&pressure)
    );
    check(speed_mean <= 0.15 && w >= 4 && p >= 4, detail)
}

fn c7(cache: &mut Cache) -> Outcome {
    let (tables, _) = cache.trained("grid3x3-heavy-train", "avg_speed", 0);
    let run = |p: NoiseProfile| -> Vec<f64> {
        eval("grid3x3-heavy-eval", "agents", Some(tables.clone()), p)
            .iter()
            .map(|r| r.mean_waiting_time)
            .collect()
    };
    let (gt, v5, v8) = (
        run(NoiseProfile::ground_truth()),
        run(NoiseProfile::v5()),
        run(NoiseProfile::v8()),
    );
    let between = (0..gt.len())
        .filter(|&k| gt[k].min(v5[k]) < v8[k] && v8[k] < gt[k].max(v5[k]))
        .count();
    let rows: Vec<String> = (0..gt.len())
        .map(|k| format!("gt {:.1} v8 {:.1} v5 {:.1}", gt[k], v8[k], v5[k]))
        .collect();
    check(between >= 4, format!("{between}/5 seeds in order; {}", rows.join(", ")))
}

fn c8(_: &mut Cache) -> Outcome {
    let cfg = builtin("single-spillback").unwrap();
    let trained = train(
        &TrainSpec {
            scenario: cfg.clone(),
            reward: "queue".to_string(),
            episodes: 100,
            params: AgentParams::default(),
            seed: 0,
        },
        |_| {},
    )
    .map_err(|e| e.to_string())?;
    let e = evaluate(&EvalSpec {
        scenario: cfg.clone(),
        controller: "agents".to_string(),
        tables: Some(Arc::new(trained.tables)),
        sensing: NoiseProfile::ground_truth(),
        seeds: vec![0],
        logs: LogOptions::all(),
    })
    .map_err(|e| e.to_string())?;
    let rows = &e.per_seed[0].log.observations;
    let demand_end = cfg.demand_end();
    let true_queue = |r: &trafficbed::experiment::ObservationRow| (r.lane_stopped + r.lane_deferred) as f64;
    // The approach whose real queue is longest when demand stops.
    let lane = rows
        .iter()
        .filter(|r| (r.clock - demand_end).abs() < 2.6)
        .max_by(|a, b| true_queue(a).total_cmp(&true_queue(b)))
        .map(|r| r.lane.clone())
        .ok_or("no observations")?;
    let series: Vec<_> = rows
        .iter()
        .filter(|r| r.lane == lane && r.clock <= demand_end)
        .collect();
    let net = cfg.build_network().map_err(|e| e.to_string())?;
    let zone = net.lane(net.lane_idx(&lane).ok_or("unknown lane")?).detection_zone;
    // Queued vehicles sit 7.5 m apart front to front.
    let capacity = (zone / 7.5).ceil();
    // Lane maxima by thirds of the demand period: the observed queue pins at
    // the zone ceiling while the real one keeps climbing past it.
    let k = series.len() / 3;
    let lane_thirds = [&series[..k], &series[k..2 * k], &series[2 * k..]];
    let obs_max: Vec<f64> = lane_thirds
        .iter()
        .map(|xs| xs.iter().map(|r| r.observed_queue as f64).fold(0.0, f64::max))
        .collect();
    let true_max: Vec<f64> = lane_thirds
        .iter()
        .map(|xs| xs.iter().map(|r| true_queue(r)).fold(0.0, f64::max))
        .collect();
    // Whole-network real queue, by thirds.
    let mut network: Vec<(f64, f64)> = Vec::new();
    for r in rows.iter().filter(|r| r.clock <= demand_end) {
        match network.last_mut() {
            Some((t, q)) if *t == r.clock => *q += true_queue(r),
            _ => network.push((r.clock, true_queue(r))),
        }
    }
    let third = network.len() / 3;
    let part = |xs: &[(f64, f64)]| xs.iter().map(|x| x.1).sum::<f64>() / xs.len() as f64;
    let thirds = [
        part(&network[..third]),
        part(&network[third..2 * third]),
        part(&network[2 * third..]),
    ];
    let detail = format!(
        "network queue by thirds {:.1} / {:.1} / {:.1}; lane {lane} maxima by thirds: observed {obs_max:?}, real {true_max:?}, zone holds {capacity}",
        thirds[0], thirds[1], thirds[2]
    );
    let ok = thirds[0] < thirds[1]
        && thirds[1] < thirds[2]
        && obs_max.iter().all(|&m| m <= capacity)
        && obs_max[1] == capacity
        && obs_max[2] == capacity
        && true_max[1] > capacity
        && true_max[2] > true_max[1];
    check(ok, detail)
}

fn c9(cache: &mut Cache) -> Outcome {
    let start = Instant::now();
    let (tables, _) = cache.trained("grid3x3-medium-train", "avg_speed", 0);
    let cfg = builtin("grid3x3-medium-eval").unwrap();
    let net = Arc::new(cfg.build_network().unwrap());
    let gt = NoiseProfile::ground_truth();
    let seed = 1;

    let mut first = Agents::new(tables.clone(), &net)
        .map_err(|e| e.to_string())?
        .record_states();
    let mut log = EpisodeLog::default();
    run_episode(&cfg, &net, &mut first, &gt, seed, LogOptions::default(), &mut log).map_err(|e| e.to_string())?;
    // The most visited known state becomes unseen.
    let mut counts: HashMap<(usize, &AgentStateKey), usize> = HashMap::new();
    for (_, k, key) in &first.visited {
        if tables.agents[*k].table.get(key).is_some() {
            *counts.entry((*k, key)).or_default() += 1;
        }
    }
    let (&(k, key), _) = counts
        .iter()
        .max_by_key(|(kk, n)| (**n, std::cmp::Reverse(kk.0), kk.1.clone()))
        .ok_or("no known state visited")?;
    let mut cut = (*tables).clone();
    cut.agents[k].table.remove(key);
    let before: Vec<(f64, usize)> = first.unseen.clone();

    let mut second = Agents::new(Arc::new(cut), &net).map_err(|e| e.to_string())?;
    let mut log = EpisodeLog::default();
    let options = LogOptions {
        signal_trace: true,
        ..LogOptions::default()
    };
    let out = run_episode(&cfg, &net, &mut second, &gt, seed, options, &mut log).map_err(|e| e.to_string())?;
    let entered = second
        .unseen
        .iter()
        .find(|&&(t, j)| j == k && !before.contains(&(t, j)))
        .map(|&(t, _)| t)
        .ok_or("the removed state was never reached")?;
    let id = &net.intersections()[k].id;
    let trace: Vec<_> = log.signal_trace.iter().filter(|r| &r.intersection == id).collect();
    let phase_then = trace
        .iter()
        .rev()
        .find(|r| r.clock <= entered)
        .map(|r| r.phase)
        .unwrap_or(0);
    let changed = trace
        .iter()
        .find(|r| r.clock > entered && !r.in_yellow && r.phase != phase_then)
        .map(|r| r.clock);
    let bound = cfg.timing.max_stuck + net.intersections()[k].yellow_duration + cfg.timing.sim_tick + 1e-9;
    let delay = changed.map(|t| t - entered);
    let fallback_ok = !out.truncated && delay.is_some_and(|d| d <= bound);

    let blind = NoiseProfile {
        name: "blind".to_string(),
        drop_rate: 1.0,
        ..NoiseProfile::ground_truth()
    };
    let ctx = ControllerContext {
        scenario: &cfg,
        net: &net,
        tables: Some(tables.clone()),
    };
    let mut agents = controller_by_name("agents", &ctx).map_err(|e| e.to_string())?;
    let mut log = EpisodeLog::default();
    let options = LogOptions {
        observations: true,
        ..LogOptions::default()
    };
    let blind_out =
        run_episode(&cfg, &net, agents.as_mut(), &blind, seed, options, &mut log).map_err(|e| e.to_string())?;
    let first_clock = log.observations.first().map(|r| r.clock).unwrap_or(0.0);
    let fresh_later = log
        .observations
        .iter()
        .filter(|r| r.clock > first_clock && !r.stale)
        .count();
    let stale_ok = !log.observations.is_empty() && fresh_later == 0 && !blind_out.truncated;

    let detail = format!(
        "intersection {id} entered unseen state at {entered:.1} s, phase changed after {}; drop_rate=1: {fresh_later} fresh readings after the first, {} trips, truncated {}",
        delay.map_or("never".to_string(), |d| format!("{d:.2} s")),
        blind_out.report.trips_completed,
        blind_out.truncated
    );
    check(fallback_ok && stale_ok, detail.clone())?;
    within(start.elapsed(), Duration::from_secs(120), detail)
}

fn cli(args: &[&str], workers: &str) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_trafficbed"))
        .args(args)
        .env("TRAFFICBED_WORKERS", workers)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

/// Every file under `dir`, relative path to bytes.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c10(_: &mut Cache) -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    let mut compared = Vec::new();
    let mut differing = Vec::new();
    for (a, b, workers) in [("a", "b", ["1", "1"]), ("c", "d", ["1", "2"])] {
        cli(
            &[
                "train",
                "--scenario",
                "single-asymmetric",
                "--reward",
                "avg_speed",
                "--episodes",
                "20",
                "--seeds",
                "7,8",
                "--out",
                &d(&format!("train-{a}")),
            ],
            workers[0],
        )?;
        cli(
            &[
                "train",
                "--scenario",
                "single-asymmetric",
                "--reward",
                "avg_speed",
                "--episodes",
                "20",
                "--seeds",
                "7,8",
                "--out",
                &d(&format!("train-{b}")),
            ],
            workers[1],
        )?;
        let tables = format!("agents:{}/seed7/tables.json", d(&format!("train-{a}")));
        for (run, w) in [(a, workers[0]), (b, workers[1])] {
            cli(
                &[
                    "evaluate",
                    "--scenario",
                    "single-asymmetric",
                    "--controller",
                    &tables,
                    "--sensing",
                    "v5",
                    "--seeds",
                    "0..3",
                    "--out",
                    &d(&format!("eval-{run}")),
                ],
                w,
            )?;
            cli(
                &[
                    "evaluate",
                    "--scenario",
                    "single-asymmetric",
                    "--controller",
                    "static",
                    "--seeds",
                    "0..3",
                    "--out",
                    &d(&format!("static-{run}")),
                ],
                w,
            )?;
            cli(
                &[
                    "calibrate",
                    "--target",
                    "v8",
                    "--snapshots",
                    "2000",
                    "--out",
                    &d(&format!("cal-{run}")),
                ],
                w,
            )?;
            cli(
                &[
                    "compare",
                    &d(&format!("static-{run}")),
                    &d(&format!("eval-{run}")),
                    "--out",
                    &d(&format!("cmp-{run}")),
                ],
                w,
            )?;
        }
        for stage in ["train", "eval", "static", "cal", "cmp"] {
            let (x, y) = (
                snapshot(&tmp.path().join(format!("{stage}-{a}"))),
                snapshot(&tmp.path().join(format!("{stage}-{b}"))),
            );
            if x.is_empty() {
                differing.push(format!("{stage}: no files"));
            } else if x != y {
                differing.push(format!("{stage} (workers {} vs {})", workers[0], workers[1]));
            }
            compared.push(x.len());
        }
    }
    let files: usize = compared.iter().sum();
    check(
        differing.is_empty(),
        format!("{files} files compared across reruns and worker counts; differing: {differing:?}"),
    )
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, fn(&mut Cache) -> Outcome); 10] = [
        ("Q-update oracle equivalence", c1),
        ("v/C exactness", c2),
        ("noise calibration replay", c3),
        ("learning raises mean speed", c4),
        ("agents beat static and actuated on waiting", c5),
        ("avg_speed most robust to v5 noise", c6),
        ("v8 between v5 and ground truth", c7),
        ("queue reward blind to spillback", c8),
        ("watchdog fallback and dropped captures", c9),
        ("CLI artifacts byte-identical", c10),
    ];
    let mut cache = Cache::default();
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let n = k + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(&mut cache)))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d} [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {d} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
