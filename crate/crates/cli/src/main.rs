//! `trafficbed` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{builder::PossibleValuesParser, Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;

use trafficbed::experiment::{
    evaluate, load_manifest, train, worker_pool, write_evaluation, write_training, EvalSpec, LogOptions, TrainSpec,
};
use trafficbed::io::write_csv_records;
use trafficbed::marl::{load_tables, AgentParams};
use trafficbed::metrics::{compare_reports, LabeledReport};
use trafficbed::perception::{
    calibrate_profile, replay_profile, resolve_profile, CalibrationOptions, CalibrationTargets,
};
use trafficbed::rewards::REWARD_NAMES;
use trafficbed::scenario::{builtin, builtin_names, resolve, validate_scenario, ScenarioConfig};

#[derive(Parser)]
#[command(name = "trafficbed", version, about = "Traffic-signal control test-bed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one Q-learning agent per intersection.
    Train(TrainArgs),
    /// Run a controller over several seeds and write reports.
    Evaluate(EvaluateArgs),
    /// Fit a detection-noise profile to target error statistics.
    Calibrate(CalibrateArgs),
    /// Percent change of every metric from one evaluation to another.
    Compare(CompareArgs),
    /// Check a scenario, and optionally tables and a sensing profile, without running.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Builtin scenario name or TOML path.
    #[arg(long)]
    scenario: String,
    #[arg(long, value_parser = PossibleValuesParser::new(REWARD_NAMES))]
    reward: String,
    #[arg(long, default_value_t = 300)]
    episodes: usize,
    /// Comma list ("0,3,7") or half-open range ("0..5").
    #[arg(long, default_value = "0")]
    seeds: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    scenario: String,
    /// static, actuated or agents:PATH
    #[arg(long)]
    controller: String,
    /// Profile name (ground_truth, v5, v8) or TOML path.
    #[arg(long, default_value = "ground_truth")]
    sensing: String,
    #[arg(long, default_value = "0..5")]
    seeds: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Preset targets: v5 or v8.
    #[arg(long, conflicts_with_all = ["mae", "rmse", "mean"])]
    target: Option<String>,
    #[arg(long, requires_all = ["rmse", "mean"])]
    mae: Option<f64>,
    #[arg(long)]
    rmse: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    mean: Option<f64>,
    /// Name written into the profile; defaults to the preset or "calibrated".
    #[arg(long)]
    name: Option<String>,
    /// Approaches summed into the network-level error.
    #[arg(long, default_value_t = 43)]
    lanes: usize,
    /// Monte-Carlo snapshots for the replay check.
    #[arg(long, default_value_t = 10_000)]
    snapshots: usize,
    #[arg(long, default_value = "0")]
    seeds: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Baseline evaluation directory.
    baseline: PathBuf,
    /// Candidate evaluation directory.
    candidate: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    controller: Option<String>,
    #[arg(long)]
    sensing: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_scenario(spec: &str) -> Result<ScenarioConfig> {
    let cfg = if !Path::new(spec).exists() && builtin_names().iter().any(|n| n == spec) {
        builtin(spec)?
    } else {
        resolve(spec).with_context(|| format!("loading scenario {spec}"))?
    };
    let violations = validate_scenario(&cfg);
    if !violations.is_empty() {
        bail!("invalid scenario {}: {}", cfg.name, violations.join("; "));
    }
    Ok(cfg)
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let text = text.trim();
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if a >= b {
            bail!("empty seed range {text}");
        }
        return Ok((a..b).collect());
    }
    let seeds = text
        .split(',')
        .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed '{s}'")))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    Ok(seeds)
}

/// Splits `agents:PATH` into the registry name and the table path.
fn parse_controller(text: &str) -> (&str, Option<&Path>) {
    match text.split_once(':') {
        Some((name, path)) => (name, Some(Path::new(path))),
        None => (text, None),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let scenario = load_scenario(&a.scenario)?;
    let seeds = parse_seeds(&a.seeds)?;
    if a.episodes == 0 {
        bail!("--episodes must be at least 1");
    }
    let pool = worker_pool()?;
    let results: Vec<Result<()>> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let spec = TrainSpec {
                    scenario: scenario.clone(),
                    reward: a.reward.clone(),
                    episodes: a.episodes,
                    params: AgentParams::default(),
                    seed,
                };
                let result = train(&spec, |s| {
                    info!(
                        "seed {seed} episode {} mean speed {:.3} m/s mean wait {:.1} s{}",
                        s.episode,
                        s.mean_system_speed,
                        s.mean_waiting_time,
                        if s.truncated { " (truncated)" } else { "" }
                    )
                })?;
                let dir = a.out.join(format!("seed{seed}"));
                write_training(&result, &dir)?;
                info!("seed {seed}: wrote {}", dir.display());
                Ok(())
            })
            .collect()
    });
    results.into_iter().collect()
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let scenario = load_scenario(&a.scenario)?;
    let seeds = parse_seeds(&a.seeds)?;
    let sensing = resolve_profile(&a.sensing)?;
    let (controller, table_path) = parse_controller(&a.controller);
    let tables = match (controller, table_path) {
        ("agents", Some(p)) => Some(Arc::new(load_tables(p)?)),
        ("agents", None) => bail!("the agents controller is given as agents:PATH"),
        (_, Some(_)) => bail!("only the agents controller takes a table path"),
        _ => None,
    };
    let spec = EvalSpec {
        scenario,
        controller: controller.to_string(),
        tables,
        sensing,
        seeds,
        logs: LogOptions::all(),
    };
    let eval = evaluate(&spec)?;
    for r in &eval.per_seed {
        if r.outcome.truncated {
            warn!(
                "seed {} hit max_sim_time with {} trips unfinished",
                r.seed, r.outcome.report.trips_unfinished
            );
        }
        if let Some(s) = &r.error_stats {
            info!(
                "seed {} sensing error MAE {:.3} RMSE {:.3} mean {:+.3}",
                r.seed, s.mae, s.rmse, s.mean_error
            );
        }
    }
    write_evaluation(&eval, &spec, &a.out)?;
    let m = &eval.mean;
    info!(
        "{} / {} / {}: mean wait {:.2} s, mean trip {:.2} s, mean speed {:.3} m/s over {} seeds",
        eval.scenario_name,
        a.controller,
        spec.sensing.name,
        m.mean_waiting_time,
        m.mean_trip_duration,
        m.mean_speed,
        spec.seeds.len()
    );
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let (targets, default_name) = match (&a.target, a.mae, a.rmse, a.mean) {
        (Some(t), ..) if t == "v5" => (
            CalibrationTargets {
                mae: 2.21,
                rmse: 3.48,
                mean: 0.8,
            },
            "v5",
        ),
        (Some(t), ..) if t == "v8" => (
            CalibrationTargets {
                mae: 1.73,
                rmse: 2.80,
                mean: 0.5,
            },
            "v8",
        ),
        (Some(t), ..) => bail!("unknown calibration target '{t}' (expected v5 or v8)"),
        (None, Some(mae), Some(rmse), Some(mean)) => (CalibrationTargets { mae, rmse, mean }, "calibrated"),
        _ => bail!("give --target or all of --mae, --rmse, --mean"),
    };
    let name = a.name.as_deref().unwrap_or(default_name);
    let seed = *parse_seeds(&a.seeds)?.first().expect("non-empty");
    let cal = calibrate_profile(name, targets, a.lanes, CalibrationOptions::default())?;
    let replay = replay_profile(
        &cal.profile,
        a.lanes,
        a.snapshots,
        CalibrationOptions::default().max_true_occupancy,
        seed,
    );

    trafficbed::io::write_atomic(&a.out.join("profile.toml"), cal.profile.to_toml().as_bytes())?;
    let header: Vec<String> = ["statistic", "target", "exact", "residual", "replay"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = [
        ("mae", targets.mae, cal.achieved.mae, cal.residuals[0], replay.mae),
        ("rmse", targets.rmse, cal.achieved.rmse, cal.residuals[1], replay.rmse),
        (
            "mean",
            targets.mean,
            cal.achieved.mean,
            cal.residuals[2],
            replay.mean_error,
        ),
    ]
    .iter()
    .map(|(s, t, e, r, p)| {
        vec![
            s.to_string(),
            t.to_string(),
            e.to_string(),
            r.to_string(),
            p.to_string(),
        ]
    })
    .collect::<Vec<_>>();
    write_csv_records(&a.out.join("calibration.csv"), &header, &rows)?;
    info!(
        "{name}: MAE {:.3} RMSE {:.3} mean {:+.3} (replay over {} snapshots: {:.3} / {:.3} / {:+.3})",
        cal.achieved.mae, cal.achieved.rmse, cal.achieved.mean, a.snapshots, replay.mae, replay.rmse, replay.mean_error
    );
    if !cal.converged {
        bail!(
            "calibration did not reach the targets within tolerance; residuals {:?}",
            cal.residuals
        );
    }
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let label = |dir: &Path| -> Result<LabeledReport> {
        let m = load_manifest(dir).with_context(|| format!("reading {}", dir.display()))?;
        Ok(LabeledReport {
            scenario_hash: m.scenario_hash,
            report: m.mean,
        })
    };
    let deltas = compare_reports(&label(&a.baseline)?, &label(&a.candidate)?)?;
    let header: Vec<String> = ["metric", "baseline", "candidate", "percent_change"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = deltas
        .iter()
        .map(|d| {
            vec![
                d.metric.to_string(),
                d.baseline.to_string(),
                d.candidate.to_string(),
                d.percent.map_or(String::new(), |p| p.to_string()),
            ]
        })
        .collect();
    for d in &deltas {
        let pct = d.percent.map_or("n/a".to_string(), |p| format!("{p:+.2}%"));
        println!(
            "{:<20} {:>12.3} {:>12.3} {:>10}",
            d.metric, d.baseline, d.candidate, pct
        );
    }
    if let Some(out) = &a.out {
        write_csv_records(&out.join("compare.csv"), &header, &rows)?;
    }
    Ok(())
}

fn cmd_validate(a: ValidateArgs) -> Result<()> {
    let scenario = load_scenario(&a.scenario)?;
    let net = scenario.build_network()?;
    println!(
        "scenario {} ok (hash {}, network {})",
        scenario.name,
        scenario.hash(),
        net.hash()
    );
    if let Some(c) = &a.controller {
        match parse_controller(c) {
            ("agents", Some(p)) => {
                let tables = load_tables(p)?;
                tables.check_network(&net)?;
                println!(
                    "tables {} ok ({} agents, reward {})",
                    p.display(),
                    tables.agents.len(),
                    tables.reward
                );
            }
            ("agents", None) => bail!("the agents controller is given as agents:PATH"),
            (name, None) if name == "static" || name == "actuated" => println!("controller {name} ok"),
            (name, _) => bail!("unknown controller '{name}' (expected static, actuated or agents:PATH)"),
        }
    }
    if let Some(s) = &a.sensing {
        let p = resolve_profile(s)?;
        println!("sensing profile {} ok", p.name);
    }
    Ok(())
}
