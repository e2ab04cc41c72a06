//! Command-line pipeline: solve a case, generate a scenario dataset, train a
//! surrogate, evaluate a checkpoint, and rank evaluation runs.

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand};
use gridflow::grid::{build_ybus, check_connectivity, parse_matpower_case};
use gridflow::metrics::{
    compute_metrics, out_of_bound_rate, rank_models, read_metrics_csv, write_report, Channel,
    MetricsRecord, RankEntry, ScatterPoint, ANGLE_BOUNDS, MAGNITUDE_BOUNDS,
};
use gridflow::model::{
    load_checkpoint, model_from_spec, norm_stats_digest, predict, save_checkpoint,
    CheckpointHeader, GcnModel, GgnnModel, Model, ModelSpec,
};
use gridflow::pf::{nr_solve, SolveOptions};
use gridflow::scenario::{
    generate_dataset, load_dataset, save_dataset, split_dataset, Dataset, ScenarioConfig, Split,
};
use gridflow::train::{train, PhysicsContext, TrainConfig};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gridflow", version, about = "AC power flow solver and graph-network surrogate pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the AC power flow for a MATPOWER case and print the solution.
    Solve(SolveArgs),
    /// Generate a perturbed-scenario dataset from a base case.
    Generate(GenerateArgs),
    /// Train a surrogate model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split and write metric reports.
    Eval(EvalArgs),
    /// Aggregate evaluation runs into a cross-model rank table.
    Rank(RankArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// MATPOWER case file.
    case: PathBuf,
    /// Convergence tolerance on the max power mismatch, in p.u.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Iteration cap.
    #[arg(long, default_value_t = 50)]
    max_iter: usize,
    /// Emit the solution as JSON (also the default).
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenerateArgs {
    /// MATPOWER case file for the base grid.
    case: PathBuf,
    #[arg(long)]
    samples: usize,
    #[arg(long)]
    seed: u64,
    /// Load multiplier deltas as "lo,hi", e.g. "-0.4,0.4".
    #[arg(long, value_parser = parse_range)]
    load_range: Option<(f64, f64)>,
    /// Fraction of scenarios that also get a topology perturbation.
    #[arg(long)]
    topology_fraction: Option<f64>,
    /// Parallel solver workers; results are identical at any count.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(short, long)]
    output: PathBuf,
    /// Overwrite an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory produced by `generate`.
    dataset_dir: PathBuf,
    /// Architecture to train.
    #[arg(long, value_parser = ["ggnn", "gcn"])]
    model: String,
    /// TOML or JSON file with TrainConfig fields; omitted fields use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    checkpoint: PathBuf,
    /// Directory produced by `generate`.
    dataset_dir: PathBuf,
    /// Split to evaluate on.
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RankArgs {
    /// One or more directories produced by `eval`.
    eval_dirs: Vec<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    force: bool,
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("expected \"lo,hi\"".into());
    }
    let lo = parts[0].trim().parse::<f64>().map_err(|e| e.to_string())?;
    let hi = parts[1].trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((lo, hi))
}

/// Written once into every command's output directory.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_digest: String,
    seeds: Vec<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    tool_version: String,
    wall_time_seconds: f64,
}

fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

fn write_run_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    std::fs::write(
        dir.join("run_manifest.json"),
        serde_json::to_string_pretty(manifest)?,
    )?;
    Ok(())
}

/// Refuses to clobber pre-existing outputs unless --force was given.
fn claim_output_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() && dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        if !force {
            return Err(CliError::Usage(anyhow!(
                "output directory {} already has contents; pass --force to overwrite",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir).map_err(|e| CliError::Runtime(e.into()))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(e.into()))?;
    Ok(())
}

enum CliError {
    /// Bad invocation or inputs: exit code 2.
    Usage(anyhow::Error),
    /// Failure while doing the work: exit code 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn load_case(path: &Path) -> Result<gridflow::grid::Network, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(anyhow!("cannot read case file {}: {e}", path.display())))?;
    parse_matpower_case(&text).map_err(|e| CliError::Usage(anyhow!("invalid case file: {e}")))
}

fn cmd_solve(args: &SolveArgs) -> Result<(), CliError> {
    let net = load_case(&args.case)?;
    let ybus = build_ybus(&net).map_err(|e| CliError::Usage(e.into()))?;
    if !check_connectivity(&net).is_connected() {
        return Err(CliError::Usage(anyhow!(
            "case is not a single connected component"
        )));
    }
    let opts = SolveOptions {
        tolerance: args.tol,
        max_iterations: args.max_iter,
    };
    let sol = nr_solve(&net, &ybus, &opts, None).map_err(|e| CliError::Runtime(e.into()))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&sol).map_err(|e| CliError::Runtime(e.into()))?
    );
    if !sol.converged {
        return Err(CliError::Runtime(anyhow!(
            "power flow did not converge in {} iterations (max mismatch {:.3e})",
            sol.iterations,
            sol.max_mismatch
        )));
    }
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let started = std::time::Instant::now();
    let net = load_case(&args.case)?;
    let mut cfg = ScenarioConfig {
        samples: args.samples,
        seed: args.seed,
        ..Default::default()
    };
    if let Some(range) = args.load_range {
        cfg.load_range = range;
    }
    if let Some(f) = args.topology_fraction {
        cfg.topology_fraction = f;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.into()))?;
    claim_output_dir(&args.output, args.force)?;
    let mut dataset = generate_dataset(&net, &cfg, args.workers.max(1))
        .map_err(|e| CliError::Runtime(e.into()))?;
    split_dataset(&mut dataset, (0.7, 0.15, 0.15), cfg.seed)
        .map_err(|e| CliError::Runtime(e.into()))?;
    save_dataset(&dataset, &args.output).map_err(|e| CliError::Runtime(e.into()))?;
    let digest = fnv1a_hex(serde_json::to_string(&cfg).unwrap().as_bytes());
    write_run_manifest(
        &args.output,
        &RunManifest {
            command: "generate".into(),
            config_digest: digest,
            seeds: vec![args.seed],
            inputs: vec![args.case.display().to_string()],
            outputs: vec!["samples.jsonl".into(), "manifest.json".into()],
            tool_version: env!("CARGO_PKG_VERSION").into(),
            wall_time_seconds: started.elapsed().as_secs_f64(),
        },
    )?;
    log::info!(
        "generated {} samples ({} discards) in {:.1}s",
        dataset.samples.len(),
        dataset.discard_count,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(anyhow!("cannot read config {}: {e}", path.display())))?;
    let cfg: TrainConfig = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(anyhow!("invalid JSON config: {e}")))?
    } else {
        toml::from_str(&text).map_err(|e| CliError::Usage(anyhow!("invalid TOML config: {e}")))?
    };
    cfg.validate().map_err(|e| CliError::Usage(e.into()))?;
    Ok(cfg)
}

fn load_dataset_dir(dir: &Path) -> Result<Dataset, CliError> {
    load_dataset(dir)
        .map_err(|e| CliError::Usage(anyhow!("cannot load dataset {}: {e}", dir.display())))
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let started = std::time::Instant::now();
    let cfg = load_train_config(args.config.as_deref())?;
    let dataset = load_dataset_dir(&args.dataset_dir)?;
    let n_nodes = dataset
        .samples
        .first()
        .map(|s| s.n_nodes())
        .ok_or_else(|| CliError::Usage(anyhow!("dataset is empty")))?;
    let model: Box<dyn Model> = match args.model.as_str() {
        "ggnn" => Box::new(GgnnModel::default()),
        _ => Box::new(GcnModel::new(n_nodes)),
    };
    claim_output_dir(&args.output, args.force)?;
    let physics: Option<PhysicsContext> = None;
    let outcome =
        train(model.as_ref(), &dataset, &cfg, physics.as_ref()).map_err(|e| CliError::Runtime(e.into()))?;
    let norm = dataset.norm_stats.as_ref().expect("trained dataset has stats");
    let header = CheckpointHeader {
        spec: model.spec(),
        norm_stats_digest: norm_stats_digest(norm),
        seed: cfg.seed,
        param_count: outcome.params.iter().map(|t| t.len()).sum(),
    };
    save_checkpoint(&args.output.join("model.ckpt"), &header, &outcome.params)
        .map_err(|e| CliError::Runtime(e.into()))?;
    std::fs::write(args.output.join("history.csv"), outcome.history.to_csv())
        .map_err(|e| CliError::Runtime(e.into()))?;
    let summary = serde_json::json!({
        "model": args.model,
        "best_epoch": outcome.history.best_epoch,
        "best_val_loss": outcome.history.best_val_loss,
        "stopped_early": outcome.history.stopped_early,
        "epochs_run": outcome.history.epochs.len(),
        "config": cfg,
    });
    std::fs::write(
        args.output.join("train_summary.json"),
        serde_json::to_string_pretty(&summary).unwrap(),
    )
    .map_err(|e| CliError::Runtime(e.into()))?;
    let digest = fnv1a_hex(serde_json::to_string(&cfg).unwrap().as_bytes());
    write_run_manifest(
        &args.output,
        &RunManifest {
            command: "train".into(),
            config_digest: digest,
            seeds: vec![cfg.seed],
            inputs: vec![args.dataset_dir.display().to_string()],
            outputs: vec![
                "model.ckpt".into(),
                "history.csv".into(),
                "train_summary.json".into(),
            ],
            tool_version: env!("CARGO_PKG_VERSION").into(),
            wall_time_seconds: started.elapsed().as_secs_f64(),
        },
    )?;
    log::info!(
        "trained {} for {} epochs (best val {:.3e} at epoch {})",
        args.model,
        outcome.history.epochs.len(),
        outcome.history.best_val_loss,
        outcome.history.best_epoch
    );
    Ok(())
}

fn model_name(spec: &ModelSpec) -> &'static str {
    match spec {
        ModelSpec::Ggnn { .. } => "ggnn",
        ModelSpec::Gcn { .. } => "gcn",
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let started = std::time::Instant::now();
    let (header, params) =
        load_checkpoint(&args.checkpoint).map_err(|e| CliError::Usage(e.into()))?;
    let dataset = load_dataset_dir(&args.dataset_dir)?;
    let norm = dataset
        .norm_stats
        .as_ref()
        .ok_or_else(|| CliError::Usage(anyhow!("dataset has no normalization stats")))?;
    if norm_stats_digest(norm) != header.norm_stats_digest {
        return Err(CliError::Usage(anyhow!(
            "checkpoint was trained with different normalization stats than this dataset"
        )));
    }
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        _ => Split::Test,
    };
    claim_output_dir(&args.output, args.force)?;
    let model = model_from_spec(&header.spec);
    let system = args
        .dataset_dir
        .file_name()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "dataset".into());
    let name = model_name(&header.spec);

    let mut v_pred = Vec::new();
    let mut v_true = Vec::new();
    let mut t_pred = Vec::new();
    let mut t_true = Vec::new();
    let mut scatter = Vec::new();
    for i in dataset.indices_of(split) {
        let sample = &dataset.samples[i];
        let pred = predict(model.as_ref(), &params, sample, norm)
            .map_err(|e| CliError::Runtime(e.into()))?;
        for bus in 0..sample.n_nodes() {
            let (tv, tt) = sample.targets[bus];
            v_pred.push(pred.v_hat[bus]);
            v_true.push(tv);
            t_pred.push(pred.theta_hat[bus]);
            t_true.push(tt);
            scatter.push(ScatterPoint {
                bus_id: bus,
                sample_id: sample.scenario_id,
                channel: Channel::Magnitude,
                actual: tv,
                predicted: pred.v_hat[bus],
            });
            scatter.push(ScatterPoint {
                bus_id: bus,
                sample_id: sample.scenario_id,
                channel: Channel::Angle,
                actual: tt,
                predicted: pred.theta_hat[bus],
            });
        }
    }
    if v_true.is_empty() {
        return Err(CliError::Usage(anyhow!("split '{}' is empty", args.split)));
    }
    let c_pred: Vec<f64> = v_pred.iter().chain(t_pred.iter()).cloned().collect();
    let c_true: Vec<f64> = v_true.iter().chain(t_true.iter()).cloned().collect();
    let records: Vec<MetricsRecord> = vec![
        compute_metrics(&v_pred, &v_true, Channel::Magnitude, name, &system)
            .map_err(|e| CliError::Runtime(e.into()))?,
        compute_metrics(&t_pred, &t_true, Channel::Angle, name, &system)
            .map_err(|e| CliError::Runtime(e.into()))?,
        compute_metrics(&c_pred, &c_true, Channel::Combined, name, &system)
            .map_err(|e| CliError::Runtime(e.into()))?,
    ];
    write_report(&records, None, &scatter, &args.output)
        .map_err(|e| CliError::Runtime(e.into()))?;
    let bounds = serde_json::json!({
        "magnitude_out_of_bound_rate": out_of_bound_rate(&v_pred, MAGNITUDE_BOUNDS),
        "angle_out_of_bound_rate": out_of_bound_rate(&t_pred, ANGLE_BOUNDS),
        "magnitude_bounds": MAGNITUDE_BOUNDS,
        "angle_bounds": ANGLE_BOUNDS,
    });
    std::fs::write(
        args.output.join("bounds.json"),
        serde_json::to_string_pretty(&bounds).unwrap(),
    )
    .map_err(|e| CliError::Runtime(e.into()))?;
    write_run_manifest(
        &args.output,
        &RunManifest {
            command: "eval".into(),
            config_digest: header.norm_stats_digest.clone(),
            seeds: vec![header.seed],
            inputs: vec![
                args.checkpoint.display().to_string(),
                args.dataset_dir.display().to_string(),
            ],
            outputs: vec![
                "metrics.csv".into(),
                "scatter.csv".into(),
                "summary.json".into(),
                "bounds.json".into(),
            ],
            tool_version: env!("CARGO_PKG_VERSION").into(),
            wall_time_seconds: started.elapsed().as_secs_f64(),
        },
    )?;
    Ok(())
}

fn cmd_rank(args: &RankArgs) -> Result<(), CliError> {
    let started = std::time::Instant::now();
    if args.eval_dirs.is_empty() {
        return Err(CliError::Usage(anyhow!("rank needs at least one eval directory")));
    }
    let mut records = Vec::new();
    for dir in &args.eval_dirs {
        let text = std::fs::read_to_string(dir.join("metrics.csv")).map_err(|e| {
            CliError::Usage(anyhow!("cannot read {}/metrics.csv: {e}", dir.display()))
        })?;
        records.extend(read_metrics_csv(&text).map_err(|e| CliError::Usage(e.into()))?);
    }
    let mut entries = Vec::new();
    for r in records.iter().filter(|r| r.channel == Channel::Combined) {
        for (metric, value) in [
            ("mse", Some(r.mse)),
            ("rmse", Some(r.rmse)),
            ("mae", Some(r.mae)),
            ("nrmse", r.nrmse),
            ("r2", r.r_squared),
        ] {
            if let Some(value) = value {
                entries.push(RankEntry {
                    model: r.model.clone(),
                    system: r.system.clone(),
                    metric: metric.into(),
                    value,
                });
            }
        }
    }
    let table = rank_models(&entries).map_err(|e| CliError::Runtime(e.into()))?;
    claim_output_dir(&args.output, args.force)?;
    write_report(&records, Some(&table), &[], &args.output)
        .map_err(|e| CliError::Runtime(e.into()))?;
    write_run_manifest(
        &args.output,
        &RunManifest {
            command: "rank".into(),
            config_digest: String::new(),
            seeds: vec![],
            inputs: args.eval_dirs.iter().map(|d| d.display().to_string()).collect(),
            outputs: vec!["metrics.csv".into(), "ranks.csv".into(), "summary.json".into()],
            tool_version: env!("CARGO_PKG_VERSION").into(),
            wall_time_seconds: started.elapsed().as_secs_f64(),
        },
    )?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRIDFLOW_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Rank(args) => cmd_rank(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
