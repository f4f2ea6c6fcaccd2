//! Command-line front end: generate datasets, train the refinement model,
//! run BP or refined BP over datasets, and turn the resulting records into
//! outage and consistency curves.
//!
//! Exit codes: 0 success, 2 config error, 3 runtime degeneracy, 4 i/o.
//! Log level comes from `RUST_LOG` (or `NEBP_LOG`).

mod manifest;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use thiserror::Error;

use manifest::RunManifest;
use nebp_core::eval;
use nebp_core::rng::StreamRoot;
use nebp_core::rollout::{run_realization, Algorithm, RolloutConfig};
use nebp_core::scenario::{generate_realization, Realization, ScenarioConfig};
use nebp_core::training::{self, Checkpoint, TrainConfig};

#[derive(Parser)]
#[command(name = "nebp", version, about = "Cooperative localization with BP and GNN-refined BP")]
struct Cli {
    /// Worker threads for parallel sections; default is available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AlgorithmArg {
    Bp,
    Nebp,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of realizations from a scenario config.
    Generate {
        /// Scenario config JSON (see presets/).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of realizations.
        #[arg(long)]
        count: usize,
        /// Root seed; realization i uses a substream of it.
        #[arg(long)]
        seed: u64,
    },
    /// Train the message-refinement model on a generated dataset.
    Train {
        /// Training config JSON.
        #[arg(long)]
        config: PathBuf,
    },
    /// Roll a dataset through an algorithm and write eval records.
    Run {
        /// Checkpoint path; required for nebp, ignored for bp.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of realization JSON files.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        algorithm: AlgorithmArg,
        /// Particles per belief.
        #[arg(long, default_value_t = 1000)]
        particles: usize,
        /// Message passing iterations per time step.
        #[arg(long, default_value_t = 1)]
        iterations: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compute outage and consistency curves for one records directory.
    Evaluate {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge several records directories into comparison curves.
    Report {
        /// Labeled records directory, `label=path`; repeatable.
        #[arg(long = "records", required = true)]
        records: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Error)]
enum AppError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime degeneracy: {0}")]
    Degeneracy(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl AppError {
    fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Degeneracy(_) => 3,
            AppError::Io(_) => 4,
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Io(e.to_string())
    }
}

impl From<nebp_core::scenario::ScenarioError> for AppError {
    fn from(e: nebp_core::scenario::ScenarioError) -> Self {
        use nebp_core::scenario::ScenarioError::*;
        match e {
            Io(err) => AppError::Io(err.to_string()),
            other => AppError::Config(other.to_string()),
        }
    }
}

impl From<training::TrainError> for AppError {
    fn from(e: training::TrainError) -> Self {
        use training::TrainError::*;
        match e {
            NonFiniteLoss { .. } => AppError::Degeneracy(e.to_string()),
            CheckpointIo(msg) => AppError::Io(msg),
            Bp(_) | Gnn(_) => AppError::Degeneracy(e.to_string()),
            other => AppError::Config(other.to_string()),
        }
    }
}

impl From<nebp_core::rollout::RolloutError> for AppError {
    fn from(e: nebp_core::rollout::RolloutError) -> Self {
        AppError::Degeneracy(e.to_string())
    }
}

impl From<eval::EvalError> for AppError {
    fn from(e: eval::EvalError) -> Self {
        use eval::EvalError::*;
        match e {
            Io(err) => AppError::Io(err.to_string()),
            Csv(err) => AppError::Io(err.to_string()),
            other => AppError::Config(other.to_string()),
        }
    }
}

fn main() {
    env_logger::Builder::from_env(
        env_logger::Env::default().filter_or("NEBP_LOG", std::env::var("RUST_LOG").unwrap_or_else(|_| "warn".into())),
    )
    .init();
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

fn run(command: Command) -> Result<(), AppError> {
    match command {
        Command::Generate { config, out, count, seed } => cmd_generate(&config, &out, count, seed),
        Command::Train { config } => cmd_train(&config),
        Command::Run { checkpoint, dataset, algorithm, particles, iterations, out, seed } => {
            cmd_run(checkpoint.as_deref(), &dataset, algorithm, particles, iterations, &out, seed)
        }
        Command::Evaluate { records, out } => cmd_evaluate(&records, &out),
        Command::Report { records, out } => cmd_report(&records, &out),
    }
}

fn load_scenario_config(path: &Path) -> Result<ScenarioConfig, AppError> {
    let bytes = std::fs::read(path)
        .map_err(|e| AppError::Config(format!("read {}: {e}", path.display())))?;
    let config: ScenarioConfig = serde_json::from_slice(&bytes)
        .map_err(|e| AppError::Config(format!("parse {}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

fn cmd_generate(config_path: &Path, out: &Path, count: usize, seed: u64) -> Result<(), AppError> {
    let template = load_scenario_config(config_path)?;
    let config_value = serde_json::to_value(&template).expect("config serializes");
    let mut manifest = RunManifest::start("generate", &config_value, seed);

    std::fs::create_dir_all(out)?;
    let root = StreamRoot(seed);
    let paths: Vec<PathBuf> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut config = template.clone();
            config.rng_seed = root.child(i as u64).0;
            let real = generate_realization(&config)?;
            let path = out.join(format!("r{i:04}.json"));
            real.save(&path)?;
            Ok::<_, AppError>(path)
        })
        .collect::<Result<_, _>>()?;
    for p in &paths {
        manifest.record_output(p);
    }
    manifest.finish(out)?;
    log::info!("wrote {count} realizations to {}", out.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Vec<Realization>, AppError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| AppError::Config(format!("dataset dir {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "json").unwrap_or(false))
        .filter(|p| p.file_name().map(|n| n != "manifest.json").unwrap_or(true))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(AppError::Config(format!("no realization files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let real = Realization::load(p)?;
            real.validate()?;
            Ok(real)
        })
        .collect()
}

fn cmd_train(config_path: &Path) -> Result<(), AppError> {
    let config = TrainConfig::load(config_path)?;
    config.validate()?;
    let config_value = serde_json::to_value(&config).expect("config serializes");
    let mut manifest = RunManifest::start("train", &config_value, config.seed);

    let dataset = load_dataset(&config.dataset_dir)?;
    let outcome = training::train(&config, &dataset)?;
    outcome.checkpoint.save(&config.checkpoint_path)?;
    manifest.record_output(&config.checkpoint_path);

    let trace_path = config
        .loss_trace_path
        .clone()
        .unwrap_or_else(|| config.checkpoint_path.with_extension("loss.csv"));
    training::write_loss_trace(&trace_path, &outcome.trace)?;
    manifest.record_output(&trace_path);

    let manifest_dir = config
        .checkpoint_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    manifest.finish(&manifest_dir)?;
    if let Some(last) = outcome.trace.last() {
        log::info!("final batch loss {:.4}", last.loss);
    }
    Ok(())
}

fn cmd_run(
    checkpoint: Option<&Path>,
    dataset_dir: &Path,
    algorithm: AlgorithmArg,
    particles: usize,
    iterations: usize,
    out: &Path,
    seed: u64,
) -> Result<(), AppError> {
    let model = match algorithm {
        AlgorithmArg::Bp => {
            if checkpoint.is_some() {
                log::warn!("--checkpoint is ignored for algorithm bp");
            }
            None
        }
        AlgorithmArg::Nebp => {
            let path = checkpoint
                .ok_or_else(|| AppError::Config("nebp requires --checkpoint".into()))?;
            let ckpt = Checkpoint::load(path)?;
            if ckpt.model.dims.particle_count != particles {
                return Err(AppError::Config(format!(
                    "checkpoint mismatch: trained with K={}, flag K={particles}",
                    ckpt.model.dims.particle_count
                )));
            }
            if ckpt.model.dims.iterations != iterations {
                return Err(AppError::Config(format!(
                    "checkpoint mismatch: trained with T={}, flag T={iterations}",
                    ckpt.model.dims.iterations
                )));
            }
            Some(ckpt.model)
        }
    };

    let effective = serde_json::json!({
        "dataset": dataset_dir.display().to_string(),
        "algorithm": match algorithm { AlgorithmArg::Bp => "bp", AlgorithmArg::Nebp => "nebp" },
        "particles": particles,
        "iterations": iterations,
        "checkpoint": checkpoint.map(|p| p.display().to_string()),
    });
    let mut manifest = RunManifest::start("run", &effective, seed);

    let dataset = load_dataset(dataset_dir)?;
    std::fs::create_dir_all(out)?;
    let config = RolloutConfig {
        algorithm: match algorithm {
            AlgorithmArg::Bp => Algorithm::Bp,
            AlgorithmArg::Nebp => Algorithm::Nebp,
        },
        particle_count: particles,
        iterations,
    };
    let root = StreamRoot(seed);
    let paths: Vec<PathBuf> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, real)| {
            let records =
                run_realization(real, &config, model.as_ref(), root.child(i as u64), i as u64)?;
            let path = out.join(format!("records_{i:04}.csv"));
            eval::write_records_csv(&path, &records)?;
            Ok::<_, AppError>(path)
        })
        .collect::<Result<_, _>>()?;
    for p in &paths {
        manifest.record_output(p);
    }
    manifest.finish(out)?;
    Ok(())
}

fn write_curve_csv(path: &Path, header: &str, curve: &[(f64, f64)]) -> Result<(), AppError> {
    let mut text = String::from(header);
    text.push('\n');
    for (x, y) in curve {
        text.push_str(&format!("{x},{y}\n"));
    }
    nebp_core::fsio::atomic_write(path, text.as_bytes())?;
    Ok(())
}

fn cmd_evaluate(records_dir: &Path, out: &Path) -> Result<(), AppError> {
    let effective = serde_json::json!({ "records": records_dir.display().to_string() });
    let mut manifest = RunManifest::start("evaluate", &effective, 0);

    let records = eval::read_records_dir(records_dir)?;
    if records.is_empty() {
        return Err(AppError::Config(format!("no records in {}", records_dir.display())));
    }
    std::fs::create_dir_all(out)?;
    let outage = eval::outage_probability(&records, &eval::default_thresholds())?;
    let consistency = eval::consistency_curve(&records, &eval::default_confidence_levels())?;
    let outage_path = out.join("outage.csv");
    write_curve_csv(&outage_path, "threshold,p_out", &outage)?;
    let consistency_path = out.join("consistency.csv");
    write_curve_csv(&consistency_path, "level,p_accept", &consistency)?;
    manifest.record_output(&outage_path);
    manifest.record_output(&consistency_path);
    manifest.finish(out)?;
    Ok(())
}

fn parse_labeled(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((label, path)) => (label.to_string(), PathBuf::from(path)),
        None => {
            let path = PathBuf::from(spec);
            let label = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.to_string());
            (label, path)
        }
    }
}

fn cmd_report(specs: &[String], out: &Path) -> Result<(), AppError> {
    let labeled: Vec<(String, PathBuf)> = specs.iter().map(|s| parse_labeled(s)).collect();
    let effective = serde_json::json!({
        "records": labeled
            .iter()
            .map(|(l, p)| format!("{l}={}", p.display()))
            .collect::<Vec<_>>(),
    });
    let mut manifest = RunManifest::start("report", &effective, 0);

    let thresholds = eval::default_thresholds();
    let levels = eval::default_confidence_levels();
    let mut outage_columns = Vec::new();
    let mut consistency_columns = Vec::new();
    for (label, dir) in &labeled {
        let records = eval::read_records_dir(dir)?;
        if records.is_empty() {
            return Err(AppError::Config(format!("no records in {}", dir.display())));
        }
        outage_columns.push((label.clone(), eval::outage_probability(&records, &thresholds)?));
        consistency_columns.push((label.clone(), eval::consistency_curve(&records, &levels)?));
    }

    std::fs::create_dir_all(out)?;
    let write_multi = |path: &Path,
                       x_name: &str,
                       xs: &[f64],
                       cols: &[(String, Vec<(f64, f64)>)]|
     -> Result<(), AppError> {
        let mut text = String::from(x_name);
        for (label, _) in cols {
            text.push(',');
            text.push_str(label);
        }
        text.push('\n');
        for (i, x) in xs.iter().enumerate() {
            text.push_str(&x.to_string());
            for (_, curve) in cols {
                text.push(',');
                text.push_str(&curve[i].1.to_string());
            }
            text.push('\n');
        }
        nebp_core::fsio::atomic_write(path, text.as_bytes())?;
        Ok(())
    };
    let outage_path = out.join("outage.csv");
    write_multi(&outage_path, "threshold", &thresholds, &outage_columns)?;
    let consistency_path = out.join("consistency.csv");
    write_multi(&consistency_path, "level", &levels, &consistency_columns)?;
    manifest.record_output(&outage_path);
    manifest.record_output(&consistency_path);
    manifest.finish(out)?;
    Ok(())
}
