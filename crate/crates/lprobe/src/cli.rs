//! Command-line interface: data generation, training, measurement, and
//! end-to-end experiments.
//!
//! Exit codes are a stable contract: 0 ok, 2 config error, 3 training
//! divergence, 4 artifact mismatch, 5 partial failure. Every command is
//! deterministic given identical inputs: artifacts and stdout are
//! byte-identical on reruns (timings go to stderr). Seed precedence is
//! `--seed` flag > `LPROBE_SEED` env var > config file > default.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::analysis::run_experiment;
use crate::config::{ConfigError, ConfigFile, DEFAULT_SEED};
use crate::datagen::{derive_seed, suite_from_manifest, DataError, DomainSuite};
use crate::measures::{measure_all, reports_to_csv, MeasureError, MeasureIdentity};
use crate::model::{init_model, Model, ModelError, ModelSpec};
use crate::objectives::{train, Objective, ObjectiveError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_ARTIFACT: i32 = 4;
pub const EXIT_PARTIAL: i32 = 5;

/// Checkpoint filename written by `train` inside its output directory.
pub const CHECKPOINT_FILENAME: &str = "checkpoint.lpm";
/// History filename written by `train` inside its output directory.
pub const HISTORY_FILENAME: &str = "history.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Artifact(String),
    #[error("{0}")]
    Partial(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
            CliError::Artifact(_) => EXIT_ARTIFACT,
            CliError::Partial(_) => EXIT_PARTIAL,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn train_error(e: ObjectiveError) -> CliError {
    match e {
        ObjectiveError::Divergence { .. } | ObjectiveError::NonFiniteGradient { .. } => {
            CliError::Divergence(e.to_string())
        }
        other => CliError::Config(other.to_string()),
    }
}

fn artifact_error<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Artifact(e.to_string())
}

fn io_error(e: std::io::Error) -> CliError {
    CliError::Config(format!("i/o error: {e}"))
}

#[derive(Debug, Parser)]
#[command(
    name = "lprobe",
    version,
    about = "Loss-landscape probe: train small classifiers, measure sharpness, correlate with transfer accuracy"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// TOML configuration file; omitted means all defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain suite on disk.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory for the manifest and per-domain CSVs.
        #[arg(long)]
        out: PathBuf,
        /// Generation seed (overrides LPROBE_SEED and the config file).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model on a suite's anchor domain.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Directory holding a generated suite.
        #[arg(long)]
        suite: PathBuf,
        /// Output directory for the checkpoint and history CSV.
        #[arg(long)]
        out: PathBuf,
        /// Training objective: baseline, sam, fisher, or consistency.
        #[arg(long)]
        objective: Option<Objective>,
        /// Training seed (overrides LPROBE_SEED and the config file).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Measure a trained checkpoint across a suite's shifted domains.
    Measure {
        #[command(flatten)]
        config: ConfigArg,
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding the generated suite.
        #[arg(long)]
        suite: PathBuf,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
        /// Measurement seed (overrides LPROBE_SEED and the config file).
        #[arg(long)]
        seed: Option<u64>,
        /// Also report difference sharpness at every candidate noise scale.
        #[arg(long)]
        sweep_noise: bool,
        /// Model id recorded per row; defaults to the checkpoint stem.
        #[arg(long)]
        model_id: Option<String>,
        /// Objective recorded per row; defaults to "unknown".
        #[arg(long)]
        objective: Option<Objective>,
    },
    /// Run the full (objective x seed) grid and write the artifact bundle.
    Experiment {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory; defaults to the plan's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker thread bound; 0 means one per core. Results are
        /// independent of this value.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Number of seeds (0..N), replacing the config's seed list.
        #[arg(long, value_name = "COUNT")]
        seeds: Option<u64>,
        /// Enable the noise-scale sweep columns in reports.csv.
        #[arg(long)]
        sweep_noise: bool,
    },
}

/// Parse args and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are successful terminations.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Resolve the effective seed: flag > LPROBE_SEED > file > default.
fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("LPROBE_SEED") {
        Ok(text) => text
            .parse::<u64>()
            .map_err(|_| CliError::Config(format!("LPROBE_SEED is not a valid seed: {text:?}"))),
        Err(std::env::VarError::NotPresent) => Ok(file.unwrap_or(DEFAULT_SEED)),
        Err(e) => Err(CliError::Config(format!("cannot read LPROBE_SEED: {e}"))),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigFile, CliError> {
    match path {
        Some(p) => Ok(ConfigFile::load(p)?),
        None => Ok(ConfigFile::default()),
    }
}

fn load_suite(dir: &Path) -> Result<DomainSuite, CliError> {
    DomainSuite::load(dir).map_err(|e| match e {
        DataError::BadArgs(_) => CliError::Config(e.to_string()),
        other => CliError::Artifact(other.to_string()),
    })
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData { config, out, seed } => cmd_gen_data(&config.config, &out, seed),
        Command::Train {
            config,
            suite,
            out,
            objective,
            seed,
            epochs,
            batch_size,
        } => cmd_train(&config.config, &suite, &out, objective, seed, epochs, batch_size),
        Command::Measure {
            config,
            checkpoint,
            suite,
            out,
            seed,
            sweep_noise,
            model_id,
            objective,
        } => cmd_measure(
            &config.config,
            &checkpoint,
            &suite,
            &out,
            seed,
            sweep_noise,
            model_id,
            objective,
        ),
        Command::Experiment {
            config,
            out,
            jobs,
            seeds,
            sweep_noise,
        } => cmd_experiment(&config.config, out.as_deref(), jobs, seeds, sweep_noise),
    }
}

fn cmd_gen_data(
    config_path: &Option<PathBuf>,
    out: &Path,
    seed_flag: Option<u64>,
) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    if config_path.is_some() && config.suite.is_none() {
        return Err(CliError::Config(
            ConfigError::MissingSection("suite").to_string(),
        ));
    }
    let seed_override = match (seed_flag, std::env::var("LPROBE_SEED").ok()) {
        (Some(s), _) => Some(s),
        (None, Some(text)) => Some(text.parse::<u64>().map_err(|_| {
            CliError::Config(format!("LPROBE_SEED is not a valid seed: {text:?}"))
        })?),
        (None, None) => None,
    };
    let manifest = config.suite_manifest(seed_override);
    let suite = suite_from_manifest(&manifest)
        .map_err(|e| CliError::Config(e.to_string()))?;
    suite.save(out).map_err(|e| CliError::Config(e.to_string()))?;

    println!("suite written to {}", out.display());
    println!(
        "  classes={} input_dim={} splits={}/{}/{} prototypes_seed={} gen_seed={}",
        manifest.num_classes,
        manifest.input_dim,
        manifest.counts.train,
        manifest.counts.val,
        manifest.counts.test,
        manifest.prototypes_seed,
        manifest.gen_seed
    );
    println!("  domains: 1 anchor + {} shifted", suite.shifted.len());
    for spec in &manifest.domains {
        println!(
            "    {}: theta={:.4} sigma={:.4}",
            spec.name, spec.shift_angle, spec.noise_sigma
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config_path: &Option<PathBuf>,
    suite_dir: &Path,
    out: &Path,
    objective: Option<Objective>,
    seed_flag: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    let suite = load_suite(suite_dir)?;
    let seed = resolve_seed(seed_flag, config.file_train_seed())?;
    let mut train_cfg = config.train_config(seed, objective)?;
    if let Some(v) = epochs {
        train_cfg.epochs = v;
    }
    if let Some(v) = batch_size {
        train_cfg.batch_size = v;
    }
    train_cfg.validate().map_err(train_error)?;

    let spec = ModelSpec {
        input_dim: suite.input_dim,
        hidden_dims: config.hidden_dims(),
        num_classes: suite.num_classes,
        init_seed: config
            .model_init_seed()
            .unwrap_or_else(|| derive_seed(seed, "init")),
    };
    let model = init_model(&spec).map_err(|e| CliError::Config(e.to_string()))?;
    let result = train(model, &suite.anchor, &train_cfg).map_err(train_error)?;

    std::fs::create_dir_all(out).map_err(io_error)?;
    let checkpoint_path = out.join(CHECKPOINT_FILENAME);
    let history_path = out.join(HISTORY_FILENAME);
    result
        .model
        .save_checkpoint(&checkpoint_path)
        .map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(&history_path, result.history_csv()).map_err(io_error)?;

    println!("checkpoint written to {}", checkpoint_path.display());
    println!("history written to {}", history_path.display());
    println!(
        "objective={} seed={} epochs={} batch_size={}",
        train_cfg.objective, train_cfg.seed, train_cfg.epochs, train_cfg.batch_size
    );
    println!(
        "best epoch {}: validation accuracy {:.6}",
        result.best_epoch, result.best_val_accuracy
    );
    eprintln!("training wall time: {:.3}s", result.wall_time_secs);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_measure(
    config_path: &Option<PathBuf>,
    checkpoint: &Path,
    suite_dir: &Path,
    out: &Path,
    seed_flag: Option<u64>,
    sweep_noise: bool,
    model_id: Option<String>,
    objective: Option<Objective>,
) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    let model = Model::load_checkpoint(checkpoint).map_err(artifact_error)?;
    let suite = load_suite(suite_dir)?;
    if model.spec().input_dim != suite.input_dim
        || model.spec().num_classes != suite.num_classes
    {
        return Err(CliError::Artifact(format!(
            "checkpoint/suite mismatch: model expects input_dim={} num_classes={}, \
             suite provides input_dim={} num_classes={}",
            model.spec().input_dim,
            model.spec().num_classes,
            suite.input_dim,
            suite.num_classes
        )));
    }

    let seed = resolve_seed(seed_flag, config.file_measure_seed())?;
    let sharp_cfg = config.sharpness_config(seed)?;
    let alpha_cfg = config.alpha_config(seed)?;
    let identity = MeasureIdentity {
        model_id: model_id.unwrap_or_else(|| {
            checkpoint
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "checkpoint".into())
        }),
        objective: objective.map(|o| o.name().to_string()).unwrap_or_else(|| "unknown".into()),
        seed,
    };

    let outcome = measure_all(&identity, &model, &suite, &sharp_cfg, &alpha_cfg, sweep_noise)
        .map_err(|e| match e {
            MeasureError::Model(ModelError::Checkpoint(_)) => artifact_error(e),
            other => CliError::Config(other.to_string()),
        })?;

    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io_error)?;
        }
    }
    std::fs::write(out, reports_to_csv(&outcome.reports, sweep_noise)).map_err(io_error)?;

    println!(
        "reports written to {} ({} rows)",
        out.display(),
        outcome.reports.len()
    );
    eprintln!(
        "sharpness timing: phi_difference {:.6}s, phi_alpha {:.6}s (ratio {:.2})",
        outcome.phi_difference_secs,
        outcome.phi_alpha_secs,
        outcome.phi_alpha_secs / outcome.phi_difference_secs.max(1e-12)
    );
    if !outcome.row_errors.is_empty() {
        for (domain, err) in &outcome.row_errors {
            eprintln!("row failure in domain {domain}: {err}");
        }
        return Err(CliError::Partial(format!(
            "{} of {} domain rows failed",
            outcome.row_errors.len(),
            outcome.row_errors.len() + outcome.reports.len()
        )));
    }
    Ok(())
}

fn cmd_experiment(
    config_path: &Option<PathBuf>,
    out: Option<&Path>,
    jobs: usize,
    seeds: Option<u64>,
    sweep_noise: bool,
) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    let mut plan = config.experiment_plan()?;
    if let Some(n) = seeds {
        if n == 0 {
            return Err(CliError::Config("--seeds must be at least 1".into()));
        }
        plan.seeds = (0..n).collect();
    }
    if sweep_noise {
        plan.sweep_noise = true;
    }
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&plan.output_dir));

    let summary = run_experiment(&plan, &out_dir, jobs)
        .map_err(|e| CliError::Config(e.to_string()))?;

    println!("experiment bundle written to {}", summary.out_dir.display());
    println!(
        "runs: {} ok, {} failed; {} report rows",
        summary.total_runs - summary.failed.len(),
        summary.failed.len(),
        summary.report_rows
    );
    println!("correlations (objective-pooled and overall):");
    println!("  {:<28} {:<20} {:>10} {:>6}", "group", "measure", "r", "n");
    for c in &summary.correlations {
        if c.grouping.starts_with("objective/") || c.grouping == "pooled" {
            println!(
                "  {:<28} {:<20} {:>10.4} {:>6}",
                c.grouping, c.measure, c.r, c.n
            );
        }
    }
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    if !summary.failed.is_empty() {
        for (run, err) in &summary.failed {
            eprintln!("run {run} failed: {err}");
        }
        return Err(CliError::Partial(format!(
            "{} of {} runs failed",
            summary.failed.len(),
            summary.total_runs
        )));
    }
    Ok(())
}
