//! Command-line entry points.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 when a
//! run fails after it started.

pub mod plot;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{load_config, PipelineMode, Profile, RunConfig};
use crate::env::{make_env, serve, BuiltinEnv};
use crate::mcts::SearchConfig;
use crate::model::ModelSet;
use crate::pipeline::{evaluate_env, normalized_score, run_training, RunOptions};
use crate::reanalyze::{measure_value_error, ReanalyzeConfig};
use crate::replay::ReplayBuffer;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "effzero", version, about = "Sample-efficient latent-model MCTS agents on tiny image environments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an agent and write metrics and checkpoints.
    Train(TrainArgs),
    /// Train with one or more components switched off.
    Ablate(AblateArgs),
    /// Evaluate a checkpoint with greedy search.
    Eval(EvalArgs),
    /// Value-target error against rollouts of the current policy, with and without correction.
    ValueError(ValueErrorArgs),
    /// Render metrics files as SVG curves and CSV.
    Plot(PlotArgs),
    /// Serve a built-in environment over the line protocol on stdin/stdout.
    EnvServer(EnvServerArgs),
}

#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    /// TOML config file; keys not set fall back to the profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base hyperparameter profile when no config file is given.
    #[arg(long, default_value = "toy")]
    pub profile: String,
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long)]
    pub env_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Override any config key, e.g. `--set training_steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, default_value = "runs/latest")]
    pub out: PathBuf,
    /// Stop once an evaluation reaches this mean return.
    #[arg(long, allow_negative_numbers = true)]
    pub stop_at_return: Option<f64>,
    /// Also write the final replay buffer to `buffer.ezck`.
    #[arg(long)]
    pub save_buffer: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    Serial,
    Parallel,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    Consistency,
    ValuePrefix,
    OffPolicyCorrection,
    Augmentation,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    pub disable: Vec<Switch>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the environment recorded in the checkpoint.
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long, default_value_t = 32)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub simulations: usize,
    #[arg(long, default_value_t = 0.997)]
    pub discount: f64,
    /// Random-policy score for normalization.
    #[arg(long, requires = "reference", allow_negative_numbers = true)]
    pub random: Option<f64>,
    /// Reference score for normalization.
    #[arg(long, requires = "random", allow_negative_numbers = true)]
    pub reference: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ValueErrorArgs {
    #[arg(long)]
    pub buffer: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Config of the run that produced the buffer, usually `<out>/config.toml`.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub metrics: Vec<PathBuf>,
    #[arg(long, default_value = "plots")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EnvServerArgs {
    #[arg(long, default_value = "catcher")]
    pub env: String,
    #[arg(long, default_value_t = 5)]
    pub env_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Resolves profile, config file, flags and `--set` overrides into a validated config.
pub fn resolve_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path).map_err(usage)?,
        None => {
            let profile: Profile = args.profile.parse().map_err(usage)?;
            RunConfig::for_profile(profile).with_overrides(std::env::vars()).map_err(usage)?
        }
    };
    let mut pairs = Vec::new();
    if let Some(env) = &args.env {
        pairs.push(("EFFZERO_ENV".to_string(), format!("{env:?}")));
    }
    if let Some(size) = args.env_size {
        pairs.push(("EFFZERO_ENV_SIZE".to_string(), size.to_string()));
    }
    if let Some(seed) = args.seed {
        pairs.push(("EFFZERO_SEED".to_string(), seed.to_string()));
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("`--set {kv}`: expected KEY=VALUE")))?;
        pairs.push((format!("EFFZERO_{}", k.trim().to_ascii_uppercase()), v.trim().to_string()));
    }
    cfg = cfg.with_overrides(pairs).map_err(usage)?;
    if let Some(mode) = args.mode {
        cfg.pipeline_mode = match mode {
            Mode::Serial => PipelineMode::Serial,
            Mode::Parallel => PipelineMode::Parallel,
        };
    }
    if !cfg.env.starts_with("protocol:") {
        BuiltinEnv::create(&cfg.env, cfg.env_size, cfg.seed).map_err(usage)?;
    }
    Ok(cfg)
}

pub fn apply_switches(cfg: &mut RunConfig, disable: &[Switch]) {
    for s in disable {
        match s {
            Switch::Consistency => cfg.use_consistency = false,
            Switch::ValuePrefix => cfg.use_value_prefix = false,
            Switch::OffPolicyCorrection => cfg.use_off_policy_correction = false,
            Switch::Augmentation => cfg.use_augmentation = false,
        }
    }
}

fn train(cfg: &RunConfig, args: &RunArgs, out: &mut dyn Write) -> Result<(), CliError> {
    std::fs::create_dir_all(&args.out).map_err(|e| usage(format!("{}: {e}", args.out.display())))?;
    let opts = RunOptions {
        out_dir: Some(args.out.clone()),
        stop_at_return: args.stop_at_return,
        save_buffer: args.save_buffer,
    };
    let summary = run_training(cfg, &opts).map_err(runtime)?;
    let last = summary.final_eval().map(|e| e.mean);
    writeln!(
        out,
        "{} learner steps, {} env steps{}; final eval {}; outputs in {}",
        summary.learner_steps,
        summary.env_steps,
        if summary.stopped_early { " (stopped early)" } else { "" },
        last.map_or("n/a".to_string(), |m| format!("{m:.3}")),
        args.out.display()
    )
    .map_err(runtime)
}

fn eval(args: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (model, meta) = ModelSet::<f32>::load(&args.checkpoint).map_err(usage)?;
    let env_name = args.env.clone().unwrap_or(meta.env.clone());
    let [channels, size, _] = model.spec.obs_shape;
    let probe = make_env(&env_name, size, args.seed).map_err(usage)?;
    let plane = probe.frame_shape()[0];
    if channels % plane != 0 || probe.num_actions() != model.spec.num_actions {
        return Err(usage(format!(
            "checkpoint expects {:?} observations and {} actions, `{env_name}` gives {:?} frames and {} actions",
            model.spec.obs_shape,
            model.spec.num_actions,
            probe.frame_shape(),
            probe.num_actions()
        )));
    }
    let search = SearchConfig {
        num_simulations: args.simulations,
        discount: args.discount,
        ..SearchConfig::from_run(&RunConfig::for_profile(Profile::Toy))
    };
    let report = evaluate_env(&model, &env_name, size, args.episodes, args.seed, &search, channels / plane)
        .map_err(runtime)?;
    let mut json = serde_json::json!({
        "env": env_name,
        "training_step": meta.training_step,
        "episodes": args.episodes,
        "mean": report.mean,
        "median": report.median,
    });
    if let (Some(r), Some(h)) = (args.random, args.reference) {
        json["normalized_mean"] = normalized_score(report.mean, r, h).into();
        json["normalized_median"] = normalized_score(report.median, r, h).into();
    }
    writeln!(out, "{json}").map_err(runtime)
}

fn value_error(args: &ValueErrorArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(&args.config).map_err(usage)?;
    let (model, meta) = ModelSet::<f32>::load(&args.checkpoint).map_err(usage)?;
    let buffer = ReplayBuffer::load(&args.buffer).map_err(usage)?;
    let env = BuiltinEnv::create(&cfg.env, cfg.env_size, cfg.seed).map_err(usage)?;
    let max_steps = env.horizon() + 1;
    let mut reports = Vec::new();
    for correction in [true, false] {
        let rcfg = ReanalyzeConfig {
            correction,
            ..ReanalyzeConfig::from_run(&cfg, model.spec.num_actions)
        };
        reports.push(
            measure_value_error(&buffer, &model, &rcfg, meta.training_step, args.samples, max_steps, args.seed)
                .map_err(runtime)?,
        );
    }
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "training_step": meta.training_step,
        "with_correction": reports[0],
        "without_correction": reports[1],
    }))
    .map_err(runtime)?;
    match &args.out {
        Some(path) => std::fs::write(path, json + "\n").map_err(runtime),
        None => writeln!(out, "{json}").map_err(runtime),
    }
}

fn series_label(path: &Path, all: &[PathBuf]) -> String {
    let dir_label = path.parent().and_then(|p| p.file_name()).map(|s| s.to_string_lossy().into_owned());
    let unique_dirs = all.iter().filter_map(|p| p.parent()).collect::<std::collections::HashSet<_>>().len() == all.len();
    match dir_label {
        Some(d) if unique_dirs => d,
        _ => path.display().to_string(),
    }
}

fn plot_cmd(args: &PlotArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut series = Vec::new();
    for path in &args.metrics {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        series.push(plot::Series::parse(series_label(path, &args.metrics), &text));
    }
    let summary = plot::plot(&series, &args.out).map_err(runtime)?;
    writeln!(
        out,
        "wrote {} rows to {} ({} malformed lines skipped)",
        summary.rows,
        args.out.display(),
        summary.malformed
    )
    .map_err(runtime)
}

fn env_server(args: &EnvServerArgs) -> Result<(), CliError> {
    let mut env = BuiltinEnv::create(&args.env, args.env_size, args.seed).map_err(usage)?;
    let stdin = std::io::stdin();
    serve(&mut env, stdin.lock(), std::io::stdout().lock()).map_err(runtime)
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => {
            let cfg = resolve_config(&a.run)?;
            train(&cfg, &a.run, out)
        }
        Command::Ablate(a) => {
            let mut cfg = resolve_config(&a.run)?;
            apply_switches(&mut cfg, &a.disable);
            log::info!("disabled: {:?}", a.disable);
            train(&cfg, &a.run, out)
        }
        Command::Eval(a) => eval(&a, out),
        Command::ValueError(a) => value_error(&a, out),
        Command::Plot(a) => plot_cmd(&a, out),
        Command::EnvServer(a) => env_server(&a),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli, &mut std::io::stdout()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
