//! `attrib`: reproducible experiment runs for layer-wise attributions.

mod commands;
mod config;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Context;
use crate::config::Config;
use crate::run::{Run, RunManifest};

#[derive(Debug)]
pub enum CliError {
    /// Exit code 2.
    Config(String),
    /// Exit code 3.
    Insufficient(String),
    /// Exit code 1.
    Internal(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Insufficient(m) => write!(f, "insufficient data: {m}"),
            CliError::Internal(m) => write!(f, "error: {m}"),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Insufficient(_) => 3,
            CliError::Internal(_) => 1,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Internal(format!("{}: {e}", path.display()))
    }

    /// Core failure while reading user-supplied inputs.
    pub fn config(e: attrib_core::Error) -> Self {
        match e {
            attrib_core::Error::InsufficientData(m) => CliError::Insufficient(m),
            other => CliError::Config(other.to_string()),
        }
    }

    /// Core failure during computation.
    pub fn from_core(e: attrib_core::Error) -> Self {
        match e {
            attrib_core::Error::InsufficientData(m) => CliError::Insufficient(m),
            other => CliError::Internal(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "attrib",
    version,
    about = "Train small ReLU classifiers, explain them, score the explanations and remove their biases",
    after_long_help = config::REFERENCE
)]
struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for initialization, shuffling and noise draws [config: seed, default 0].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads [config: workers, default: number of CPUs].
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Parent folder of the run folders [config: out, default "runs"].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Eq)]
enum Command {
    /// Train a classifier on the configured dataset.
    Train,
    /// Render heatmaps and dump attributions for selected test images.
    Explain,
    /// Perturbation metrics per image and method, with paired comparisons.
    Evaluate,
    /// Remove a checkpoint's biases with distillation fine-tuning.
    Decay,
    /// Accuracy under input scaling and shifting, and the zero-bias regression.
    Robustness,
    /// Re-run a manifest into a new folder and compare artifact checksums.
    Replay {
        /// manifest.json of an earlier run.
        manifest: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Explain => "explain",
            Command::Evaluate => "evaluate",
            Command::Decay => "decay",
            Command::Robustness => "robustness",
            Command::Replay { .. } => "replay",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "train" => Command::Train,
            "explain" => Command::Explain,
            "evaluate" => Command::Evaluate,
            "decay" => Command::Decay,
            "robustness" => Command::Robustness,
            _ => return None,
        })
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn init_pool(workers: usize) -> Result<(), CliError> {
    if workers == 0 {
        return Err(CliError::Config("workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| CliError::Internal(e.to_string()))
}

/// Runs `command` into a fresh folder under `config.out`.
fn execute(command: &Command, mut config: Config, seed: u64, workers: usize) -> Result<RunManifest, CliError> {
    let out = config.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let out = std::path::absolute(&out).map_err(|e| CliError::io(&out, e))?;
    config.out = Some(out.clone());
    config.seed = Some(seed);
    config.workers = Some(workers);
    let ctx = Context {
        config: config.clone(),
        seed,
    };
    let mut run = Run::create(&out, command.name(), config, seed, workers)?;
    let result = match command {
        Command::Train => commands::train(&ctx, &mut run),
        Command::Explain => commands::explain(&ctx, &mut run),
        Command::Evaluate => commands::evaluate(&ctx, &mut run),
        Command::Decay => commands::decay(&ctx, &mut run),
        Command::Robustness => commands::robustness(&ctx, &mut run),
        Command::Replay { .. } => unreachable!("replay is dispatched separately"),
    };
    let dir = run.dir.clone();
    if let Err(e) = result {
        // keep nothing from a failed run
        let _ = std::fs::remove_dir_all(&dir);
        return Err(e);
    }
    let manifest = run.finish()?;
    println!("run folder {}", dir.display());
    Ok(manifest)
}

fn replay(path: &Path, cli: &Cli) -> Result<(), CliError> {
    let original = RunManifest::load(path)?;
    let command = Command::from_name(&original.command)
        .ok_or_else(|| CliError::Config(format!("{}: unknown command {:?}", path.display(), original.command)))?;
    let mut config = original.config.clone();
    if let Some(out) = &cli.out {
        config.out = Some(out.clone());
    }
    let workers = cli.workers.unwrap_or(original.workers);
    init_pool(workers)?;
    let mut problems = Vec::new();
    for input in &original.inputs {
        match run::sha256_file(&input.path) {
            Ok(h) if h == input.sha256 => {}
            Ok(_) => problems.push(format!("input {} changed", input.path.display())),
            Err(e) => problems.push(format!("input {}: {e}", input.path.display())),
        }
    }
    let fresh = execute(&command, config, original.seed, workers)?;
    for o in &original.outputs {
        match fresh.outputs.iter().find(|f| f.path == o.path) {
            Some(f) if f.sha256 == o.sha256 => {}
            Some(_) => problems.push(format!("{} differs", o.path.display())),
            None => problems.push(format!("{} missing", o.path.display())),
        }
    }
    for f in &fresh.outputs {
        if !original.outputs.iter().any(|o| o.path == f.path) {
            problems.push(format!("{} is new", f.path.display()));
        }
    }
    if problems.is_empty() {
        println!("replay reproduced all {} artifacts", original.outputs.len());
        Ok(())
    } else {
        for p in &problems {
            eprintln!("mismatch: {p}");
        }
        Err(CliError::Internal(format!("replay found {} mismatches", problems.len())))
    }
}

fn main_inner(cli: Cli) -> Result<(), CliError> {
    if let Command::Replay { manifest } = &cli.command {
        return replay(manifest, &cli);
    }
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("`{}` needs --config", cli.command.name())))?;
    let mut config = Config::load(path)?;
    if let Some(out) = &cli.out {
        config.out = Some(out.clone());
    }
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    let workers = cli.workers.or(config.workers).unwrap_or_else(default_workers);
    init_pool(workers)?;
    execute(&cli.command, config, seed, workers).map(|_| ())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
