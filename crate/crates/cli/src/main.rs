use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rdet_core::pipeline::{Pipeline, PipelineConfig, Stage};
use rdet_core::Error;

/// Region-based object detection on synthetic shape scenes.
///
/// Each subcommand runs one pipeline stage against a run directory. Stages
/// read their inputs from earlier stages' artifacts and skip work whose
/// outputs are already current for the given configuration.
#[derive(Debug, Parser)]
#[command(name = "rdet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Configuration file (TOML). Built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set svm.c=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory holding all artifacts of the run.
    #[arg(long, default_value = "run")]
    run_dir: PathBuf,
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, short)]
    jobs: Option<usize>,
    /// Also write the stage's main data product to standard output.
    #[arg(long)]
    stdout: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic scenes and annotations.
    GenData(Common),
    /// Compute region proposals for every image.
    Propose(Common),
    /// Warp proposals and compute (cached) features.
    Extract(Common),
    /// Train per-class linear SVMs with hard negative mining.
    TrainSvm(Common),
    /// Train per-class bounding-box regressors.
    TrainBbreg(Common),
    /// Score test proposals, apply NMS and optional box refinement.
    Detect(Common),
    /// Per-class AP and mAP on the test split.
    Evaluate(Common),
    /// Break down top-ranked false positives by error type.
    Analyze(Common),
    /// Top-activation montages for conv units.
    Visualize(Common),
    /// Compare feature variants and refinement in one table.
    Ablate(Common),
    /// Split the training images into two class-balanced halves.
    Split(Common),
    /// Choose per-class NMS thresholds on the validation split.
    TuneNms(Common),
}

impl Command {
    fn parts(&self) -> (Stage, &Common) {
        match self {
            Command::GenData(c) => (Stage::GenData, c),
            Command::Propose(c) => (Stage::Propose, c),
            Command::Extract(c) => (Stage::Extract, c),
            Command::TrainSvm(c) => (Stage::TrainSvm, c),
            Command::TrainBbreg(c) => (Stage::TrainBbreg, c),
            Command::Detect(c) => (Stage::Detect, c),
            Command::Evaluate(c) => (Stage::Evaluate, c),
            Command::Analyze(c) => (Stage::Analyze, c),
            Command::Visualize(c) => (Stage::Visualize, c),
            Command::Ablate(c) => (Stage::Ablate, c),
            Command::Split(c) => (Stage::Split, c),
            Command::TuneNms(c) => (Stage::TuneNms, c),
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingArtifact { .. } | Error::StaleArtifact { .. } => 3,
        Error::Config(_) => 4,
        _ => 1,
    }
}

fn run(stage: Stage, common: &Common) -> rdet_core::Result<()> {
    let cfg = match &common.config {
        Some(path) => PipelineConfig::load(path, &common.overrides)?,
        None => PipelineConfig::from_toml("", &common.overrides)?,
    };
    if let Some(n) = common.jobs {
        if n == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let pipeline = Pipeline::new(cfg, &common.run_dir)?;
    let report = pipeline.run_stage(stage)?;
    eprintln!("{}", report.summary);
    for o in &report.outputs {
        eprintln!("  {}", common.run_dir.join(o).display());
    }
    if common.stdout {
        if let Some(p) = &report.primary {
            let path = common.run_dir.join(p);
            let bytes = fs::read(&path).map_err(|e| Error::Io { path, source: e })?;
            let mut out = std::io::stdout().lock();
            // a closed pipe downstream is not an error worth reporting
            let _ = out.write_all(&bytes).and_then(|_| out.flush());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, common) = cli.command.parts();
    match run(stage, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::from(exit_code(&e))
        }
    }
}
