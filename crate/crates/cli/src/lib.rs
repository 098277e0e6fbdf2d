//! Reproducible command-line pipeline: corpus generation, two-stage training,
//! guided sampling and evaluation reports.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{
    cmd_eval_forward, cmd_eval_intensity, cmd_gen_corpus, cmd_sample, cmd_train, ForwardRow, IntensityRow,
    SampleSet, Stage,
};
pub use config::{Run, RunConfig, StageHashes};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad invocation or configuration; exit code 2.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] emotune::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "emotune", version, about = "Emotion-intensity controllable diffusion acoustic model workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Replaces the seed from the configuration.
    #[arg(long)]
    pub seed_override: Option<u64>,
    /// Accept artifacts produced under a different configuration hash.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        /// Corpus directory (defaults to the configured path).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one stage.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        stage: Stage,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
        /// Checkpoint path (defaults to the configured path).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw guided samples for one emotion and intensity.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Emotion name or index.
        #[arg(long)]
        emotion: String,
        /// Intensity in [0, 1]; 0 is neutral, 1 the full emotion.
        #[arg(long)]
        alpha: f64,
        /// Number of samples.
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Output directory (defaults to `<logs>/samples`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Intensity sweep judged by the trained classifier and the oracle.
    EvalIntensity {
        #[command(flatten)]
        common: Common,
        /// Output CSV (defaults to `<logs>/intensity.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo check of the forward process against its closed form.
    EvalForward {
        #[command(flatten)]
        common: Common,
        /// Output CSV (defaults to `<logs>/forward.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl ValueEnum for Stage {
    fn value_variants<'a>() -> &'a [Self] {
        &[Stage::Acoustic, Stage::Classifier]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

fn load(common: &Common) -> Result<Run, CliError> {
    Run::load(&common.config, common.seed_override)
}

/// Executes a parsed command and returns a one-line summary.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::GenCorpus { common, out } => {
            let run = load(&common)?;
            let dir = cmd_gen_corpus(&run, out.as_deref())?;
            Ok(format!("corpus written to {}", dir.display()))
        }
        Command::Train {
            common,
            stage,
            resume,
            out,
        } => {
            let run = load(&common)?;
            let done = cmd_train(&run, stage, resume, out.as_deref(), common.force)?;
            Ok(format!(
                "{} checkpoint at step {} written to {}",
                stage.name(),
                done.step,
                done.checkpoint.display()
            ))
        }
        Command::Sample {
            common,
            emotion,
            alpha,
            n,
            out,
        } => {
            let run = load(&common)?;
            let set = cmd_sample(&run, &emotion, alpha, n, out.as_deref(), common.force)?;
            Ok(format!("{} samples written to {}", set.samples.len(), set.dir.display()))
        }
        Command::EvalIntensity { common, out } => {
            let run = load(&common)?;
            let out = out.unwrap_or_else(|| run.paths().logs.join("intensity.csv"));
            let rows = cmd_eval_intensity(&run, &out, common.force)?;
            Ok(format!("{} rows written to {}", rows.len(), out.display()))
        }
        Command::EvalForward { common, out } => {
            let run = load(&common)?;
            let out = out.unwrap_or_else(|| run.paths().logs.join("forward.csv"));
            let rows = cmd_eval_forward(&run, &out)?;
            let failed = rows.iter().filter(|r| !(r.mean_ok && r.var_ok)).count();
            Ok(format!("{} rows written to {}, {failed} outside tolerance", rows.len(), out.display()))
        }
    }
}
