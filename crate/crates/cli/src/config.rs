//! Run configuration: a versioned TOML file with no implicit defaults.
//!
//! Every stage gets a content hash over the settings that influence its
//! output. Step counts are left out so a run can be extended by resuming.

use std::fs;
use std::path::{Path, PathBuf};

use emotune::acoustic::AcousticArch;
use emotune::classifier::ClassifierArch;
use emotune::guidance::GuidanceConfig;
use emotune::oracle::CorpusConfig;
use emotune::sde::{NoiseSchedule, SolverConfig};
use emotune::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub acoustic_checkpoint: PathBuf,
    pub classifier_checkpoint: PathBuf,
    pub logs: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcousticSection {
    pub embed_dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub conv_layers: usize,
    pub conv_width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSection {
    pub channels: usize,
    pub blocks: usize,
    pub width: usize,
    pub dropout: f64,
    pub time_dim: usize,
    pub hidden: usize,
    /// Diffusion times of the post-training validation sweep.
    pub eval_times: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_decay: f64,
    /// Steps between checkpoint writes.
    pub checkpoint_every: u64,
}

impl TrainingSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            ema_decay: self.ema_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSection {
    pub gamma: f64,
    pub n_steps: usize,
    pub alpha_grid: Vec<f64>,
    /// Samples per (emotion, alpha) cell in the intensity evaluation.
    pub samples_per_cell: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalForwardSection {
    pub n_paths: usize,
    pub n_steps: usize,
    pub times: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub schedule: NoiseSchedule,
    pub acoustic: AcousticSection,
    pub acoustic_training: TrainingSection,
    pub classifier: ClassifierSection,
    pub classifier_training: TrainingSection,
    pub guidance: GuidanceSection,
    pub eval_forward: EvalForwardSection,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| invalid(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != CONFIG_VERSION {
            return Err(invalid(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let core = |e: emotune::Error| invalid(format!("invalid config: {e}"));
        self.corpus.validate().map_err(core)?;
        self.schedule.validate().map_err(core)?;
        self.acoustic_arch().validate().map_err(core)?;
        self.classifier_arch().validate().map_err(core)?;
        for (name, t) in [("acoustic_training", &self.acoustic_training), ("classifier_training", &self.classifier_training)] {
            t.train_config().validate().map_err(core)?;
            if t.checkpoint_every == 0 {
                return Err(invalid(format!("{name}.checkpoint_every must be positive")));
            }
        }
        self.guidance_config(0).map_err(core)?;
        let in_unit = |v: &[f64]| v.iter().all(|a| (0.0..=1.0).contains(a));
        if self.guidance.alpha_grid.is_empty() || !in_unit(&self.guidance.alpha_grid) {
            return Err(invalid("guidance.alpha_grid must be a non-empty list in [0, 1]"));
        }
        if self.guidance.samples_per_cell < 2 {
            return Err(invalid("guidance.samples_per_cell must be at least 2"));
        }
        if !in_unit(&self.classifier.eval_times) {
            return Err(invalid("classifier.eval_times must lie in [0, 1]"));
        }
        if self.eval_forward.n_paths < 2 || self.eval_forward.n_steps == 0 || !in_unit(&self.eval_forward.times) {
            return Err(invalid("eval_forward needs n_paths >= 2, n_steps >= 1 and times in [0, 1]"));
        }
        Ok(())
    }

    pub fn acoustic_arch(&self) -> AcousticArch {
        let a = &self.acoustic;
        AcousticArch {
            vocab_size: self.corpus.vocab_size,
            dim: self.corpus.dim,
            embed_dim: a.embed_dim,
            hidden: a.hidden,
            time_dim: a.time_dim,
            conv_layers: a.conv_layers,
            conv_width: a.conv_width,
            schedule: self.schedule,
        }
    }

    pub fn classifier_arch(&self) -> ClassifierArch {
        let c = &self.classifier;
        ClassifierArch {
            dim: self.corpus.dim,
            num_emotions: self.corpus.num_emotions(),
            channels: c.channels,
            blocks: c.blocks,
            width: c.width,
            dropout: c.dropout,
            time_dim: c.time_dim,
            hidden: c.hidden,
        }
    }

    pub fn guidance_config(&self, seed: u64) -> emotune::Result<GuidanceConfig> {
        GuidanceConfig::new(self.guidance.gamma, SolverConfig::new(self.guidance.n_steps, seed)?)
    }
}

fn digest(v: &serde_json::Value) -> String {
    // serde_json maps are ordered by key, so this encoding is canonical
    let bytes = serde_json::to_vec(v).expect("config values serialize");
    hex::encode(Sha256::digest(&bytes))
}

/// Content hashes of each pipeline stage; later stages chain earlier ones.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageHashes {
    pub corpus: String,
    pub acoustic: String,
    pub classifier: String,
    pub guidance: String,
}

impl StageHashes {
    pub fn of(cfg: &RunConfig) -> Self {
        let training = |t: &TrainingSection| json!({"batch_size": t.batch_size, "lr": t.lr, "ema_decay": t.ema_decay});
        let corpus = digest(&json!({"version": cfg.version, "seed": cfg.seed, "corpus": cfg.corpus}));
        let acoustic = digest(&json!({
            "corpus": corpus,
            "arch": cfg.acoustic_arch(),
            "training": training(&cfg.acoustic_training),
        }));
        let classifier = digest(&json!({
            "acoustic": acoustic,
            "arch": cfg.classifier_arch(),
            "training": training(&cfg.classifier_training),
        }));
        let guidance = digest(&json!({"classifier": classifier, "guidance": cfg.guidance}));
        Self {
            corpus,
            acoustic,
            classifier,
            guidance,
        }
    }
}

/// A validated configuration with paths resolved against its directory.
#[derive(Clone, Debug)]
pub struct Run {
    pub config: RunConfig,
    pub hashes: StageHashes,
}

impl Run {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_config(RunConfig::parse(&text)?, &base, seed_override)
    }

    pub fn from_config(mut config: RunConfig, base: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        if let Some(seed) = seed_override {
            config.seed = seed;
        }
        config.validate()?;
        let p = &mut config.paths;
        for slot in [&mut p.corpus, &mut p.acoustic_checkpoint, &mut p.classifier_checkpoint, &mut p.logs] {
            if slot.as_os_str().is_empty() {
                return Err(invalid("config paths must not be empty"));
            }
            if slot.is_relative() {
                *slot = base.join(&*slot);
            }
        }
        let hashes = StageHashes::of(&config);
        Ok(Self { config, hashes })
    }

    pub fn paths(&self) -> &Paths {
        &self.config.paths
    }
}
