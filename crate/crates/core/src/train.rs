//! Optimizer state shared by both training stages and its checkpoint layout.

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Checkpoint, EmaState, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Total optimizer steps; resuming continues up to this count.
    pub steps: u64,
    /// Utterances per step.
    pub batch_size: usize,
    pub lr: f64,
    pub ema_decay: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamSet<f32>,
    pub buffers: ParamSet<f32>,
    pub adam: AdamState<f32>,
    pub ema: EmaState<f32>,
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ParamSet<f32>, buffers: ParamSet<f32>, ema_decay: f64) -> Result<Self> {
        Ok(Self {
            adam: AdamState::new(&params),
            ema: EmaState::new(ema_decay, &params)?,
            params,
            buffers,
            step: 0,
        })
    }

    pub fn to_checkpoint(&self, kind: &str, architecture: Value) -> Checkpoint {
        let mut ck = Checkpoint::new(kind, architecture);
        ck.put_group("params", &self.params);
        ck.put_group("ema", &self.ema.shadow);
        ck.put_group("adam_m", &self.adam.m);
        ck.put_group("adam_v", &self.adam.v);
        ck.put_group("buffers", &self.buffers);
        ck.metadata.insert("step".into(), self.step.into());
        ck.metadata.insert("adam_step".into(), self.adam.step.into());
        ck.metadata.insert("ema_decay".into(), self.ema.decay.into());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let params = ck.group("params")?;
        let buffers = if ck.has_group("buffers") {
            ck.group("buffers")?
        } else {
            ParamSet::new()
        };
        let missing = |k: &str| Error::Format(format!("checkpoint metadata lacks `{k}`"));
        let adam = AdamState {
            m: ck.group("adam_m")?,
            v: ck.group("adam_v")?,
            step: ck.meta_u64("adam_step").ok_or_else(|| missing("adam_step"))?,
        };
        let decay = ck
            .metadata
            .get("ema_decay")
            .and_then(Value::as_f64)
            .ok_or_else(|| missing("ema_decay"))?;
        let ema = EmaState {
            decay,
            shadow: ck.group("ema")?,
        };
        params.check_mirrors(&adam.m)?;
        params.check_mirrors(&adam.v)?;
        params.check_mirrors(&ema.shadow)?;
        Ok(Self {
            params,
            buffers,
            adam,
            ema,
            step: ck.meta_u64("step").ok_or_else(|| missing("step"))?,
        })
    }

    /// Weights used for inference.
    pub fn inference_params(&self) -> &ParamSet<f32> {
        &self.ema.shadow
    }
}

/// Draws `n` indices into `pool` uniformly with replacement.
pub fn pick_batch<R: Rng + ?Sized>(pool: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}
