//! Soft-label classifier guidance and the guided reverse-time sampler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::AcousticModel;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Layout, Scalar, Tensor};
use crate::sde::{reverse_step_with_noise, NoiseSchedule, SolverConfig};

/// Emotion id of the neutral reference class.
pub const NEUTRAL: usize = 0;

/// Text-side conditioning of a batch of utterances: frame means, segment
/// layout and the token id behind every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning<T: Scalar = f32> {
    pub mu: Tensor<T>,
    pub layout: Layout,
    pub frame_tokens: Vec<usize>,
}

/// Categorical distribution over emotions used as a guidance target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    weights: Vec<f64>,
}

impl SoftLabel {
    pub fn one_hot(num_emotions: usize, id: usize) -> Result<Self> {
        if id >= num_emotions {
            return Err(Error::Domain(format!("emotion {id} out of range for {num_emotions} classes")));
        }
        let mut weights = vec![0.0; num_emotions];
        weights[id] = 1.0;
        Ok(Self { weights })
    }

    /// `alpha` on `emotion`, the remainder on neutral.
    pub fn intensity(num_emotions: usize, emotion: usize, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Domain(format!("intensity {alpha} outside [0, 1]")));
        }
        let mut label = Self::one_hot(num_emotions, emotion)?;
        if emotion != NEUTRAL {
            label.weights[emotion] = alpha;
            label.weights[NEUTRAL] = 1.0 - alpha;
        }
        Ok(label)
    }

    /// Normalizes arbitrary non-negative weights onto the simplex.
    pub fn mixed(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Domain("mixture weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Domain("mixture weights are all zero".into()));
        }
        Ok(Self {
            weights: weights.iter().map(|w| w / total).collect(),
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn num_emotions(&self) -> usize {
        self.weights.len()
    }

    /// The class carrying all the mass, if any.
    pub fn as_one_hot(&self) -> Option<usize> {
        let hot = self.weights.iter().position(|&w| w == 1.0)?;
        self.weights
            .iter()
            .enumerate()
            .all(|(i, &w)| i == hot || w == 0.0)
            .then_some(hot)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub gamma: f64,
    pub solver: SolverConfig,
}

impl GuidanceConfig {
    pub fn new(gamma: f64, solver: SolverConfig) -> Result<Self> {
        let cfg = Self { gamma, solver };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("guidance level must be finite and >= 0, got {}", self.gamma)));
        }
        SolverConfig::new(self.solver.n_steps, self.solver.seed).map(|_| ())
    }
}

/// Unconditional score `∇_x log p_t(x)` of frames given their text conditioning.
pub trait ScoreModel<T: Scalar> {
    fn score(&self, x: &Tensor<T>, cond: &Conditioning<T>, t: f64) -> Result<Tensor<T>>;
}

/// Utterance-level emotion posterior `p(e | x_t, mu, t)` and its input gradients.
pub trait EmotionGuide<T: Scalar> {
    fn num_emotions(&self) -> usize;

    /// `[segments, m]` log-probabilities.
    fn log_probs(&self, x: &Tensor<T>, cond: &Conditioning<T>, t: f64) -> Result<Tensor<T>>;

    /// `∇_x log p(label | x)` for every segment.
    fn class_log_prob_grad(&self, x: &Tensor<T>, cond: &Conditioning<T>, t: f64, label: usize) -> Result<Tensor<T>>;

    /// `∇_x Σ_i w_i log p(e_i | x)`, i.e. the input gradient of the negative
    /// cross-entropy between the label and the posterior.
    fn soft_label_grad(&self, x: &Tensor<T>, cond: &Conditioning<T>, t: f64, label: &SoftLabel) -> Result<Tensor<T>>;

    /// The same quantity as [`soft_label_grad`](Self::soft_label_grad), built
    /// as an explicit weighted sum of one gradient per class.
    fn weighted_class_grads(
        &self,
        x: &Tensor<T>,
        cond: &Conditioning<T>,
        t: f64,
        label: &SoftLabel,
    ) -> Result<Tensor<T>> {
        if label.num_emotions() != self.num_emotions() {
            return Err(shape_err("weighted_class_grads", "label size differs from emotion count"));
        }
        let mut acc = Tensor::zeros(x.shape());
        for (i, &w) in label.weights().iter().enumerate() {
            let g = self.class_log_prob_grad(x, cond, t, i)?;
            acc.axpy(T::lit(w), &g)?;
        }
        Ok(acc)
    }
}

/// Guidance target of one sampling run.
#[derive(Clone, Copy, Debug)]
pub enum Guidance<'a> {
    /// Soft label through the cross-entropy gradient.
    Soft(&'a SoftLabel),
    /// Plain classifier guidance towards a single class.
    OneHot(usize),
}

impl Guidance<'_> {
    fn gradient<T: Scalar, C: EmotionGuide<T> + ?Sized>(
        &self,
        guide: &C,
        x: &Tensor<T>,
        cond: &Conditioning<T>,
        t: f64,
    ) -> Result<Tensor<T>> {
        match *self {
            Guidance::Soft(label) => guide.soft_label_grad(x, cond, t, label),
            Guidance::OneHot(id) => guide.class_log_prob_grad(x, cond, t, id),
        }
    }
}

/// `score(x) + gamma · ∇_x Σ_i w_i log p(e_i | x)`.
pub fn guided_score<T, S, C>(
    score: &S,
    guide: &C,
    x: &Tensor<T>,
    cond: &Conditioning<T>,
    t: f64,
    guidance: Guidance<'_>,
    gamma: f64,
) -> Result<Tensor<T>>
where
    T: Scalar,
    S: ScoreModel<T> + ?Sized,
    C: EmotionGuide<T> + ?Sized,
{
    let mut s = score.score(x, cond, t)?;
    if gamma != 0.0 {
        let g = guidance.gradient(guide, x, cond, t)?;
        s.axpy(T::lit(gamma), &g)?;
    }
    Ok(s)
}

/// States visited by the reverse solver, from `x_1` to `x_0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T: Scalar = f32> {
    pub states: Vec<Tensor<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn last(&self) -> &Tensor<T> {
        self.states.last().expect("trajectory holds at least x_1")
    }

    pub fn into_last(mut self) -> Tensor<T> {
        self.states.pop().expect("trajectory holds at least x_1")
    }
}

/// Runs the guided reverse SDE from `x_1 = mu + z` down to `t = 0`.
///
/// With `keep_path = false` only the final state is returned.
#[allow(clippy::too_many_arguments)]
pub fn sample_guided<T, S, C, R>(
    score: &S,
    guide: &C,
    schedule: &NoiseSchedule,
    cond: &Conditioning<T>,
    guidance: Guidance<'_>,
    cfg: &GuidanceConfig,
    rng: &mut R,
    keep_path: bool,
) -> Result<Trajectory<T>>
where
    T: Scalar,
    S: ScoreModel<T> + ?Sized,
    C: EmotionGuide<T> + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    if let Guidance::Soft(label) = guidance {
        if label.num_emotions() != guide.num_emotions() {
            return Err(shape_err("sample", "label size differs from emotion count"));
        }
    }
    let mu = &cond.mu;
    let mut x = mu.add(&Tensor::randn(mu.shape(), rng))?;
    let mut states = Vec::with_capacity(if keep_path { cfg.solver.n_steps + 1 } else { 1 });
    for (t, dt) in cfg.solver.reverse_grid() {
        let s = guided_score(score, guide, &x, cond, t, guidance, cfg.gamma)?;
        let z = Tensor::randn(mu.shape(), rng);
        let next = reverse_step_with_noise(&x, t, dt, mu, &s, schedule, &z)?;
        if !next.is_finite() {
            return Err(Error::NonFinite { op: "reverse_step" });
        }
        if keep_path {
            states.push(std::mem::replace(&mut x, next));
        } else {
            x = next;
        }
    }
    states.push(x);
    Ok(Trajectory { states })
}

/// Synthesizes frames for `tokens`: durations and means from the acoustic
/// model, then guided reverse sampling.
pub fn sample<C, R>(
    acoustic: &AcousticModel,
    guide: &C,
    tokens: &[usize],
    guidance: Guidance<'_>,
    cfg: &GuidanceConfig,
    rng: &mut R,
    keep_path: bool,
) -> Result<Trajectory<f32>>
where
    C: EmotionGuide<f32> + ?Sized,
    R: Rng + ?Sized,
{
    let cond = acoustic.infer_conditioning(tokens)?;
    sample_guided(acoustic, guide, acoustic.schedule(), &cond, guidance, cfg, rng, keep_path)
}
