//! Emotion-free acoustic model: token encoder producing frame means, a
//! log-duration predictor, and a score network over noisy frames.
//!
//! Training never looks at emotion labels. Frame means are trained only by
//! the prior term; the score network sees them as a constant input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::guidance::{Conditioning, ScoreModel};
use crate::nn::{
    adam_step, time_embedding_rows, Bound, Checkpoint, Ctx, Graph, Layer, Layout, ParamSet, Scalar, Sequential,
    Tensor, Var,
};
use crate::oracle::{expand_tokens, Corpus, Utterance};
use crate::rng::{derive_seed, stream};
use crate::sde::{sample_forward_with_noise, NoiseSchedule, T_MIN};
use crate::train::{pick_batch, TrainConfig, TrainState};

pub const CHECKPOINT_KIND: &str = "acoustic";
const EMBEDDING: &str = "embedding.weight";
/// Upper bound on a predicted token duration, in frames.
pub const MAX_PREDICTED_DURATION: usize = 64;

fn half_ln_2pi() -> f64 {
    0.5 * (2.0 * std::f64::consts::PI).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcousticArch {
    pub vocab_size: usize,
    pub dim: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    /// Width of the sinusoidal time features fed to the score network.
    pub time_dim: usize,
    pub conv_layers: usize,
    pub conv_width: usize,
    pub schedule: NoiseSchedule,
}

impl AcousticArch {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.dim == 0 || self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("acoustic sizes must be positive".into()));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config("time_dim must be even and positive".into()));
        }
        if self.conv_width.is_multiple_of(2) {
            return Err(Error::Config("conv_width must be odd".into()));
        }
        self.schedule.validate()
    }

    fn encoder(&self) -> Sequential {
        Sequential::new(vec![
            Layer::Linear {
                name: "encoder.in".into(),
                inputs: self.embed_dim,
                outputs: self.hidden,
            },
            Layer::Silu,
            Layer::Linear {
                name: "encoder.out".into(),
                inputs: self.hidden,
                outputs: self.dim,
            },
        ])
    }

    fn duration_net(&self) -> Sequential {
        Sequential::new(vec![
            Layer::Linear {
                name: "duration.in".into(),
                inputs: self.embed_dim,
                outputs: self.hidden,
            },
            Layer::Silu,
            Layer::Linear {
                name: "duration.out".into(),
                inputs: self.hidden,
                outputs: 1,
            },
        ])
    }

    fn score_net(&self) -> Sequential {
        let mut layers = vec![
            Layer::Linear {
                name: "score.in".into(),
                inputs: 2 * self.dim + self.time_dim,
                outputs: self.hidden,
            },
            Layer::Silu,
        ];
        for i in 0..self.conv_layers {
            layers.push(Layer::Conv1d {
                name: format!("score.conv{i}"),
                in_channels: self.hidden,
                out_channels: self.hidden,
                width: self.conv_width,
            });
            layers.push(Layer::Silu);
        }
        layers.push(Layer::Linear {
            name: "score.out".into(),
            inputs: self.hidden,
            outputs: self.dim,
        });
        Sequential::new(layers)
    }
}

/// Utterances stacked along the frame axis.
#[derive(Clone, Debug)]
pub struct Batch<T: Scalar> {
    pub tokens: Vec<usize>,
    pub durations: Vec<usize>,
    /// Token row behind every frame.
    pub frame_to_token: Vec<usize>,
    pub frame_layout: Layout,
    pub x0: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(utts: &[&Utterance]) -> Result<Self> {
        let first = utts.first().ok_or_else(|| shape_err("batch", "no utterances"))?;
        let dim = first.frames.cols();
        let (mut tokens, mut durations, mut frame_to_token, mut lengths) = (vec![], vec![], vec![], vec![]);
        let mut x0 = Vec::new();
        for u in utts {
            if u.frames.cols() != dim || u.durations.iter().sum::<usize>() != u.n_frames() {
                return Err(shape_err("batch", format!("utterance {} is inconsistent", u.id)));
            }
            for (&tok, &d) in u.tokens.iter().zip(&u.durations) {
                if d == 0 {
                    return Err(Error::Domain("durations must be positive".into()));
                }
                frame_to_token.extend(std::iter::repeat_n(tokens.len(), d));
                tokens.push(tok);
                durations.push(d);
            }
            lengths.push(u.n_frames());
            x0.extend(u.frames.data().iter().map(|v| T::lit(*v as f64)));
        }
        let n = frame_to_token.len();
        Ok(Self {
            tokens,
            durations,
            frame_to_token,
            frame_layout: Layout::from_lengths(&lengths),
            x0: Tensor::matrix(n, dim, x0)?,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.x0.rows()
    }
}

/// Mean squared error between predicted log-durations and log of the truth, per token.
pub fn duration_loss(predicted_log: &[f64], durations: &[usize]) -> Result<f64> {
    if predicted_log.len() != durations.len() || durations.is_empty() {
        return Err(shape_err("duration_loss", "one prediction per token required"));
    }
    if durations.contains(&0) {
        return Err(Error::Domain("durations must be >= 1".into()));
    }
    let sse: f64 = predicted_log
        .iter()
        .zip(durations)
        .map(|(p, &d)| (p - (d as f64).ln()).powi(2))
        .sum();
    Ok(sse / durations.len() as f64)
}

/// `−log N(x0; mu, I)` averaged over frames.
pub fn prior_loss<T: Scalar>(x0: &Tensor<T>, mu: &Tensor<T>) -> Result<f64> {
    x0.check_same(mu, "prior_loss")?;
    let sq: f64 = x0.data().iter().zip(mu.data()).map(|(a, b)| (a.f64() - b.f64()).powi(2)).sum();
    let frames = x0.rows().max(1) as f64;
    Ok(0.5 * sq / frames + x0.cols() as f64 * half_ln_2pi())
}

/// λ_t-weighted denoising score matching at one random time, averaged over frames.
///
/// `score(x_t, t)` is the model under evaluation.
pub fn diffusion_loss<T, F, R>(
    score: F,
    x0: &Tensor<T>,
    mu: &Tensor<T>,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64>
where
    T: Scalar,
    F: FnOnce(&Tensor<T>, f64) -> Result<Tensor<T>>,
    R: Rng + ?Sized,
{
    let t = rng.random_range(T_MIN..=1.0);
    let noise = Tensor::randn(x0.shape(), rng);
    let fs = sample_forward_with_noise(x0, mu, &vec![t; x0.rows()], schedule, noise)?;
    let s = score(&fs.x_t, t)?;
    s.check_same(&fs.score_target, "diffusion_loss")?;
    let lambda = schedule.marginal_params(t)?.variance;
    let sq: f64 = s
        .data()
        .iter()
        .zip(fs.score_target.data())
        .map(|(a, b)| (a.f64() - b.f64()).powi(2))
        .sum();
    Ok(lambda * sq / x0.rows().max(1) as f64)
}

/// Values of the three training terms; `prior` includes its constant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub duration: f64,
    pub prior: f64,
    pub diffusion: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.duration + self.prior + self.diffusion
    }
}

/// Differentiable training objective of one batch.
pub struct LossGraph<T: Scalar> {
    pub graph: Graph<T>,
    pub params: Bound,
    pub total: Var,
    pub terms: LossTerms,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcousticModel<T: Scalar = f32> {
    pub arch: AcousticArch,
    pub params: ParamSet<T>,
}

impl<T: Scalar> AcousticModel<T> {
    pub fn init<R: Rng + ?Sized>(arch: AcousticArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        params.insert(EMBEDDING, Tensor::randn(&[arch.vocab_size, arch.embed_dim], rng))?;
        arch.encoder().init(rng, &mut params, &mut buffers)?;
        arch.duration_net().init(rng, &mut params, &mut buffers)?;
        arch.score_net().init(rng, &mut params, &mut buffers)?;
        Ok(Self { arch, params })
    }

    /// Rebuilds the model from stored weights, checking them against a fresh init.
    pub fn from_params(arch: AcousticArch, params: ParamSet<T>) -> Result<Self> {
        let reference = AcousticModel::<T>::init(arch.clone(), &mut stream(0, 0))?;
        reference.params.check_mirrors(&params)?;
        Ok(Self { arch, params })
    }

    pub fn cast<U: Scalar>(&self) -> AcousticModel<U> {
        AcousticModel {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.arch.schedule
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(shape_err("acoustic", "empty token sequence"));
        }
        match tokens.iter().find(|&&t| t >= self.arch.vocab_size) {
            Some(&token) => Err(Error::UnknownToken {
                token,
                vocab: self.arch.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn embed(&self, g: &mut Graph<T>, p: &Bound, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        g.gather_rows(p.var(EMBEDDING)?, tokens.to_vec())
    }

    /// `[tokens, dim]` per-token means.
    fn token_means(&self, g: &mut Graph<T>, p: &Bound, tokens: &[usize]) -> Result<Var> {
        let e = self.embed(g, p, tokens)?;
        let layout = Layout::single(tokens.len());
        let empty = ParamSet::new();
        self.arch.encoder().forward(g, p, e, &mut Ctx::eval(&layout, &empty))
    }

    fn log_durations(&self, g: &mut Graph<T>, p: &Bound, tokens: &[usize]) -> Result<Var> {
        let e = self.embed(g, p, tokens)?;
        let layout = Layout::single(tokens.len());
        let empty = ParamSet::new();
        self.arch.duration_net().forward(g, p, e, &mut Ctx::eval(&layout, &empty))
    }

    /// Score network on stacked frames; `row_times` holds the time of every row.
    fn score_var(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        mu: Var,
        row_times: &[f64],
        layout: &Layout,
    ) -> Result<Var> {
        let temb = g.constant(time_embedding_rows(row_times, self.arch.time_dim));
        let input = g.concat(&[x, mu, temb])?;
        let empty = ParamSet::new();
        let out = self.arch.score_net().forward(g, p, input, &mut Ctx::eval(layout, &empty))?;
        // the network predicts the injected noise; the score is −ε/√λ_t
        let mut inv_sd = Vec::with_capacity(row_times.len() * self.arch.dim);
        for &t in row_times {
            let lambda = self.arch.schedule.marginal_params(t)?.variance;
            if lambda <= 0.0 {
                return Err(Error::DegenerateVariance { t });
            }
            inv_sd.extend(std::iter::repeat_n(T::lit(-1.0 / lambda.sqrt()), self.arch.dim));
        }
        g.mul_const(out, Tensor::matrix(row_times.len(), self.arch.dim, inv_sd)?)
    }

    /// Frame-aligned means for known durations.
    pub fn predict_mu(&self, tokens: &[usize], durations: &[usize]) -> Result<Tensor<T>> {
        if tokens.len() != durations.len() {
            return Err(shape_err("predict_mu", "one duration per token required"));
        }
        if durations.contains(&0) {
            return Err(Error::Domain("durations must be positive".into()));
        }
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params, false);
        let means = self.token_means(&mut g, &p, tokens)?;
        let idx = expand_tokens(&(0..tokens.len()).collect::<Vec<_>>(), durations);
        let mu = g.gather_rows(means, idx)?;
        g.check_finite()?;
        Ok(g.value(mu).clone())
    }

    pub fn predict_log_durations(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params, false);
        let v = self.log_durations(&mut g, &p, tokens)?;
        g.check_finite()?;
        Ok(g.value(v).data().iter().map(|x| x.f64()).collect())
    }

    /// Predicted durations rounded to the nearest positive integer.
    pub fn infer_durations(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        Ok(self
            .predict_log_durations(tokens)?
            .into_iter()
            .map(|l| (l.exp().round() as usize).clamp(1, MAX_PREDICTED_DURATION))
            .collect())
    }

    pub fn conditioning(&self, tokens: &[usize], durations: &[usize]) -> Result<Conditioning<T>> {
        let mu = self.predict_mu(tokens, durations)?;
        Ok(Conditioning {
            layout: Layout::single(mu.rows()),
            frame_tokens: expand_tokens(tokens, durations),
            mu,
        })
    }

    pub fn infer_conditioning(&self, tokens: &[usize]) -> Result<Conditioning<T>> {
        let durations = self.infer_durations(tokens)?;
        self.conditioning(tokens, &durations)
    }

    /// Builds the training objective for fixed per-utterance times and noise.
    pub fn loss_graph(&self, batch: &Batch<T>, times: &[f64], noise: Tensor<T>) -> Result<LossGraph<T>> {
        let layout = &batch.frame_layout;
        if times.len() != layout.num_segments() {
            return Err(shape_err("acoustic_loss", "one time per utterance required"));
        }
        let dim = self.arch.dim;
        if batch.x0.cols() != dim {
            return Err(shape_err("acoustic_loss", format!("frame dim {} vs {dim}", batch.x0.cols())));
        }
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params, true);
        let n_frames = batch.num_frames() as f64;

        let logd = self.log_durations(&mut g, &p, &batch.tokens)?;
        let target: Vec<T> = batch.durations.iter().map(|&d| T::lit((d as f64).ln())).collect();
        let target = g.constant(Tensor::matrix(target.len(), 1, target)?);
        let dd = g.sub(logd, target)?;
        let dsq = g.square(dd);
        let dur = g.mean_all(dsq);

        let means = self.token_means(&mut g, &p, &batch.tokens)?;
        let mu = g.gather_rows(means, batch.frame_to_token.clone())?;
        let x0 = g.constant(batch.x0.clone());
        let pd = g.sub(mu, x0)?;
        let psq = g.square(pd);
        let psum = g.sum_all(psq);
        let prior = g.scale(psum, T::lit(0.5 / n_frames));

        let row_times: Vec<f64> = layout.row_segments().iter().map(|&s| times[s]).collect();
        let mu_value = g.value(mu).clone();
        let fs = sample_forward_with_noise(&batch.x0, &mu_value, &row_times, &self.arch.schedule, noise)?;
        let xt = g.constant(fs.x_t);
        let mu_sg = g.constant(mu_value);
        let s = self.score_var(&mut g, &p, xt, mu_sg, &row_times, layout)?;
        let tgt = g.constant(fs.score_target);
        let diff = g.sub(s, tgt)?;
        let sq = g.square(diff);
        let mut w = Vec::with_capacity(batch.num_frames() * dim);
        for &t in &row_times {
            let lambda = self.arch.schedule.marginal_params(t)?.variance;
            w.extend(std::iter::repeat_n(T::lit(lambda / n_frames), dim));
        }
        let weighted = g.mul_const(sq, Tensor::matrix(row_times.len(), dim, w)?)?;
        let diffusion = g.sum_all(weighted);

        let a = g.add(dur, prior)?;
        let total = g.add(a, diffusion)?;
        let terms = LossTerms {
            duration: g.value(dur).item().f64(),
            prior: g.value(prior).item().f64() + dim as f64 * half_ln_2pi(),
            diffusion: g.value(diffusion).item().f64(),
        };
        Ok(LossGraph {
            graph: g,
            params: p,
            total,
            terms,
        })
    }

    /// Draws times and noise, then builds [`loss_graph`](Self::loss_graph).
    pub fn training_loss<R: Rng + ?Sized>(&self, batch: &Batch<T>, rng: &mut R) -> Result<LossGraph<T>> {
        let times: Vec<f64> = (0..batch.frame_layout.num_segments())
            .map(|_| rng.random_range(T_MIN..=1.0))
            .collect();
        let noise = Tensor::randn(batch.x0.shape(), rng);
        self.loss_graph(batch, &times, noise)
    }

    /// Loss value and parameter gradients.
    pub fn loss_and_grads<R: Rng + ?Sized>(&self, batch: &Batch<T>, rng: &mut R) -> Result<(LossTerms, ParamSet<T>)> {
        let lg = self.training_loss(batch, rng)?;
        let mut grads = lg.graph.backward(lg.total)?;
        Ok((lg.terms, lg.params.grads(&mut grads, &self.params)?))
    }
}

impl<T: Scalar> ScoreModel<T> for AcousticModel<T> {
    fn score(&self, x: &Tensor<T>, cond: &Conditioning<T>, t: f64) -> Result<Tensor<T>> {
        x.check_same(&cond.mu, "score")?;
        if x.cols() != self.arch.dim {
            return Err(shape_err("score", format!("frame dim {} vs {}", x.cols(), self.arch.dim)));
        }
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params, false);
        let xv = g.constant(x.clone());
        let mv = g.constant(cond.mu.clone());
        let s = self.score_var(&mut g, &p, xv, mv, &vec![t; x.rows()], &cond.layout)?;
        g.check_finite()?;
        Ok(g.value(s).clone())
    }
}

/// One row of the acoustic training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcousticLogRow {
    pub step: u64,
    pub dur_loss: f64,
    pub diff_loss: f64,
    pub prior_loss: f64,
    pub total: f64,
}

/// Fresh optimizer state for a new acoustic run.
pub fn init_acoustic_state(arch: &AcousticArch, cfg: &TrainConfig, seed: u64) -> Result<TrainState> {
    let model = AcousticModel::<f32>::init(arch.clone(), &mut stream(derive_seed(seed, "acoustic-init"), 0))?;
    TrainState::new(model.params, ParamSet::new(), cfg.ema_decay)
}

/// Advances `state` to `cfg.steps` optimizer steps.
///
/// Every step draws its batch and noise from a stream keyed by the step
/// index, so a resumed run matches an uninterrupted one exactly.
pub fn train_acoustic(
    corpus: &Corpus,
    arch: &AcousticArch,
    cfg: &TrainConfig,
    seed: u64,
    state: &mut TrainState,
) -> Result<Vec<AcousticLogRow>> {
    cfg.validate()?;
    arch.validate()?;
    let pool = &corpus.manifest.train;
    if pool.is_empty() {
        return Err(Error::Config("corpus has no training utterances".into()));
    }
    let step_seed = derive_seed(seed, "acoustic-step");
    let adam = cfg.adam();
    let mut log = Vec::new();
    while state.step < cfg.steps {
        let mut rng = stream(step_seed, state.step);
        let ids = pick_batch(pool, cfg.batch_size, &mut rng);
        let utts: Vec<&Utterance> = ids.iter().map(|&i| corpus.utterance(i)).collect();
        let batch = Batch::<f32>::new(&utts)?;
        let model = AcousticModel {
            arch: arch.clone(),
            params: std::mem::take(&mut state.params),
        };
        let step = state.step;
        let outcome = model.loss_and_grads(&batch, &mut rng);
        state.params = model.params;
        let (terms, grads) = outcome.map_err(|e| Error::Diverged {
            step,
            source: Box::new(e),
        })?;
        if !terms.total().is_finite() {
            return Err(Error::Diverged {
                step,
                source: Box::new(Error::NonFinite { op: "acoustic_loss" }),
            });
        }
        adam_step(&mut state.params, &grads, &mut state.adam, &adam)?;
        if !state.params.is_finite() {
            return Err(Error::Diverged {
                step,
                source: Box::new(Error::NonFinite { op: "adam_step" }),
            });
        }
        state.ema.update(&state.params)?;
        state.step += 1;
        log.push(AcousticLogRow {
            step: state.step,
            dur_loss: terms.duration,
            diff_loss: terms.diffusion,
            prior_loss: terms.prior,
            total: terms.total(),
        });
    }
    Ok(log)
}

pub fn architecture_json(arch: &AcousticArch) -> serde_json::Value {
    serde_json::json!({
        "config": arch,
        "encoder": arch.encoder(),
        "duration": arch.duration_net(),
        "score": arch.score_net(),
    })
}

/// Reads the architecture stored by [`architecture_json`].
pub fn arch_from_checkpoint(ck: &Checkpoint) -> Result<AcousticArch> {
    if ck.kind != CHECKPOINT_KIND {
        return Err(Error::Format(format!("expected an acoustic checkpoint, found `{}`", ck.kind)));
    }
    let cfg = ck
        .architecture
        .get("config")
        .ok_or_else(|| Error::Format("checkpoint architecture lacks `config`".into()))?;
    Ok(serde_json::from_value(cfg.clone())?)
}

/// Inference model from a checkpoint, using the averaged weights.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<AcousticModel<f32>> {
    let arch = arch_from_checkpoint(ck)?;
    AcousticModel::from_params(arch, ck.group("ema")?)
}
