//! Time-conditioned utterance emotion classifier over noisy frames and their
//! text-side means, trained with the acoustic model frozen.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::{AcousticModel, Batch};
use crate::error::{shape_err, Error, Result};
use crate::guidance::{Conditioning, EmotionGuide, SoftLabel};
use crate::nn::{
    adam_step, apply_bn_updates, time_embedding_rows, Bound, Checkpoint, Ctx, Graph, Layer, Layout, Mode, ParamSet,
    Scalar, Sequential, Tensor, Var,
};
use crate::oracle::{Corpus, Utterance};
use crate::rng::{derive_seed, stream};
use crate::sde::{sample_forward_with_noise, NoiseSchedule, T_MIN};
use crate::train::{pick_batch, TrainConfig, TrainState};

pub const CHECKPOINT_KIND: &str = "classifier";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierArch {
    pub dim: usize,
    pub num_emotions: usize,
    pub channels: usize,
    pub blocks: usize,
    pub width: usize,
    pub dropout: f64,
    pub time_dim: usize,
    pub hidden: usize,
}

impl ClassifierArch {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.channels == 0 || self.hidden == 0 || self.blocks == 0 {
            return Err(Error::Config("classifier sizes must be positive".into()));
        }
        if self.num_emotions < 2 {
            return Err(Error::Config("classifier needs at least two emotions".into()));
        }
        if self.width.is_multiple_of(2) {
            return Err(Error::Config("classifier kernel width must be odd".into()));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config("time_dim must be even and positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn features(&self) -> Sequential {
        let mut layers = Vec::new();
        for i in 0..self.blocks {
            let cin = if i == 0 { 2 * self.dim } else { self.channels };
            layers.push(Layer::Conv1d {
                name: format!("block{i}.conv"),
                in_channels: cin,
                out_channels: self.channels,
                width: self.width,
            });
            layers.push(Layer::BatchNorm {
                name: format!("block{i}.bn"),
                channels: self.channels,
            });
            layers.push(Layer::Silu);
            layers.push(Layer::Dropout { p: self.dropout });
        }
        Sequential::new(layers)
    }

    fn time_proj(&self) -> Sequential {
        Sequential::new(vec![Layer::Linear {
            name: "time".into(),
            inputs: self.time_dim,
            outputs: self.channels,
        }])
    }

    fn head(&self) -> Sequential {
        Sequential::new(vec![
            Layer::Linear {
                name: "head.in".into(),
                inputs: self.channels,
                outputs: self.hidden,
            },
            Layer::Silu,
            Layer::Linear {
                name: "head.out".into(),
                inputs: self.hidden,
                outputs: self.num_emotions,
            },
        ])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T: Scalar = f32> {
    pub arch: ClassifierArch,
    pub params: ParamSet<T>,
    /// Batch-norm running statistics.
    pub buffers: ParamSet<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn init<R: Rng + ?Sized>(arch: ClassifierArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        for net in [arch.features(), arch.time_proj(), arch.head()] {
            net.init(rng, &mut params, &mut buffers)?;
        }
        Ok(Self { arch, params, buffers })
    }

    pub fn from_parts(arch: ClassifierArch, params: ParamSet<T>, buffers: ParamSet<T>) -> Result<Self> {
        let reference = Classifier::<T>::init(arch.clone(), &mut stream(0, 0))?;
        reference.params.check_mirrors(&params)?;
        reference.buffers.check_mirrors(&buffers)?;
        Ok(Self { arch, params, buffers })
    }

    pub fn cast<U: Scalar>(&self) -> Classifier<U> {
        Classifier {
            arch: self.arch.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
        }
    }

    /// `[segments, m]` log-probabilities; `seg_times` holds one time per segment.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        mu: Var,
        seg_times: &[f64],
        ctx: &mut Ctx<'_, T>,
    ) -> Result<Var> {
        let layout = ctx.layout.clone();
        if seg_times.len() != layout.num_segments() {
            return Err(shape_err("classify", "one time per utterance required"));
        }
        let input = g.concat(&[x, mu])?;
        let h = self.arch.features().forward(g, p, input, ctx)?;
        let pooled = g.segment_mean(h, &layout)?;
        let temb = g.constant(time_embedding_rows(seg_times, self.arch.time_dim));
        let tproj = self.arch.time_proj().forward(g, p, temb, ctx)?;
        let z = g.add(pooled, tproj)?;
        let logits = self.arch.head().forward(g, p, z, ctx)?;
        Ok(g.log_softmax(logits))
    }

    /// Mean cross-entropy of `labels` under [`forward`](Self::forward).
    #[allow(clippy::too_many_arguments)]
    pub fn cross_entropy(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        mu: Var,
        seg_times: &[f64],
        labels: Vec<usize>,
        ctx: &mut Ctx<'_, T>,
    ) -> Result<Var> {
        let logp = self.forward(g, p, x, mu, seg_times, ctx)?;
        let picked = g.pick_cols(logp, labels)?;
        let mean = g.mean_all(picked);
        Ok(g.scale(mean, -T::one()))
    }

    fn check(&self, x: &Tensor<T>, cond: &Conditioning<T>, t: f64) -> Result<()> {
        x.check_same(&cond.mu, "classify")?;
        if x.cols() != self.arch.dim {
            return Err(shape_err("classify", format!("frame dim {} vs {}", x.cols(), self.arch.dim)));
        }
        if cond.layout.total() != x.rows() {
            return Err(shape_err("classify", "layout does not cover frames"));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        Ok(())
    }

    /// Input gradient of the scalar picked out of the log-probabilities by `objective`.
    fn input_grad(
        &self,
        x: &Tensor<T>,
        cond: &Conditioning<T>,
        t: f64,
        objective: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
    ) -> Result<Tensor<T>> {
        self.check(x, cond, t)?;
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params, false);
        let xv = g.leaf(x.clone(), true);
        let mv = g.constant(cond.mu.clone());
        let times = vec![t; cond.layout.num_segments()];
        let logp = self.forward(&mut g, &p, xv, mv, &times, &mut Ctx::eval(&cond.layout, &self.buffers))?;
        let obj = objective(&mut g, logp)?;
        let mut grads = g.backward(obj)?;
        Ok(grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape())))
    }

    /// Probabilities for one utterance.
    pub fn classify(&self, x: &Tensor<T>, mu: &Tensor<T>, t: f64) -> Result<Vec<f64>> {
        let cond = Conditioning {
            mu: mu.clone(),
            layout: Layout::single(x.rows()),
            frame_tokens: Vec::new(),
        };
        let lp = EmotionGuide::log_probs(self, x, &cond, t)?;
        Ok(lp.data().iter().map(|v| v.f64().exp()).collect())
    }
}

impl<T: Scalar> EmotionGuide<T> for Classifier<T> {
    fn num_emotions(&self) -> usize {
        self.arch.num_emotions
    }

    fn log_probs(&self, x: &Tensor<T>, cond: &Conditioning<T>, t: f64) -> Result<Tensor<T>> {
        self.check(x, cond, t)?;
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params, false);
        let xv = g.constant(x.clone());
        let mv = g.constant(cond.mu.clone());
        let times = vec![t; cond.layout.num_segments()];
        let logp = self.forward(&mut g, &p, xv, mv, &times, &mut Ctx::eval(&cond.layout, &self.buffers))?;
        g.check_finite()?;
        Ok(g.value(logp).clone())
    }

    fn class_log_prob_grad(&self, x: &Tensor<T>, cond: &Conditioning<T>, t: f64, label: usize) -> Result<Tensor<T>> {
        if label >= self.arch.num_emotions {
            return Err(Error::Domain(format!("emotion {label} out of range")));
        }
        let segs = cond.layout.num_segments();
        self.input_grad(x, cond, t, |g, logp| {
            let picked = g.pick_cols(logp, vec![label; segs])?;
            Ok(g.sum_all(picked))
        })
    }

    fn soft_label_grad(&self, x: &Tensor<T>, cond: &Conditioning<T>, t: f64, label: &SoftLabel) -> Result<Tensor<T>> {
        let m = self.arch.num_emotions;
        if label.num_emotions() != m {
            return Err(shape_err("soft_label_grad", "label size differs from emotion count"));
        }
        let segs = cond.layout.num_segments();
        let w: Vec<T> = (0..segs).flat_map(|_| label.weights().iter().map(|&v| T::lit(v))).collect();
        let w = Tensor::matrix(segs, m, w)?;
        // negative cross-entropy against the label, one backward pass
        self.input_grad(x, cond, t, |g, logp| {
            let weighted = g.mul_const(logp, w)?;
            Ok(g.sum_all(weighted))
        })
    }
}

/// Frame means of every utterance from the frozen acoustic model and the true durations.
pub fn corpus_mu(acoustic: &AcousticModel<f32>, corpus: &Corpus) -> Result<Vec<Tensor<f32>>> {
    corpus
        .utterances
        .iter()
        .map(|u| acoustic.predict_mu(&u.tokens, &u.durations))
        .collect()
}

fn stack(parts: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let cols = parts.first().map_or(0, |t| t.cols());
    let rows = parts.iter().map(|t| t.rows()).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::matrix(rows, cols, data)
}

/// Diffuses a batch at per-utterance times; `t = 0` keeps the clean frames.
fn diffuse<R: Rng + ?Sized>(
    batch: &Batch<f32>,
    mu: &Tensor<f32>,
    seg_times: &[f64],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let noise = Tensor::randn(batch.x0.shape(), rng);
    if seg_times.iter().all(|&t| t == 0.0) {
        return Ok(batch.x0.clone());
    }
    let row_times: Vec<f64> = batch
        .frame_layout
        .row_segments()
        .iter()
        .map(|&s| seg_times[s])
        .collect();
    Ok(sample_forward_with_noise(&batch.x0, mu, &row_times, schedule, noise)?.x_t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierLogRow {
    pub step: u64,
    pub ce: f64,
}

pub fn init_classifier_state(arch: &ClassifierArch, cfg: &TrainConfig, seed: u64) -> Result<TrainState> {
    let model = Classifier::<f32>::init(arch.clone(), &mut stream(derive_seed(seed, "classifier-init"), 0))?;
    TrainState::new(model.params, model.buffers, cfg.ema_decay)
}

/// Advances `state` to `cfg.steps` cross-entropy steps on diffused frames.
/// The acoustic model is only read.
pub fn train_classifier(
    corpus: &Corpus,
    acoustic: &AcousticModel<f32>,
    arch: &ClassifierArch,
    cfg: &TrainConfig,
    seed: u64,
    state: &mut TrainState,
) -> Result<Vec<ClassifierLogRow>> {
    cfg.validate()?;
    arch.validate()?;
    if arch.num_emotions != corpus.manifest.num_emotions() || arch.dim != corpus.manifest.dim {
        return Err(Error::Config("classifier shape does not match the corpus".into()));
    }
    let pool = &corpus.manifest.train;
    if pool.is_empty() {
        return Err(Error::Config("corpus has no training utterances".into()));
    }
    let mus = corpus_mu(acoustic, corpus)?;
    let step_seed = derive_seed(seed, "classifier-step");
    let adam = cfg.adam();
    let mut log = Vec::new();
    while state.step < cfg.steps {
        let step = state.step;
        let mut rng = stream(step_seed, step);
        let ids = pick_batch(pool, cfg.batch_size, &mut rng);
        let utts: Vec<&Utterance> = ids.iter().map(|&i| corpus.utterance(i)).collect();
        let batch = Batch::<f32>::new(&utts)?;
        let mu = stack(&ids.iter().map(|&i| &mus[i]).collect::<Vec<_>>())?;
        let times: Vec<f64> = ids.iter().map(|_| rng.random_range(T_MIN..=1.0)).collect();
        let x_t = diffuse(&batch, &mu, &times, acoustic.schedule(), &mut rng)?;
        let labels: Vec<usize> = utts.iter().map(|u| u.emotion_id).collect();

        let model = Classifier {
            arch: arch.clone(),
            params: std::mem::take(&mut state.params),
            buffers: std::mem::take(&mut state.buffers),
        };
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &model.params, true);
        let xv = g.constant(x_t);
        let mv = g.constant(mu);
        let mut ctx = Ctx {
            mode: Mode::Train,
            layout: &batch.frame_layout,
            buffers: &model.buffers,
            rng: Some(&mut rng),
            bn_updates: Vec::new(),
        };
        let outcome = (|| {
            let ce = model.cross_entropy(&mut g, &p, xv, mv, &times, labels, &mut ctx)?;
            let mut grads = g.backward(ce)?;
            Ok::<_, Error>((g.value(ce).item() as f64, p.grads(&mut grads, &model.params)?))
        })();
        let bn_updates = std::mem::take(&mut ctx.bn_updates);
        state.params = model.params;
        state.buffers = model.buffers;
        let (ce, grads) = outcome.map_err(|e| Error::Diverged {
            step,
            source: Box::new(e),
        })?;
        adam_step(&mut state.params, &grads, &mut state.adam, &adam)?;
        apply_bn_updates(&mut state.buffers, &bn_updates)?;
        if !state.params.is_finite() || !state.buffers.is_finite() {
            return Err(Error::Diverged {
                step,
                source: Box::new(Error::NonFinite { op: "adam_step" }),
            });
        }
        state.ema.update(&state.params)?;
        state.step += 1;
        log.push(ClassifierLogRow { step: state.step, ce });
    }
    Ok(log)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEvalRow {
    pub t: f64,
    pub ce: f64,
    pub accuracy: f64,
}

/// Cross-entropy and accuracy on the validation split at each diffusion time.
pub fn evaluate_classifier(
    model: &Classifier<f32>,
    acoustic: &AcousticModel<f32>,
    corpus: &Corpus,
    times: &[f64],
    seed: u64,
) -> Result<Vec<ClassifierEvalRow>> {
    let utts: Vec<&Utterance> = corpus.validation().collect();
    if utts.is_empty() {
        return Err(Error::Config("corpus has no validation utterances".into()));
    }
    let batch = Batch::<f32>::new(&utts)?;
    let mus: Vec<Tensor<f32>> = utts
        .iter()
        .map(|u| acoustic.predict_mu(&u.tokens, &u.durations))
        .collect::<Result<_>>()?;
    let mu = stack(&mus.iter().collect::<Vec<_>>())?;
    let cond = Conditioning {
        mu,
        layout: batch.frame_layout.clone(),
        frame_tokens: Vec::new(),
    };
    let eval_seed = derive_seed(seed, "classifier-eval");
    times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let seg_times = vec![t; utts.len()];
            let x = diffuse(&batch, &cond.mu, &seg_times, acoustic.schedule(), &mut stream(eval_seed, i as u64))?;
            let lp = model.log_probs(&x, &cond, t)?;
            let (mut ce, mut correct) = (0.0, 0usize);
            for (s, u) in utts.iter().enumerate() {
                let row = lp.row(s);
                ce -= row[u.emotion_id] as f64;
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                correct += usize::from(best == u.emotion_id);
            }
            let n = utts.len() as f64;
            Ok(ClassifierEvalRow {
                t,
                ce: ce / n,
                accuracy: correct as f64 / n,
            })
        })
        .collect()
}

pub fn architecture_json(arch: &ClassifierArch) -> serde_json::Value {
    serde_json::json!({
        "config": arch,
        "features": arch.features(),
        "time": arch.time_proj(),
        "head": arch.head(),
    })
}

pub fn arch_from_checkpoint(ck: &Checkpoint) -> Result<ClassifierArch> {
    if ck.kind != CHECKPOINT_KIND {
        return Err(Error::Format(format!("expected a classifier checkpoint, found `{}`", ck.kind)));
    }
    let cfg = ck
        .architecture
        .get("config")
        .ok_or_else(|| Error::Format("checkpoint architecture lacks `config`".into()))?;
    Ok(serde_json::from_value(cfg.clone())?)
}

/// Inference classifier from a checkpoint: averaged weights, running statistics.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Classifier<f32>> {
    let arch = arch_from_checkpoint(ck)?;
    Classifier::from_parts(arch, ck.group("ema")?, ck.group("buffers")?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> ClassifierArch {
        ClassifierArch {
            dim: 3,
            num_emotions: 4,
            channels: 6,
            blocks: 2,
            width: 3,
            dropout: 0.1,
            time_dim: 4,
            hidden: 5,
        }
    }

    fn inputs(seed: u64) -> (Tensor<f64>, Conditioning<f64>) {
        let mut rng = stream(seed, 0);
        let x = Tensor::randn(&[7, 3], &mut rng);
        let cond = Conditioning {
            mu: Tensor::randn(&[7, 3], &mut rng),
            layout: Layout::from_lengths(&[3, 4]),
            frame_tokens: Vec::new(),
        };
        (x, cond)
    }

    #[test]
    fn output_is_on_simplex() {
        let c = Classifier::<f64>::init(arch(), &mut stream(1, 0)).unwrap();
        let (x, cond) = inputs(2);
        let lp = c.log_probs(&x, &cond, 0.4).unwrap();
        assert_eq!(lp.shape(), &[2, 4]);
        for s in 0..2 {
            let total: f64 = lp.row(s).iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_head_is_uniform() {
        let mut c = Classifier::<f64>::init(arch(), &mut stream(1, 0)).unwrap();
        let shape = c.params.get("head.out.weight").unwrap().shape().to_vec();
        c.params.set("head.out.weight", Tensor::zeros(&shape)).unwrap();
        let (x, _) = inputs(3);
        let p = c.classify(&x, &x, 0.0).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn normalization_identity() {
        let c = Classifier::<f64>::init(arch(), &mut stream(4, 0)).unwrap();
        let (x, cond) = inputs(5);
        let lp = c.log_probs(&x, &cond, 0.6).unwrap();
        // Σ_j p_j ∇ log p_j = ∇ Σ_j p_j = 0, per utterance
        let mut acc = Tensor::<f64>::zeros(x.shape());
        for j in 0..4 {
            let g = c.class_log_prob_grad(&x, &cond, 0.6, j).unwrap();
            for (s, seg) in cond.layout.segments().enumerate() {
                let p = lp.row(s)[j].exp();
                for r in seg {
                    for (a, b) in acc.row_mut(r).iter_mut().zip(g.row(r)) {
                        *a += p * b;
                    }
                }
            }
        }
        assert!(acc.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn one_hot_soft_label_equals_class_gradient() {
        let c = Classifier::<f32>::init(arch(), &mut stream(6, 0)).unwrap();
        let (x, cond) = inputs(7);
        let (x, cond) = (
            x.cast::<f32>(),
            Conditioning {
                mu: cond.mu.cast(),
                layout: cond.layout,
                frame_tokens: vec![],
            },
        );
        let label = SoftLabel::one_hot(4, 2).unwrap();
        assert_eq!(
            c.soft_label_grad(&x, &cond, 0.3, &label).unwrap(),
            c.class_log_prob_grad(&x, &cond, 0.3, 2).unwrap()
        );
    }

    #[test]
    fn two_class_half_label_is_average() {
        let mut a = arch();
        a.num_emotions = 2;
        let c = Classifier::<f64>::init(a, &mut stream(8, 0)).unwrap();
        let (x, cond) = inputs(9);
        let g0 = c.class_log_prob_grad(&x, &cond, 0.5, 0).unwrap();
        let g1 = c.class_log_prob_grad(&x, &cond, 0.5, 1).unwrap();
        let soft = c.soft_label_grad(&x, &cond, 0.5, &SoftLabel::mixed(&[1.0, 1.0]).unwrap()).unwrap();
        let want = g0.scale(0.5).add(&g1.scale(0.5)).unwrap();
        assert!(soft.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = Classifier::<f64>::init(arch(), &mut stream(1, 0)).unwrap();
        let (x, cond) = inputs(2);
        assert!(c.log_probs(&x.rows_slice(0..5), &cond, 0.5).is_err());
        assert!(c.log_probs(&x, &cond, 1.5).is_err());
        assert!(c.class_log_prob_grad(&x, &cond, 0.5, 4).is_err());
    }
}
