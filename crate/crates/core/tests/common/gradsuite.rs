//! Randomized finite-difference checks over every layer type and both networks.

use emotune::acoustic::{AcousticArch, AcousticModel, Batch};
use emotune::classifier::{Classifier, ClassifierArch};
use emotune::guidance::{Conditioning, EmotionGuide, SoftLabel};
use emotune::nn::{Bound, Ctx, GradCheck, GradReport, Graph, Layer, Layout, Mode, ParamSet, Sequential, Tensor};
use emotune::oracle::Utterance;
use emotune::rng::stream;
use emotune::sde::NoiseSchedule;
use emotune::Result;
use rand::{Rng, RngCore};

fn random_layout<R: Rng>(rng: &mut R) -> Layout {
    let n = rng.random_range(1..=3);
    let lengths: Vec<usize> = (0..n).map(|_| rng.random_range(1..=6)).collect();
    Layout::from_lengths(&lengths)
}

fn positive<R: Rng>(shape: &[usize], rng: &mut R) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.5..1.5)).collect())
}

fn activation<R: Rng>(rng: &mut R) -> Layer {
    match rng.random_range(0..3) {
        0 => Layer::Silu,
        1 => Layer::Relu,
        _ => Layer::Tanh,
    }
}

fn random_stack<R: Rng>(rng: &mut R, cin: usize) -> (Sequential, usize) {
    let hidden = rng.random_range(1..=5);
    let cout = rng.random_range(1..=4);
    let width = [1, 3, 5][rng.random_range(0..3)];
    let stack = Sequential::new(vec![
        Layer::Conv1d {
            name: "conv".into(),
            in_channels: cin,
            out_channels: hidden,
            width,
        },
        Layer::BatchNorm {
            name: "bn".into(),
            channels: hidden,
        },
        activation(rng),
        Layer::Dropout { p: 0.3 },
        Layer::Linear {
            name: "lin".into(),
            inputs: hidden,
            outputs: cout,
        },
        activation(rng),
    ]);
    (stack, cout)
}

type Tracked = Option<(ParamSet<f64>, Tensor<f64>)>;

/// Weighted output sum, so batch-norm's shift invariance does not hide errors.
#[allow(clippy::too_many_arguments)]
fn stack_loss(
    stack: &Sequential,
    params: &ParamSet<f64>,
    buffers: &ParamSet<f64>,
    layout: &Layout,
    mode: Mode,
    x: &Tensor<f64>,
    weights: &Tensor<f64>,
    track: bool,
    drop_seed: u64,
) -> Result<(f64, Tracked)> {
    let mut g = Graph::<f64>::new();
    let p = Bound::new(&mut g, params, track);
    let xv = g.leaf(x.clone(), track);
    let mut rng = stream(drop_seed, 0);
    let mut ctx = Ctx {
        mode,
        layout,
        buffers,
        rng: Some(&mut rng as &mut dyn RngCore),
        bn_updates: Vec::new(),
    };
    let y = stack.forward(&mut g, &p, xv, &mut ctx)?;
    let wy = g.mul_const(y, weights.clone())?;
    let l = g.sum_all(wy);
    let value = g.value(l).item();
    if !track {
        return Ok((value, None));
    }
    let mut grads = g.backward(l)?;
    let pg = p.grads(&mut grads, params)?;
    let xg = grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((value, Some((pg, xg))))
}

/// Conv, batch norm (both modes), dropout, linear and the activations.
pub fn layer_stacks(seed: u64, reps: u64) -> Result<GradReport> {
    let check = GradCheck::default();
    let mut report = GradReport::default();
    for rep in 0..reps {
        let mut rng = stream(seed, rep);
        let layout = random_layout(&mut rng);
        let cin = rng.random_range(1..=4);
        let (stack, cout) = random_stack(&mut rng, cin);
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        stack.init(&mut rng, &mut params, &mut buffers)?;
        for (_, t) in params.iter_mut() {
            *t = Tensor::randn(t.shape(), &mut rng).scale(0.7);
        }
        for (_, t) in buffers.iter_mut() {
            *t = positive(t.shape(), &mut rng)?;
        }
        let x = Tensor::randn(&[layout.total(), cin], &mut rng);
        let w = Tensor::randn(&[layout.total(), cout], &mut rng);
        let drop_seed = rng.next_u64();
        // a single frame has no batch variance to normalize by
        let modes: &[Mode] = if layout.total() > 1 { &[Mode::Train, Mode::Eval] } else { &[Mode::Eval] };
        for &mode in modes {
            let run = |p: &ParamSet<f64>, x: &Tensor<f64>| {
                stack_loss(&stack, p, &buffers, &layout, mode, x, &w, false, drop_seed).map(|r| r.0)
            };
            let (_, g) = stack_loss(&stack, &params, &buffers, &layout, mode, &x, &w, true, drop_seed)?;
            let (pg, xg) = g.expect("tracked");
            report.merge(&check.params(&params, &pg, |p| run(p, &x))?);
            report.merge(&check.input("input", &x, &xg, |xx| run(&params, xx))?);
        }
    }
    Ok(report)
}

fn random_utterance<R: Rng>(rng: &mut R, vocab: usize, dim: usize) -> Utterance {
    let n = rng.random_range(1..=4);
    let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
    let durations: Vec<usize> = (0..n).map(|_| rng.random_range(1..=3)).collect();
    let frames = Tensor::randn(&[durations.iter().sum(), dim], rng);
    Utterance {
        id: 0,
        tokens,
        durations,
        frames,
        emotion_id: 0,
    }
}

/// Every acoustic parameter under the combined duration, prior and diffusion loss.
pub fn acoustic_loss(seed: u64, reps: u64) -> Result<GradReport> {
    let check = GradCheck::default();
    let mut report = GradReport::default();
    for rep in 0..reps {
        let mut rng = stream(seed, rep);
        let arch = AcousticArch {
            vocab_size: rng.random_range(2..=5),
            dim: rng.random_range(1..=3),
            embed_dim: rng.random_range(2..=4),
            hidden: rng.random_range(2..=5),
            time_dim: 4,
            conv_layers: rng.random_range(0..=2),
            conv_width: [1, 3][rng.random_range(0..2)],
            schedule: NoiseSchedule::new(0.05, 20.0)?,
        };
        let model = AcousticModel::<f64>::init(arch.clone(), &mut rng)?;
        let utts: Vec<Utterance> = (0..rng.random_range(1..=2))
            .map(|_| random_utterance(&mut rng, arch.vocab_size, arch.dim))
            .collect();
        let refs: Vec<&Utterance> = utts.iter().collect();
        let batch = Batch::<f64>::new(&refs)?;
        let times: Vec<f64> = utts.iter().map(|_| rng.random_range(0.05..1.0)).collect();
        let noise = Tensor::randn(batch.x0.shape(), &mut rng);
        let lg = model.loss_graph(&batch, &times, noise.clone())?;
        let mut grads = lg.graph.backward(lg.total)?;
        let analytic = lg.params.grads(&mut grads, &model.params)?;
        // the diffusion term sees the frame means as constants, so text-side
        // parameters reach the loss only through the duration and prior terms
        let terms = |p: &ParamSet<f64>| {
            let m = AcousticModel::from_params(arch.clone(), p.clone())?;
            Ok::<_, emotune::Error>(m.loss_graph(&batch, &times, noise.clone())?.terms)
        };
        report.merge(&check.params(&model.params, &analytic, |p| {
            let mut frozen_text = model.params.clone();
            for (name, t) in p.iter().filter(|(n, _)| n.starts_with("score.")) {
                frozen_text.set(name, t.clone())?;
            }
            let own = terms(p)?;
            Ok(own.duration + own.prior + terms(&frozen_text)?.diffusion)
        })?);
    }
    Ok(report)
}

fn random_classifier<R: Rng>(rng: &mut R) -> Result<Classifier<f64>> {
    let arch = ClassifierArch {
        dim: rng.random_range(1..=3),
        num_emotions: rng.random_range(2..=4),
        channels: rng.random_range(2..=4),
        blocks: rng.random_range(1..=2),
        width: [1, 3][rng.random_range(0..2)],
        dropout: 0.2,
        time_dim: 4,
        hidden: rng.random_range(2..=4),
    };
    let mut c = Classifier::<f64>::init(arch, rng)?;
    for (_, t) in c.buffers.iter_mut() {
        *t = positive(t.shape(), rng)?;
    }
    Ok(c)
}

/// Classifier parameters under the training cross-entropy (batch statistics, dropout on).
pub fn classifier_params(seed: u64, reps: u64) -> Result<GradReport> {
    let check = GradCheck::default();
    let mut report = GradReport::default();
    for rep in 0..reps {
        let mut rng = stream(seed, rep);
        let c = random_classifier(&mut rng)?;
        let mut layout = random_layout(&mut rng);
        if layout.total() < 2 {
            layout = Layout::from_lengths(&[2]);
        }
        let x = Tensor::randn(&[layout.total(), c.arch.dim], &mut rng);
        let mu = Tensor::randn(&[layout.total(), c.arch.dim], &mut rng);
        let times: Vec<f64> = (0..layout.num_segments()).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<usize> = times.iter().map(|_| rng.random_range(0..c.arch.num_emotions)).collect();
        let drop_seed = rng.next_u64();
        let eval = |p: &ParamSet<f64>, track: bool| -> Result<(f64, Option<ParamSet<f64>>)> {
            let mut g = Graph::<f64>::new();
            let b = Bound::new(&mut g, p, track);
            let xv = g.constant(x.clone());
            let mv = g.constant(mu.clone());
            let mut drop = stream(drop_seed, 0);
            let mut ctx = Ctx {
                mode: Mode::Train,
                layout: &layout,
                buffers: &c.buffers,
                rng: Some(&mut drop as &mut dyn RngCore),
                bn_updates: Vec::new(),
            };
            let ce = c.cross_entropy(&mut g, &b, xv, mv, &times, labels.clone(), &mut ctx)?;
            let v = g.value(ce).item();
            if !track {
                return Ok((v, None));
            }
            let mut grads = g.backward(ce)?;
            Ok((v, Some(b.grads(&mut grads, p)?)))
        };
        let analytic = eval(&c.params, true)?.1.expect("tracked");
        report.merge(&check.params(&c.params, &analytic, |p| eval(p, false).map(|r| r.0))?);
    }
    Ok(report)
}

/// Input gradients used by guidance: one class and a random soft label.
pub fn classifier_inputs(seed: u64, reps: u64) -> Result<GradReport> {
    let check = GradCheck::default();
    let mut report = GradReport::default();
    for rep in 0..reps {
        let mut rng = stream(seed, rep);
        let c = random_classifier(&mut rng)?;
        let layout = random_layout(&mut rng);
        let m = c.arch.num_emotions;
        let x = Tensor::randn(&[layout.total(), c.arch.dim], &mut rng);
        let cond = Conditioning {
            mu: Tensor::randn(&[layout.total(), c.arch.dim], &mut rng),
            layout: layout.clone(),
            frame_tokens: Vec::new(),
        };
        let t = rng.random_range(0.0..1.0);
        let class = rng.random_range(0..m);
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let label = SoftLabel::mixed(&raw.iter().map(|v| v / total).collect::<Vec<_>>())?;

        let g1 = c.class_log_prob_grad(&x, &cond, t, class)?;
        report.merge(&check.input("class", &x, &g1, |xx| {
            let lp = c.log_probs(xx, &cond, t)?;
            Ok((0..layout.num_segments()).map(|s| lp.row(s)[class]).sum())
        })?);
        let g2 = c.soft_label_grad(&x, &cond, t, &label)?;
        report.merge(&check.input("soft", &x, &g2, |xx| {
            let lp = c.log_probs(xx, &cond, t)?;
            Ok((0..layout.num_segments())
                .map(|s| lp.row(s).iter().zip(label.weights()).map(|(a, w)| a * w).sum::<f64>())
                .sum())
        })?);
    }
    Ok(report)
}
