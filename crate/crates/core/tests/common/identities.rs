//! Exact identities between guidance paths, checked against closed forms.

use emotune::guidance::{guided_score, sample_guided, Conditioning, EmotionGuide, Guidance, GuidanceConfig, ScoreModel, SoftLabel, NEUTRAL};
use emotune::nn::{Layout, Scalar, Tensor};
use emotune::oracle::GmmOracle;
use emotune::rng::{stream, StreamRng};
use emotune::sde::{NoiseSchedule, SolverConfig, T_MIN};
use emotune::Result;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

fn vectors(rng: &mut StreamRng, n: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| scale * normal(rng)).collect()).collect()
}

/// Random simplex point with full support.
pub fn random_label(rng: &mut StreamRng, m: usize) -> Result<SoftLabel> {
    let raw: Vec<f64> = (0..m).map(|_| -rng.random_range(1e-9..1.0f64).ln()).collect();
    SoftLabel::mixed(&raw)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Largest relative error between the one-class guided score at unit scale
/// and the closed-form class-conditional score, over random mixtures, times
/// and inputs.
pub fn bayes_identity(seed: u64, points: u64) -> Result<f64> {
    let schedule = NoiseSchedule::new(0.05, 20.0)?;
    let mut worst = 0.0f64;
    for k in 0..points {
        let mut rng = stream(seed, k);
        let dim = rng.random_range(1..=6);
        let vocab = rng.random_range(1..=5);
        let m = rng.random_range(2..=5);
        let bases = vectors(&mut rng, vocab, dim, 2.0);
        let offsets = vectors(&mut rng, m, dim, 1.0);
        let sigma = rng.random_range(0.1..0.8);
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let priors: Vec<f64> = raw.iter().map(|p| p / total).collect();
        let oracle = GmmOracle::new(bases.clone(), offsets.clone(), sigma, &priors, schedule)?;

        let lengths: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=5)).collect();
        let layout = Layout::from_lengths(&lengths);
        let n = layout.total();
        let frame_tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
        let mu: Tensor<f64> = Tensor::randn(&[n, dim], &mut rng);
        let t = rng.random_range(T_MIN..=1.0);
        let spread = rng.random_range(0.5..4.0);
        let x: Tensor<f64> = Tensor::randn(&[n, dim], &mut rng).scale(spread);
        let cond = Conditioning {
            mu: mu.clone(),
            layout,
            frame_tokens: frame_tokens.clone(),
        };
        let target = rng.random_range(0..m);

        let mp = schedule.marginal_params(t)?;
        let a = mp.mean_coeff_x0;
        let var = mp.variance + a * a * sigma * sigma;
        let mut want = Vec::with_capacity(n * dim);
        for f in 0..n {
            for j in 0..dim {
                let mean = a * (bases[frame_tokens[f]][j] + offsets[target][j]) + mp.mean_coeff_mu * mu.row(f)[j];
                want.push(-(x.row(f)[j] - mean) / var);
            }
        }
        for guidance in [Guidance::OneHot(target), Guidance::Soft(&SoftLabel::one_hot(m, target)?)] {
            let got = guided_score(&oracle, &oracle, &x, &cond, t, guidance, 1.0)?;
            let diff: Vec<f64> = got.data().iter().zip(&want).map(|(g, w)| g - w).collect();
            worst = worst.max(norm(&diff) / norm(&want).max(f64::MIN_POSITIVE));
        }
    }
    Ok(worst)
}

/// Largest absolute difference between the explicit per-class sum and the
/// single-backward soft-label gradient.
pub fn soft_equals_weighted_sum<T, C, F>(guide: &C, seed: u64, cases: u64, mut make: F) -> Result<f64>
where
    T: Scalar,
    C: EmotionGuide<T> + ?Sized,
    F: FnMut(&mut StreamRng) -> Result<(Tensor<T>, Conditioning<T>, f64)>,
{
    let mut worst = 0.0f64;
    for k in 0..cases {
        let mut rng = stream(seed, k);
        let (x, cond, t) = make(&mut rng)?;
        let label = random_label(&mut rng, guide.num_emotions())?;
        let single = guide.soft_label_grad(&x, &cond, t, &label)?;
        let explicit = guide.weighted_class_grads(&x, &cond, t, &label)?;
        for (a, b) in single.data().iter().zip(explicit.data()) {
            worst = worst.max((a.f64() - b.f64()).abs());
        }
    }
    Ok(worst)
}

fn bit_equal<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.f64().to_bits() == y.f64().to_bits())
}

/// Outcome of comparing soft-label trajectories at the ends of the
/// intensity scale against one-hot guidance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Reduction {
    pub pairs: usize,
    pub identical: usize,
    pub states: usize,
}

/// For each seed, α = 1 against one-hot on the emotion and α = 0 against
/// one-hot on neutral, comparing every state of the trajectory.
#[allow(clippy::too_many_arguments)]
pub fn reduction<T, S, C>(
    score: &S,
    guide: &C,
    schedule: &NoiseSchedule,
    cond: &Conditioning<T>,
    gamma: f64,
    n_steps: usize,
    seeds: u64,
) -> Result<Reduction>
where
    T: Scalar,
    S: ScoreModel<T> + ?Sized,
    C: EmotionGuide<T> + ?Sized,
{
    let m = guide.num_emotions();
    let mut out = Reduction::default();
    for seed in 0..seeds {
        let emotion = 1 + (seed as usize) % (m - 1);
        let cfg = GuidanceConfig::new(gamma, SolverConfig::new(n_steps, seed)?)?;
        for (alpha, class) in [(1.0, emotion), (0.0, NEUTRAL)] {
            let label = SoftLabel::intensity(m, emotion, alpha)?;
            let run = |g: Guidance<'_>| sample_guided(score, guide, schedule, cond, g, &cfg, &mut stream(seed, 0), true);
            let soft = run(Guidance::Soft(&label))?;
            let hard = run(Guidance::OneHot(class))?;
            out.pairs += 1;
            out.states += soft.states.len();
            let same = soft.states.len() == hard.states.len()
                && soft.states.iter().zip(&hard.states).all(|(a, b)| bit_equal(a, b));
            out.identical += usize::from(same);
        }
    }
    Ok(out)
}
