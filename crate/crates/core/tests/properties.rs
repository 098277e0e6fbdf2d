use emotune::classifier::{Classifier, ClassifierArch};
use emotune::guidance::{sample_guided, Conditioning, EmotionGuide, Guidance, GuidanceConfig, SoftLabel, NEUTRAL};
use emotune::nn::{EmaState, Layout, ParamSet, Tensor};
use emotune::oracle::GmmOracle;
use emotune::rng::stream;
use emotune::sde::{sample_forward_with_noise, NoiseSchedule, SolverConfig, T_MIN};
use proptest::prelude::*;
use rayon::prelude::*;

fn schedule() -> impl Strategy<Value = NoiseSchedule> {
    (0.01f64..1.0, 19.0f64..40.0).prop_map(|(b0, b1)| NoiseSchedule::new(b0, b1).unwrap())
}

fn on_simplex(w: &[f64]) -> bool {
    w.iter().all(|&v| (0.0..=1.0).contains(&v)) && (w.iter().sum::<f64>() - 1.0).abs() < 1e-12
}

proptest! {
    #[test]
    fn marginal_coefficients_are_convex_and_monotone(s in schedule(), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let a = s.marginal_params(lo).unwrap();
        let b = s.marginal_params(hi).unwrap();
        prop_assert!((a.mean_coeff_x0 + a.mean_coeff_mu - 1.0).abs() <= 2.0 * f64::EPSILON);
        if hi - lo > 1e-9 {
            prop_assert!(b.variance > a.variance);
            prop_assert!(b.mean_coeff_x0 < a.mean_coeff_x0);
        }
    }

    #[test]
    fn score_target_is_scaled_negative_noise(s in schedule(), t in T_MIN..=1.0f64, seed in any::<u64>()) {
        let mut rng = stream(seed, 0);
        let x0 = Tensor::<f64>::randn(&[3, 4], &mut rng);
        let mu = Tensor::<f64>::randn(&[3, 4], &mut rng);
        let eps = Tensor::<f64>::randn(&[3, 4], &mut rng);
        let fs = sample_forward_with_noise(&x0, &mu, &[t; 3], &s, eps.clone()).unwrap();
        let sd = s.marginal_params(t).unwrap().variance.sqrt();
        for (g, e) in fs.score_target.data().iter().zip(eps.data()) {
            prop_assert!((g + e / sd).abs() <= 1e-12 * (1.0 + g.abs()));
        }
    }

    #[test]
    fn soft_labels_stay_on_simplex(m in 2usize..8, e in 0usize..8, alpha in 0.0f64..=1.0,
                                   raw in proptest::collection::vec(0.0f64..10.0, 2..8)) {
        if e < m {
            let l = SoftLabel::intensity(m, e, alpha).unwrap();
            prop_assert!(on_simplex(l.weights()));
            prop_assert!(l.weights()[e] >= alpha - 1e-15);
        }
        if raw.iter().sum::<f64>() > 0.0 {
            prop_assert!(on_simplex(SoftLabel::mixed(&raw).unwrap().weights()));
        }
        prop_assert!(on_simplex(SoftLabel::one_hot(m, m - 1).unwrap().weights()));
    }

    #[test]
    fn ema_shadow_stays_in_hull_of_history(decay in 0.0f64..1.0, seed in any::<u64>(), steps in 1usize..20) {
        let mut rng = stream(seed, 0);
        let mut live = ParamSet::<f64>::new();
        live.insert("w", Tensor::randn(&[5], &mut rng)).unwrap();
        let mut ema = EmaState::new(decay, &live).unwrap();
        let (mut lo, mut hi) = (live.get("w").unwrap().data().to_vec(), live.get("w").unwrap().data().to_vec());
        for _ in 0..steps {
            live.set("w", Tensor::randn(&[5], &mut rng)).unwrap();
            ema.update(&live).unwrap();
            for (i, v) in live.get("w").unwrap().data().iter().enumerate() {
                lo[i] = lo[i].min(*v);
                hi[i] = hi[i].max(*v);
            }
            for (i, s) in ema.shadow.get("w").unwrap().data().iter().enumerate() {
                prop_assert!(*s >= lo[i] - 1e-12 && *s <= hi[i] + 1e-12);
            }
        }
    }

    #[test]
    fn classifier_posteriors_are_normalized(seed in any::<u64>(), t in 0.0f64..=1.0, len in 1usize..9) {
        let arch = ClassifierArch { dim: 3, num_emotions: 4, channels: 6, blocks: 2, width: 3,
                                    dropout: 0.1, time_dim: 8, hidden: 6 };
        let mut rng = stream(seed, 0);
        let c = Classifier::<f64>::init(arch, &mut rng).unwrap();
        let x = Tensor::randn(&[len, 3], &mut rng).scale(3.0);
        let cond = Conditioning { mu: Tensor::randn(&[len, 3], &mut rng), layout: Layout::single(len), frame_tokens: vec![] };
        let lp = c.log_probs(&x, &cond, t).unwrap();
        let p: Vec<f64> = lp.data().iter().map(|v| v.exp()).collect();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Σ_j p_j ∇ log p_j = ∇ Σ_j p_j = 0
        let mut acc = Tensor::<f64>::zeros(&[len, 3]);
        for (j, pj) in p.iter().enumerate() {
            acc.axpy(*pj, &c.class_log_prob_grad(&x, &cond, t, j).unwrap()).unwrap();
        }
        prop_assert!(acc.data().iter().all(|v| v.abs() < 1e-10));
    }
}

fn toy_oracle() -> GmmOracle {
    let bases = vec![vec![1.0, -0.5], vec![-2.0, 0.7]];
    let offsets = vec![vec![0.0, 0.0], vec![1.5, 0.0], vec![-0.3, 1.2]];
    GmmOracle::new(bases, offsets, 0.3, &[0.5, 0.3, 0.2], NoiseSchedule::new(0.05, 20.0).unwrap()).unwrap()
}

/// Unguided reverse sampling with exact scores lands on the clean mixture:
/// moments and class frequencies within three standard errors.
#[test]
fn reverse_solver_with_exact_scores_reproduces_the_mixture() {
    let oracle = toy_oracle();
    let tokens = vec![0usize, 1];
    let mu = oracle.ideal_mu(&tokens);
    let cond = Conditioning { mu: mu.clone(), layout: Layout::single(2), frame_tokens: tokens.clone() };
    let n = 3000;
    let cfg = GuidanceConfig::new(0.0, SolverConfig::new(400, 0).unwrap()).unwrap();
    let draws: Vec<Tensor<f64>> = (0..n as u64)
        .into_par_iter()
        .map(|k| {
            sample_guided(&oracle, &oracle, oracle.schedule(), &cond, Guidance::OneHot(NEUTRAL), &cfg, &mut stream(77, k), false)
                .unwrap()
                .into_last()
        })
        .collect();
    let priors = [0.5, 0.3, 0.2];
    for f in 0..2 {
        for j in 0..2 {
            let comp: Vec<f64> = (0..3).map(|e| oracle.class_mean(tokens[f], e)[j]).collect();
            let mean: f64 = comp.iter().zip(priors).map(|(c, p)| c * p).sum();
            let var: f64 = 0.09 + comp.iter().zip(priors).map(|(c, p)| p * (c - mean).powi(2)).sum::<f64>();
            let v: Vec<f64> = draws.iter().map(|d| d.row(f)[j]).collect();
            let m = v.iter().sum::<f64>() / n as f64;
            let s2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((m - mean).abs() < 3.0 * (var / n as f64).sqrt(), "frame {f} dim {j}: mean {m} vs {mean}");
            // variance of the sample variance, from the fourth central moment of the mixture
            let m4: f64 = comp.iter().zip(priors).map(|(c, p)| {
                let d = c - mean;
                p * (d.powi(4) + 6.0 * d * d * 0.09 + 3.0 * 0.0081)
            }).sum();
            let se = ((m4 - var * var) / n as f64).sqrt();
            assert!((s2 - var).abs() < 3.0 * se, "frame {f} dim {j}: var {s2} vs {var} (se {se})");
        }
    }
    let mut counts = [0usize; 3];
    let layout = Layout::single(2);
    for d in &draws {
        let c = Conditioning { mu: mu.clone(), layout: layout.clone(), frame_tokens: tokens.clone() };
        let post = oracle.posterior_t(d, &c, 0.0).unwrap();
        let best = (0..3).fold(0, |b, e| if post.row(0)[e] > post.row(0)[b] { e } else { b });
        counts[best] += 1;
    }
    // offsets are 1.5 apart at σ = 0.3 per frame: misassignment is negligible
    for (e, p) in priors.iter().enumerate() {
        let freq = counts[e] as f64 / n as f64;
        assert!((freq - p).abs() < 3.0 * (p * (1.0 - p) / n as f64).sqrt() + 0.01, "class {e}: {freq} vs {p}");
    }
}
