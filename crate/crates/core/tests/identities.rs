mod common;

use common::identities::{self, Reduction};
use emotune::classifier::{Classifier, ClassifierArch};
use emotune::guidance::Conditioning;
use emotune::nn::{Layout, Tensor};
use emotune::oracle::{generate_corpus, CorpusConfig, GmmOracle};
use emotune::rng::stream;
use emotune::sde::NoiseSchedule;
use rand::Rng;

fn toy_arch() -> ClassifierArch {
    ClassifierArch {
        dim: 4,
        num_emotions: 4,
        channels: 8,
        blocks: 2,
        width: 3,
        dropout: 0.1,
        time_dim: 8,
        hidden: 8,
    }
}

fn random_case(rng: &mut emotune::rng::StreamRng, dim: usize) -> emotune::Result<(Tensor<f64>, Conditioning<f64>, f64)> {
    let lengths: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=7)).collect();
    let layout = Layout::from_lengths(&lengths);
    let n = layout.total();
    let x = Tensor::randn(&[n, dim], rng);
    let mu = Tensor::randn(&[n, dim], rng);
    let t = rng.random_range(0.0..=1.0);
    Ok((
        x,
        Conditioning {
            mu,
            layout,
            frame_tokens: vec![0; n],
        },
        t,
    ))
}

#[test]
fn unit_scale_one_class_guidance_is_the_conditional_score() {
    let worst = identities::bayes_identity(21, 300).unwrap();
    assert!(worst < 1e-8, "{worst}");
}

#[test]
fn soft_label_gradient_is_the_weighted_class_sum() {
    for seed in 0..3 {
        let c = Classifier::<f64>::init(toy_arch(), &mut stream(seed, 99)).unwrap();
        let worst = identities::soft_equals_weighted_sum(&c, seed, 30, |r| random_case(r, 4)).unwrap();
        assert!(worst < 1e-10, "{worst}");
    }
}

#[test]
fn oracle_soft_label_gradient_is_the_weighted_class_sum() {
    let corpus = generate_corpus(
        &CorpusConfig {
            n_utterances: 10,
            dim: 4,
            ..CorpusConfig::default()
        },
        &mut stream(3, 0),
    )
    .unwrap();
    let oracle = GmmOracle::from_manifest(&corpus.manifest, NoiseSchedule::new(0.05, 20.0).unwrap()).unwrap();
    let worst = identities::soft_equals_weighted_sum(&oracle, 4, 50, |r| {
        let (x, mut cond, t) = random_case(r, 4)?;
        cond.frame_tokens = (0..x.rows()).map(|_| r.random_range(0..16)).collect();
        Ok((x, cond, t.max(1e-3)))
    })
    .unwrap();
    assert!(worst < 1e-10, "{worst}");
}

#[test]
fn intensity_extremes_reproduce_one_hot_trajectories() {
    let arch = toy_arch();
    let schedule = NoiseSchedule::new(0.05, 20.0).unwrap();
    let classifier = Classifier::<f32>::init(arch.clone(), &mut stream(8, 0)).unwrap();
    let corpus = generate_corpus(
        &CorpusConfig {
            n_utterances: 10,
            dim: 4,
            emotions: ["n", "a", "b", "c"].map(String::from).to_vec(),
            ..CorpusConfig::default()
        },
        &mut stream(3, 0),
    )
    .unwrap();
    let oracle = GmmOracle::from_manifest(&corpus.manifest, schedule).unwrap();
    let u = &corpus.utterances[0];
    let cond = Conditioning {
        mu: oracle.ideal_mu(&u.frame_tokens()).cast::<f32>(),
        layout: Layout::single(u.n_frames()),
        frame_tokens: u.frame_tokens(),
    };
    // oracle score with a network judge, then the oracle as its own judge
    let r = identities::reduction(&oracle, &classifier, &schedule, &cond, 50.0, 30, 10).unwrap();
    assert_eq!(r, Reduction { pairs: 20, identical: 20, states: 20 * 31 });
    let r = identities::reduction(&oracle, &oracle, &schedule, &cond, 3.0, 30, 10).unwrap();
    assert_eq!(r.identical, r.pairs);
}
