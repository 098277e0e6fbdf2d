use std::fs;
use std::path::{Path, PathBuf};

use emotune::acoustic::{self, AcousticModel};
use emotune::classifier::{self, Classifier};
use emotune::guidance::{Guidance, GuidanceConfig, SoftLabel, NEUTRAL};
use emotune::nn::{Checkpoint, Tensor};
use emotune::oracle::corpus::encode_records;
use emotune::oracle::{generate_corpus, Corpus, GmmOracle, Utterance};
use emotune::rng::{derive_seed, stream};
use emotune::sde::forward_path_moments;
use emotune::train::{TrainConfig, TrainState};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Run, TrainingSection};
use crate::CliError;

pub const SAMPLES_FILE: &str = "samples.bin";
pub const SAMPLES_META: &str = "samples.json";
const HASH_KEY: &str = "config_hash";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Acoustic,
    Classifier,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Acoustic => "acoustic",
            Stage::Classifier => "classifier",
        }
    }
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn check_hash(what: &str, found: Option<&str>, expected: &str, force: bool) -> Result<(), CliError> {
    match found {
        Some(h) if h == expected => Ok(()),
        _ if force => Ok(()),
        found => Err(runtime(format!(
            "{what} was produced by a different configuration (hash {}, expected {expected}); \
             regenerate it or pass --force",
            found.unwrap_or("missing")
        ))),
    }
}

/// `<file>.meta.json` next to a report.
fn write_sidecar(path: &Path, meta: &Value) -> Result<(), CliError> {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    fs::write(PathBuf::from(name), text)?;
    Ok(())
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<(), CliError> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<D: DeserializeOwned>(path: &Path) -> Result<Vec<D>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn cmd_gen_corpus(run: &Run, out: Option<&Path>) -> Result<PathBuf, CliError> {
    let cfg = &run.config;
    let dir = out.map_or_else(|| run.paths().corpus.clone(), Path::to_path_buf);
    let mut corpus = generate_corpus(&cfg.corpus, &mut stream(derive_seed(cfg.seed, "corpus"), 0))?;
    corpus.manifest.metadata.insert(HASH_KEY.into(), run.hashes.corpus.clone().into());
    corpus.manifest.metadata.insert("seed".into(), cfg.seed.into());
    corpus.write(&dir)?;
    Ok(dir)
}

pub fn load_corpus(run: &Run, force: bool) -> Result<Corpus, CliError> {
    let dir = &run.paths().corpus;
    if !dir.join(emotune::oracle::corpus::MANIFEST_FILE).exists() {
        return Err(runtime(format!(
            "no corpus at {}; run `gen-corpus` first",
            dir.display()
        )));
    }
    let corpus = Corpus::read(dir)?;
    let found = corpus.manifest.metadata.get(HASH_KEY).and_then(Value::as_str);
    check_hash("corpus", found, &run.hashes.corpus, force)?;
    Ok(corpus)
}

fn load_checkpoint(path: &Path, stage: Stage, expected_hash: &str, steps: u64, force: bool) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(runtime(format!(
            "missing {} checkpoint at {}; run `train --stage {}` first",
            stage.name(),
            path.display(),
            stage.name()
        )));
    }
    let ck = Checkpoint::load(path)?;
    check_hash(&format!("{} checkpoint", stage.name()), ck.meta_str(HASH_KEY), expected_hash, force)?;
    let step = ck.meta_u64("step").unwrap_or(0);
    if step < steps && !force {
        return Err(runtime(format!(
            "{} checkpoint is at step {step} of {steps}; resume training or pass --force",
            stage.name()
        )));
    }
    Ok(ck)
}

/// Result of a training command.
#[derive(Clone, Debug)]
pub struct Trained {
    pub checkpoint: PathBuf,
    pub step: u64,
}

fn stage_paths(run: &Run, stage: Stage, out: Option<&Path>) -> (PathBuf, PathBuf) {
    let ck = match stage {
        Stage::Acoustic => &run.paths().acoustic_checkpoint,
        Stage::Classifier => &run.paths().classifier_checkpoint,
    };
    let ck = out.map_or_else(|| ck.clone(), Path::to_path_buf);
    let log = run.paths().logs.join(format!("{}_log.csv", stage.name()));
    (ck, log)
}

fn stage_meta(run: &Run, stage: Stage, hash: &str) -> Value {
    json!({ "stage": stage.name(), HASH_KEY: hash, "seed": run.config.seed })
}

/// Shared driver: restores or initializes state, advances in chunks and
/// writes checkpoint and log after each chunk.
#[allow(clippy::too_many_arguments)]
fn drive<Row, F>(
    run: &Run,
    stage: Stage,
    hash: &str,
    section: &TrainingSection,
    architecture: Value,
    fresh: impl FnOnce(&TrainConfig) -> emotune::Result<TrainState>,
    resume: bool,
    out: Option<&Path>,
    mut step_fn: F,
) -> Result<Trained, CliError>
where
    Row: Serialize + DeserializeOwned + Clone + HasStep,
    F: FnMut(&TrainConfig, &mut TrainState) -> emotune::Result<Vec<Row>>,
{
    let (ck_path, log_path) = stage_paths(run, stage, out);
    let tcfg = section.train_config();
    let (mut state, mut rows) = if resume && ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        check_hash(&format!("{} checkpoint", stage.name()), ck.meta_str(HASH_KEY), hash, false)?;
        let state = TrainState::from_checkpoint(&ck)?;
        let rows: Vec<Row> = if log_path.exists() { read_csv(&log_path)? } else { Vec::new() };
        // rows past the checkpoint belong to an interrupted chunk
        let rows = rows.into_iter().filter(|r| r.step() <= state.step).collect();
        (state, rows)
    } else if resume {
        return Err(runtime(format!("nothing to resume: no checkpoint at {}", ck_path.display())));
    } else {
        (fresh(&tcfg)?, Vec::new())
    };
    let save = |state: &TrainState, rows: &[Row]| -> Result<(), CliError> {
        let mut ck = state.to_checkpoint(stage.name(), architecture.clone());
        ck.metadata.insert(HASH_KEY.into(), hash.into());
        ck.metadata.insert("seed".into(), run.config.seed.into());
        ensure_parent(&ck_path)?;
        ck.save(&ck_path)?;
        write_csv(&log_path, rows)?;
        write_sidecar(&log_path, &stage_meta(run, stage, hash))?;
        Ok(())
    };
    if state.step >= tcfg.steps {
        save(&state, &rows)?;
    }
    while state.step < tcfg.steps {
        let chunk = TrainConfig {
            steps: (state.step + section.checkpoint_every).min(tcfg.steps),
            ..tcfg.clone()
        };
        rows.extend(step_fn(&chunk, &mut state)?);
        save(&state, &rows)?;
        eprintln!("{}: step {}/{}", stage.name(), state.step, tcfg.steps);
    }
    Ok(Trained {
        checkpoint: ck_path,
        step: state.step,
    })
}

pub trait HasStep {
    fn step(&self) -> u64;
}

impl HasStep for acoustic::AcousticLogRow {
    fn step(&self) -> u64 {
        self.step
    }
}

impl HasStep for classifier::ClassifierLogRow {
    fn step(&self) -> u64 {
        self.step
    }
}

fn load_acoustic(run: &Run, force: bool) -> Result<AcousticModel, CliError> {
    let cfg = &run.config;
    let ck = load_checkpoint(
        &run.paths().acoustic_checkpoint,
        Stage::Acoustic,
        &run.hashes.acoustic,
        cfg.acoustic_training.steps,
        force,
    )?;
    Ok(acoustic::model_from_checkpoint(&ck)?)
}

fn load_classifier(run: &Run, force: bool) -> Result<Classifier, CliError> {
    let cfg = &run.config;
    let ck = load_checkpoint(
        &run.paths().classifier_checkpoint,
        Stage::Classifier,
        &run.hashes.classifier,
        cfg.classifier_training.steps,
        force,
    )?;
    Ok(classifier::model_from_checkpoint(&ck)?)
}

pub fn cmd_train(run: &Run, stage: Stage, resume: bool, out: Option<&Path>, force: bool) -> Result<Trained, CliError> {
    let cfg = &run.config;
    let corpus = load_corpus(run, force)?;
    let seed = cfg.seed;
    match stage {
        Stage::Acoustic => {
            let arch = cfg.acoustic_arch();
            drive(
                run,
                stage,
                &run.hashes.acoustic,
                &cfg.acoustic_training,
                acoustic::architecture_json(&arch),
                |t| acoustic::init_acoustic_state(&arch, t, seed),
                resume,
                out,
                |t, st| acoustic::train_acoustic(&corpus, &arch, t, seed, st),
            )
        }
        Stage::Classifier => {
            let frozen = load_acoustic(run, force)?;
            let arch = cfg.classifier_arch();
            let done = drive(
                run,
                stage,
                &run.hashes.classifier,
                &cfg.classifier_training,
                classifier::architecture_json(&arch),
                |t| classifier::init_classifier_state(&arch, t, seed),
                resume,
                out,
                |t, st| classifier::train_classifier(&corpus, &frozen, &arch, t, seed, st),
            )?;
            let model = classifier::model_from_checkpoint(&Checkpoint::load(&done.checkpoint)?)?;
            let rows = classifier::evaluate_classifier(&model, &frozen, &corpus, &cfg.classifier.eval_times, seed)?;
            let path = run.paths().logs.join("classifier_eval.csv");
            write_csv(&path, &rows)?;
            write_sidecar(&path, &stage_meta(run, stage, &run.hashes.classifier))?;
            Ok(done)
        }
    }
}

/// Trained models plus the data they were trained on.
pub struct Pipeline {
    pub corpus: Corpus,
    pub acoustic: AcousticModel,
    pub classifier: Classifier,
    pub oracle: GmmOracle,
}

impl Pipeline {
    pub fn load(run: &Run, force: bool) -> Result<Self, CliError> {
        let corpus = load_corpus(run, force)?;
        let acoustic = load_acoustic(run, force)?;
        let classifier = load_classifier(run, force)?;
        let oracle = GmmOracle::from_manifest(&corpus.manifest, *acoustic.schedule())?;
        if classifier.arch.num_emotions != corpus.manifest.num_emotions() {
            return Err(runtime("classifier and corpus disagree on the emotion set"));
        }
        Ok(Self {
            corpus,
            acoustic,
            classifier,
            oracle,
        })
    }

    /// Text of validation utterance `j mod n_val`.
    pub fn prompt(&self, j: usize) -> &Utterance {
        let val = &self.corpus.manifest.validation;
        let pool = if val.is_empty() { &self.corpus.manifest.train } else { val };
        self.corpus.utterance(pool[j % pool.len()])
    }

    /// One guided sample drawn from stream `(seed, index)`.
    pub fn synthesize(
        &self,
        tokens: &[usize],
        label: &SoftLabel,
        cfg: &GuidanceConfig,
        seed: u64,
        index: u64,
    ) -> emotune::Result<(emotune::guidance::Conditioning, Tensor<f32>)> {
        let cond = self.acoustic.infer_conditioning(tokens)?;
        let mut rng = stream(seed, index);
        let traj = emotune::guidance::sample_guided(
            &self.acoustic,
            &self.classifier,
            self.acoustic.schedule(),
            &cond,
            Guidance::Soft(label),
            cfg,
            &mut rng,
            false,
        )?;
        Ok((cond, traj.into_last()))
    }
}

fn parse_emotion(corpus: &Corpus, name: &str) -> Result<usize, CliError> {
    let m = corpus.manifest.num_emotions();
    corpus
        .manifest
        .emotion_index(name)
        .or_else(|| name.parse::<usize>().ok().filter(|&i| i < m))
        .ok_or_else(|| {
            CliError::Usage(format!(
                "unknown emotion `{name}`; expected one of {:?} or an index below {m}",
                corpus.manifest.emotions
            ))
        })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleMeta {
    pub index: usize,
    pub stream: u64,
    pub source_utterance: usize,
    pub n_frames: usize,
}

#[derive(Clone, Debug)]
pub struct SampleSet {
    pub dir: PathBuf,
    pub samples: Vec<Utterance>,
    pub meta: Value,
}

pub fn cmd_sample(
    run: &Run,
    emotion: &str,
    alpha: f64,
    n: usize,
    out: Option<&Path>,
    force: bool,
) -> Result<SampleSet, CliError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CliError::Usage(format!("--alpha must lie in [0, 1], got {alpha}")));
    }
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let cfg = &run.config;
    let pipe = Pipeline::load(run, force)?;
    let m = pipe.corpus.manifest.num_emotions();
    let id = parse_emotion(&pipe.corpus, emotion)?;
    let label = SoftLabel::intensity(m, id, alpha)?;
    let seed = derive_seed(cfg.seed, "sample");
    let gcfg = cfg.guidance_config(seed)?;
    let samples: Vec<Utterance> = (0..n)
        .into_par_iter()
        .map(|j| {
            let src = pipe.prompt(j);
            let (cond, x) = pipe.synthesize(&src.tokens, &label, &gcfg, seed, j as u64)?;
            let durations = pipe.acoustic.infer_durations(&src.tokens)?;
            debug_assert_eq!(cond.mu.rows(), x.rows());
            Ok(Utterance {
                id: j,
                tokens: src.tokens.clone(),
                durations,
                frames: x,
                emotion_id: id,
            })
        })
        .collect::<emotune::Result<_>>()?;
    let dir = out.map_or_else(|| run.paths().logs.join("samples"), Path::to_path_buf);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(SAMPLES_FILE), encode_records(&samples)?)?;
    let per_sample: Vec<SampleMeta> = samples
        .iter()
        .enumerate()
        .map(|(j, s)| SampleMeta {
            index: j,
            stream: j as u64,
            source_utterance: pipe.prompt(j).id,
            n_frames: s.n_frames(),
        })
        .collect();
    let meta = json!({
        HASH_KEY: run.hashes.guidance,
        "seed": cfg.seed,
        "stream_seed": seed,
        "emotion": pipe.corpus.manifest.emotions[id],
        "alpha": alpha,
        "soft_label": label.weights(),
        "effective_one_hot": label.as_one_hot().map(|i| pipe.corpus.manifest.emotions[i].clone()),
        "gamma": gcfg.gamma,
        "n_steps": gcfg.solver.n_steps,
        "samples": per_sample,
    });
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(dir.join(SAMPLES_META), text)?;
    Ok(SampleSet { dir, samples, meta })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityRow {
    pub emotion: String,
    pub alpha: f64,
    pub judge: String,
    pub k: usize,
    pub target_mean: f64,
    pub target_std: f64,
    pub neutral_mean: f64,
    pub neutral_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Judged probabilities of one sample: `[classifier, oracle] × [target, neutral]`.
type Judged = [[f64; 2]; 2];

/// Sweeps every non-neutral emotion over the intensity grid.
///
/// Sample `j` of every cell uses the same random stream and the same prompt,
/// so differences between cells come from the label alone.
pub fn cmd_eval_intensity(run: &Run, out: &Path, force: bool) -> Result<Vec<IntensityRow>, CliError> {
    let cfg = &run.config;
    let pipe = Pipeline::load(run, force)?;
    let m = pipe.corpus.manifest.num_emotions();
    let k = cfg.guidance.samples_per_cell;
    let grid = &cfg.guidance.alpha_grid;
    let seed = derive_seed(cfg.seed, "intensity");
    let gcfg = cfg.guidance_config(seed)?;
    let jobs: Vec<(usize, usize, usize)> = (1..m)
        .flat_map(|e| (0..grid.len()).flat_map(move |a| (0..k).map(move |j| (e, a, j))))
        .collect();
    let judged: Vec<Judged> = jobs
        .par_iter()
        .map(|&(e, a, j)| {
            let label = SoftLabel::intensity(m, e, grid[a])?;
            let src = pipe.prompt(j);
            let (cond, x) = pipe.synthesize(&src.tokens, &label, &gcfg, seed, j as u64)?;
            let pc = pipe.classifier.classify(&x, &cond.mu, 0.0)?;
            let c64 = emotune::guidance::Conditioning {
                mu: cond.mu.cast(),
                layout: cond.layout.clone(),
                frame_tokens: cond.frame_tokens.clone(),
            };
            let po = pipe.oracle.posterior_t(&x.cast(), &c64, 0.0)?;
            Ok([[pc[e], pc[NEUTRAL]], [po.row(0)[e], po.row(0)[NEUTRAL]]])
        })
        .collect::<emotune::Result<_>>()?;
    let mut rows = Vec::new();
    for e in 1..m {
        for (a, &alpha) in grid.iter().enumerate() {
            let cell: Vec<&Judged> = jobs
                .iter()
                .zip(&judged)
                .filter(|((je, ja, _), _)| *je == e && *ja == a)
                .map(|(_, r)| r)
                .collect();
            for (ji, judge) in ["classifier", "oracle"].into_iter().enumerate() {
                let target: Vec<f64> = cell.iter().map(|r| r[ji][0]).collect();
                let neutral: Vec<f64> = cell.iter().map(|r| r[ji][1]).collect();
                let (tm, ts) = mean_std(&target);
                let (nm, ns) = mean_std(&neutral);
                rows.push(IntensityRow {
                    emotion: pipe.corpus.manifest.emotions[e].clone(),
                    alpha,
                    judge: judge.into(),
                    k,
                    target_mean: tm,
                    target_std: ts,
                    neutral_mean: nm,
                    neutral_std: ns,
                });
            }
        }
    }
    write_csv(out, &rows)?;
    write_sidecar(
        out,
        &json!({
            HASH_KEY: run.hashes.guidance,
            "seed": cfg.seed,
            "gamma": gcfg.gamma,
            "n_steps": gcfg.solver.n_steps,
            "judge_time": 0.0,
        }),
    )?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardRow {
    pub t: f64,
    pub component: usize,
    pub expected_mean: f64,
    pub observed_mean: f64,
    pub mean_se: f64,
    pub expected_var: f64,
    pub observed_var: f64,
    /// |observed − expected| mean within three standard errors.
    pub mean_ok: bool,
    /// Variance within 5% relative.
    pub var_ok: bool,
}

/// Simulates the forward SDE with Euler–Maruyama and compares the sample
/// moments against the closed-form marginal.
pub fn cmd_eval_forward(run: &Run, out: &Path) -> Result<Vec<ForwardRow>, CliError> {
    let cfg = &run.config;
    let ef = &cfg.eval_forward;
    let dim = cfg.corpus.dim;
    let seed = derive_seed(cfg.seed, "eval-forward");
    let mut setup = stream(seed, 0);
    let x0 = Tensor::<f64>::randn(&[1, dim], &mut setup).scale(2.0);
    let mu = Tensor::<f64>::randn(&[1, dim], &mut setup);
    let moments = forward_path_moments(&x0, &mu, &cfg.schedule, ef.n_steps, ef.n_paths, &ef.times, &mut stream(seed, 1))?;
    let mut rows = Vec::new();
    for pm in &moments {
        let mp = cfg.schedule.marginal_params(pm.t)?;
        let se = (mp.variance / pm.n_paths as f64).sqrt();
        for i in 0..dim {
            let expected = mp.mean_coeff_x0 * x0.data()[i] + mp.mean_coeff_mu * mu.data()[i];
            rows.push(ForwardRow {
                t: pm.t,
                component: i,
                expected_mean: expected,
                observed_mean: pm.mean[i],
                mean_se: se,
                expected_var: mp.variance,
                observed_var: pm.var[i],
                mean_ok: (pm.mean[i] - expected).abs() <= 3.0 * se,
                var_ok: (pm.var[i] / mp.variance - 1.0).abs() <= 0.05,
            });
        }
    }
    write_csv(out, &rows)?;
    write_sidecar(
        out,
        &json!({ "seed": cfg.seed, "n_paths": ef.n_paths, "n_steps": ef.n_steps }),
    )?;
    Ok(rows)
}
