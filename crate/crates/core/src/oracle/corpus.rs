//! Synthetic emotional corpus and its on-disk format.
//!
//! Each frame is `token_base[token] + offset[emotion] + σ·ε`, so every
//! (token, emotion) pair is an isotropic Gaussian and all diffusion-time
//! quantities stay closed-form. Emotion changes frame values only; durations
//! depend on the token alone.
//!
//! A corpus directory holds `manifest.json` and `utterances.bin`. The record
//! file is (little-endian):
//!
//! ```text
//! magic "EMTNUTT1", u32 count, then per record:
//!   u32 id, u32 emotion_id, u32 n_tokens, u32 tokens[n], u32 durations[n],
//!   u32 n_frames, u32 dim, f32 frames[n_frames * dim]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "utterances.bin";
pub const RECORDS_MAGIC: &[u8; 8] = b"EMTNUTT1";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub dim: usize,
    /// Emotion names; index 0 is the neutral reference.
    pub emotions: Vec<String>,
    pub n_utterances: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise_std: f64,
    pub offset_radius: f64,
    pub min_offset_distance: f64,
    /// Standard deviation of token base vector entries.
    pub token_scale: f64,
    pub validation_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            dim: 8,
            emotions: ["neutral", "angry", "happy", "sad", "surprise"]
                .map(String::from)
                .to_vec(),
            n_utterances: 1000,
            min_tokens: 4,
            max_tokens: 12,
            min_duration: 1,
            max_duration: 4,
            noise_std: 0.3,
            offset_radius: 1.5,
            min_offset_distance: 1.0,
            token_scale: 2.0,
            validation_fraction: 0.1,
        }
    }
}

impl CorpusConfig {
    pub fn num_emotions(&self) -> usize {
        self.emotions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.emotions.len() < 2 {
            return bad("need at least two emotions (neutral plus one)");
        }
        if self.dim == 0 || self.vocab_size == 0 {
            return bad("dim and vocab_size must be positive");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("token counts must satisfy 1 <= min_tokens <= max_tokens");
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad("durations must satisfy 1 <= min_duration <= max_duration");
        }
        if self.n_utterances < self.emotions.len() {
            return bad("need at least one utterance per emotion");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative");
        }
        if !(self.offset_radius > 0.0 && self.min_offset_distance > 0.0) {
            return bad("degenerate emotion profiles: offset_radius and min_offset_distance must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmotionProfile {
    pub offset: Vec<f64>,
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub vocab_size: usize,
    pub dim: usize,
    pub emotions: Vec<String>,
    pub priors: Vec<f64>,
    pub token_bases: Vec<Vec<f64>>,
    pub profiles: Vec<EmotionProfile>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    /// Provenance written by the caller (config hash, seed, ...).
    pub metadata: BTreeMap<String, Value>,
}

impl Manifest {
    pub fn num_emotions(&self) -> usize {
        self.emotions.len()
    }

    pub fn emotion_index(&self, name: &str) -> Option<usize> {
        self.emotions.iter().position(|e| e.eq_ignore_ascii_case(name))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: usize,
    pub tokens: Vec<usize>,
    pub durations: Vec<usize>,
    /// `[n_frames, dim]` clean acoustic frames.
    pub frames: Tensor<f32>,
    pub emotion_id: usize,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    /// Token id of every frame.
    pub fn frame_tokens(&self) -> Vec<usize> {
        expand_tokens(&self.tokens, &self.durations)
    }

    pub fn validate(&self, dim: usize, vocab: usize) -> Result<()> {
        if self.tokens.len() != self.durations.len() {
            return Err(Error::Format(format!("utterance {}: tokens/durations length", self.id)));
        }
        if self.durations.contains(&0) {
            return Err(Error::Format(format!("utterance {}: zero duration", self.id)));
        }
        if let Some(&tok) = self.tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::UnknownToken { token: tok, vocab });
        }
        let total: usize = self.durations.iter().sum();
        if total != self.n_frames() || self.frames.cols() != dim {
            return Err(Error::Format(format!(
                "utterance {}: frames {:?} do not match durations sum {total} x dim {dim}",
                self.id,
                self.frames.shape()
            )));
        }
        Ok(())
    }
}

/// Repeats each token `duration` times.
pub fn expand_tokens(tokens: &[usize], durations: &[usize]) -> Vec<usize> {
    tokens
        .iter()
        .zip(durations)
        .flat_map(|(&t, &d)| std::iter::repeat_n(t, d))
        .collect()
}

/// Token position (not id) of every frame.
pub fn expand_positions(durations: &[usize]) -> Vec<usize> {
    durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: Manifest,
    pub utterances: Vec<Utterance>,
}

fn draw_offsets<R: Rng + ?Sized>(cfg: &CorpusConfig, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    const MAX_ATTEMPTS: usize = 10_000;
    for _ in 0..MAX_ATTEMPTS {
        let offsets: Vec<Vec<f64>> = (0..cfg.num_emotions())
            .map(|_| loop {
                let v: Vec<f64> = (0..cfg.dim).map(|_| f64::standard_normal(rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-12 {
                    break v.into_iter().map(|x| x * cfg.offset_radius / n).collect();
                }
            })
            .collect();
        let ok = offsets.iter().enumerate().all(|(i, a)| {
            offsets[..i].iter().all(|b| {
                a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() >= cfg.min_offset_distance
            })
        });
        if ok {
            return Ok(offsets);
        }
    }
    Err(Error::Config(format!(
        "degenerate emotion profiles: could not place {} offsets of radius {} at least {} apart",
        cfg.num_emotions(),
        cfg.offset_radius,
        cfg.min_offset_distance
    )))
}

/// Draws a balanced synthetic corpus.
pub fn generate_corpus<R: Rng + ?Sized>(cfg: &CorpusConfig, rng: &mut R) -> Result<Corpus> {
    cfg.validate()?;
    let m = cfg.num_emotions();
    let token_bases: Vec<Vec<f64>> = (0..cfg.vocab_size)
        .map(|_| (0..cfg.dim).map(|_| cfg.token_scale * f64::standard_normal(rng)).collect())
        .collect();
    let offsets = draw_offsets(cfg, rng)?;
    let preferred: Vec<usize> = (0..cfg.vocab_size)
        .map(|_| rng.random_range(cfg.min_duration..=cfg.max_duration))
        .collect();

    let mut labels: Vec<usize> = (0..cfg.n_utterances).map(|i| i % m).collect();
    labels.shuffle(rng);

    let mut utterances = Vec::with_capacity(cfg.n_utterances);
    for (id, &emotion_id) in labels.iter().enumerate() {
        let n_tok = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
        let tokens: Vec<usize> = (0..n_tok).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
        let durations: Vec<usize> = tokens
            .iter()
            .map(|&t| {
                let jitter: i64 = match rng.random_range(0..4) {
                    0 => -1,
                    3 => 1,
                    _ => 0,
                };
                (preferred[t] as i64 + jitter).clamp(cfg.min_duration as i64, cfg.max_duration as i64) as usize
            })
            .collect();
        let frame_tokens = expand_tokens(&tokens, &durations);
        let mut data = Vec::with_capacity(frame_tokens.len() * cfg.dim);
        for &t in &frame_tokens {
            for j in 0..cfg.dim {
                let eps = f64::standard_normal(rng);
                let v = token_bases[t][j] + offsets[emotion_id][j] + cfg.noise_std * eps;
                data.push(v as f32);
            }
        }
        utterances.push(Utterance {
            id,
            tokens,
            durations,
            frames: Tensor::matrix(frame_tokens.len(), cfg.dim, data)?,
            emotion_id,
        });
    }

    // Stratified split: the first ceil(frac * count) utterances of each class
    // (in id order, ids are already shuffled by class) go to validation.
    let mut per_class = vec![0usize; m];
    let counts: Vec<usize> = (0..m).map(|e| labels.iter().filter(|&&l| l == e).count()).collect();
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for u in &utterances {
        let quota = (cfg.validation_fraction * counts[u.emotion_id] as f64).ceil() as usize;
        if per_class[u.emotion_id] < quota {
            validation.push(u.id);
        } else {
            train.push(u.id);
        }
        per_class[u.emotion_id] += 1;
    }

    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        vocab_size: cfg.vocab_size,
        dim: cfg.dim,
        emotions: cfg.emotions.clone(),
        priors: vec![1.0 / m as f64; m],
        token_bases,
        profiles: offsets
            .into_iter()
            .map(|offset| EmotionProfile {
                offset,
                noise_std: cfg.noise_std,
            })
            .collect(),
        train,
        validation,
        metadata: BTreeMap::new(),
    };
    Ok(Corpus {
        manifest,
        utterances,
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("truncated record file".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<usize>> {
        (0..n).map(|_| self.u32()).collect()
    }
}

/// Serializes utterance records (see module docs for the layout).
pub fn encode_records(utts: &[Utterance]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(RECORDS_MAGIC);
    put_u32(&mut out, utts.len())?;
    for u in utts {
        put_u32(&mut out, u.id)?;
        put_u32(&mut out, u.emotion_id)?;
        put_u32(&mut out, u.tokens.len())?;
        for &t in &u.tokens {
            put_u32(&mut out, t)?;
        }
        for &d in &u.durations {
            put_u32(&mut out, d)?;
        }
        put_u32(&mut out, u.frames.rows())?;
        put_u32(&mut out, u.frames.cols())?;
        for v in u.frames.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_records(buf: &[u8]) -> Result<Vec<Utterance>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != RECORDS_MAGIC {
        return Err(Error::Format("bad record file magic".into()));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.u32()?;
        let emotion_id = r.u32()?;
        let n = r.u32()?;
        let tokens = r.u32s(n)?;
        let durations = r.u32s(n)?;
        let rows = r.u32()?;
        let cols = r.u32()?;
        let data = r
            .take(rows * cols * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(Utterance {
            id,
            tokens,
            durations,
            frames: Tensor::matrix(rows, cols, data)?,
            emotion_id,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes in record file".into()));
    }
    Ok(out)
}

impl Corpus {
    pub fn utterance(&self, id: usize) -> &Utterance {
        &self.utterances[id]
    }

    pub fn train(&self) -> impl Iterator<Item = &Utterance> {
        self.manifest.train.iter().map(|&i| &self.utterances[i])
    }

    pub fn validation(&self) -> impl Iterator<Item = &Utterance> {
        self.manifest.validation.iter().map(|&i| &self.utterances[i])
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.profiles.len() != m.num_emotions() || m.priors.len() != m.num_emotions() {
            return Err(Error::Format("manifest emotion tables disagree".into()));
        }
        for (i, u) in self.utterances.iter().enumerate() {
            if u.id != i {
                return Err(Error::Format(format!("utterance ids must be dense, found {} at {i}", u.id)));
            }
            if u.emotion_id >= m.num_emotions() {
                return Err(Error::Format(format!("utterance {i}: emotion {} out of range", u.emotion_id)));
            }
            u.validate(m.dim, m.vocab_size)?;
        }
        if m.train.iter().chain(&m.validation).any(|&i| i >= self.utterances.len()) {
            return Err(Error::Format("split references a missing utterance".into()));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = serde_json::to_string_pretty(&self.manifest)?;
        manifest.push('\n');
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        fs::write(dir.join(RECORDS_FILE), encode_records(&self.utterances)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest version {}",
                manifest.format_version
            )));
        }
        let utterances = decode_records(&fs::read(dir.join(RECORDS_FILE))?)?;
        let corpus = Self {
            manifest,
            utterances,
        };
        corpus.validate()?;
        Ok(corpus)
    }
}
