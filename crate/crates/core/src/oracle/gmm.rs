//! Closed-form scores and posteriors of the diffused corpus distribution.
//!
//! Clean frames of an utterance with emotion `e` are independent
//! `N(base[tok_f] + offset[e], σ² I)`. Pushed through the forward transition
//! with mean coefficient `a = e^{−B(t)/2}` and variance `λ_t`, component `e`
//! becomes a product over frames of
//!
//! ```text
//! N(a·(base[tok_f] + offset[e]) + (1 − a)·mu_f,  (λ_t + a²σ²) I)
//! ```
//!
//! and the utterance density at time `t` is the prior-weighted mixture over
//! emotions. Everything below is evaluated in `f64`.

use crate::error::{shape_err, Error, Result};
use crate::guidance::{Conditioning, EmotionGuide, ScoreModel, SoftLabel};
use crate::nn::{Scalar, Tensor};
use crate::oracle::corpus::Manifest;
use crate::sde::NoiseSchedule;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug)]
pub struct GmmOracle {
    dim: usize,
    token_bases: Vec<Vec<f64>>,
    offsets: Vec<Vec<f64>>,
    sigma2: f64,
    log_priors: Vec<f64>,
    schedule: NoiseSchedule,
}

/// Diffused component statistics at one time.
#[derive(Clone, Copy, Debug)]
struct Diffused {
    a: f64,
    var: f64,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

impl GmmOracle {
    pub fn new(
        token_bases: Vec<Vec<f64>>,
        offsets: Vec<Vec<f64>>,
        sigma: f64,
        priors: &[f64],
        schedule: NoiseSchedule,
    ) -> Result<Self> {
        let dim = token_bases.first().map_or(0, Vec::len);
        if dim == 0 || offsets.is_empty() {
            return Err(Error::Config("oracle needs tokens and emotions".into()));
        }
        if token_bases.iter().chain(&offsets).any(|v| v.len() != dim) {
            return Err(Error::Config("oracle vectors must share one dimension".into()));
        }
        if priors.len() != offsets.len() {
            return Err(Error::Config("one prior per emotion required".into()));
        }
        let total: f64 = priors.iter().sum();
        if priors.iter().any(|&p| p <= 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config("emotion priors must be positive and sum to one".into()));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Config("class noise must be finite and non-negative".into()));
        }
        Ok(Self {
            dim,
            token_bases,
            offsets,
            sigma2: sigma * sigma,
            log_priors: priors.iter().map(|p| p.ln()).collect(),
            schedule,
        })
    }

    pub fn from_manifest(m: &Manifest, schedule: NoiseSchedule) -> Result<Self> {
        let sigma = m
            .profiles
            .first()
            .map(|p| p.noise_std)
            .ok_or_else(|| Error::Config("manifest has no emotion profiles".into()))?;
        if m.profiles.iter().any(|p| p.noise_std != sigma) {
            return Err(Error::Config("oracle expects one shared class noise level".into()));
        }
        Self::new(
            m.token_bases.clone(),
            m.profiles.iter().map(|p| p.offset.clone()).collect(),
            sigma,
            &m.priors,
            schedule,
        )
    }

    pub fn num_emotions(&self) -> usize {
        self.offsets.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Clean class mean of `(token, emotion)`.
    pub fn class_mean(&self, token: usize, emotion: usize) -> Vec<f64> {
        self.token_bases[token]
            .iter()
            .zip(&self.offsets[emotion])
            .map(|(b, o)| b + o)
            .collect()
    }

    /// Prior-weighted mean over emotions for each frame's token: the `mu`
    /// a perfect text encoder trained with the prior loss would output.
    pub fn ideal_mu(&self, frame_tokens: &[usize]) -> Tensor<f64> {
        let mut data = Vec::with_capacity(frame_tokens.len() * self.dim);
        for &tok in frame_tokens {
            for j in 0..self.dim {
                let off: f64 = self
                    .offsets
                    .iter()
                    .zip(&self.log_priors)
                    .map(|(o, lp)| lp.exp() * o[j])
                    .sum();
                data.push(self.token_bases[tok][j] + off);
            }
        }
        Tensor::matrix(frame_tokens.len(), self.dim, data).expect("mu shape")
    }

    fn diffused(&self, t: f64) -> Result<Diffused> {
        let mp = self.schedule.marginal_params(t)?;
        let var = mp.variance + mp.mean_coeff_x0 * mp.mean_coeff_x0 * self.sigma2;
        if var <= 0.0 {
            return Err(Error::DegenerateVariance { t });
        }
        Ok(Diffused {
            a: mp.mean_coeff_x0,
            var,
        })
    }

    fn check(&self, x: &Tensor<f64>, cond: &Conditioning<f64>) -> Result<()> {
        x.check_same(&cond.mu, "oracle")?;
        if x.cols() != self.dim {
            return Err(shape_err("oracle", format!("frame dim {} vs {}", x.cols(), self.dim)));
        }
        if cond.frame_tokens.len() != x.rows() || cond.layout.total() != x.rows() {
            return Err(shape_err("oracle", "conditioning does not cover every frame"));
        }
        if let Some(&tok) = cond.frame_tokens.iter().find(|&&t| t >= self.token_bases.len()) {
            return Err(Error::UnknownToken {
                token: tok,
                vocab: self.token_bases.len(),
            });
        }
        Ok(())
    }

    fn component_mean(&self, d: Diffused, token: usize, emotion: usize, mu: &[f64], j: usize) -> f64 {
        d.a * (self.token_bases[token][j] + self.offsets[emotion][j]) + (1.0 - d.a) * mu[j]
    }

    /// `[segments][emotions]` log p(x_seg | e) + log p(e).
    fn joint_log_densities(&self, x: &Tensor<f64>, cond: &Conditioning<f64>, d: Diffused) -> Vec<Vec<f64>> {
        let m = self.num_emotions();
        let norm = -0.5 * self.dim as f64 * (LN_2PI + d.var.ln());
        cond.layout
            .segments()
            .map(|seg| {
                (0..m)
                    .map(|e| {
                        let mut ll = self.log_priors[e];
                        for f in seg.clone() {
                            let (xf, mu) = (x.row(f), cond.mu.row(f));
                            let tok = cond.frame_tokens[f];
                            let sq: f64 = (0..self.dim)
                                .map(|j| (xf[j] - self.component_mean(d, tok, e, mu, j)).powi(2))
                                .sum();
                            ll += norm - 0.5 * sq / d.var;
                        }
                        ll
                    })
                    .collect()
            })
            .collect()
    }

    /// Posterior over emotions per segment, `[segments, m]`.
    pub fn posterior_t(&self, x: &Tensor<f64>, cond: &Conditioning<f64>, t: f64) -> Result<Tensor<f64>> {
        self.check(x, cond)?;
        let d = self.diffused(t)?;
        let joint = self.joint_log_densities(x, cond, d);
        let m = self.num_emotions();
        let mut data = Vec::with_capacity(joint.len() * m);
        for row in &joint {
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|v| (v - lse).exp()));
        }
        Tensor::matrix(joint.len(), m, data)
    }

    /// log p_t(x_seg) of the unconditional mixture, per segment.
    pub fn log_density_t(&self, x: &Tensor<f64>, cond: &Conditioning<f64>, t: f64) -> Result<Vec<f64>> {
        self.check(x, cond)?;
        let d = self.diffused(t)?;
        Ok(self
            .joint_log_densities(x, cond, d)
            .iter()
            .map(|row| log_sum_exp(row))
            .collect())
    }

    /// log p_t(x_seg | e), per segment.
    pub fn class_log_density_t(
        &self,
        x: &Tensor<f64>,
        cond: &Conditioning<f64>,
        t: f64,
        emotion: usize,
    ) -> Result<Vec<f64>> {
        self.check(x, cond)?;
        let d = self.diffused(t)?;
        Ok(self
            .joint_log_densities(x, cond, d)
            .iter()
            .map(|row| row[emotion] - self.log_priors[emotion])
            .collect())
    }

    fn class_score(&self, x: &Tensor<f64>, cond: &Conditioning<f64>, d: Diffused, e: usize) -> Tensor<f64> {
        let mut out = Tensor::zeros(x.shape());
        for f in 0..x.rows() {
            let tok = cond.frame_tokens[f];
            let (xf, mu) = (x.row(f), cond.mu.row(f));
            let row: Vec<f64> = (0..self.dim)
                .map(|j| -(xf[j] - self.component_mean(d, tok, e, mu, j)) / d.var)
                .collect();
            out.row_mut(f).copy_from_slice(&row);
        }
        out
    }

    /// ∇_x log p_t(x) (unconditional) or ∇_x log p_t(x | e) (conditional).
    pub fn score_t(
        &self,
        x: &Tensor<f64>,
        cond: &Conditioning<f64>,
        t: f64,
        condition: Option<usize>,
    ) -> Result<Tensor<f64>> {
        self.check(x, cond)?;
        let d = self.diffused(t)?;
        if let Some(e) = condition {
            if e >= self.num_emotions() {
                return Err(Error::Domain(format!("emotion {e} out of range")));
            }
            return Ok(self.class_score(x, cond, d, e));
        }
        let post = self.posterior_t(x, cond, t)?;
        let mut out = Tensor::zeros(x.shape());
        for e in 0..self.num_emotions() {
            let s = self.class_score(x, cond, d, e);
            for (seg_i, seg) in cond.layout.segments().enumerate() {
                let w = post.row(seg_i)[e];
                for f in seg {
                    for (o, v) in out.row_mut(f).iter_mut().zip(s.row(f)) {
                        *o += w * v;
                    }
                }
            }
        }
        Ok(out)
    }

    /// ∇_x log p_t(e | x) = ∇ log p_t(x | e) − ∇ log p_t(x).
    pub fn log_posterior_grad_t(
        &self,
        x: &Tensor<f64>,
        cond: &Conditioning<f64>,
        t: f64,
        emotion: usize,
    ) -> Result<Tensor<f64>> {
        let cs = self.score_t(x, cond, t, Some(emotion))?;
        let us = self.score_t(x, cond, t, None)?;
        cs.sub(&us)
    }
}

fn cond_f64<T: Scalar>(cond: &Conditioning<T>) -> Conditioning<f64> {
    Conditioning {
        mu: cond.mu.cast(),
        layout: cond.layout.clone(),
        frame_tokens: cond.frame_tokens.clone(),
    }
}

impl<T: Scalar> ScoreModel<T> for GmmOracle {
    fn score(&self, x: &Tensor<T>, cond: &Conditioning<T>, t: f64) -> Result<Tensor<T>> {
        Ok(self.score_t(&x.cast(), &cond_f64(cond), t, None)?.cast())
    }
}

impl<T: Scalar> EmotionGuide<T> for GmmOracle {
    fn num_emotions(&self) -> usize {
        self.offsets.len()
    }

    fn log_probs(&self, x: &Tensor<T>, cond: &Conditioning<T>, t: f64) -> Result<Tensor<T>> {
        Ok(self.posterior_t(&x.cast(), &cond_f64(cond), t)?.map(f64::ln).cast())
    }

    fn class_log_prob_grad(&self, x: &Tensor<T>, cond: &Conditioning<T>, t: f64, label: usize) -> Result<Tensor<T>> {
        Ok(self.log_posterior_grad_t(&x.cast(), &cond_f64(cond), t, label)?.cast())
    }

    fn soft_label_grad(&self, x: &Tensor<T>, cond: &Conditioning<T>, t: f64, label: &SoftLabel) -> Result<Tensor<T>> {
        if label.num_emotions() != self.num_emotions() {
            return Err(shape_err("soft_label_grad", "label size differs from emotion count"));
        }
        let (x, cond) = (x.cast::<f64>(), cond_f64(cond));
        let d = self.diffused(t)?;
        self.check(&x, &cond)?;
        // Σ_i w_i (s_i − s) = Σ_i w_i s_i − s for w on the simplex
        let mut acc = self.score_t(&x, &cond, t, None)?.scale(-1.0);
        for (e, &w) in label.weights().iter().enumerate() {
            if w != 0.0 {
                acc.axpy(w, &self.class_score(&x, &cond, d, e))?;
            }
        }
        Ok(acc.cast())
    }
}
