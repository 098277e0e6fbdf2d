//! Adam with bias correction and an exponential moving average of weights.

use super::layers::ParamSet;
use super::tensor::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    params.check_mirrors(grads)?;
    params.check_mirrors(&state.m)?;
    state.step += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let (tb1, tb2) = (T::lit(b1), T::lit(b2));
    let (tc1, tc2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
    for ((((_, p), (_, g)), (_, m)), (_, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            md[i] = tb1 * md[i] + tc1 * gd[i];
            vd[i] = tb2 * vd[i] + tc2 * gd[i] * gd[i];
            let m_hat = md[i].f64() / bc1;
            let v_hat = vd[i].f64() / bc2;
            pd[i] -= T::lit(cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps));
        }
    }
    Ok(())
}

/// Shadow copy of the parameters, updated as `decay · shadow + (1 − decay) · live`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState<T = f32> {
    pub decay: f64,
    pub shadow: ParamSet<T>,
}

impl<T: Scalar> EmaState<T> {
    pub fn new(decay: f64, live: &ParamSet<T>) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Domain(format!("EMA decay {decay} outside [0, 1]")));
        }
        Ok(Self {
            decay,
            shadow: live.clone(),
        })
    }

    pub fn update(&mut self, live: &ParamSet<T>) -> Result<()> {
        self.shadow.check_mirrors(live)?;
        let d = T::lit(self.decay);
        let k = T::lit(1.0 - self.decay);
        for ((_, s), (_, l)) in self.shadow.iter_mut().zip(live.iter()) {
            for (a, &b) in s.data_mut().iter_mut().zip(l.data()) {
                *a = d * *a + k * b;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn scalar_set(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        p
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut p = scalar_set(0.7);
        let g = scalar_set(0.0);
        let mut st = AdamState::new(&p);
        for _ in 0..10 {
            adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut p = scalar_set(0.7);
        let g = scalar_set(3.0);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn constant_gradient_moves_by_lr_per_step() {
        // With bias correction m_hat = g and v_hat = g^2 exactly, so each
        // step is lr * g / (|g| + eps). Simulate the recurrence directly.
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        for g0 in [2.5, -0.3] {
            let mut p = scalar_set(1.0);
            let g = scalar_set(g0);
            let mut st = AdamState::new(&p);
            let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
            for k in 1..=50 {
                adam_step(&mut p, &g, &mut st, &cfg).unwrap();
                m = cfg.beta1 * m + (1.0 - cfg.beta1) * g0;
                v = cfg.beta2 * v + (1.0 - cfg.beta2) * g0 * g0;
                let mh = m / (1.0 - cfg.beta1.powi(k));
                let vh = v / (1.0 - cfg.beta2.powi(k));
                let step = cfg.lr * mh / (vh.sqrt() + cfg.eps);
                assert!((step.abs() - cfg.lr).abs() < 1e-6);
                x -= step;
            }
            let got = p.get("w").unwrap().item();
            assert!((got - x).abs() < 1e-9);
            assert!((got - (1.0 - 50.0 * cfg.lr * g0.signum())).abs() < 1e-4);
        }
    }

    #[test]
    fn ema_extremes() {
        let live = scalar_set(5.0);
        let mut e0 = EmaState::new(0.0, &scalar_set(1.0)).unwrap();
        e0.update(&live).unwrap();
        assert_eq!(e0.shadow.get("w").unwrap().item(), 5.0);
        let mut e1 = EmaState::new(1.0, &scalar_set(1.0)).unwrap();
        e1.update(&live).unwrap();
        assert_eq!(e1.shadow.get("w").unwrap().item(), 1.0);
    }

    #[test]
    fn ema_geometric_recurrence() {
        let (s0, l, d) = (2.0, -1.0, 0.9);
        let live = scalar_set(l);
        let mut ema = EmaState::new(d, &scalar_set(s0)).unwrap();
        for k in 1..=30 {
            ema.update(&live).unwrap();
            let expect = l + d.powi(k) * (s0 - l);
            assert!((ema.shadow.get("w").unwrap().item() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_rejects_shape_mismatch() {
        let mut ema = EmaState::new(0.5, &scalar_set(0.0)).unwrap();
        let mut other = ParamSet::<f64>::new();
        other.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(ema.update(&other).is_err());
    }
}
