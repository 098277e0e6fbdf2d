//! Central finite-difference checks of reverse-mode gradients, in `f64`.

use super::layers::ParamSet;
use super::tensor::Tensor;
use crate::error::Result;

/// Relative error `|a − n| / max(|a|, |n|, floor)`; the floor keeps
/// vanishing gradients from turning round-off into large ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    /// Location of the worst entry, `name[index]`.
    pub worst: String,
}

impl GradReport {
    fn record(&mut self, name: &str, i: usize, rel: f64) {
        self.checked += 1;
        if rel > self.max_rel || self.worst.is_empty() {
            self.max_rel = self.max_rel.max(rel);
            self.worst = format!("{name}[{i}]");
        }
    }

    pub fn merge(&mut self, other: &GradReport) {
        self.checked += other.checked;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst.clone();
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-6 }
    }
}

impl GradCheck {
    /// Compares `analytic` against central differences of `loss` in every parameter entry.
    pub fn params(
        &self,
        params: &ParamSet<f64>,
        analytic: &ParamSet<f64>,
        mut loss: impl FnMut(&ParamSet<f64>) -> Result<f64>,
    ) -> Result<GradReport> {
        params.check_mirrors(analytic)?;
        let mut report = GradReport::default();
        let mut probe = params.clone();
        for (name, a) in analytic.iter() {
            for i in 0..a.len() {
                let orig = probe.get(name)?.data()[i];
                probe.get_mut(name)?.data_mut()[i] = orig + self.step;
                let up = loss(&probe)?;
                probe.get_mut(name)?.data_mut()[i] = orig - self.step;
                let down = loss(&probe)?;
                probe.get_mut(name)?.data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * self.step);
                report.record(name, i, relative_error(a.data()[i], fd, self.floor));
            }
        }
        Ok(report)
    }

    /// Compares `analytic` against central differences of `f` in every entry of `x`.
    pub fn input(
        &self,
        name: &str,
        x: &Tensor<f64>,
        analytic: &Tensor<f64>,
        mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    ) -> Result<GradReport> {
        x.check_same(analytic, "gradcheck")?;
        let mut report = GradReport::default();
        let mut probe = x.clone();
        for i in 0..x.len() {
            let orig = x.data()[i];
            probe.data_mut()[i] = orig + self.step;
            let up = f(&probe)?;
            probe.data_mut()[i] = orig - self.step;
            let down = f(&probe)?;
            probe.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * self.step);
            report.record(name, i, relative_error(analytic.data()[i], fd, self.floor));
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_gradient_passes_and_wrong_gradient_fails() {
        let x = Tensor::new(vec![3], vec![0.5, -1.2, 2.0]).unwrap();
        let f = |t: &Tensor<f64>| Ok(t.data().iter().map(|v| v * v * v).sum::<f64>());
        let good = x.map(|v| 3.0 * v * v);
        let r = GradCheck::default().input("x", &x, &good, f).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel < 1e-8);
        let bad = x.map(|v| 3.0 * v * v + 0.01);
        let r = GradCheck::default().input("x", &x, &bad, f).unwrap();
        assert!(r.max_rel > 1e-3);
    }

    #[test]
    fn floor_limits_tiny_denominators() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert!((relative_error(1e-12, 0.0, 1e-6) - 1e-6).abs() < 1e-18);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
    }
}
