use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{BatchNormMode, Graph, Var};
use super::tensor::{Layout, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Named tensors with fixed shapes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Replaces a tensor's contents, keeping the shape immutable.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        slot.check_same(&t, "ParamSet::set")?;
        *slot = t;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Errors unless both sets hold the same names with the same shapes.
    pub fn check_mirrors(&self, other: &Self) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(shape_err("ParamSet", "parameter counts differ"));
        }
        for ((ka, va), (kb, vb)) in self.tensors.iter().zip(&other.tensors) {
            if ka != kb || va.shape() != vb.shape() {
                return Err(shape_err(
                    "ParamSet",
                    format!("`{ka}` {:?} vs `{kb}` {:?}", va.shape(), vb.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Running mode of stochastic / batch-dependent layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One layer of a [`Sequential`] stack. Parameter names are derived from `name`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Linear {
        name: String,
        inputs: usize,
        outputs: usize,
    },
    /// Same-padded convolution along the frame axis, per segment.
    Conv1d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        width: usize,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
    Dropout {
        p: f64,
    },
    Silu,
    Relu,
    Tanh,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// A linear stack of layers, stored as data so checkpoints describe themselves.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

/// Batch statistics observed by a batch-norm layer in training mode.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Per-forward state shared by all layers of a stack.
pub struct Ctx<'a, T: Scalar> {
    pub mode: Mode,
    pub layout: &'a Layout,
    pub buffers: &'a ParamSet<T>,
    pub rng: Option<&'a mut dyn rand::RngCore>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn eval(layout: &'a Layout, buffers: &'a ParamSet<T>) -> Self {
        Self {
            mode: Mode::Eval,
            layout,
            buffers,
            rng: None,
            bn_updates: Vec::new(),
        }
    }
}

/// Graph handles for every tensor of a [`ParamSet`].
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Adds each parameter as a leaf; `track` decides whether it gets a gradient.
    pub fn new<T: Scalar>(g: &mut Graph<T>, params: &ParamSet<T>, track: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v.clone(), track)))
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Collects gradients into a set mirroring `like`; untouched entries are zero.
    pub fn grads<T: Scalar>(
        &self,
        grads: &mut super::graph::Grads<T>,
        like: &ParamSet<T>,
    ) -> Result<ParamSet<T>> {
        let mut out = like.zeros_like();
        for (name, slot) in out.iter_mut() {
            if let Some(g) = grads.take(self.var(name)?) {
                *slot = g;
            }
        }
        Ok(out)
    }
}

fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

impl Layer {
    fn init<T: Scalar, R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        params: &mut ParamSet<T>,
        buffers: &mut ParamSet<T>,
    ) -> Result<()> {
        match self {
            Layer::Linear {
                name,
                inputs,
                outputs,
            } => {
                let bound = 1.0 / (*inputs as f64).sqrt();
                params.insert(format!("{name}.weight"), uniform(rng, &[*inputs, *outputs], bound))?;
                params.insert(format!("{name}.bias"), Tensor::zeros(&[*outputs]))?;
            }
            Layer::Conv1d {
                name,
                in_channels,
                out_channels,
                width,
            } => {
                let fan_in = in_channels * width;
                let bound = 1.0 / (fan_in as f64).sqrt();
                params.insert(format!("{name}.weight"), uniform(rng, &[fan_in, *out_channels], bound))?;
                params.insert(format!("{name}.bias"), Tensor::zeros(&[*out_channels]))?;
            }
            Layer::BatchNorm { name, channels } => {
                params.insert(format!("{name}.gamma"), Tensor::full(&[*channels], T::one()))?;
                params.insert(format!("{name}.beta"), Tensor::zeros(&[*channels]))?;
                buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[*channels]))?;
                buffers.insert(format!("{name}.running_var"), Tensor::full(&[*channels], T::one()))?;
            }
            Layer::Dropout { .. } | Layer::Silu | Layer::Relu | Layer::Tanh => {}
        }
        Ok(())
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        match self {
            Layer::Linear { name, .. } => {
                let w = p.var(&format!("{name}.weight"))?;
                let b = p.var(&format!("{name}.bias"))?;
                let y = g.matmul(x, w)?;
                g.add_row(y, b)
            }
            Layer::Conv1d { name, width, .. } => {
                let w = p.var(&format!("{name}.weight"))?;
                let b = p.var(&format!("{name}.bias"))?;
                let cols = g.im2col(x, ctx.layout, *width)?;
                let y = g.matmul(cols, w)?;
                g.add_row(y, b)
            }
            Layer::BatchNorm { name, .. } => {
                let gamma = p.var(&format!("{name}.gamma"))?;
                let beta = p.var(&format!("{name}.beta"))?;
                match ctx.mode {
                    Mode::Train => {
                        let (y, mean, var) =
                            g.batch_norm(x, gamma, beta, BatchNormMode::Batch, None, T::lit(BN_EPS))?;
                        ctx.bn_updates.push(BnUpdate {
                            name: name.clone(),
                            mean,
                            var,
                        });
                        Ok(y)
                    }
                    Mode::Eval => {
                        let rm = ctx.buffers.get(&format!("{name}.running_mean"))?;
                        let rv = ctx.buffers.get(&format!("{name}.running_var"))?;
                        let (y, _, _) = g.batch_norm(
                            x,
                            gamma,
                            beta,
                            BatchNormMode::Running,
                            Some((rm.data(), rv.data())),
                            T::lit(BN_EPS),
                        )?;
                        Ok(y)
                    }
                }
            }
            Layer::Dropout { p: rate } => {
                if ctx.mode == Mode::Eval || *rate <= 0.0 {
                    return Ok(x);
                }
                let rng = ctx
                    .rng
                    .as_deref_mut()
                    .ok_or_else(|| Error::Config("dropout in training mode needs an rng".into()))?;
                let keep = 1.0 - rate;
                let shape = g.value(x).shape().to_vec();
                let n: usize = shape.iter().product();
                let scale = T::lit(1.0 / keep);
                let mask = (0..n)
                    .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
                    .collect();
                g.mul_const(x, Tensor::new(shape, mask)?)
            }
            Layer::Silu => Ok(g.silu(x)),
            Layer::Relu => Ok(g.relu(x)),
            Layer::Tanh => Ok(g.tanh(x)),
        }
    }
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        params: &mut ParamSet<T>,
        buffers: &mut ParamSet<T>,
    ) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init(rng, params, buffers))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, l| l.forward(g, p, h, ctx))
    }
}

/// Folds observed batch statistics into the running estimates.
pub fn apply_bn_updates<T: Scalar>(buffers: &mut ParamSet<T>, updates: &[BnUpdate<T>]) -> Result<()> {
    let m = T::lit(BN_MOMENTUM);
    for u in updates {
        let rm = buffers.get_mut(&format!("{}.running_mean", u.name))?;
        for (r, &b) in rm.data_mut().iter_mut().zip(&u.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        let rv = buffers.get_mut(&format!("{}.running_var", u.name))?;
        for (r, &b) in rv.data_mut().iter_mut().zip(&u.var) {
            *r = (T::one() - m) * *r + m * b;
        }
    }
    Ok(())
}

/// Sinusoidal features of a scalar time, `dim` must be even.
pub fn time_embedding<T: Scalar>(t: f64, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        // frequencies from 1 to 1000 rad per unit time
        let freq = (k as f64 * 1000f64.ln() / denom).exp();
        out.push(T::lit((t * freq).sin()));
    }
    for k in 0..half {
        let freq = (k as f64 * 1000f64.ln() / denom).exp();
        out.push(T::lit((t * freq).cos()));
    }
    out
}

/// Stacks [`time_embedding`] rows for a list of times.
pub fn time_embedding_rows<T: Scalar>(times: &[f64], dim: usize) -> Tensor<T> {
    let data = times.iter().flat_map(|&t| time_embedding::<T>(t, dim)).collect();
    Tensor::matrix(times.len(), dim, data).expect("embedding shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let layout = Layout::single(4);
        let buffers = ParamSet::<f64>::new();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[4, 3], 2.0));
        let bound = Bound::new(&mut g, &ParamSet::new(), false);
        let mut ctx = Ctx::eval(&layout, &buffers);
        let y = Layer::Dropout { p: 0.5 }.forward(&mut g, &bound, x, &mut ctx).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let layer = Layer::BatchNorm {
            name: "bn".into(),
            channels: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut params, mut buffers) = (ParamSet::<f64>::new(), ParamSet::new());
        layer.init(&mut rng, &mut params, &mut buffers).unwrap();
        buffers.set("bn.running_mean", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()).unwrap();
        buffers.set("bn.running_var", Tensor::new(vec![2], vec![4.0, 1.0]).unwrap()).unwrap();
        let layout = Layout::single(1);
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &params, false);
        let x = g.constant(Tensor::matrix(1, 2, vec![3.0, 0.0]).unwrap());
        let mut ctx = Ctx::eval(&layout, &buffers);
        let y = layer.forward(&mut g, &bound, x, &mut ctx).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 2.0 / (4.0f64 + BN_EPS).sqrt()).abs() < 1e-12);
        assert!((v[1] - 1.0 / (1.0f64 + BN_EPS).sqrt()).abs() < 1e-12);
        // deterministic: a second evaluation gives identical output
        let y2 = layer.forward(&mut g, &bound, x, &mut ctx).unwrap();
        assert_eq!(g.value(y), g.value(y2));
    }

    #[test]
    fn param_set_shapes_are_immutable() {
        let mut p = ParamSet::<f32>::new();
        p.insert("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(p.set("w", Tensor::zeros(&[4])).is_err());
        assert!(p.insert("w", Tensor::zeros(&[2, 2])).is_err());
    }
}
