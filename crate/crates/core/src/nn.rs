//! Parameterized layers built on the graph ops.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{BatchNormMode, Graph, Var};
use crate::error::Result;
use crate::optim::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether a forward pass trains (batch statistics, running-moment updates)
/// or infers (frozen moments).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn uniform_fan_in(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

pub(crate) fn small_normal(rng: &mut impl Rng, shape: &[usize], sigma: f64) -> Tensor {
    let dist = Normal::new(0.0, sigma).expect("sigma");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("init shape")
}

/// Fully-connected map `y = W x + b`, `W` stored as (out x in).
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), uniform_fan_in(rng, &[out_dim, in_dim], in_dim));
        let b = bias.then(|| store.add(format!("{name}.bias"), uniform_fan_in(rng, &[out_dim], in_dim)));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.w], self.b.map(|b| p[b]))
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel;
        let w = store.add(format!("{name}.weight"), uniform_fan_in(rng, &[cout, cin, kernel], fan_in));
        let b = store.add(format!("{name}.bias"), uniform_fan_in(rng, &[cout], fan_in));
        Conv1d { w, b, cin, cout, kernel, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv1d(x, p[self.w], Some(p[self.b]), self.stride, self.pad)
    }
}

/// Batch normalization over one feature axis with running moments.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub axis: usize,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize, axis: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[features]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[features]));
        BatchNorm {
            gamma,
            beta,
            axis,
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
        }
    }

    pub fn forward(&mut self, g: &mut Graph, p: &Bound, x: Var, mode: Mode) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (y, stats) =
                    g.batchnorm(x, p[self.gamma], p[self.beta], self.axis, BatchNormMode::Train, BN_EPS)?;
                let stats = stats.expect("training batch norm returns stats");
                for (r, s) in self.running_mean.iter_mut().zip(&stats.mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s;
                }
                for (r, s) in self.running_var.iter_mut().zip(&stats.var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mode = BatchNormMode::Eval {
                    mean: &self.running_mean,
                    var: &self.running_var,
                };
                Ok(g.batchnorm(x, p[self.gamma], p[self.beta], self.axis, mode, BN_EPS)?.0)
            }
        }
    }
}
