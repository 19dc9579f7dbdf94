//! Central finite-difference checks of every differentiable op, the model
//! modules built from them and the end-to-end training loss.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchNormMode, Graph, Var, OP_NAMES};
use crate::boundary::{adjacency, Bfa, BoundaryBranch, BoundaryEnhancement, IntraBranch};
use crate::config::{BamConfig, Variant};
use crate::error::{BamError, Result};
use crate::fab::{Fab, FrameMask, MaskMode};
use crate::frontend::{AttentivePool, Encoder};
use crate::labels::FrameLabelSet;
use crate::model::{total_loss, Bam};
use crate::nn::Mode;
use crate::optim::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Frames and feature width of the module checks.
const T: usize = 4;
const D: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckKind {
    Op,
    Module,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub kind: CheckKind,
    pub inputs: usize,
    /// `|a - n| / max(|a|, |n|, 1e-8)` over all checked inputs.
    pub rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_err <= TOLERANCE
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            let kind = match r.kind {
                CheckKind::Op => "op",
                CheckKind::Module => "module",
            };
            let verdict = if r.passed() { "ok" } else { "FAIL" };
            writeln!(f, "{kind:<7}{:<16}{:>8} {:>12.3e}  {verdict}", r.name, r.inputs, r.rel_err)?;
        }
        Ok(())
    }
}

type Build<'a> = Box<dyn FnMut(&mut Graph, &[Var]) -> Result<Var> + 'a>;

struct Case<'a> {
    name: &'static str,
    kind: CheckKind,
    inputs: Vec<Tensor>,
    build: Build<'a>,
}

fn projection(g: &Graph, out: Var, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn run_case(case: &mut Case<'_>, corrupt: Option<&str>) -> Result<CheckResult> {
    let mut g = Graph::new();
    if let Some(op) = corrupt {
        g.corrupt_backward(op);
    }
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let r = projection(&g, out, 0x5eed);
    g.backward_seeded(out, r.clone())?;
    let analytic: Vec<f64> = vars
        .iter()
        .zip(&case.inputs)
        .flat_map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], |g| g.data().to_vec()))
        .collect();

    let mut eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (case.build)(&mut g, &vars)?;
        Ok(dot(g.value(out).data(), r.data()))
    };
    let mut inputs = case.inputs.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            inputs[i].data_mut()[j] = x + STEP;
            let up = eval(&inputs)?;
            inputs[i].data_mut()[j] = x - STEP;
            let down = eval(&inputs)?;
            inputs[i].data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let rel_err = norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-8);
    Ok(CheckResult { name: case.name.to_string(), kind: case.kind, inputs: analytic.len(), rel_err })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random(rng, shape).map(|v| if v < 0.0 { v - 0.1 } else { v + 0.1 })
}

/// Distinct values at least 0.05 apart, for max reductions.
fn spread(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), order.into_iter().map(|k| k as f64 * 0.05 - 0.5).collect()).expect("shape")
}

fn op_case<'a>(
    name: &'static str,
    inputs: Vec<Tensor>,
    build: impl FnMut(&mut Graph, &[Var]) -> Result<Var> + 'a,
) -> Case<'a> {
    Case { name, kind: CheckKind::Op, inputs, build: Box::new(build) }
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case<'static>> {
    let mut mask = Tensor::ones(&[2, T, T]);
    mask.set(&[0, 1, 3], 0.0);
    mask.set(&[1, 2, 0], 0.0);
    let targets = vec![0usize, 1, 1, 0];
    let weights = vec![1.0, 0.5, 1.0, 0.0];
    let bin = vec![1.0, 0.0, 0.0, 1.0];
    let bin_w = weights.clone();
    vec![
        op_case("add", vec![random(rng, &[T, D, 2]), random(rng, &[T, D, 1])], |g, v| g.add(v[0], v[1])),
        op_case("sub", vec![random(rng, &[T, D]), random(rng, &[D])], |g, v| g.sub(v[0], v[1])),
        op_case("mul", vec![random(rng, &[2, T, T, 2]), random(rng, &[2, T, T, 1])], |g, v| g.mul(v[0], v[1])),
        op_case("scale", vec![random(rng, &[T, D])], |g, v| Ok(g.scale(v[0], -1.7))),
        op_case("matmul", vec![random(rng, &[T, 3]), random(rng, &[3, D])], |g, v| g.matmul(v[0], v[1])),
        op_case("bmm", vec![random(rng, &[2, T, 3]), random(rng, &[2, 3, D])], |g, v| g.bmm(v[0], v[1])),
        op_case("linear", vec![random(rng, &[2, T, D]), random(rng, &[3, D]), random(rng, &[3])], |g, v| {
            g.linear(v[0], v[1], Some(v[2]))
        }),
        op_case("pair_tanh", vec![random(rng, &[2, T, D]), random(rng, &[3, D]), random(rng, &[3])], |g, v| {
            g.pair_tanh(v[0], v[1], v[2])
        }),
        op_case("tanh", vec![random(rng, &[T, D])], |g, v| Ok(g.tanh(v[0]))),
        op_case("sigmoid", vec![random(rng, &[T, D])], |g, v| Ok(g.sigmoid(v[0]))),
        op_case("selu", vec![off_zero(rng, &[T, D])], |g, v| Ok(g.selu(v[0]))),
        op_case("softmax", vec![random(rng, &[2, T, T])], move |g, v| g.softmax(v[0], 2, Some(&mask))),
        op_case("reshape", vec![random(rng, &[2, T, D])], |g, v| g.reshape(v[0], &[T, 2 * D])),
        op_case("permute", vec![random(rng, &[2, T, D])], |g, v| g.permute(v[0], &[2, 0, 1])),
        op_case("select", vec![random(rng, &[2, T, D])], |g, v| g.select(v[0], 1, 2)),
        op_case("narrow", vec![random(rng, &[2, T, D])], |g, v| g.narrow(v[0], 2, 1, 2)),
        op_case("concat", vec![random(rng, &[2, T, D]), random(rng, &[2, T, 1])], |g, v| g.concat(&[v[0], v[1]], 2)),
        op_case("sum_axis", vec![random(rng, &[2, T, D])], |g, v| g.sum_axis(v[0], 1)),
        op_case("max_axis", vec![spread(rng, &[2, T, D])], |g, v| g.max_axis(v[0], 1)),
        op_case("sum", vec![random(rng, &[T, D])], |g, v| Ok(g.sum(v[0]))),
        op_case("mean", vec![random(rng, &[T, D])], |g, v| Ok(g.mean(v[0]))),
        op_case("batchnorm", vec![random(rng, &[2, T, D]), off_zero(rng, &[D]), random(rng, &[D])], |g, v| {
            Ok(g.batchnorm(v[0], v[1], v[2], 2, BatchNormMode::Train, 1e-5)?.0)
        }),
        op_case("conv1d", vec![random(rng, &[2, 2, 9]), random(rng, &[3, 2, 3]), random(rng, &[3])], |g, v| {
            g.conv1d(v[0], v[1], Some(v[2]), 2, 1)
        }),
        op_case("cross_entropy", vec![random(rng, &[T, 2])], move |g, v| g.cross_entropy(v[0], &targets, &weights)),
        op_case("bce_with_logits", vec![random(rng, &[T])], move |g, v| g.bce_with_logits(v[0], &bin, &bin_w)),
    ]
}

/// A module case: input 0 is the features, the rest the module parameters.
fn module_case<'a>(
    name: &'static str,
    x: Tensor,
    store: &ParamStore,
    mut forward: impl FnMut(&mut Graph, &Bound, Var) -> Result<Var> + 'a,
) -> Case<'a> {
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|(_, p)| p.value.clone()));
    Case {
        name,
        kind: CheckKind::Module,
        inputs,
        build: Box::new(move |g, v| {
            let bound = Bound::from_vars(v[1..].to_vec());
            forward(g, &bound, v[0])
        }),
    }
}

fn module_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case<'static>>> {
    let mut cases = Vec::new();

    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "enc", 8, 2, 3, D, rng)?;
    cases.push(module_case("encoder", random(rng, &[2, 8 * T]), &store, move |g, p, x| enc.forward(g, p, x)));

    let mut store = ParamStore::new();
    let pool = AttentivePool::new(&mut store, "pool", D, rng);
    cases.push(module_case("attentive_pool", random(rng, &[2, 2 * T, D]), &store, move |g, p, x| {
        pool.forward(g, p, x, 2)
    }));

    let mut store = ParamStore::new();
    let mut fab = Fab::new(&mut store, "fab", D, 2, MaskMode::Exclude, rng);
    let mask = FrameMask {
        adjacency: Some(FrameMask::stack(&[adjacency(&[0, 1, 0, 0])?, adjacency(&[0, 0, 0, 1])?])?),
        keys: FrameMask::from_lengths(&[T, 3], T),
    };
    cases.push(module_case("fab", random(rng, &[2, T, D]), &store, move |g, p, x| {
        fab.forward(g, p, x, &mask, Mode::Train)
    }));

    let mut store = ParamStore::new();
    let mut intra = IntraBranch::new(&mut store, "intra", D, 3, rng);
    cases.push(module_case("intra_branch", random(rng, &[2, T, D]), &store, move |g, p, x| {
        intra.forward(g, p, x, Mode::Train)
    }));

    let mut store = ParamStore::new();
    let mut be = BoundaryEnhancement::new(&mut store, "be", D, 1, 3, BoundaryBranch::Full, MaskMode::Exclude, rng);
    let keys = FrameMask::from_lengths(&[T, 3], T);
    cases.push(module_case("boundary_enh", random(rng, &[2, T, D]), &store, move |g, p, x| {
        let out = be.forward(g, p, x, keys.as_ref(), Mode::Train)?;
        let logits = g.reshape(out.logits, &[2, T, 1])?;
        g.concat(&[out.f_be, logits], 2)
    }));

    let mut store = ParamStore::new();
    let mut bfa = Bfa::new(&mut store, "bfa", D, 1, 2, MaskMode::Exclude, rng);
    let mask = FrameMask {
        adjacency: Some(FrameMask::stack(&[adjacency(&[0, 0, 1, 0])?, adjacency(&[1, 0, 0, 0])?])?),
        keys: None,
    };
    cases.push(module_case("bfa", random(rng, &[2, T, D]), &store, move |g, p, x| {
        bfa.forward(g, p, x, &mask, Mode::Train)
    }));

    cases.push(end_to_end_case(rng)?);
    Ok(cases)
}

/// Full training loss of a tiny model on a two-item batch with padding.
fn end_to_end_case(rng: &mut ChaCha8Rng) -> Result<Case<'static>> {
    let mut cfg = BamConfig::desk().model;
    cfg.variant = Variant::BfaBe;
    cfg.sample_rate = 1000;
    cfg.hop_ms = 8;
    cfg.encoder_substride = 2;
    cfg.encoder_channels = 3;
    cfg.d_model = D;
    cfg.stride = 2;
    cfg.intra_channels = 3;
    let mut model = Bam::new(&cfg, rng.random())?;
    let samples = model.min_input_len() * cfg.stride * T;
    let input = random(rng, &[2, samples]);
    let labels = vec![
        FrameLabelSet { resolution_ms: 16, y: vec![0, 1, 1, 0], b: vec![0, 1, 0, 1] },
        FrameLabelSet { resolution_ms: 16, y: vec![1, 1, 0], b: vec![0, 1, 1] },
    ];
    let lengths = vec![T, 3];
    let inputs: Vec<Tensor> = model.store.iter().map(|(_, p)| p.value.clone()).collect();
    Ok(Case {
        name: "total_loss",
        kind: CheckKind::Module,
        inputs,
        build: Box::new(move |g, v| {
            let bound = Bound::from_vars(v.to_vec());
            let out = model.forward(g, &bound, &input, Some(&lengths), None, Mode::Train)?;
            Ok(total_loss(g, &out, &labels, 0.5)?.total)
        }),
    })
}

/// Runs every check. `corrupt` names an op whose backward rule is perturbed
/// in the analytic pass.
pub fn run(corrupt: Option<&str>) -> Result<GradcheckReport> {
    if let Some(op) = corrupt {
        if !OP_NAMES.contains(&op) {
            return Err(BamError::InvalidArgument(format!("unknown op {op:?}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cases = op_cases(&mut rng);
    cases.extend(module_cases(&mut rng)?);
    let mut report = GradcheckReport::default();
    for case in &mut cases {
        report.results.push(run_case(case, corrupt)?);
    }
    Ok(report)
}
