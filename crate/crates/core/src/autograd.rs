//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every value produced during a forward pass. Operations
//! append nodes and return [`Var`] handles; [`Graph::backward`] sweeps the
//! tape in reverse and leaves a gradient on every node that requires one.
//! A graph is single-threaded; build one per forward pass.

use crate::error::{BamError, Result};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, strides, Tensor};

/// Fixed SELU constants.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
pub const SELU_SCALE: f64 = 1.050_700_987_355_480_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which statistics a batch norm normalizes with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with frozen moments.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Batch statistics returned by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance estimate, used for running moments.
    pub var: Vec<f64>,
}

/// Names of every differentiable operation, used by gradient checking and
/// fault injection.
pub const OP_NAMES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "bmm",
    "linear",
    "pair_tanh",
    "tanh",
    "sigmoid",
    "selu",
    "softmax",
    "reshape",
    "permute",
    "select",
    "narrow",
    "concat",
    "sum_axis",
    "max_axis",
    "sum",
    "mean",
    "batchnorm",
    "conv1d",
    "cross_entropy",
    "bce_with_logits",
];

#[derive(Debug)]
enum Op {
    Leaf,
    StopGradient,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    PairTanh {
        f: Var,
        w: Var,
        b: Var,
    },
    Tanh(Var),
    Sigmoid(Var),
    Selu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Select {
        x: Var,
        axis: usize,
        index: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
        weights: Vec<f64>,
        norm: f64,
    },
    BceWithLogits {
        z: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        norm: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGradient => "stop_gradient",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Bmm(..) => "bmm",
            Op::Linear { .. } => "linear",
            Op::PairTanh { .. } => "pair_tanh",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Selu(_) => "selu",
            Op::Softmax { .. } => "softmax",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Select { .. } => "select",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::SumAxis { .. } => "sum_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Conv1d { .. } => "conv1d",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    corrupt: Option<String>,
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(BamError::Axis { axis, rank })
    } else {
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], delta: &[f64]) {
    match slot {
        Some(g) => g
            .data_mut()
            .iter_mut()
            .zip(delta)
            .for_each(|(a, b)| *a += b),
        None => *slot = Some(Tensor::new(shape.to_vec(), delta.to_vec()).expect("grad shape")),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_SCALE * x
    } else {
        SELU_SCALE * SELU_ALPHA * x.exp_m1()
    }
}

/// Rows `f[i] * f[j]` for `j` in `i..T`, written into `out`.
fn pair_rows(f: &[f64], i: usize, d: usize, out: &mut [f64]) {
    let fi = &f[i * d..(i + 1) * d];
    for (r, row) in out.chunks_mut(d).enumerate() {
        let fj = &f[(i + r) * d..(i + r + 1) * d];
        row.iter_mut().zip(fi.iter().zip(fj)).for_each(|(v, (a, b))| *v = a * b);
    }
}

/// `out[m,n] += a[m,k] * b[k,n]` on flat row-major slices.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let k4 = k - k % 4;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for p in (0..k4).step_by(4) {
            let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                orow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
        for p in k4..k {
            let av = arow[p];
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`.
fn gemm_at_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let m4 = m - m % 4;
    for i in (0..m4).step_by(4) {
        let g0 = &g[i * n..(i + 1) * n];
        let g1 = &g[(i + 1) * n..(i + 2) * n];
        let g2 = &g[(i + 2) * n..(i + 3) * n];
        let g3 = &g[(i + 3) * n..(i + 4) * n];
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += a0 * g0[j] + a1 * g1[j] + a2 * g2[j] + a3 * g3[j];
            }
        }
    }
    for i in m4..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`.
fn gemm_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(grow, brow);
        }
    }
}

/// Index arithmetic of one strided, zero-padded 1-D convolution.
struct ConvGeometry {
    cin: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lout: usize,
}

impl ConvGeometry {
    /// Outputs `t` whose tap `kk` lands inside the signal.
    fn valid(&self, kk: usize) -> std::ops::Range<usize> {
        let lo = (self.pad.saturating_sub(kk)).div_ceil(self.stride);
        let hi = if self.len + self.pad > kk { (self.len + self.pad - kk - 1) / self.stride + 1 } else { 0 };
        lo.min(self.lout)..hi.min(self.lout).max(lo.min(self.lout))
    }

    /// `cols[(ci * k + kk), t] = x[ci, t * stride + kk - pad]`.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        for kk in 0..self.k {
            let r = self.valid(kk);
            for ci in 0..self.cin {
                let xrow = &x[ci * self.len..(ci + 1) * self.len];
                let row = &mut cols[(ci * self.k + kk) * self.lout..(ci * self.k + kk + 1) * self.lout];
                row[..r.start].fill(0.0);
                row[r.end..].fill(0.0);
                if r.is_empty() {
                    continue;
                }
                let first = r.start * self.stride + kk - self.pad;
                if self.stride == 1 {
                    row[r.clone()].copy_from_slice(&xrow[first..first + r.len()]);
                } else {
                    for (c, &v) in row[r.clone()].iter_mut().zip(xrow[first..].iter().step_by(self.stride)) {
                        *c = v;
                    }
                }
            }
        }
    }

    fn col2im_acc(&self, cols: &[f64], gx: &mut [f64]) {
        for kk in 0..self.k {
            let r = self.valid(kk);
            for ci in 0..self.cin {
                if r.is_empty() {
                    continue;
                }
                let row = &cols[(ci * self.k + kk) * self.lout..(ci * self.k + kk + 1) * self.lout];
                let first = r.start * self.stride + kk - self.pad;
                let grow = &mut gx[ci * self.len + first..(ci + 1) * self.len];
                for (g, &c) in grow.iter_mut().step_by(self.stride).zip(&row[r.clone()]) {
                    *g += c;
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test fixture: perturbs the backward rule of the named op so gradient
    /// checking has a negative control.
    pub fn corrupt_backward(&mut self, op: &str) {
        self.corrupt = Some(op.to_string());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copies the value and blocks all gradient flow back through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rg = self.rg(a) || self.rg(b);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if sa == sb {
            let data = da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect();
            return Ok((Tensor::new(sa, data)?, rg));
        }
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| {
            BamError::shape(name, format!("cannot broadcast {sa:?} with {sb:?}"))
        })?;
        let (ta, tb) = (broadcast_strides(&sa, &out), broadcast_strides(&sb, &out));
        let mut data = vec![0.0; out.iter().product()];
        for_each_broadcast(&out, &ta, &tb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
        Ok((Tensor::new(out, data)?, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let t = self.value(x).map(|v| v * k);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, k), rg)
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(BamError::shape(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched matrix product `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(BamError::shape("bmm", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm_acc(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![bs, m, n], out)?, Op::Bmm(a, b), rg))
    }

    /// `y[..., o] = sum_i x[..., i] w[o, i] + b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let fan_in = *sx.last().unwrap_or(&0);
        if sx.is_empty() || sw.len() != 2 || sw[1] != fan_in {
            return Err(BamError::shape(
                "linear",
                format!("input {sx:?} against weight {sw:?}"),
            ));
        }
        let out_dim = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(BamError::shape(
                    "linear",
                    format!("bias {:?} for output dim {out_dim}", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).numel() / fan_in.max(1);
        let (dx, dw) = (self.value(x).data(), self.value(w).data());
        let bias = b.map(|b| self.value(b).data());
        let mut wt = vec![0.0; fan_in * out_dim];
        for o in 0..out_dim {
            for i in 0..fan_in {
                wt[i * out_dim + o] = dw[o * fan_in + i];
            }
        }
        let mut out = match bias {
            Some(bv) => bv.repeat(rows),
            None => vec![0.0; rows * out_dim],
        };
        gemm_acc(dx, &wt, &mut out, rows, fan_in, out_dim);
        let mut shape = sx;
        *shape.last_mut().unwrap() = out_dim;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg))
    }

    /// `y[b, i, j, o] = tanh(sum_d w[o, d] f[b, i, d] f[b, j, d] + b[o])`,
    /// evaluated once per unordered pair.
    pub fn pair_tanh(&mut self, f: Var, w: Var, b: Var) -> Result<Var> {
        let sf = self.shape(f).to_vec();
        let sw = self.shape(w).to_vec();
        if sf.len() != 3 || sw.len() != 2 || sw[1] != sf[2] || self.shape(b) != [sw[0]] {
            return Err(BamError::shape(
                "pair_tanh",
                format!("features {sf:?}, weight {sw:?}, bias {:?}", self.shape(b)),
            ));
        }
        let (batch, t, d, o) = (sf[0], sf[1], sf[2], sw[0]);
        let (df, dw, db) = (self.value(f).data(), self.value(w).data(), self.value(b).data());
        let mut wt = vec![0.0; d * o];
        for k in 0..o {
            for i in 0..d {
                wt[i * o + k] = dw[k * d + i];
            }
        }
        let mut out = vec![0.0; batch * t * t * o];
        let mut s = vec![0.0; t * d];
        let mut z = vec![0.0; t * o];
        for bi in 0..batch {
            let fb = &df[bi * t * d..(bi + 1) * t * d];
            for i in 0..t {
                let n = t - i;
                pair_rows(fb, i, d, &mut s[..n * d]);
                for r in 0..n {
                    z[r * o..(r + 1) * o].copy_from_slice(db);
                }
                gemm_acc(&s[..n * d], &wt, &mut z[..n * o], n, d, o);
                for r in 0..n {
                    let j = i + r;
                    let row = &mut z[r * o..(r + 1) * o];
                    row.iter_mut().for_each(|v| *v = v.tanh());
                    let ij = ((bi * t + i) * t + j) * o;
                    let ji = ((bi * t + j) * t + i) * o;
                    out[ij..ij + o].copy_from_slice(row);
                    out[ji..ji + o].copy_from_slice(row);
                }
            }
        }
        let rg = self.rg(f) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![batch, t, t, o], out)?, Op::PairTanh { f, w, b }, rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(t, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn selu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(selu);
        let rg = self.rg(x);
        self.push(t, Op::Selu(x), rg)
    }

    /// Softmax along `axis`. When `mask` is given (broadcastable to the input
    /// shape), entries where it is 0 are excluded from the support and get
    /// weight exactly 0.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<&Tensor>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(axis, shape.len())?;
        let allowed: Option<Vec<bool>> = match mask {
            None => None,
            Some(m) => {
                let full = broadcast_shape(&shape, m.shape());
                if full.as_deref() != Some(&shape[..]) {
                    return Err(BamError::shape(
                        "softmax",
                        format!("mask {:?} does not broadcast to {shape:?}", m.shape()),
                    ));
                }
                let sm = broadcast_strides(m.shape(), &shape);
                let zero = vec![0; shape.len()];
                let mut allowed = vec![false; shape.iter().product()];
                let md = m.data();
                for_each_broadcast(&shape, &sm, &zero, |o, im, _| allowed[o] = md[im] != 0.0);
                Some(allowed)
            }
        };
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let ok = |a: usize| allowed.as_ref().is_none_or(|m| m[at(a)]);
                let mut max = f64::NEG_INFINITY;
                for a in 0..len {
                    if ok(a) {
                        max = max.max(xd[at(a)]);
                    }
                }
                if max == f64::NEG_INFINITY && len > 0 {
                    return Err(BamError::InvalidArgument(format!(
                        "softmax mask excludes every entry of slice (outer {o}, inner {i})"
                    )));
                }
                let mut sum = 0.0;
                for a in 0..len {
                    if ok(a) {
                        let e = (xd[at(a)] - max).exp();
                        out[at(a)] = e;
                        sum += e;
                    }
                }
                for a in 0..len {
                    out[at(a)] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(BamError::shape(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", shape.len()),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src = strides(&shape);
        let src_perm: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
        let zero = vec![0; shape.len()];
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for_each_broadcast(&out_shape, &src_perm, &zero, |o, i, _| out[o] = xd[i]);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Picks one index along `axis`, removing that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(axis, shape.len())?;
        if index >= shape[axis] {
            return Err(BamError::shape(
                "select",
                format!("index {index} out of range for axis of length {}", shape[axis]),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * len + index) * inner;
            out.extend_from_slice(&xd[base..base + inner]);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Select { x, axis, index }, rg))
    }

    /// Keeps `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(axis, shape.len())?;
        if start + len > shape[axis] {
            return Err(BamError::shape(
                "narrow",
                format!("[{start}, {}) exceeds axis length {}", start + len, shape[axis]),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Narrow { x, axis, start }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| BamError::shape("concat", "no inputs"))?)
            .to_vec();
        check_axis(axis, first.len())?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(BamError::shape(
                    "concat",
                    format!("{s:?} incompatible with {first:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(axis, shape.len())?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &xd[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or(BamError::Axis { axis, rank: self.shape(x).len() })?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Maximum over `axis`, removing it. The gradient goes to the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(axis, shape.len())?;
        let (outer, len, inner) = split_axis(&shape, axis);
        if len == 0 {
            return Err(BamError::shape("max_axis", "empty axis"));
        }
        let xd = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let v = xd[(o * len + a) * inner + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        argmax[o * inner + i] = a;
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MaxAxis { x, axis, argmax }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let s = d.iter().sum::<f64>() / d.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Batch normalization over every axis except `axis`, with per-feature
    /// scale `gamma` and shift `beta`. Training mode also returns the batch
    /// statistics so the caller can update running moments.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        mode: BatchNormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        check_axis(axis, shape.len())?;
        let (outer, c, inner) = split_axis(&shape, axis);
        let check = |len: usize, what: &str| {
            if len != c {
                Err(BamError::shape(
                    "batchnorm",
                    format!("{what} has {len} features, input axis {axis} has {c}"),
                ))
            } else {
                Ok(())
            }
        };
        check(self.value(gamma).numel(), "gamma")?;
        check(self.value(beta).numel(), "beta")?;
        let n = outer * inner;
        let xd = self.value(x).data();
        let idx = |o: usize, f: usize, i: usize| (o * c + f) * inner + i;
        let (mean, var, stats, train) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for f in 0..c {
                    let mut s = 0.0;
                    for o in 0..outer {
                        for i in 0..inner {
                            s += xd[idx(o, f, i)];
                        }
                    }
                    let m = s / n.max(1) as f64;
                    let mut v = 0.0;
                    for o in 0..outer {
                        for i in 0..inner {
                            let d = xd[idx(o, f, i)] - m;
                            v += d * d;
                        }
                    }
                    mean[f] = m;
                    var[f] = v / n.max(1) as f64;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if n > 1 { v * n as f64 / (n - 1) as f64 } else { *v })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats), true)
            }
            BatchNormMode::Eval { mean, var } => {
                check(mean.len(), "running mean")?;
                check(var.len(), "running variance")?;
                (mean.to_vec(), var.to_vec(), None, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for f in 0..c {
                for i in 0..inner {
                    let k = idx(o, f, i);
                    xhat[k] = (xd[k] - mean[f]) * inv_std[f];
                    out[k] = gd[f] * xhat[k] + bd[f];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// 1-D convolution. `x: [N, Cin, L]`, `w: [Cout, Cin, K]`, `b: [Cout]`,
    /// symmetric zero padding `pad`. Output `[N, Cout, (L + 2 pad - K) / stride + 1]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || stride == 0 {
            return Err(BamError::shape(
                "conv1d",
                format!("input {sx:?} against kernel {sw:?} stride {stride}"),
            ));
        }
        let (n, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if len + 2 * pad < k {
            return Err(BamError::TooShort {
                min: k.saturating_sub(2 * pad),
                got: len,
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(BamError::shape("conv1d", "bias length differs from Cout"));
            }
        }
        let lout = (len + 2 * pad - k) / stride + 1;
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let bias = b.map(|b| self.value(b).data());
        let geo = ConvGeometry { cin, len, k, stride, pad, lout };
        let mut out = vec![0.0; n * cout * lout];
        let mut cols = vec![0.0; cin * k * lout];
        for s in 0..n {
            let os = &mut out[s * cout * lout..(s + 1) * cout * lout];
            for co in 0..cout {
                let b0 = bias.map_or(0.0, |bv| bv[co]);
                os[co * lout..(co + 1) * lout].iter_mut().for_each(|v| *v = b0);
            }
            geo.im2col(&xd[s * cin * len..(s + 1) * cin * len], &mut cols);
            gemm_acc(wd, &cols, os, cout, cin * k, lout);
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(vec![n, cout, lout], out)?,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Weighted mean cross-entropy of `logits: [..., C]` against class indices.
    /// Positions with weight 0 are ignored; the mean divides by the weight sum.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let c = *shape.last().ok_or_else(|| BamError::shape("cross_entropy", "rank 0 logits"))?;
        let rows = self.value(logits).numel() / c.max(1);
        if targets.len() != rows || weights.len() != rows {
            return Err(BamError::shape(
                "cross_entropy",
                format!("{rows} rows, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= c) {
            return Err(BamError::InvalidArgument(format!("class {t} out of range for {c} classes")));
        }
        let norm: f64 = weights.iter().sum();
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; ld.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &ld[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            if weights[r] != 0.0 {
                loss += weights[r] * (lse - row[targets[r]]);
            }
        }
        let value = if norm > 0.0 { loss / norm } else { 0.0 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                norm,
            },
            rg,
        ))
    }

    /// Weighted mean binary cross-entropy of `sigmoid(z)` against targets in [0, 1].
    pub fn bce_with_logits(&mut self, z: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let n = self.value(z).numel();
        if targets.len() != n || weights.len() != n {
            return Err(BamError::shape(
                "bce_with_logits",
                format!("{n} logits, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        let norm: f64 = weights.iter().sum();
        let zd = self.value(z).data();
        let mut loss = 0.0;
        for i in 0..n {
            if weights[i] != 0.0 {
                let x = zd[i];
                // max(x,0) - x*y + log(1 + exp(-|x|))
                loss += weights[i] * (x.max(0.0) - x * targets[i] + (-x.abs()).exp().ln_1p());
            }
        }
        let value = if norm > 0.0 { loss / norm } else { 0.0 };
        let rg = self.rg(z);
        Ok(self.push(
            Tensor::scalar(value),
            Op::BceWithLogits {
                z,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                norm,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every node reachable from
    /// `loss` that requires a gradient carries one (see [`Graph::grad`]).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(BamError::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let seed = Tensor::ones(self.shape(loss));
        self.backward_seeded(loss, seed)
    }

    /// Backpropagates `seed` as the gradient of `out`, i.e. differentiates
    /// `sum(seed * out)`.
    pub fn backward_seeded(&mut self, out: Var, seed: Tensor) -> Result<()> {
        if seed.shape() != self.shape(out) {
            return Err(BamError::shape(
                "backward",
                format!("seed {:?} for output {:?}", seed.shape(), self.shape(out)),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.rg(out) {
            return Ok(());
        }
        let loss = out;
        self.nodes[loss.0].grad = Some(seed);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            if self.nodes[id].requires_grad {
                self.backward_node(id, &g)?;
            }
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn send(&mut self, to: Var, delta: &[f64]) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        let node = &mut self.nodes[to.0];
        let shape = node.value.shape().to_vec();
        accumulate(&mut node.grad, &shape, delta);
    }

    /// Reduces a gradient of broadcast shape `out` back to `target` shape.
    fn unbroadcast(&self, g: &Tensor, target: &[usize]) -> Vec<f64> {
        if g.shape() == target {
            return g.data().to_vec();
        }
        let st = broadcast_strides(target, g.shape());
        let zero = vec![0; g.rank()];
        let mut out = vec![0.0; target.iter().product()];
        let gd = g.data();
        for_each_broadcast(g.shape(), &st, &zero, |o, it, _| out[it] += gd[o]);
        out
    }

    fn backward_node(&mut self, id: usize, g: &Tensor) -> Result<()> {
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        let corrupt = self.corrupt.as_deref() == Some(op.name());
        let result = self.backward_op(id, &op, g, corrupt);
        self.nodes[id].op = op;
        result
    }

    fn backward_op(&mut self, id: usize, op: &Op, g: &Tensor, corrupt: bool) -> Result<()> {
        let gd = g.data();
        let fudge = if corrupt { 1.1 } else { 1.0 };
        match op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(*a) {
                    let d = self.unbroadcast(g, &self.shape(*a).to_vec());
                    let d: Vec<f64> = d.iter().map(|v| v * fudge).collect();
                    self.send(*a, &d);
                }
                if self.rg(*b) {
                    let d = self.unbroadcast(g, &self.shape(*b).to_vec());
                    let d: Vec<f64> = d.iter().map(|v| v * sign).collect();
                    self.send(*b, &d);
                }
            }
            Op::Mul(a, b) => {
                let out = g.shape().to_vec();
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (ta, tb) = (broadcast_strides(&sa, &out), broadcast_strides(&sb, &out));
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                for_each_broadcast(&out, &ta, &tb, |o, ia, ib| {
                    ga[ia] += gd[o] * db[ib] * fudge;
                    gb[ib] += gd[o] * da[ia];
                });
                self.send(*a, &ga);
                self.send(*b, &gb);
            }
            Op::Scale(x, k) => {
                let d: Vec<f64> = gd.iter().map(|v| v * k * fudge).collect();
                self.send(*x, &d);
            }
            Op::MatMul(a, b) | Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (bs, m, k, n) = if sa.len() == 2 {
                    (1, sa[0], sa[1], sb[1])
                } else {
                    (sa[0], sa[1], sa[2], sb[2])
                };
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                for i in 0..bs {
                    let gs = &gd[i * m * n..(i + 1) * m * n];
                    if self.rg(*a) {
                        gemm_bt_acc(gs, &db[i * k * n..(i + 1) * k * n], &mut ga[i * m * k..(i + 1) * m * k], m, k, n);
                    }
                    if self.rg(*b) {
                        gemm_at_acc(&da[i * m * k..(i + 1) * m * k], gs, &mut gb[i * k * n..(i + 1) * k * n], m, k, n);
                    }
                }
                if corrupt {
                    ga.iter_mut().for_each(|v| *v *= fudge);
                }
                self.send(*a, &ga);
                self.send(*b, &gb);
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w).to_vec();
                let (out_dim, fan_in) = (sw[0], sw[1]);
                let rows = self.value(*x).numel() / fan_in.max(1);
                if self.rg(*x) {
                    let mut gx = vec![0.0; rows * fan_in];
                    gemm_acc(gd, self.value(*w).data(), &mut gx, rows, out_dim, fan_in);
                    self.send(*x, &gx);
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; out_dim * fan_in];
                    gemm_at_acc(gd, self.value(*x).data(), &mut gw, rows, out_dim, fan_in);
                    if corrupt {
                        gw.iter_mut().for_each(|v| *v *= fudge);
                    }
                    self.send(*w, &gw);
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; out_dim];
                    for r in 0..rows {
                        for o in 0..out_dim {
                            gb[o] += gd[r * out_dim + o];
                        }
                    }
                    self.send(*b, &gb);
                }
            }
            Op::PairTanh { f, w, b } => {
                let sf = self.shape(*f).to_vec();
                let (batch, t, d) = (sf[0], sf[1], sf[2]);
                let o = self.shape(*w)[0];
                let (df, dw) = (self.value(*f).data(), self.value(*w).data());
                let y = self.nodes[id].value.data();
                let mut gf = vec![0.0; df.len()];
                let mut gw = vec![0.0; o * d];
                let mut gb = vec![0.0; o];
                let mut s = vec![0.0; t * d];
                let mut gz = vec![0.0; t * o];
                let mut gs = vec![0.0; t * d];
                for bi in 0..batch {
                    let fb = &df[bi * t * d..(bi + 1) * t * d];
                    for i in 0..t {
                        let n = t - i;
                        for r in 0..n {
                            let j = i + r;
                            let ij = ((bi * t + i) * t + j) * o;
                            let ji = ((bi * t + j) * t + i) * o;
                            for k in 0..o {
                                let up = if j == i { gd[ij + k] } else { gd[ij + k] + gd[ji + k] };
                                gz[r * o + k] = up * (1.0 - y[ij + k] * y[ij + k]);
                                gb[k] += gz[r * o + k];
                            }
                        }
                        pair_rows(fb, i, d, &mut s[..n * d]);
                        gemm_at_acc(&gz[..n * o], &s[..n * d], &mut gw, n, o, d);
                        if self.rg(*f) {
                            gs[..n * d].iter_mut().for_each(|v| *v = 0.0);
                            gemm_acc(&gz[..n * o], dw, &mut gs[..n * d], n, o, d);
                            let base = bi * t * d;
                            for r in 0..n {
                                let j = i + r;
                                for c in 0..d {
                                    let g = gs[r * d + c];
                                    gf[base + i * d + c] += g * fb[j * d + c];
                                    gf[base + j * d + c] += g * fb[i * d + c];
                                }
                            }
                        }
                    }
                }
                if self.rg(*f) {
                    self.send(*f, &gf);
                }
                if self.rg(*w) {
                    if corrupt {
                        gw.iter_mut().for_each(|v| *v *= fudge);
                    }
                    self.send(*w, &gw);
                }
                if self.rg(*b) {
                    self.send(*b, &gb);
                }
            }
            Op::Tanh(x) => {
                let y = self.nodes[id].value.data();
                let d: Vec<f64> = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y) * fudge).collect();
                self.send(*x, &d);
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[id].value.data();
                let d: Vec<f64> = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y) * fudge).collect();
                self.send(*x, &d);
            }
            Op::Selu(x) => {
                let xv = self.value(*x).data();
                let d: Vec<f64> = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| {
                        let slope = if x > 0.0 { SELU_SCALE } else { SELU_SCALE * SELU_ALPHA * x.exp() };
                        g * slope * fudge
                    })
                    .collect();
                self.send(*x, &d);
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[id].value.data();
                let (outer, len, inner) = split_axis(g.shape(), *axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let s: f64 = (0..len).map(|a| y[at(a)] * gd[at(a)]).sum();
                        for a in 0..len {
                            d[at(a)] = y[at(a)] * (gd[at(a)] - s) * fudge;
                        }
                    }
                }
                self.send(*x, &d);
            }
            Op::Reshape(x) => {
                let d: Vec<f64> = gd.iter().map(|v| v * fudge).collect();
                self.send(*x, &d);
            }
            Op::Permute { x, perm } => {
                let src_shape = self.shape(*x).to_vec();
                let src = strides(&src_shape);
                let src_perm: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
                let zero = vec![0; perm.len()];
                let mut d = vec![0.0; gd.len()];
                for_each_broadcast(g.shape(), &src_perm, &zero, |o, i, _| d[i] = gd[o] * fudge);
                self.send(*x, &d);
            }
            Op::Select { x, axis, index } => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let base = (o * len + index) * inner;
                    for i in 0..inner {
                        d[base + i] = gd[o * inner + i] * fudge;
                    }
                }
                self.send(*x, &d);
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, full, inner) = split_axis(&shape, *axis);
                let len = g.shape()[*axis];
                let mut d = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    for k in 0..len * inner {
                        d[dst + k] = gd[o * len * inner + k] * fudge;
                    }
                }
                self.send(*x, &d);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    let mut d = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        for k in 0..len * inner {
                            d[o * len * inner + k] = gd[src + k] * fudge;
                        }
                    }
                    self.send(v, &d);
                    offset += len;
                }
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            d[(o * len + a) * inner + i] = gd[o * inner + i] * fudge;
                        }
                    }
                }
                self.send(*x, &d);
            }
            Op::MaxAxis { x, axis, argmax } => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        d[(o * len + argmax[o * inner + i]) * inner + i] = gd[o * inner + i] * fudge;
                    }
                }
                self.send(*x, &d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.send(*x, &vec![gd[0] * fudge; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.send(*x, &vec![gd[0] * fudge / n.max(1) as f64; n]);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
                train,
            } => {
                let shape = self.shape(*x).to_vec();
                let (outer, c, inner) = split_axis(&shape, *axis);
                let n = (outer * inner) as f64;
                let idx = |o: usize, f: usize, i: usize| (o * c + f) * inner + i;
                let gam = self.value(*gamma).data().to_vec();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for o in 0..outer {
                    for f in 0..c {
                        for i in 0..inner {
                            let k = idx(o, f, i);
                            dgamma[f] += gd[k] * xhat[k];
                            dbeta[f] += gd[k];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for f in 0..c {
                        let scale = gam[f] * inv_std[f];
                        for o in 0..outer {
                            for i in 0..inner {
                                let k = idx(o, f, i);
                                dx[k] = if *train {
                                    scale * (gd[k] - dbeta[f] / n - xhat[k] * dgamma[f] / n)
                                } else {
                                    scale * gd[k]
                                } * fudge;
                            }
                        }
                    }
                    self.send(*x, &dx);
                }
                self.send(*gamma, &dgamma);
                self.send(*beta, &dbeta);
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (sx, sw) = (self.shape(*x).to_vec(), self.shape(*w).to_vec());
                let (n, cin, len) = (sx[0], sx[1], sx[2]);
                let (cout, k) = (sw[0], sw[2]);
                let lout = g.shape()[2];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let need_x = self.rg(*x);
                let mut gx = if need_x { vec![0.0; xd.len()] } else { vec![] };
                let mut gw = vec![0.0; wd.len()];
                let geo = ConvGeometry { cin, len, k, stride: *stride, pad: *pad, lout };
                let mut cols = vec![0.0; cin * k * lout];
                let mut gcols = vec![0.0; cin * k * lout];
                for s in 0..n {
                    let gs = &gd[s * cout * lout..(s + 1) * cout * lout];
                    geo.im2col(&xd[s * cin * len..(s + 1) * cin * len], &mut cols);
                    gemm_bt_acc(gs, &cols, &mut gw, cout, cin * k, lout);
                    if need_x {
                        gcols.iter_mut().for_each(|v| *v = 0.0);
                        gemm_at_acc(wd, gs, &mut gcols, cout, cin * k, lout);
                        geo.col2im_acc(&gcols, &mut gx[s * cin * len..(s + 1) * cin * len]);
                    }
                }
                if corrupt {
                    gw.iter_mut().for_each(|v| *v *= fudge);
                }
                if need_x {
                    self.send(*x, &gx);
                }
                self.send(*w, &gw);
                if let Some(b) = b {
                    let gb: Vec<f64> = (0..cout)
                        .map(|co| {
                            (0..n)
                                .map(|s| gd[(s * cout + co) * lout..(s * cout + co + 1) * lout].iter().sum::<f64>())
                                .sum()
                        })
                        .collect();
                    self.send(*b, &gb);
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                weights,
                norm,
            } => {
                if *norm > 0.0 {
                    let c = *self.shape(*logits).last().unwrap();
                    let mut d = vec![0.0; probs.len()];
                    for (r, (&t, &wt)) in targets.iter().zip(weights).enumerate() {
                        if wt == 0.0 {
                            continue;
                        }
                        let scale = gd[0] * wt / norm * fudge;
                        for j in 0..c {
                            let y = if j == t { 1.0 } else { 0.0 };
                            d[r * c + j] = scale * (probs[r * c + j] - y);
                        }
                    }
                    self.send(*logits, &d);
                }
            }
            Op::BceWithLogits {
                z,
                targets,
                weights,
                norm,
            } => {
                if *norm > 0.0 {
                    let zd = self.value(*z).data();
                    let d: Vec<f64> = zd
                        .iter()
                        .zip(targets)
                        .zip(weights)
                        .map(|((&x, &t), &wt)| gd[0] * wt / norm * (sigmoid(x) - t) * fudge)
                        .collect();
                    self.send(*z, &d);
                }
            }
        }
        Ok(())
    }
}
