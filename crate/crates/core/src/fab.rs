//! Frame-wise attention block.
//!
//! Scores between frames `i` and `j` come from the element-wise product of
//! their features, pass through `tanh(phi(.))` and a learnable `D x H`
//! weight, and are normalized over the key axis. Heads are summed after the
//! output projection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{BamError, Result};
use crate::nn::{small_normal, BatchNorm, Linear, Mode};
use crate::optim::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// How a binary frame mask enters the attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Masked keys are left out of the softmax support.
    #[default]
    Exclude,
    /// Softmax over all keys, zero the masked weights, renormalize. Same
    /// values as `Exclude`, computed by exclusion.
    Renormalize,
    /// Scores multiplied by the mask before the softmax, so masked keys keep
    /// weight `exp(0)`.
    Literal,
}

impl std::str::FromStr for MaskMode {
    type Err = BamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exclude" => Ok(MaskMode::Exclude),
            "renormalize" => Ok(MaskMode::Renormalize),
            "literal" => Ok(MaskMode::Literal),
            other => Err(BamError::InvalidArgument(format!("unknown mask mode {other:?}"))),
        }
    }
}

/// Masks over `[B, T(query), T(key), 1]`; 1 = allowed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameMask {
    /// Boundary adjacency.
    pub adjacency: Option<Tensor>,
    /// Valid (unpadded) keys; the diagonal is always allowed.
    pub keys: Option<Tensor>,
}

impl FrameMask {
    pub fn none() -> Self {
        FrameMask::default()
    }

    /// Key mask from per-utterance valid lengths within a batch padded to `t`.
    pub fn from_lengths(lengths: &[usize], t: usize) -> Option<Tensor> {
        if lengths.iter().all(|&l| l >= t) {
            return None;
        }
        let mut m = Tensor::zeros(&[lengths.len(), t, t, 1]);
        for (b, &len) in lengths.iter().enumerate() {
            for i in 0..t {
                for j in 0..t {
                    if j < len || i == j {
                        m.set(&[b, i, j, 0], 1.0);
                    }
                }
            }
        }
        Some(m)
    }

    /// Batch of adjacency matrices `[T, T]` as a `[B, T, T, 1]` mask.
    pub fn stack(mats: &[Tensor]) -> Result<Tensor> {
        let t = mats.first().map_or(0, |m| m.shape()[0]);
        let mut data = Vec::with_capacity(mats.len() * t * t);
        for m in mats {
            if m.shape() != [t, t] {
                return Err(BamError::shape("mask", format!("{:?} in a batch of {t}x{t}", m.shape())));
            }
            data.extend_from_slice(m.data());
        }
        Tensor::new(vec![mats.len(), t, t, 1], data)
    }
}

/// Copy of a `[B, T, T, 1]` mask with every frame allowed to see itself.
fn with_diagonal(m: &Tensor) -> Tensor {
    let mut m = m.clone();
    let (b, t) = (m.shape()[0], m.shape()[1]);
    for k in 0..b {
        for i in 0..t {
            m.set(&[k, i, i, 0], 1.0);
        }
    }
    m
}

fn product(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// `s[b, i, j, :] = F[b, i, :] * F[b, j, :]`, shape `[B, T, T, D]`.
pub fn pairwise_scores(g: &mut Graph, f: Var) -> Result<Var> {
    let s = g.shape(f).to_vec();
    if s.len() != 3 {
        return Err(BamError::shape("pairwise_scores", format!("features {s:?}, want [B, T, D]")));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    let q = g.reshape(f, &[b, t, 1, d])?;
    let k = g.reshape(f, &[b, 1, t, d])?;
    g.mul(q, k)
}

#[derive(Clone, Debug)]
pub struct Fab {
    pub score: Linear,
    /// `D x H`.
    pub w_a: ParamId,
    pub out_a: Linear,
    pub out_g: Linear,
    pub bn: BatchNorm,
    pub heads: usize,
    pub mode: MaskMode,
}

impl Fab {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mode: MaskMode,
        rng: &mut impl Rng,
    ) -> Self {
        Fab {
            score: Linear::new(store, &format!("{name}.score"), dim, dim, true, rng),
            w_a: store.add(format!("{name}.w_a"), small_normal(rng, &[dim, heads], 0.02)),
            out_a: Linear::new(store, &format!("{name}.out_a"), dim, dim, true, rng),
            out_g: Linear::new(store, &format!("{name}.out_g"), dim, dim, true, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), dim, 2),
            heads,
            mode,
        }
    }

    /// `A = tanh(phi(s)) W_a`, shape `[B, T, T, H]`.
    pub fn attention_map(&self, g: &mut Graph, p: &Bound, s: Var) -> Result<Var> {
        let shape = g.shape(s).to_vec();
        let d = shape[3];
        let h = self.score.forward(g, p, s)?;
        let h = g.tanh(h);
        let flat = g.reshape(h, &[shape[0] * shape[1] * shape[2], d])?;
        let a = g.matmul(flat, p[self.w_a])?;
        g.reshape(a, &[shape[0], shape[1], shape[2], self.heads])
    }

    /// Same map as `attention_map` over `pairwise_scores(f)`, computed once
    /// per unordered frame pair.
    pub fn attention_from_features(&self, g: &mut Graph, p: &Bound, f: Var) -> Result<Var> {
        let shape = g.shape(f).to_vec();
        let bias = self.score.b.ok_or_else(|| BamError::shape("fab", "score layer without bias".to_string()))?;
        let h = g.pair_tanh(f, p[self.score.w], p[bias])?;
        let flat = g.reshape(h, &[shape[0] * shape[1] * shape[1], shape[2]])?;
        let a = g.matmul(flat, p[self.w_a])?;
        g.reshape(a, &[shape[0], shape[1], shape[1], self.heads])
    }

    /// Softmax weights over keys, `[B, T, T, H]`.
    pub fn weights(&self, g: &mut Graph, a: Var, mask: &FrameMask) -> Result<Var> {
        let (a, support) = match (self.mode, &mask.adjacency, &mask.keys) {
            (MaskMode::Literal, Some(adj), keys) => {
                let m = g.constant(adj.clone());
                (g.mul(a, m)?, keys.clone())
            }
            (_, Some(adj), Some(keys)) => (a, Some(product(adj, keys))),
            (_, adj, keys) => (a, adj.clone().or_else(|| keys.clone())),
        };
        g.softmax(a, 2, support.map(|m| with_diagonal(&m)).as_ref())
    }

    /// Per-head aggregation `F_a[h] = W[:, :, :, h] F`, each `[B, T, D]`.
    pub fn aggregate(&self, g: &mut Graph, w: Var, f: Var) -> Result<Vec<Var>> {
        (0..self.heads)
            .map(|h| {
                let wh = g.select(w, 3, h)?;
                g.bmm(wh, f)
            })
            .collect()
    }

    pub fn forward_with_weights(
        &mut self,
        g: &mut Graph,
        p: &Bound,
        f: Var,
        mask: &FrameMask,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let a = self.attention_from_features(g, p, f)?;
        let w = self.weights(g, a, mask)?;
        let mut acc = self.out_g.forward(g, p, f)?;
        for fa in self.aggregate(g, w, f)? {
            let proj = self.out_a.forward(g, p, fa)?;
            acc = g.add(acc, proj)?;
        }
        let y = self.bn.forward(g, p, acc, mode)?;
        Ok((g.selu(y), w))
    }

    pub fn forward(&mut self, g: &mut Graph, p: &Bound, f: Var, mask: &FrameMask, mode: Mode) -> Result<Var> {
        Ok(self.forward_with_weights(g, p, f, mask, mode)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::SELU_ALPHA;
    use crate::nn::BN_EPS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn fab(d: usize, h: usize, mode: MaskMode) -> (ParamStore, Fab) {
        let mut store = ParamStore::new();
        let f = Fab::new(&mut store, "fab", d, h, mode, &mut ChaCha8Rng::seed_from_u64(1));
        (store, f)
    }

    #[test]
    fn scores_symmetric_and_orthogonal() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let s = pairwise_scores(&mut g, f).unwrap();
        assert_eq!(g.shape(s), &[1, 2, 2, 2]);
        assert_eq!(g.value(s).get(&[0, 0, 1, 0]), 0.0);
        assert_eq!(g.value(s).get(&[0, 0, 1, 1]), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = g.constant(random(&mut rng, &[2, 5, 3]));
        let s = pairwise_scores(&mut g, f).unwrap();
        let v = g.value(s);
        for b in 0..2 {
            for i in 0..5 {
                for j in 0..5 {
                    for d in 0..3 {
                        assert_eq!(v.get(&[b, i, j, d]), v.get(&[b, j, i, d]));
                    }
                }
            }
        }
    }

    #[test]
    fn zero_w_a_gives_uniform_mean() {
        let (mut store, fab) = fab(3, 1, MaskMode::Exclude);
        *store.get_mut(fab.w_a) = Tensor::zeros(&[3, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, &[1, 4, 3]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(x.clone());
        let s = pairwise_scores(&mut g, f).unwrap();
        let a = fab.attention_map(&mut g, &p, s).unwrap();
        assert!(g.value(a).data().iter().all(|&v| v == 0.0));
        let w = fab.weights(&mut g, a, &FrameMask::none()).unwrap();
        let fa = fab.aggregate(&mut g, w, f).unwrap()[0];
        for d in 0..3 {
            let mean: f64 = (0..4).map(|t| x.get(&[0, t, d])).sum::<f64>() / 4.0;
            for i in 0..4 {
                assert!((g.value(fa).get(&[0, i, d]) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identity_mask_copies_frames_and_weights_are_exact() {
        let (store, fab) = fab(4, 2, MaskMode::Exclude);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[2, 5, 4]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(x.clone());
        let s = pairwise_scores(&mut g, f).unwrap();
        let a = fab.attention_map(&mut g, &p, s).unwrap();
        let eye = FrameMask::stack(&[Tensor::identity(5), Tensor::identity(5)]).unwrap();
        let mask = FrameMask { adjacency: Some(eye), keys: None };
        let w = fab.weights(&mut g, a, &mask).unwrap();
        for fa in fab.aggregate(&mut g, w, f).unwrap() {
            assert_eq!(g.value(fa), &x);
        }

        let block = Tensor::from_rows(&[
            vec![1.0, 1.0, 0.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0, 1.0],
            vec![0.0, 0.0, 0.0, 1.0, 1.0],
        ])
        .unwrap();
        let mask = FrameMask { adjacency: Some(FrameMask::stack(&[block.clone(), block.clone()]).unwrap()), keys: None };
        let w = fab.weights(&mut g, a, &mask).unwrap();
        let wv = g.value(w);
        for b in 0..2 {
            for i in 0..5 {
                for h in 0..2 {
                    let sum: f64 = (0..5).map(|j| wv.get(&[b, i, j, h])).sum();
                    assert!((sum - 1.0).abs() <= 1e-12);
                    for j in 0..5 {
                        if block.get(&[i, j]) == 0.0 {
                            assert_eq!(wv.get(&[b, i, j, h]), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn fused_map_matches_unfused() {
        let (mut store, fab) = fab(4, 2, MaskMode::Exclude);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = random(&mut rng, &shape);
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(random(&mut rng, &[2, 5, 4]));
        let s = pairwise_scores(&mut g, f).unwrap();
        let slow = fab.attention_map(&mut g, &p, s).unwrap();
        let fast = fab.attention_from_features(&mut g, &p, f).unwrap();
        assert!(g.value(slow).max_abs_diff(g.value(fast)) < 1e-12);
    }

    #[test]
    fn all_ones_mask_matches_unmasked() {
        let (store, fab) = fab(3, 1, MaskMode::Exclude);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(random(&mut rng, &[1, 6, 3]));
        let s = pairwise_scores(&mut g, f).unwrap();
        let a = fab.attention_map(&mut g, &p, s).unwrap();
        let w0 = fab.weights(&mut g, a, &FrameMask::none()).unwrap();
        let ones = FrameMask { adjacency: Some(Tensor::ones(&[1, 6, 6, 1])), keys: None };
        let w1 = fab.weights(&mut g, a, &ones).unwrap();
        assert!(g.value(w0).max_abs_diff(g.value(w1)) <= 1e-12);
    }

    #[test]
    fn literal_mode_keeps_masked_keys() {
        let (store, fab) = fab(3, 1, MaskMode::Literal);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(random(&mut rng, &[1, 3, 3]));
        let s = pairwise_scores(&mut g, f).unwrap();
        let a = fab.attention_map(&mut g, &p, s).unwrap();
        let mask = FrameMask { adjacency: Some(FrameMask::stack(&[Tensor::identity(3)]).unwrap()), keys: None };
        let w = fab.weights(&mut g, a, &mask).unwrap();
        assert!(g.value(w).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn identity_maps_give_selu_of_doubled_input() {
        let d = 3;
        let (mut store, mut fab) = fab(d, 1, MaskMode::Exclude);
        for lin in [&fab.out_a, &fab.out_g] {
            *store.get_mut(lin.w) = Tensor::identity(d);
            *store.get_mut(lin.b.unwrap()) = Tensor::zeros(&[d]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, &[1, 4, d]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(x.clone());
        let mask = FrameMask { adjacency: Some(FrameMask::stack(&[Tensor::identity(4)]).unwrap()), keys: None };
        let y = fab.forward(&mut g, &p, f, &mask, Mode::Eval).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        for (out, inp) in g.value(y).data().iter().zip(x.data()) {
            let z = 2.0 * inp * scale;
            let want = if z > 0.0 { z } else { SELU_ALPHA * (z.exp() - 1.0) } * crate::autograd::SELU_SCALE;
            assert!((out - want).abs() < 1e-14, "{out} vs {want}");
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in 1..=8 {
            for d in 2..=8 {
                let (store, mut fab) = fab(d, 1, MaskMode::Exclude);
                let mut g = Graph::new();
                let p = store.bind(&mut g);
                let f = g.constant(random(&mut rng, &[1, t, d]));
                let y = fab.forward(&mut g, &p, f, &FrameMask::none(), Mode::Train).unwrap();
                assert_eq!(g.shape(y), &[1, t, d]);
            }
        }
    }

    #[test]
    fn key_padding_excludes_padded_frames() {
        let keys = FrameMask::from_lengths(&[2, 3], 3).unwrap();
        assert_eq!(keys.get(&[0, 0, 2, 0]), 0.0);
        assert_eq!(keys.get(&[0, 2, 2, 0]), 1.0);
        assert_eq!(keys.get(&[1, 0, 2, 0]), 1.0);
        assert!(FrameMask::from_lengths(&[3, 3], 3).is_none());
    }

    #[test]
    fn permutation_equivariance() {
        let (store, mut fab) = fab(3, 1, MaskMode::Exclude);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&mut rng, &[1, 5, 3]);
        let adj = Tensor::from_rows(&[
            vec![1.0, 1.0, 0.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0, 1.0],
            vec![0.0, 0.0, 0.0, 1.0, 1.0],
        ])
        .unwrap();
        let perm = [3, 0, 4, 2, 1];
        let mut xp = Tensor::zeros(&[1, 5, 3]);
        let mut ap = Tensor::zeros(&[5, 5]);
        for (i, &pi) in perm.iter().enumerate() {
            for d in 0..3 {
                xp.set(&[0, i, d], x.get(&[0, pi, d]));
            }
            for (j, &pj) in perm.iter().enumerate() {
                ap.set(&[i, j], adj.get(&[pi, pj]));
            }
        }
        let mut run = |x: &Tensor, a: &Tensor| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let f = g.constant(x.clone());
            let mask = FrameMask { adjacency: Some(FrameMask::stack(&[a.clone()]).unwrap()), keys: None };
            let y = fab.forward(&mut g, &p, f, &mask, Mode::Train).unwrap();
            g.value(y).clone()
        };
        let y = run(&x, &adj);
        let yp = run(&xp, &ap);
        for (i, &pi) in perm.iter().enumerate() {
            for d in 0..3 {
                assert!((yp.get(&[0, i, d]) - y.get(&[0, pi, d])).abs() < 1e-12);
            }
        }
    }
}
