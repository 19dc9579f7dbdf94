//! Boundary enhancement (intra-frame residual branch, inter-frame attention,
//! boundary head) and boundary-masked frame attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{BamError, Result};
use crate::fab::{Fab, FrameMask, MaskMode};
use crate::nn::{BatchNorm, Conv1d, Linear, Mode};
use crate::optim::{Bound, ParamStore};
use crate::tensor::Tensor;

const KERNEL: usize = 3;

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv1d,
    bn1: BatchNorm,
    conv2: Conv1d,
    bn2: BatchNorm,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut impl Rng) -> Self {
        ResBlock {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), c, c, KERNEL, 1, 1, rng),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), c, 1),
            conv2: Conv1d::new(store, &format!("{name}.conv2"), c, c, KERNEL, 1, 1, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), c, 1),
        }
    }

    fn forward(&mut self, g: &mut Graph, p: &Bound, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv1.forward(g, p, x)?;
        let h = self.bn1.forward(g, p, h, mode)?;
        let h = g.selu(h);
        let h = self.conv2.forward(g, p, h)?;
        let h = self.bn2.forward(g, p, h, mode)?;
        let h = g.add(h, x)?;
        Ok(g.selu(h))
    }
}

/// Small 1-D ResNet run on every frame's feature vector as a one-channel
/// sequence of length D, pooled over D and projected back to D.
#[derive(Clone, Debug)]
pub struct IntraBranch {
    stem: Conv1d,
    stem_bn: BatchNorm,
    blocks: Vec<ResBlock>,
    fc: Linear,
}

impl IntraBranch {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, channels: usize, rng: &mut impl Rng) -> Self {
        IntraBranch {
            stem: Conv1d::new(store, &format!("{name}.stem"), 1, channels, KERNEL, 1, 1, rng),
            stem_bn: BatchNorm::new(store, &format!("{name}.stem_bn"), channels, 1),
            blocks: (0..2)
                .map(|i| ResBlock::new(store, &format!("{name}.block{i}"), channels, rng))
                .collect(),
            fc: Linear::new(store, &format!("{name}.fc"), channels, dim, true, rng),
        }
    }

    /// `[B, T, D]` to `[B, T, D]`, each frame independently.
    pub fn forward(&mut self, g: &mut Graph, p: &Bound, f: Var, mode: Mode) -> Result<Var> {
        let s = g.shape(f).to_vec();
        if s.len() != 3 {
            return Err(BamError::shape("intra_branch", format!("features {s:?}, want [B, T, D]")));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        if d < KERNEL {
            return Err(BamError::shape("intra_branch", format!("feature dim {d} below kernel {KERNEL}")));
        }
        let x = g.reshape(f, &[b * t, 1, d])?;
        let h = self.stem.forward(g, p, x)?;
        let h = self.stem_bn.forward(g, p, h, mode)?;
        let mut h = g.selu(h);
        for block in &mut self.blocks {
            h = block.forward(g, p, h, mode)?;
        }
        let pooled = g.mean_axis(h, 2)?;
        let y = self.fc.forward(g, p, pooled)?;
        g.reshape(y, &[b, t, d])
    }

    pub fn batchnorms(&self) -> Vec<&BatchNorm> {
        let mut v = vec![&self.stem_bn];
        for b in &self.blocks {
            v.push(&b.bn1);
            v.push(&b.bn2);
        }
        v
    }

    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut v = vec![&mut self.stem_bn];
        for b in &mut self.blocks {
            v.push(&mut b.bn1);
            v.push(&mut b.bn2);
        }
        v
    }
}

/// Which features feed the boundary head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryBranch {
    /// Front-end features directly.
    Fc,
    /// Inter-frame attention only.
    Inter,
    /// Intra-frame residual branch only.
    Intra,
    /// Both branches concatenated.
    #[default]
    Full,
}

impl std::str::FromStr for BoundaryBranch {
    type Err = BamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fc" => Ok(BoundaryBranch::Fc),
            "inter" => Ok(BoundaryBranch::Inter),
            "intra" => Ok(BoundaryBranch::Intra),
            "full" => Ok(BoundaryBranch::Full),
            other => Err(BamError::InvalidArgument(format!("unknown boundary branch {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BeOutput {
    pub f_intra: Option<Var>,
    pub f_inter: Option<Var>,
    pub f_b: Var,
    /// Boundary logits `[B, T]`.
    pub logits: Var,
    /// Boundary probabilities `[B, T]`.
    pub prob: Var,
    /// `SELU(phi'(F_b))`, `[B, T, D]`.
    pub f_be: Var,
}

#[derive(Clone, Debug)]
pub struct BoundaryEnhancement {
    pub branch: BoundaryBranch,
    pub inter: Option<Fab>,
    pub intra: Option<IntraBranch>,
    pub head: Linear,
    pub proj: Linear,
}

impl BoundaryEnhancement {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        intra_channels: usize,
        branch: BoundaryBranch,
        mode: MaskMode,
        rng: &mut impl Rng,
    ) -> Self {
        let inter = matches!(branch, BoundaryBranch::Inter | BoundaryBranch::Full)
            .then(|| Fab::new(store, &format!("{name}.inter"), dim, heads, mode, rng));
        let intra = matches!(branch, BoundaryBranch::Intra | BoundaryBranch::Full)
            .then(|| IntraBranch::new(store, &format!("{name}.intra"), dim, intra_channels, rng));
        let width = if branch == BoundaryBranch::Full { 2 * dim } else { dim };
        BoundaryEnhancement {
            branch,
            inter,
            intra,
            head: Linear::new(store, &format!("{name}.head"), width, 1, true, rng),
            proj: Linear::new(store, &format!("{name}.proj"), width, dim, true, rng),
        }
    }

    /// `keys` masks padded frames out of the inter-frame attention.
    pub fn forward(&mut self, g: &mut Graph, p: &Bound, f: Var, keys: Option<&Tensor>, mode: Mode) -> Result<BeOutput> {
        let f_intra = match &mut self.intra {
            Some(b) => Some(b.forward(g, p, f, mode)?),
            None => None,
        };
        let f_inter = match &mut self.inter {
            Some(fab) => {
                let mask = FrameMask { adjacency: None, keys: keys.cloned() };
                Some(fab.forward(g, p, f, &mask, mode)?)
            }
            None => None,
        };
        let f_b = match (f_intra, f_inter) {
            (Some(a), Some(b)) => g.concat(&[a, b], 2)?,
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => f,
        };
        let s = g.shape(f_b).to_vec();
        let z = self.head.forward(g, p, f_b)?;
        let logits = g.reshape(z, &[s[0], s[1]])?;
        let prob = g.sigmoid(logits);
        let e = self.proj.forward(g, p, f_b)?;
        let f_be = g.selu(e);
        Ok(BeOutput { f_intra, f_inter, f_b, logits, prob, f_be })
    }

    pub fn batchnorms(&self) -> Vec<&BatchNorm> {
        let mut v = Vec::new();
        if let Some(b) = &self.intra {
            v.extend(b.batchnorms());
        }
        if let Some(f) = &self.inter {
            v.push(&f.bn);
        }
        v
    }

    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut v = Vec::new();
        if let Some(b) = &mut self.intra {
            v.extend(b.batchnorms_mut());
        }
        if let Some(f) = &mut self.inter {
            v.push(&mut f.bn);
        }
        v
    }
}

/// `B^[t] = 1` iff `prob[t] >= threshold`.
pub fn binarize(prob: &[f64], threshold: f64) -> Vec<u8> {
    prob.iter().map(|&p| u8::from(p >= threshold)).collect()
}

/// `A[i, j] = prod_{n = min(i,j)}^{max(i,j)} (1 - B^[n])` off the diagonal,
/// 1 on it: a boundary frame is connected only to itself.
pub fn adjacency(boundary: &[u8]) -> Result<Tensor> {
    if let Some(t) = boundary.iter().position(|&b| b > 1) {
        return Err(BamError::InvalidArgument(format!(
            "boundary decision {} at frame {t} is not binary",
            boundary[t]
        )));
    }
    let t = boundary.len();
    let mut prefix = vec![0usize; t + 1];
    for (n, &b) in boundary.iter().enumerate() {
        prefix[n + 1] = prefix[n] + b as usize;
    }
    let mut a = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in 0..t {
            let (lo, hi) = (i.min(j), i.max(j));
            if i == j || prefix[hi + 1] == prefix[lo] {
                a.set(&[i, j], 1.0);
            }
        }
    }
    Ok(a)
}

/// N attention blocks sharing one boundary mask.
#[derive(Clone, Debug)]
pub struct Bfa {
    pub blocks: Vec<Fab>,
}

impl Bfa {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, n: usize, mode: MaskMode, rng: &mut impl Rng) -> Self {
        Bfa {
            blocks: (0..n)
                .map(|i| Fab::new(store, &format!("{name}.block{i}"), dim, heads, mode, rng))
                .collect(),
        }
    }

    pub fn forward(&mut self, g: &mut Graph, p: &Bound, f: Var, mask: &FrameMask, mode: Mode) -> Result<Var> {
        let mut h = f;
        for block in &mut self.blocks {
            h = block.forward(g, p, h, mask, mode)?;
        }
        Ok(h)
    }

    pub fn batchnorms(&self) -> Vec<&BatchNorm> {
        self.blocks.iter().map(|b| &b.bn).collect()
    }

    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm> {
        self.blocks.iter_mut().map(|b| &mut b.bn).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn adjacency_cases() {
        assert_eq!(adjacency(&[0, 0, 0]).unwrap(), Tensor::ones(&[3, 3]));
        let a = adjacency(&[0, 0, 1, 0]).unwrap();
        let want = Tensor::from_rows(&[
            vec![1.0, 1.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert_eq!(a, want);
        assert_eq!(adjacency(&[1, 1]).unwrap(), Tensor::identity(2));
        assert_eq!(adjacency(&[]).unwrap().numel(), 0);
        assert!(adjacency(&[0, 2]).is_err());
    }

    #[test]
    fn binarize_uses_at_or_above() {
        assert_eq!(binarize(&[0.5, 0.49, 0.9], 0.5), vec![1, 0, 1]);
    }

    #[test]
    fn zero_head_gives_half_and_all_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mut be = BoundaryEnhancement::new(&mut store, "be", 4, 1, 2, BoundaryBranch::Full, MaskMode::Exclude, &mut rng);
        *store.get_mut(be.head.w) = Tensor::zeros(&[1, 8]);
        *store.get_mut(be.head.b.unwrap()) = Tensor::zeros(&[1]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(random(&mut rng, &[2, 5, 4]));
        let out = be.forward(&mut g, &p, f, None, Mode::Train).unwrap();
        assert!(g.value(out.prob).data().iter().all(|&v| v == 0.5));
        assert!(binarize(g.value(out.prob).data(), 0.5).iter().all(|&b| b == 1));
        assert_eq!(g.shape(out.f_b), &[2, 5, 8]);
        assert_eq!(g.shape(out.f_be), &[2, 5, 4]);
    }

    #[test]
    fn concat_layout_and_gradients_reach_both_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mut be = BoundaryEnhancement::new(&mut store, "be", 4, 1, 2, BoundaryBranch::Full, MaskMode::Exclude, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(random(&mut rng, &[1, 6, 4]));
        let out = be.forward(&mut g, &p, f, None, Mode::Train).unwrap();
        let fb = g.value(out.f_b).clone();
        let fi = g.value(out.f_intra.unwrap()).clone();
        let fe = g.value(out.f_inter.unwrap()).clone();
        for t in 0..6 {
            for d in 0..4 {
                assert_eq!(fb.get(&[0, t, d]), fi.get(&[0, t, d]));
                assert_eq!(fb.get(&[0, t, 4 + d]), fe.get(&[0, t, d]));
            }
        }
        let loss = g.bce_with_logits(out.logits, &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0], &[1.0; 6]).unwrap();
        g.backward(loss).unwrap();
        let grads = p.grads(&g, &store);
        let norm = |prefix: &str| -> f64 {
            store
                .iter()
                .filter(|(_, prm)| prm.name.starts_with(prefix))
                .map(|(id, _)| grads[id.index()].data().iter().map(|v| v.abs()).sum::<f64>())
                .sum()
        };
        assert!(norm("be.intra.") > 0.0);
        assert!(norm("be.inter.") > 0.0);
    }

    #[test]
    fn intra_branch_is_per_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mut intra = IntraBranch::new(&mut store, "intra", 5, 3, &mut rng);
        let row: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut data = row.clone();
        data.extend(random(&mut rng, &[5]).data());
        data.extend(&row);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(Tensor::new(vec![1, 3, 5], data).unwrap());
        let y = intra.forward(&mut g, &p, f, Mode::Train).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 5]);
        for d in 0..5 {
            assert_eq!(g.value(y).get(&[0, 0, d]), g.value(y).get(&[0, 2, d]));
        }
        let short = g.constant(Tensor::zeros(&[1, 2, 2]));
        let mut store2 = ParamStore::new();
        let mut narrow = IntraBranch::new(&mut store2, "intra", 2, 3, &mut rng);
        let p2 = store2.bind(&mut g);
        assert!(narrow.forward(&mut g, &p2, short, Mode::Train).is_err());
    }

    #[test]
    fn bfa_all_zero_boundaries_match_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mut bfa = Bfa::new(&mut store, "bfa", 4, 1, 2, MaskMode::Exclude, &mut rng);
        let x = random(&mut rng, &[1, 6, 4]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let f = g.constant(x);
        let mask = FrameMask { adjacency: Some(FrameMask::stack(&[adjacency(&[0; 6]).unwrap()]).unwrap()), keys: None };
        let masked = bfa.forward(&mut g, &p, f, &mask, Mode::Eval).unwrap();
        let plain = bfa.forward(&mut g, &p, f, &FrameMask::none(), Mode::Eval).unwrap();
        assert!(g.value(masked).max_abs_diff(g.value(plain)) <= 1e-12);
    }
}
