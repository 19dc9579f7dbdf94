//! Front-end: a strided convolutional waveform encoder, or external feature
//! files, followed by pooling down to the frame resolution.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::data::FeatureFile;
use crate::error::{BamError, Result};
use crate::nn::{Conv1d, Linear};
use crate::optim::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Two strided convolutions with SELU. The first one has kernel = stride =
/// `hop / sub`, the second kernel = stride = `sub`, so the receptive field
/// equals the hop and frames do not overlap.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub hop: usize,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        hop: usize,
        sub: usize,
        channels: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if sub == 0 || hop % sub != 0 || hop < sub {
            return Err(BamError::InvalidArgument(format!(
                "hop of {hop} samples is not divisible into sub-stride {sub}"
            )));
        }
        let k1 = hop / sub;
        Ok(Encoder {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), 1, channels, k1, k1, 0, rng),
            conv2: Conv1d::new(store, &format!("{name}.conv2"), channels, dim, sub, sub, 0, rng),
            hop,
        })
    }

    pub fn receptive_field(&self) -> usize {
        self.hop
    }

    /// Output frame count for an `len`-sample input.
    pub fn frames(&self, len: usize) -> usize {
        if len < self.receptive_field() {
            0
        } else {
            (len - self.receptive_field()) / self.hop + 1
        }
    }

    /// `wave: [B, L]` to `[B, T, D]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, wave: Var) -> Result<Var> {
        let s = g.shape(wave).to_vec();
        if s.len() != 2 {
            return Err(BamError::shape("encode", format!("waveform batch {s:?}, want [B, L]")));
        }
        if s[1] < self.receptive_field() {
            return Err(BamError::TooShort { min: self.receptive_field(), got: s[1] });
        }
        let x = g.reshape(wave, &[s[0], 1, s[1]])?;
        let h = self.conv1.forward(g, p, x)?;
        let h = g.selu(h);
        let h = self.conv2.forward(g, p, h)?;
        let h = g.selu(h);
        g.permute(h, &[0, 2, 1])
    }
}

/// Frames per pooled output: `T / stride` full windows, or one window of
/// everything when `T < stride`.
pub fn pooled_frames(t_in: usize, stride: usize) -> usize {
    if t_in == 0 {
        0
    } else {
        (t_in / stride).max(1)
    }
}

fn windows(g: &mut Graph, x: Var, stride: usize) -> Result<(Var, usize, usize)> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || stride == 0 {
        return Err(BamError::shape("pool", format!("input {s:?} with stride {stride}")));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    if t == 0 {
        return Err(BamError::TooShort { min: 1, got: 0 });
    }
    let (frames, width) = if t < stride { (1, t) } else { (t / stride, stride) };
    let x = if frames * width < t { g.narrow(x, 1, 0, frames * width)? } else { x };
    Ok((g.reshape(x, &[b, frames, width, d])?, frames, width))
}

/// Learned convex weighting within non-overlapping windows:
/// `e = v . tanh(W h + b)`, softmax over the window, weighted mean.
#[derive(Clone, Debug)]
pub struct AttentivePool {
    pub proj: Linear,
    pub score: Linear,
}

impl AttentivePool {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        AttentivePool {
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true, rng),
            score: Linear::new(store, &format!("{name}.score"), dim, 1, false, rng),
        }
    }

    /// Window weights `[B, T_out, stride, 1]` and pooled output `[B, T_out, D]`.
    pub fn forward_weights(&self, g: &mut Graph, p: &Bound, x: Var, stride: usize) -> Result<(Var, Var)> {
        let (w, _, _) = windows(g, x, stride)?;
        let e = self.proj.forward(g, p, w)?;
        let e = g.tanh(e);
        let e = self.score.forward(g, p, e)?;
        let a = g.softmax(e, 2, None)?;
        let weighted = g.mul(w, a)?;
        Ok((a, g.sum_axis(weighted, 2)?))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, stride: usize) -> Result<Var> {
        Ok(self.forward_weights(g, p, x, stride)?.1)
    }
}

/// Window-wise max, the pooling of the baseline model.
pub fn max_pool(g: &mut Graph, x: Var, stride: usize) -> Result<Var> {
    let (w, _, _) = windows(g, x, stride)?;
    g.max_axis(w, 2)
}

/// An external feature file as a `[1, T, D]` tensor.
pub fn feature_tensor(ff: &FeatureFile) -> Result<Tensor> {
    Tensor::new(
        vec![1, ff.frames, ff.dim],
        ff.values.iter().map(|&v| v as f64).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn encoder_frame_count_and_constant_input() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", 160, 4, 4, 6, &mut rng()).unwrap();
        for len in [160, 161, 319, 320, 1000] {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = g.constant(Tensor::zeros(&[1, len]));
            let y = enc.forward(&mut g, &p, x).unwrap();
            assert_eq!(g.shape(y), &[1, (len - 160) / 160 + 1, 6]);
            assert_eq!(enc.frames(len), (len - 160) / 160 + 1);
            let v = g.value(y);
            let frames = g.shape(y)[1];
            for t in 1..frames {
                for d in 0..6 {
                    assert_eq!(v.get(&[0, t, d]), v.get(&[0, 0, d]));
                }
            }
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 159]));
        assert!(matches!(enc.forward(&mut g, &p, x), Err(BamError::TooShort { min: 160, got: 159 })));
    }

    #[test]
    fn pool_stride_one_is_identity() {
        let mut store = ParamStore::new();
        let pool = AttentivePool::new(&mut store, "pool", 3, &mut rng());
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = Tensor::new(vec![1, 4, 3], (0..12).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let xv = g.constant(x.clone());
        let y = pool.forward(&mut g, &p, xv, 1).unwrap();
        assert_eq!(g.value(y).max_abs_diff(&x), 0.0);
    }

    #[test]
    fn pool_identical_frames_and_weight_sums() {
        let mut store = ParamStore::new();
        let pool = AttentivePool::new(&mut store, "pool", 2, &mut rng());
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let rows: Vec<f64> = (0..9).flat_map(|_| [0.7, -0.2]).collect();
        let x = g.constant(Tensor::new(vec![1, 9, 2], rows).unwrap());
        let (a, y) = pool.forward_weights(&mut g, &p, x, 4).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2]);
        for t in 0..2 {
            assert!((g.value(y).get(&[0, t, 0]) - 0.7).abs() < 1e-15);
            assert!((g.value(y).get(&[0, t, 1]) + 0.2).abs() < 1e-15);
            let s: f64 = (0..4).map(|k| g.value(a).get(&[0, t, k, 0])).sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn short_input_is_one_window() {
        assert_eq!(pooled_frames(3, 8), 1);
        assert_eq!(pooled_frames(17, 8), 2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3, 1], vec![1.0, 5.0, 2.0]).unwrap());
        let y = max_pool(&mut g, x, 8).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
    }

    #[test]
    fn feature_file_to_tensor() {
        let ff = FeatureFile { frames: 2, dim: 3, values: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0] };
        let t = feature_tensor(&ff).unwrap();
        assert_eq!(t.shape(), &[1, 2, 3]);
        assert_eq!(t.get(&[0, 1, 0]), 3.0);
    }
}
