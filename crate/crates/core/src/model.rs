//! Model assembly: front-end, boundary enhancement, boundary-masked
//! attention and the frame decision head, plus the joint loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::boundary::{adjacency, binarize, Bfa, BoundaryEnhancement};
use crate::config::{FrontendKind, ModelConfig, Variant};
use crate::error::{BamError, Result};
use crate::fab::FrameMask;
use crate::frontend::{max_pool, pooled_frames, AttentivePool, Encoder};
use crate::labels::FrameLabelSet;
use crate::nn::{BatchNorm, Linear, Mode};
use crate::optim::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Frontend {
    Waveform(Encoder),
    /// Optional projection from the file width to `d_model`.
    Features(Option<Linear>),
}

#[derive(Clone, Debug)]
pub struct Bam {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    frontend: Frontend,
    pool: Option<AttentivePool>,
    pub be: Option<BoundaryEnhancement>,
    pub attn: Option<Bfa>,
    pub head: Linear,
}

/// Graph outputs of one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, T, 2]`; class 1 is spoof.
    pub logits: Var,
    /// Boundary logits `[B, T]` when the variant has a boundary head.
    pub boundary_logits: Option<Var>,
    pub boundary_prob: Option<Var>,
    /// Binarized boundaries per utterance, as used for the mask.
    pub boundary_decisions: Option<Vec<Vec<u8>>>,
    pub frames: usize,
}

/// Per-utterance prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePrediction {
    /// `[T, 2]`.
    pub logits: Tensor,
    /// Spoof probability per frame.
    pub y_hat: Vec<f64>,
    pub b_prob: Option<Vec<f64>>,
    pub b_hat: Option<Vec<u8>>,
}

impl Bam {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let frontend = match cfg.frontend {
            FrontendKind::Waveform => Frontend::Waveform(Encoder::new(
                &mut store,
                "encoder",
                cfg.hop_samples(),
                cfg.encoder_substride,
                cfg.encoder_channels,
                d,
                &mut rng,
            )?),
            FrontendKind::Features => Frontend::Features(
                (cfg.feature_dim != d)
                    .then(|| Linear::new(&mut store, "input_proj", cfg.feature_dim, d, true, &mut rng)),
            ),
        };
        let pool = (cfg.variant != Variant::Baseline).then(|| AttentivePool::new(&mut store, "pool", d, &mut rng));
        let be = cfg.variant.has_boundary_head().then(|| {
            BoundaryEnhancement::new(
                &mut store,
                "be",
                d,
                cfg.heads,
                cfg.intra_channels,
                cfg.boundary_branch,
                cfg.mask_mode,
                &mut rng,
            )
        });
        let attn = (cfg.variant != Variant::Baseline)
            .then(|| Bfa::new(&mut store, "bfa", d, cfg.heads, cfg.blocks, cfg.mask_mode, &mut rng));
        let head_in = if cfg.variant.has_boundary_head() { 2 * d } else { d };
        let head = Linear::new(&mut store, "decision", head_in, 2, true, &mut rng);
        Ok(Bam { cfg: cfg.clone(), store, frontend, pool, be, attn, head })
    }

    /// Output frames for an input of `len` samples (or feature frames).
    pub fn output_frames(&self, len: usize) -> usize {
        let t_in = match &self.frontend {
            Frontend::Waveform(enc) => enc.frames(len),
            Frontend::Features(_) => len,
        };
        pooled_frames(t_in, self.cfg.stride)
    }

    /// Smallest input length producing one frame.
    pub fn min_input_len(&self) -> usize {
        match &self.frontend {
            Frontend::Waveform(enc) => enc.receptive_field(),
            Frontend::Features(_) => 1,
        }
    }

    /// Names of the boundary head's parameters.
    pub fn boundary_head_params(&self) -> Vec<String> {
        self.be.as_ref().map_or_else(Vec::new, |be| {
            let mut v = vec![self.store.name(be.head.w).to_string()];
            v.extend(be.head.b.map(|b| self.store.name(b).to_string()));
            v
        })
    }

    pub fn batchnorms(&self) -> Vec<&BatchNorm> {
        let mut v = Vec::new();
        if let Some(be) = &self.be {
            v.extend(be.batchnorms());
        }
        if let Some(a) = &self.attn {
            v.extend(a.batchnorms());
        }
        v
    }

    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut v = Vec::new();
        if let Some(be) = &mut self.be {
            v.extend(be.batchnorms_mut());
        }
        if let Some(a) = &mut self.attn {
            v.extend(a.batchnorms_mut());
        }
        v
    }

    /// Frame features `F_g` before pooling, `[B, T_in, D]`.
    fn encode(&self, g: &mut Graph, p: &Bound, input: Var) -> Result<Var> {
        match &self.frontend {
            Frontend::Waveform(enc) => enc.forward(g, p, input),
            Frontend::Features(proj) => {
                let s = g.shape(input).to_vec();
                if s.len() != 3 || s[2] != self.cfg.feature_dim {
                    return Err(BamError::shape(
                        "features",
                        format!("input {s:?}, want [B, T, {}]", self.cfg.feature_dim),
                    ));
                }
                if s[1] == 0 {
                    return Err(BamError::TooShort { min: 1, got: 0 });
                }
                match proj {
                    Some(l) => l.forward(g, p, input),
                    None => Ok(input),
                }
            }
        }
    }

    /// Batched forward. `input` is `[B, L]` waveforms or `[B, T, F]`
    /// features; `lengths` are valid output frames per item (padding beyond
    /// is masked out of attention); `truth` supplies ground-truth boundaries
    /// for teacher forcing.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        p: &Bound,
        input: &Tensor,
        lengths: Option<&[usize]>,
        truth: Option<&[Vec<u8>]>,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let batch = input.shape().first().copied().unwrap_or(0);
        let len = input.shape().get(1).copied().unwrap_or(0);
        if len < self.min_input_len() {
            return Err(BamError::TooShort { min: self.min_input_len(), got: len });
        }
        let x = g.constant(input.clone());
        let fg = self.encode(g, p, x)?;
        let stride = self.cfg.stride;
        if self.cfg.variant == Variant::Baseline {
            let pooled = max_pool(g, fg, stride)?;
            let frames = g.shape(pooled)[1];
            let logits = self.head.forward(g, p, pooled)?;
            return Ok(ForwardOutput { logits, boundary_logits: None, boundary_prob: None, boundary_decisions: None, frames });
        }
        let fg = self.pool.as_ref().expect("attentive pool").forward(g, p, fg, stride)?;
        let frames = g.shape(fg)[1];
        let keys = lengths.and_then(|l| FrameMask::from_lengths(l, frames));
        let be = match &mut self.be {
            Some(be) => Some(be.forward(g, p, fg, keys.as_ref(), mode)?),
            None => None,
        };
        let mut mask = FrameMask { adjacency: None, keys };
        let mut decisions = None;
        if let Some(out) = &be {
            let frozen = g.stop_gradient(out.prob);
            let probs = g.value(frozen).data();
            let predicted: Vec<Vec<u8>> = (0..batch)
                .map(|b| binarize(&probs[b * frames..(b + 1) * frames], self.cfg.threshold))
                .collect();
            if self.cfg.variant == Variant::BfaBe {
                let used = match (self.cfg.teacher_forcing && mode == Mode::Train, truth) {
                    (true, Some(t)) => t.to_vec(),
                    _ => predicted.clone(),
                };
                let mats = used.iter().map(|b| adjacency(b)).collect::<Result<Vec<_>>>()?;
                mask.adjacency = Some(FrameMask::stack(&mats)?);
            }
            decisions = Some(predicted);
        }
        let h = self.attn.as_mut().expect("attention blocks").forward(g, p, fg, &mask, mode)?;
        let decision_in = match &be {
            Some(out) => g.concat(&[h, out.f_be], 2)?,
            None => h,
        };
        let logits = self.head.forward(g, p, decision_in)?;
        Ok(ForwardOutput {
            logits,
            boundary_logits: be.as_ref().map(|o| o.logits),
            boundary_prob: be.as_ref().map(|o| o.prob),
            boundary_decisions: decisions,
            frames,
        })
    }

    /// Inference on one utterance at full length with frozen parameters.
    pub fn predict(&mut self, input: &Tensor) -> Result<FramePrediction> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let mut shape = vec![1];
        shape.extend_from_slice(input.shape());
        let batched = input.reshape(&shape)?;
        let out = self.forward(&mut g, &p, &batched, None, None, Mode::Eval)?;
        let t = out.frames;
        let logits = g.value(out.logits).reshape(&[t, 2])?;
        let y_hat = (0..t)
            .map(|i| {
                let (a, b) = (logits.get(&[i, 0]), logits.get(&[i, 1]));
                let m = a.max(b);
                let (ea, eb) = ((a - m).exp(), (b - m).exp());
                eb / (ea + eb)
            })
            .collect();
        Ok(FramePrediction {
            logits,
            y_hat,
            b_prob: out.boundary_prob.map(|v| g.value(v).data().to_vec()),
            b_hat: out.boundary_decisions.map(|mut d| d.remove(0)),
        })
    }
}

/// Loss terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub authenticity: f64,
    pub boundary: f64,
}

/// `L = L_s + lambda L_b`, each a mean over valid frames. Labels shorter
/// than the output are padding: their frames get weight 0.
pub fn total_loss(g: &mut Graph, out: &ForwardOutput, labels: &[FrameLabelSet], lambda: f64) -> Result<LossTerms> {
    let t = out.frames;
    let batch = g.shape(out.logits)[0];
    if labels.len() != batch {
        return Err(BamError::shape("loss", format!("{} label sets for a batch of {batch}", labels.len())));
    }
    let mut y = vec![0usize; batch * t];
    let mut bt = vec![0.0; batch * t];
    let mut w = vec![0.0; batch * t];
    for (b, l) in labels.iter().enumerate() {
        if l.frames() > t {
            return Err(BamError::shape("loss", format!("{} labels for {t} predicted frames", l.frames())));
        }
        for i in 0..l.frames() {
            y[b * t + i] = l.y[i] as usize;
            bt[b * t + i] = l.b[i] as f64;
            w[b * t + i] = 1.0;
        }
    }
    let flat = g.reshape(out.logits, &[batch * t, 2])?;
    let ls = g.cross_entropy(flat, &y, &w)?;
    let authenticity = g.value(ls).item();
    match out.boundary_logits {
        Some(z) => {
            let lb = g.bce_with_logits(z, &bt, &w)?;
            let boundary = g.value(lb).item();
            let scaled = g.scale(lb, lambda);
            let total = g.add(ls, scaled)?;
            Ok(LossTerms { total, authenticity, boundary })
        }
        None => Ok(LossTerms { total: ls, authenticity, boundary: 0.0 }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::BoundaryBranch;
    use crate::config::BamConfig;
    use rand::Rng;

    fn wave(len: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![len], (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap()
    }

    #[test]
    fn four_seconds_give_25_frames() {
        let cfg = BamConfig::desk().model;
        let mut m = Bam::new(&cfg, 1).unwrap();
        assert_eq!(m.output_frames(32000), 25);
        let pred = m.predict(&wave(32000, 2)).unwrap();
        assert_eq!(pred.y_hat.len(), 25);
        assert_eq!(pred.b_prob.as_ref().unwrap().len(), 25);
        for i in 0..25 {
            let a = pred.logits.get(&[i, 0]);
            let b = pred.logits.get(&[i, 1]);
            let genuine = 1.0 / (1.0 + (b - a).exp());
            assert!((genuine + pred.y_hat[i] - 1.0).abs() <= 1e-12);
            assert!(pred.y_hat[i] > 0.0 && pred.y_hat[i] < 1.0);
        }
        assert_eq!(m.predict(&wave(32000, 2)).unwrap(), pred);
    }

    #[test]
    fn every_variant_and_branch_runs() {
        for v in Variant::ALL {
            for br in [BoundaryBranch::Fc, BoundaryBranch::Inter, BoundaryBranch::Intra, BoundaryBranch::Full] {
                let mut cfg = BamConfig::desk().model;
                cfg.variant = v;
                cfg.boundary_branch = br;
                cfg.d_model = 6;
                let mut m = Bam::new(&cfg, 3).unwrap();
                let pred = m.predict(&wave(4000, 4)).unwrap();
                assert_eq!(pred.y_hat.len(), 3);
                assert_eq!(pred.b_prob.is_some(), v.has_boundary_head());
            }
        }
    }

    #[test]
    fn too_short_input_rejected() {
        let mut m = Bam::new(&BamConfig::desk().model, 1).unwrap();
        assert!(matches!(m.predict(&wave(100, 1)), Err(BamError::TooShort { min: 160, got: 100 })));
        assert_eq!(m.predict(&wave(160, 1)).unwrap().y_hat.len(), 1);
    }

    #[test]
    fn loss_hand_values() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 3, 2]));
        let out = ForwardOutput { logits, boundary_logits: None, boundary_prob: None, boundary_decisions: None, frames: 3 };
        let labels = [FrameLabelSet { resolution_ms: 160, y: vec![0, 1, 1], b: vec![0, 1, 0] }];
        let l = total_loss(&mut g, &out, &labels, 0.5).unwrap();
        assert!((l.authenticity - std::f64::consts::LN_2).abs() < 1e-15);

        // confident and correct
        let logits = g.constant(Tensor::new(vec![1, 2, 2], vec![40.0, -40.0, -40.0, 40.0]).unwrap());
        let z = g.constant(Tensor::new(vec![1, 2], vec![-40.0, 40.0]).unwrap());
        let out = ForwardOutput { logits, boundary_logits: Some(z), boundary_prob: None, boundary_decisions: None, frames: 2 };
        let labels = [FrameLabelSet { resolution_ms: 160, y: vec![0, 1], b: vec![0, 1] }];
        let l = total_loss(&mut g, &out, &labels, 0.5).unwrap();
        assert!(g.value(l.total).item() < 1e-15);

        let bad = [FrameLabelSet { resolution_ms: 160, y: vec![0; 3], b: vec![0; 3] }];
        assert!(total_loss(&mut g, &out, &bad, 0.5).is_err());
    }

    #[test]
    fn loss_combines_with_lambda() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 1, 2]));
        let z = g.constant(Tensor::zeros(&[1, 1]));
        let out = ForwardOutput { logits, boundary_logits: Some(z), boundary_prob: None, boundary_decisions: None, frames: 1 };
        let labels = [FrameLabelSet { resolution_ms: 160, y: vec![1], b: vec![1] }];
        let l = total_loss(&mut g, &out, &labels, 0.5).unwrap();
        let want = l.authenticity + 0.5 * l.boundary;
        assert!((g.value(l.total).item() - want).abs() < 1e-15);
    }

    #[test]
    fn feature_frontend_projects_width() {
        let mut cfg = BamConfig::desk().model;
        cfg.frontend = FrontendKind::Features;
        cfg.feature_dim = 5;
        cfg.d_model = 4;
        let mut m = Bam::new(&cfg, 0).unwrap();
        let x = Tensor::new(vec![17, 5], (0..85).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        assert_eq!(m.predict(&x).unwrap().y_hat.len(), 2);
        let wrong = Tensor::zeros(&[17, 4]);
        assert!(m.predict(&wrong).is_err());
    }
}
