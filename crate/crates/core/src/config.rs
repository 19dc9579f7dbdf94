//! Run configuration, JSON presets and dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::boundary::BoundaryBranch;
use crate::error::{BamError, Result};
use crate::fab::MaskMode;
use crate::optim::AdamConfig;

/// Localization model layout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Max pooling and a linear classifier.
    Baseline,
    /// Unmasked attention blocks and a linear classifier.
    Fa,
    /// Boundary enhancement beside unmasked attention blocks.
    FaBe,
    /// Boundary enhancement feeding boundary-masked attention blocks.
    #[default]
    BfaBe,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Fa, Variant::FaBe, Variant::BfaBe];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Fa => "fa",
            Variant::FaBe => "fa_be",
            Variant::BfaBe => "bfa_be",
        }
    }

    pub fn has_boundary_head(self) -> bool {
        matches!(self, Variant::FaBe | Variant::BfaBe)
    }
}

impl std::str::FromStr for Variant {
    type Err = BamError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| BamError::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontendKind {
    /// Convolutional encoder over raw waveforms.
    #[default]
    Waveform,
    /// Precomputed feature files next to the waveforms.
    Features,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub boundary_branch: BoundaryBranch,
    pub frontend: FrontendKind,
    pub sample_rate: u32,
    /// Encoder hop (or feature-file frame shift).
    pub hop_ms: u32,
    pub encoder_substride: usize,
    pub encoder_channels: usize,
    /// Width of external feature files; projected to `d_model` when different.
    pub feature_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Attentive pooling stride.
    pub stride: usize,
    pub intra_channels: usize,
    pub mask_mode: MaskMode,
    /// Boundary binarization threshold.
    pub threshold: f64,
    /// Build the mask from ground-truth boundaries during training.
    pub teacher_forcing: bool,
}

impl ModelConfig {
    pub fn hop_samples(&self) -> usize {
        (self.sample_rate as u64 * self.hop_ms as u64 / 1000) as usize
    }

    pub fn resolution_ms(&self) -> u32 {
        self.hop_ms * self.stride as u32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub lr_halving_period: usize,
    pub batch_size: usize,
    pub crop_ms: u32,
    /// Weight of the boundary loss.
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Spoof-probability threshold for precision, recall and F1.
    pub f1_threshold: f64,
    pub per_utterance_eer: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BamConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for BamConfig {
    fn default() -> Self {
        BamConfig::desk()
    }
}

impl BamConfig {
    /// Small model on synthetic 8 kHz audio.
    pub fn desk() -> Self {
        BamConfig {
            model: ModelConfig {
                variant: Variant::BfaBe,
                boundary_branch: BoundaryBranch::Full,
                frontend: FrontendKind::Waveform,
                sample_rate: 8000,
                hop_ms: 20,
                encoder_substride: 4,
                encoder_channels: 16,
                feature_dim: 32,
                d_model: 32,
                heads: 1,
                blocks: 2,
                stride: 8,
                intra_channels: 8,
                mask_mode: MaskMode::Exclude,
                threshold: 0.5,
                teacher_forcing: false,
            },
            train: TrainConfig {
                adam: AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
                epochs: 30,
                lr_halving_period: 10,
                batch_size: 8,
                crop_ms: 4000,
                lambda: 0.5,
                seed: 42,
            },
            eval: EvalConfig { f1_threshold: 0.5, per_utterance_eer: false },
        }
    }

    /// Published settings, for 1024-dimensional external features.
    pub fn paper() -> Self {
        let mut c = BamConfig::desk();
        c.model.frontend = FrontendKind::Features;
        c.model.sample_rate = 16000;
        c.model.feature_dim = 1024;
        c.model.d_model = 1024;
        c.train.adam.lr = 1e-5;
        c.train.epochs = 50;
        c
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(BamConfig::desk()),
            "paper" => Some(BamConfig::paper()),
            _ => None,
        }
    }

    /// A preset name or a JSON file path.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(c) = BamConfig::preset(spec) {
            return Ok(c);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| BamError::io(path, e))?;
        let cfg: BamConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `a.b.c=value`; the key must already exist. The value is read
    /// as JSON, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| BamError::InvalidArgument(format!("override {assignment:?} is not key=value")))?;
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| BamError::InvalidArgument(format!("unknown config key {key:?}")))?;
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let updated: BamConfig = serde_json::from_value(root)
            .map_err(|e| BamError::InvalidArgument(format!("override {assignment:?}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let t = &self.train;
        let bad = |msg: String| Err(BamError::InvalidArgument(msg));
        if !(t.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", t.lambda));
        }
        if m.stride == 0 || m.blocks == 0 || m.heads == 0 || m.d_model == 0 {
            return bad("stride, blocks, heads and d_model must be at least 1".into());
        }
        if (m.sample_rate as u64 * m.hop_ms as u64) % 1000 != 0 || m.hop_ms == 0 {
            return bad(format!("hop of {} ms is not whole samples at {} Hz", m.hop_ms, m.sample_rate));
        }
        if m.encoder_substride == 0 || m.hop_samples() % m.encoder_substride != 0 {
            return bad(format!("hop of {} samples does not split by {}", m.hop_samples(), m.encoder_substride));
        }
        if !(m.threshold > 0.0 && m.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", m.threshold));
        }
        if t.batch_size == 0 || t.epochs == 0 || t.lr_halving_period == 0 {
            return bad("batch_size, epochs and lr_halving_period must be at least 1".into());
        }
        if !(t.adam.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", t.adam.lr));
        }
        if (m.sample_rate as u64 * t.crop_ms as u64) % 1000 != 0 {
            return bad(format!("crop of {} ms is not whole samples", t.crop_ms));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_and_validate() {
        for c in [BamConfig::desk(), BamConfig::paper()] {
            c.validate().unwrap();
            let back: BamConfig = serde_json::from_str(&c.to_json()).unwrap();
            assert_eq!(back, c);
        }
        assert_eq!(BamConfig::desk().model.resolution_ms(), 160);
        assert_eq!(BamConfig::desk().model.hop_samples(), 160);
    }

    #[test]
    fn overrides() {
        let mut c = BamConfig::desk();
        c.apply_override("train.adam.lr=0.01").unwrap();
        assert_eq!(c.train.adam.lr, 0.01);
        c.apply_override("model.variant=fa_be").unwrap();
        assert_eq!(c.model.variant, Variant::FaBe);
        c.apply_override("model.mask_mode=literal").unwrap();
        assert_eq!(c.model.mask_mode, MaskMode::Literal);
        assert!(c.apply_override("model.nope=1").is_err());
        assert!(c.apply_override("train.epochs=many").is_err());
        assert!(c.apply_override("train.lambda=-1").is_err());
        assert!(c.apply_override("novalue").is_err());
    }

    #[test]
    fn variant_names() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_value(v).unwrap(), Value::String(v.name().into()));
        }
    }
}
