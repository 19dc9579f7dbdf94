//! Boundary-aware attention for frame-level localization of partially
//! spoofed audio.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autograd`], [`optim`]: dense `f64` tensors, a tape-based
//!   reverse-mode differentiator and Adam.
//! * [`data`]: synthetic spliced corpora, manifests, waveform and feature files.
//! * [`labels`]: frame authenticity and boundary labels from sample-accurate spans.
//! * [`frontend`]: strided convolutional encoder and attentive pooling.
//! * [`fab`]: the frame-wise attention block.
//! * [`boundary`]: boundary enhancement, adjacency masks and masked attention.
//! * [`model`], [`train`], [`checkpoint`]: assembly, joint loss, training and evaluation.
//! * [`metrics`]: frame-level EER, precision, recall and F1.

pub mod ablation;
pub mod autograd;
pub mod boundary;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod fab;
pub mod frontend;
pub mod gradcheck;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod error;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{BamError, Result};
pub use tensor::Tensor;
