//! Frame-level authenticity (`y`) and boundary (`b`) labels.
//!
//! A frame is spoofed when its sample window holds at least one spoofed
//! sample, and a boundary when it holds samples of both classes. Only the
//! mixed frame itself is a boundary; its neighbours are not.

use serde::{Deserialize, Serialize};

use crate::data::{Span, SpanClass, Utterance};
use crate::error::{BamError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLabelSet {
    pub resolution_ms: u32,
    /// 1 = spoof, 0 = genuine.
    pub y: Vec<u8>,
    /// 1 = boundary frame.
    pub b: Vec<u8>,
}

impl FrameLabelSet {
    pub fn frames(&self) -> usize {
        self.y.len()
    }

    /// Checks the length and `b => y` invariants.
    pub fn validate(&self) -> Result<()> {
        if self.y.len() != self.b.len() {
            return Err(BamError::shape(
                "labels",
                format!("{} authenticity labels vs {} boundary labels", self.y.len(), self.b.len()),
            ));
        }
        if let Some(t) = (0..self.y.len()).find(|&t| self.b[t] == 1 && self.y[t] != 1) {
            return Err(BamError::InvalidArgument(format!("boundary frame {t} is not labelled spoof")));
        }
        Ok(())
    }
}

/// Samples per frame at `resolution_ms`, if whole.
pub fn frame_samples(sample_rate: u32, resolution_ms: u32) -> Result<usize> {
    let num = sample_rate as u64 * resolution_ms as u64;
    if resolution_ms == 0 || num % 1000 != 0 {
        return Err(BamError::InvalidArgument(format!(
            "{resolution_ms} ms is not a whole number of samples at {sample_rate} Hz"
        )));
    }
    Ok((num / 1000) as usize)
}

/// Labels for every complete frame; a trailing partial frame is dropped.
pub fn frame_labels(utt: &Utterance, resolution_ms: u32) -> Result<FrameLabelSet> {
    span_labels(&utt.spans, utt.num_samples(), utt.sample_rate, resolution_ms)
}

/// [`frame_labels`] from spans alone, over the first `num_samples` samples.
pub fn span_labels(spans: &[Span], num_samples: usize, sample_rate: u32, resolution_ms: u32) -> Result<FrameLabelSet> {
    let fs = frame_samples(sample_rate, resolution_ms)?;
    let n = num_samples;
    // spoof-sample prefix counts from the spans
    let mut prefix = vec![0usize; n + 1];
    let mut covered = 0;
    for s in spans {
        for i in s.start.min(n)..s.end.min(n) {
            prefix[i + 1] = prefix[i] + usize::from(s.class == SpanClass::Spoof);
        }
        covered = covered.max(s.end.min(n));
    }
    let frames = covered / fs;
    let mut y = Vec::with_capacity(frames);
    let mut b = Vec::with_capacity(frames);
    for t in 0..frames {
        let spoof = prefix[(t + 1) * fs] - prefix[t * fs];
        y.push(u8::from(spoof > 0));
        b.push(u8::from(spoof > 0 && spoof < fs));
    }
    Ok(FrameLabelSet { resolution_ms, y, b })
}

/// Coarsens labels by `factor`: each coarse frame takes the max over its
/// group of fine frames; a trailing partial group is dropped.
pub fn repool_labels(labels: &FrameLabelSet, factor: usize) -> Result<FrameLabelSet> {
    if factor == 0 {
        return Err(BamError::InvalidArgument("repool factor must be at least 1".into()));
    }
    let frames = labels.frames() / factor;
    let pool = |v: &[u8]| -> Vec<u8> {
        (0..frames)
            .map(|t| v[t * factor..(t + 1) * factor].iter().copied().max().unwrap_or(0))
            .collect()
    };
    Ok(FrameLabelSet {
        resolution_ms: labels.resolution_ms * factor as u32,
        y: pool(&labels.y),
        b: pool(&labels.b),
    })
}

/// Fallback for data with frame-level segment labels but no sample spans:
/// the first frame of every new segment becomes a boundary and is labelled
/// spoof so that every boundary frame is spoofed.
pub fn labels_from_segments(segment_y: &[u8], resolution_ms: u32) -> FrameLabelSet {
    let mut y = segment_y.to_vec();
    let mut b = vec![0u8; y.len()];
    for t in 1..segment_y.len() {
        if segment_y[t] != segment_y[t - 1] {
            b[t] = 1;
            y[t] = 1;
        }
    }
    FrameLabelSet { resolution_ms, y, b }
}

/// One line of a label dump.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDump {
    pub id: String,
    pub resolution_ms: u32,
    #[serde(rename = "Y")]
    pub y: Vec<u8>,
    #[serde(rename = "B")]
    pub b: Vec<u8>,
}

impl LabelDump {
    pub fn new(id: &str, labels: &FrameLabelSet) -> Self {
        LabelDump {
            id: id.to_string(),
            resolution_ms: labels.resolution_ms,
            y: labels.y.clone(),
            b: labels.b.clone(),
        }
    }
}
