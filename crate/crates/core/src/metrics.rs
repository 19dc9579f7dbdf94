//! Frame-level equal error rate, precision, recall and F1.
//!
//! Spoof is the positive class and a frame is predicted spoof when its score
//! is at or above the threshold.

use serde::{Deserialize, Serialize};

use crate::error::{BamError, Result};

/// Default decision threshold for precision/recall/F1.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Frame scores pooled over utterances.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredFrames {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    /// Index into `utterances` for every frame.
    pub origin: Vec<usize>,
    pub utterances: Vec<String>,
}

impl ScoredFrames {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let mut sf = ScoredFrames::default();
        sf.push("", &scores, &labels)?;
        Ok(sf)
    }

    pub fn push(&mut self, utterance: &str, scores: &[f64], labels: &[u8]) -> Result<()> {
        if scores.len() != labels.len() {
            return Err(BamError::shape(
                "scored_frames",
                format!("{} scores vs {} labels for {utterance:?}", scores.len(), labels.len()),
            ));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(BamError::NonFinite(format!("score {s} of {utterance:?}")));
        }
        let idx = self.utterances.len();
        self.utterances.push(utterance.to_string());
        self.scores.extend_from_slice(scores);
        self.labels.extend(labels.iter().map(|&l| u8::from(l != 0)));
        self.origin.extend(std::iter::repeat_n(idx, scores.len()));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Frames of one utterance.
    pub fn utterance(&self, idx: usize) -> ScoredFrames {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.origin[i] == idx).collect();
        ScoredFrames {
            scores: keep.iter().map(|&i| self.scores[i]).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            origin: vec![0; keep.len()],
            utterances: vec![self.utterances[idx].clone()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerPoint {
    pub eer: f64,
    /// Decision threshold (`score >= threshold` is spoof); may be +inf.
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Equal error rate by sweeping every distinct score (plus +inf) as a
/// threshold and taking the one minimizing |FAR - FRR|, lowest threshold on ties.
pub fn compute_eer(sf: &ScoredFrames) -> Result<EerPoint> {
    let pos = sf.labels.iter().filter(|&&l| l == 1).count();
    let neg = sf.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(BamError::InvalidArgument(format!(
            "EER needs both classes ({pos} positive, {neg} negative frames)"
        )));
    }
    let mut order: Vec<usize> = (0..sf.len()).collect();
    order.sort_by(|&a, &b| sf.scores[a].total_cmp(&sf.scores[b]));
    // frames strictly below the current threshold
    let (mut fn_, mut tn) = (0usize, 0usize);
    let mut best: Option<(f64, EerPoint)> = None;
    let mut i = 0;
    loop {
        let threshold = if i < order.len() { sf.scores[order[i]] } else { f64::INFINITY };
        let far = (neg - tn) as f64 / neg as f64;
        let frr = fn_ as f64 / pos as f64;
        let gap = (far - frr).abs();
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, EerPoint { eer: (far + frr) / 2.0, threshold, far, frr }));
        }
        if i >= order.len() {
            break;
        }
        while i < order.len() && sf.scores[order[i]] == threshold {
            if sf.labels[order[i]] == 1 {
                fn_ += 1;
            } else {
                tn += 1;
            }
            i += 1;
        }
    }
    Ok(best.expect("at least one threshold").1)
}

/// Mean of per-utterance EERs over utterances that contain both classes.
pub fn per_utterance_eer(sf: &ScoredFrames) -> Option<f64> {
    let eers: Vec<f64> = (0..sf.utterances.len())
        .filter_map(|u| compute_eer(&sf.utterance(u)).ok().map(|p| p.eer))
        .collect();
    (!eers.is_empty()).then(|| eers.iter().sum::<f64>() / eers.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Confusion,
}

/// Precision, recall and F1 at `threshold`; empty denominators give 0.
pub fn compute_prf(sf: &ScoredFrames, threshold: f64) -> Prf {
    let mut c = Confusion { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for (&s, &l) in sf.scores.iter().zip(&sf.labels) {
        match (s >= threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Prf { precision, recall, f1, counts: c }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Authenticity,
    Boundary,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Authenticity => "authenticity",
            Task::Boundary => "boundary",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub resolution_ms: u32,
    /// `None` when the frames hold a single class.
    pub eer: Option<f64>,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
    pub positive_class: String,
    pub counts: Confusion,
    pub frames: usize,
}

impl EvalReport {
    pub fn from_scores(sf: &ScoredFrames, task: Task, resolution_ms: u32, threshold: f64) -> Self {
        let prf = compute_prf(sf, threshold);
        EvalReport {
            task,
            resolution_ms,
            eer: compute_eer(sf).ok().map(|p| p.eer),
            f1: prf.f1,
            precision: prf.precision,
            recall: prf.recall,
            threshold,
            positive_class: match task {
                Task::Authenticity => "spoof".into(),
                Task::Boundary => "boundary".into(),
            },
            counts: prf.counts,
            frames: sf.len(),
        }
    }

    pub const CSV_HEADER: &'static str = "resolution_ms,task,eer,f1,precision,recall,threshold";

    pub fn csv_row(&self) -> String {
        let eer = self.eer.map_or_else(|| "nan".to_string(), |e| format!("{e:.6}"));
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.resolution_ms, self.task, eer, self.f1, self.precision, self.recall, self.threshold
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sf(scores: &[f64], labels: &[u8]) -> ScoredFrames {
        ScoredFrames::new(scores.to_vec(), labels.to_vec()).unwrap()
    }

    #[test]
    fn eer_hand_cases() {
        assert_eq!(compute_eer(&sf(&[0.1, 0.9], &[0, 1])).unwrap().eer, 0.0);
        assert_eq!(compute_eer(&sf(&[0.9, 0.1], &[0, 1])).unwrap().eer, 1.0);
        assert_eq!(compute_eer(&sf(&[0.2, 0.4, 0.6, 0.8], &[0, 1, 0, 1])).unwrap().eer, 0.5);
    }

    #[test]
    fn eer_single_class_rejected() {
        assert!(compute_eer(&sf(&[0.1, 0.2], &[1, 1])).is_err());
        assert!(compute_eer(&sf(&[], &[])).is_err());
    }

    #[test]
    fn prf_cases() {
        let all = compute_prf(&sf(&[0.9, 0.1, 0.8], &[1, 0, 1]), 0.5);
        assert_eq!((all.precision, all.recall, all.f1), (1.0, 1.0, 1.0));

        // TP=2, FP=1, FN=0
        let p = compute_prf(&sf(&[0.9, 0.8, 0.7, 0.1], &[1, 1, 0, 0]), 0.5);
        assert_eq!((p.counts.tp, p.counts.fp, p.counts.fn_), (2, 1, 0));
        assert!((p.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.recall, 1.0);
        assert!((p.f1 - 0.8).abs() < 1e-15);

        let none = compute_prf(&sf(&[0.1, 0.2], &[1, 0]), 0.5);
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn report_csv_row() {
        let r = EvalReport::from_scores(&sf(&[0.1, 0.9], &[0, 1]), Task::Authenticity, 160, 0.5);
        assert_eq!(r.csv_row(), "160,authenticity,0.000000,1.000000,1.000000,1.000000,0.500000");
        let c = r.counts;
        assert_eq!(c.tp + c.fp + c.tn + c.fn_, r.frames);
        let single = EvalReport::from_scores(&sf(&[0.1], &[0]), Task::Boundary, 160, 0.5);
        assert!(single.csv_row().starts_with("160,boundary,nan,"));
    }

    #[test]
    fn per_utterance_mode_skips_single_class() {
        let mut s = ScoredFrames::default();
        s.push("a", &[0.1, 0.9], &[0, 1]).unwrap();
        s.push("b", &[0.9, 0.1], &[0, 1]).unwrap();
        s.push("c", &[0.3], &[0]).unwrap();
        assert_eq!(per_utterance_eer(&s), Some(0.5));
    }
}
