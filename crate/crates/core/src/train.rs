//! Batching, the training loop and evaluation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::{BamConfig, FrontendKind};
use crate::data::{feature_path, load_utterance, read_features, ManifestEntry, Span, Split};
use crate::error::{BamError, Result};
use crate::labels::{frame_samples, repool_labels, span_labels, FrameLabelSet};
use crate::metrics::{compute_eer, per_utterance_eer, EvalReport, ScoredFrames, Task};
use crate::model::{total_loss, Bam};
use crate::nn::Mode;
use crate::optim::{halving_lr, AdamState};
use crate::tensor::Tensor;

/// Model input of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub enum Input {
    Wave(Vec<f32>),
    /// Row-major `frames x dim`.
    Features { frames: usize, dim: usize, values: Vec<f32> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub sample_rate: u32,
    pub num_samples: usize,
    pub spans: Vec<Span>,
    pub input: Input,
}

impl Example {
    /// Samples per input step.
    fn unit(&self, hop: usize) -> usize {
        match self.input {
            Input::Wave(_) => 1,
            Input::Features { .. } => hop,
        }
    }

    fn steps(&self) -> usize {
        match &self.input {
            Input::Wave(w) => w.len(),
            Input::Features { frames, .. } => *frames,
        }
    }

    fn width(&self) -> usize {
        match &self.input {
            Input::Wave(_) => 1,
            Input::Features { dim, .. } => *dim,
        }
    }

    fn values(&self, start: usize, len: usize, out: &mut Vec<f64>) {
        let w = self.width();
        let slice: &[f32] = match &self.input {
            Input::Wave(v) => v,
            Input::Features { values, .. } => values,
        };
        out.extend(slice[start * w..(start + len) * w].iter().map(|&v| v as f64));
    }

    /// The whole input as a tensor (`[L]` or `[T, D]`).
    pub fn tensor(&self) -> Result<Tensor> {
        let mut v = Vec::new();
        self.values(0, self.steps(), &mut v);
        match self.input {
            Input::Wave(_) => Tensor::new(vec![self.steps()], v),
            Input::Features { frames, dim, .. } => Tensor::new(vec![frames, dim], v),
        }
    }

    /// Labels over the full utterance.
    pub fn labels(&self, resolution_ms: u32) -> Result<FrameLabelSet> {
        span_labels(&self.spans, self.num_samples, self.sample_rate, resolution_ms)
    }
}

/// Loads one split per the configured front-end.
pub fn load_examples(dir: &Path, entries: &[ManifestEntry], split: Split, cfg: &BamConfig) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for e in entries.iter().filter(|e| e.split == split) {
        if e.sample_rate != cfg.model.sample_rate {
            return Err(BamError::InvalidArgument(format!(
                "{}: corpus rate {} Hz, config expects {} Hz",
                e.id, e.sample_rate, cfg.model.sample_rate
            )));
        }
        let input = match cfg.model.frontend {
            FrontendKind::Waveform => Input::Wave(load_utterance(dir, e)?.samples),
            FrontendKind::Features => {
                let ff = read_features(&feature_path(dir, e))?;
                Input::Features { frames: ff.frames, dim: ff.dim, values: ff.values }
            }
        };
        out.push(Example {
            id: e.id.clone(),
            sample_rate: e.sample_rate,
            num_samples: e.num_samples,
            spans: e.spans.clone(),
            input,
        });
    }
    Ok(out)
}

/// A padded training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub input: Tensor,
    pub labels: Vec<FrameLabelSet>,
    /// Valid output frames per item.
    pub lengths: Vec<usize>,
}

/// Fixed-length crops: longer inputs are trimmed at a random offset,
/// shorter ones zero-padded on the right.
pub fn make_batch(examples: &[&Example], cfg: &BamConfig, rng: &mut impl Rng) -> Result<Batch> {
    let hop = cfg.model.hop_samples();
    let crop_samples = frame_samples(cfg.model.sample_rate, cfg.train.crop_ms)?;
    let res = cfg.model.resolution_ms();
    let width = examples.first().map_or(1, |e| e.width());
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut steps = 0;
    for e in examples {
        let unit = e.unit(hop);
        steps = crop_samples / unit;
        let n = e.steps();
        let (start, len) = if n > steps { (rng.random_range(0..=n - steps), steps) } else { (0, n) };
        e.values(start, len, &mut data);
        data.extend(std::iter::repeat_n(0.0, (steps - len) * width));
        let spans = crate::data::clip_spans(&e.spans, start * unit, (start + len) * unit);
        labels.push(span_labels(&spans, len * unit, e.sample_rate, res)?);
    }
    let shape = if width == 1 && matches!(examples.first().map(|e| &e.input), Some(Input::Wave(_))) {
        vec![examples.len(), steps]
    } else {
        vec![examples.len(), steps, width]
    };
    let lengths = labels.iter().map(|l| l.frames()).collect();
    Ok(Batch { input: Tensor::new(shape, data)?, labels, lengths })
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_eer: Option<f64>,
    pub dev_f1: f64,
}

pub struct TrainOutcome {
    /// Model with the lowest dev EER.
    pub best: Bam,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Trains from `state` (fresh or resumed) for the remaining epochs. With
/// `out_dir`, writes `epochs.jsonl`, `last.bamc` and `best.bamc`.
pub fn train(
    model: &mut Bam,
    adam: &mut AdamState,
    start_epoch: usize,
    cfg: &BamConfig,
    train_set: &[Example],
    dev_set: &[Example],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(BamError::InvalidArgument("training split is empty".into()));
    }
    if dev_set.is_empty() {
        return Err(BamError::InvalidArgument("dev split is empty".into()));
    }
    let mut log_file = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| BamError::io(d, e))?;
            let path = d.join("epochs.jsonl");
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(start_epoch > 0)
                .write(true)
                .truncate(start_epoch == 0)
                .open(&path)
                .map_err(|e| BamError::io(&path, e))?;
            Some((path, f))
        }
        None => None,
    };
    let base = cfg.train.adam.lr;
    let mut best: Option<(f64, usize, Bam)> = None;
    let mut log = Vec::new();
    for epoch in start_epoch..cfg.train.epochs {
        let lr = halving_lr(base, epoch, cfg.train.lr_halving_period);
        let mut rng = epoch_rng(cfg.train.seed, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.train.batch_size) {
            let items: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = make_batch(&items, cfg, &mut rng)?;
            let truth: Vec<Vec<u8>> = batch.labels.iter().map(|l| l.b.clone()).collect();
            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let out = model.forward(&mut g, &p, &batch.input, Some(&batch.lengths), Some(&truth), Mode::Train)?;
            let loss = total_loss(&mut g, &out, &batch.labels, cfg.train.lambda)?;
            let value = g.value(loss.total).item();
            if !value.is_finite() {
                return Err(BamError::Diverged(format!("loss {value} at epoch {epoch}, batch {batches}")));
            }
            g.backward(loss.total)?;
            let grads = p.grads(&g, &model.store);
            adam.step(&mut model.store, &grads, lr / base)?;
            loss_sum += value;
            batches += 1;
        }
        let dev = evaluate(model, dev_set, &[cfg.model.resolution_ms()], cfg)?;
        let auth = dev.iter().find(|r| r.task == Task::Authenticity).expect("authenticity row");
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            dev_eer: auth.eer,
            dev_f1: auth.f1,
        };
        let score = auth.eer.unwrap_or(f64::INFINITY);
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, epoch, model.clone()));
            if let Some(d) = out_dir {
                Checkpoint::capture(model, adam, epoch + 1, cfg).save(&d.join("best.bamc"))?;
            }
        }
        if let Some(d) = out_dir {
            Checkpoint::capture(model, adam, epoch + 1, cfg).save(&d.join("last.bamc"))?;
        }
        if let Some((path, f)) = &mut log_file {
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| BamError::io(&*path, e))?;
        }
        log.push(entry);
    }
    let (best, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model.clone(), start_epoch.saturating_sub(1)),
    };
    Ok(TrainOutcome { best, best_epoch, log })
}

/// Frame scores of a split at the model's native resolution.
#[derive(Clone, Debug, Default)]
pub struct SplitScores {
    pub ids: Vec<String>,
    pub y_hat: Vec<Vec<f64>>,
    pub b_prob: Vec<Option<Vec<f64>>>,
    pub labels: Vec<FrameLabelSet>,
}

/// Full-length inference over every example, in input order.
pub fn score_split(model: &mut Bam, examples: &[Example]) -> Result<SplitScores> {
    let res = model.cfg.resolution_ms();
    let mut s = SplitScores::default();
    for e in examples {
        let pred = model.predict(&e.tensor()?)?;
        let labels = e.labels(res)?;
        let t = pred.y_hat.len().min(labels.frames());
        s.ids.push(e.id.clone());
        s.y_hat.push(pred.y_hat[..t].to_vec());
        s.b_prob.push(pred.b_prob.map(|b| b[..t].to_vec()));
        s.labels.push(FrameLabelSet {
            resolution_ms: res,
            y: labels.y[..t].to_vec(),
            b: labels.b[..t].to_vec(),
        });
    }
    Ok(s)
}

fn repool_scores(scores: &[f64], factor: usize) -> Vec<f64> {
    (0..scores.len() / factor)
        .map(|t| scores[t * factor..(t + 1) * factor].iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Reports at each requested resolution, which must be a whole multiple of
/// the native one. Scores and labels are coarsened by taking the max.
pub fn reports_from_scores(scores: &SplitScores, native_ms: u32, resolutions: &[u32], cfg: &BamConfig) -> Result<Vec<EvalReport>> {
    let mut out = Vec::new();
    for &res in resolutions {
        if res == 0 || res % native_ms != 0 {
            return Err(BamError::InvalidArgument(format!(
                "resolution {res} ms is not a multiple of the model's {native_ms} ms"
            )));
        }
        let factor = (res / native_ms) as usize;
        let mut auth = ScoredFrames::default();
        let mut bound = ScoredFrames::default();
        let has_boundary = scores.b_prob.iter().all(|b| b.is_some()) && !scores.b_prob.is_empty();
        for i in 0..scores.ids.len() {
            let labels = repool_labels(&scores.labels[i], factor)?;
            auth.push(&scores.ids[i], &repool_scores(&scores.y_hat[i], factor), &labels.y)?;
            if let Some(b) = &scores.b_prob[i] {
                bound.push(&scores.ids[i], &repool_scores(b, factor), &labels.b)?;
            }
        }
        let threshold = cfg.eval.f1_threshold;
        let mut tasks = vec![(Task::Authenticity, auth)];
        if has_boundary {
            tasks.push((Task::Boundary, bound));
        }
        for (task, sf) in tasks {
            let mut r = EvalReport::from_scores(&sf, task, res, threshold);
            if cfg.eval.per_utterance_eer {
                r.eer = per_utterance_eer(&sf);
            } else {
                r.eer = compute_eer(&sf).ok().map(|p| p.eer);
            }
            out.push(r);
        }
    }
    Ok(out)
}

pub fn evaluate(model: &mut Bam, examples: &[Example], resolutions: &[u32], cfg: &BamConfig) -> Result<Vec<EvalReport>> {
    let scores = score_split(model, examples)?;
    reports_from_scores(&scores, model.cfg.resolution_ms(), resolutions, cfg)
}

/// Writes reports as a CSV table.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(EvalReport::CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
