//! Synthetic partially spoofed corpora, manifests, waveform files and
//! externally computed feature files.
//!
//! Each utterance is a hard splice of two synthetic signal classes sharing
//! one speaking envelope and one noise floor:
//!
//! * genuine: phase-locked harmonic series with a steep spectral tilt,
//! * spoof: the same partials with randomized phases, a flatter tilt and a
//!   slightly shifted fundamental.
//!
//! Sample-accurate spans record which class every sample came from.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BamError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanClass {
    Genuine,
    Spoof,
}

/// Half-open sample range `[start, end)` of one class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "(usize, usize, SpanClass)", from = "(usize, usize, SpanClass)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub class: SpanClass,
}

impl From<Span> for (usize, usize, SpanClass) {
    fn from(s: Span) -> Self {
        (s.start, s.end, s.class)
    }
}

impl From<(usize, usize, SpanClass)> for Span {
    fn from((start, end, class): (usize, usize, SpanClass)) -> Self {
        Span { start, end, class }
    }
}

impl Span {
    pub fn new(start: usize, end: usize, class: SpanClass) -> Self {
        Span { start, end, class }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Checks that `spans` partition `[0, num_samples)` with alternating classes.
pub fn validate_spans(spans: &[Span], num_samples: usize) -> Result<()> {
    if num_samples == 0 && spans.is_empty() {
        return Ok(());
    }
    let first = spans.first().ok_or_else(|| BamError::Spans {
        first: 0,
        second: 0,
        msg: format!("no spans for {num_samples} samples"),
    })?;
    if first.start != 0 {
        return Err(BamError::Spans {
            first: 0,
            second: 0,
            msg: format!("first span starts at {} instead of 0", first.start),
        });
    }
    for (i, s) in spans.iter().enumerate() {
        if s.is_empty() {
            return Err(BamError::Spans {
                first: i,
                second: i,
                msg: format!("empty span [{}, {})", s.start, s.end),
            });
        }
    }
    for (i, w) in spans.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let msg = if b.start < a.end {
            Some(format!("overlap: [{}, {}) and [{}, {})", a.start, a.end, b.start, b.end))
        } else if b.start > a.end {
            Some(format!("gap between {} and {}", a.end, b.start))
        } else if a.class == b.class {
            Some(format!("adjacent spans share class {:?}", a.class))
        } else {
            None
        };
        if let Some(msg) = msg {
            return Err(BamError::Spans {
                first: i,
                second: i + 1,
                msg,
            });
        }
    }
    let last = spans.last().expect("non-empty");
    if last.end != num_samples {
        return Err(BamError::Spans {
            first: spans.len() - 1,
            second: spans.len() - 1,
            msg: format!("last span ends at {} but utterance has {num_samples} samples", last.end),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub sample_rate: u32,
    pub samples: Vec<f32>,
    pub spans: Vec<Span>,
}

impl Utterance {
    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    /// Class of every sample, expanded from the spans.
    pub fn sample_classes(&self) -> Vec<SpanClass> {
        let mut out = Vec::with_capacity(self.samples.len());
        for s in &self.spans {
            out.extend(std::iter::repeat_n(s.class, s.len()));
        }
        out
    }

    /// Sub-utterance `[start, start + len)`, truncated at the end of the signal.
    pub fn crop(&self, start: usize, len: usize) -> Utterance {
        let end = (start + len).min(self.samples.len());
        let start = start.min(end);
        Utterance {
            id: self.id.clone(),
            sample_rate: self.sample_rate,
            samples: self.samples[start..end].to_vec(),
            spans: clip_spans(&self.spans, start, end),
        }
    }
}

/// Spans restricted to `[start, end)` and shifted to start at 0.
pub fn clip_spans(spans: &[Span], start: usize, end: usize) -> Vec<Span> {
    spans
        .iter()
        .filter_map(|s| {
            let a = s.start.max(start);
            let b = s.end.min(end);
            (a < b).then(|| Span::new(a - start, b - start, s.class))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl std::str::FromStr for Split {
    type Err = BamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "eval" => Ok(Split::Eval),
            other => Err(BamError::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub sample_rate: u32,
    pub num_samples: usize,
    pub split: Split,
    pub spans: Vec<Span>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub fn write_manifest(dir: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    fs::write(&path, out).map_err(|e| BamError::io(&path, e))
}

/// Parses a manifest; any malformed line or span list is reported with its
/// 1-based line number.
pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| BamError::io(&path, e))?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| BamError::Manifest {
            line: i + 1,
            msg: e.to_string(),
        })?;
        validate_spans(&entry.spans, entry.num_samples).map_err(|e| BamError::Manifest {
            line: i + 1,
            msg: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_waveform(path: &Path, samples: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = samples.iter().flat_map(|s| s.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| BamError::io(path, e))
}

pub fn read_waveform(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| BamError::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(BamError::Truncated {
            what: "waveform",
            expected: bytes.len().next_multiple_of(4),
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Loads the waveform of a manifest entry stored under `dir`.
pub fn load_utterance(dir: &Path, entry: &ManifestEntry) -> Result<Utterance> {
    let samples = read_waveform(&dir.join(&entry.path))?;
    if samples.len() != entry.num_samples {
        return Err(BamError::InvalidArgument(format!(
            "{}: manifest says {} samples, file has {}",
            entry.id,
            entry.num_samples,
            samples.len()
        )));
    }
    Ok(Utterance {
        id: entry.id.clone(),
        sample_rate: entry.sample_rate,
        samples,
        spans: entry.spans.clone(),
    })
}

pub fn load_split(dir: &Path, entries: &[ManifestEntry], split: Split) -> Result<Vec<Utterance>> {
    entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| load_utterance(dir, e))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_utts: usize,
    pub sample_rate: u32,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub min_spoof_ratio: f64,
    pub max_spoof_ratio: f64,
    pub seed: u64,
    /// Linear cross-fade length at every splice, in samples.
    pub crossfade: usize,
    /// Probability that an utterance carries no spoofed segment at all.
    pub genuine_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_utts: 600,
            sample_rate: 8000,
            min_duration_s: 1.6,
            max_duration_s: 4.0,
            min_spoof_ratio: 0.2,
            max_spoof_ratio: 0.6,
            seed: 42,
            crossfade: 0,
            genuine_fraction: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BamError::InvalidArgument(m.to_string()));
        if self.n_utts == 0 {
            return bad("n-utts must be at least 1");
        }
        if self.sample_rate == 0 {
            return bad("sample rate must be positive");
        }
        if !(self.min_duration_s > 0.0 && self.max_duration_s >= self.min_duration_s) {
            return bad("duration range must be positive and ordered");
        }
        if !(0.0..=1.0).contains(&self.min_spoof_ratio)
            || !(0.0..=1.0).contains(&self.max_spoof_ratio)
            || self.min_spoof_ratio > self.max_spoof_ratio
        {
            return bad("spoof ratio range must be ordered within [0, 1]");
        }
        Ok(())
    }
}

const MIN_SEGMENT_S: f64 = 0.2;
const MAX_PARTIALS: usize = 20;

/// Per-utterance seed: corpus seed XOR utterance index.
pub fn utterance_seed(corpus_seed: u64, index: usize) -> u64 {
    corpus_seed ^ index as u64
}

/// Random span layout with `spoof` spoofed samples out of `len`.
fn layout_spans(rng: &mut impl Rng, len: usize, spoof: usize, min_seg: usize) -> Vec<Span> {
    if spoof == 0 {
        return vec![Span::new(0, len, SpanClass::Genuine)];
    }
    if spoof >= len {
        return vec![Span::new(0, len, SpanClass::Spoof)];
    }
    let genuine = len - spoof;
    let mut k: usize = rng.random_range(1..=3);
    while k > 1 && (k * min_seg > spoof || (k - 1) * min_seg > genuine) {
        k -= 1;
    }
    let spoof_lens = random_partition(rng, spoof, k, min_seg.min(spoof / k));
    // k+1 genuine gaps; interior ones must be non-empty
    let interior_min = min_seg.min(genuine / k.max(1)).max(1);
    let reserved = interior_min * (k - 1);
    let free = random_partition(rng, genuine - reserved, k + 1, 0);
    let mut gaps = free;
    for g in gaps.iter_mut().take(k).skip(1) {
        *g += interior_min;
    }
    let mut spans = Vec::new();
    let mut at = 0;
    for i in 0..=k {
        if gaps[i] > 0 {
            spans.push(Span::new(at, at + gaps[i], SpanClass::Genuine));
            at += gaps[i];
        }
        if i < k {
            spans.push(Span::new(at, at + spoof_lens[i], SpanClass::Spoof));
            at += spoof_lens[i];
        }
    }
    debug_assert_eq!(at, len);
    spans
}

/// Splits `total` into `parts` integers, each at least `min`.
fn random_partition(rng: &mut impl Rng, total: usize, parts: usize, min: usize) -> Vec<usize> {
    let free = total - min * parts;
    let mut cuts: Vec<usize> = (0..parts - 1).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        out.push(c - prev + min);
        prev = c;
    }
    out.push(free - prev + min);
    out
}

/// Class-specific harmonic voice.
struct Voice {
    f0: f64,
    tilt: f64,
    phases: Vec<f64>,
}

impl Voice {
    fn amplitudes(&self, sample_rate: f64) -> Vec<f64> {
        let nyquist = 0.45 * sample_rate;
        let n = ((nyquist / (self.f0 * 1.05)) as usize).clamp(1, MAX_PARTIALS);
        let raw: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-self.tilt)).collect();
        let norm = raw.iter().map(|a| a * a).sum::<f64>().sqrt();
        raw.iter().map(|a| a / norm).collect()
    }
}

/// Smooth syllable-like envelope in [0, 1] with short pauses.
fn speaking_envelope(rng: &mut impl Rng, len: usize, sr: f64) -> Vec<f64> {
    let mut env = vec![0.0; len];
    let mut at = 0usize;
    while at < len {
        let syl = (rng.random_range(0.10..0.30) * sr) as usize;
        let peak = rng.random_range(0.5..1.0);
        for i in 0..syl.min(len - at) {
            let x = i as f64 / syl as f64;
            // flat-topped raised cosine
            let shape = if x < 0.15 {
                0.5 - 0.5 * (PI * x / 0.15).cos()
            } else if x > 0.85 {
                0.5 - 0.5 * (PI * (1.0 - x) / 0.15).cos()
            } else {
                1.0
            };
            env[at + i] = peak * shape;
        }
        at += syl;
        if rng.random_bool(0.3) {
            at += (rng.random_range(0.03..0.12) * sr) as usize;
        }
    }
    env
}

/// Generates utterance `index` of a corpus.
pub fn synthesize(cfg: &SynthConfig, index: usize) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(utterance_seed(cfg.seed, index));
    let sr = cfg.sample_rate as f64;
    let dur = rng.random_range(cfg.min_duration_s..=cfg.max_duration_s);
    let len = ((dur * sr).round() as usize).max(1);

    let fully_genuine = cfg.max_spoof_ratio <= 0.0 || rng.random_bool(cfg.genuine_fraction);
    let ratio = if cfg.max_spoof_ratio > cfg.min_spoof_ratio {
        rng.random_range(cfg.min_spoof_ratio..=cfg.max_spoof_ratio)
    } else {
        cfg.min_spoof_ratio
    };
    let spoof = if fully_genuine { 0 } else { (ratio * len as f64).round() as usize };
    let min_seg = (MIN_SEGMENT_S * sr) as usize;
    let spans = layout_spans(&mut rng, len, spoof, min_seg);

    let f0 = rng.random_range(80.0..300.0);
    let genuine = Voice {
        f0,
        tilt: 1.6,
        phases: vec![0.0; MAX_PARTIALS],
    };
    let spoofed = Voice {
        f0: f0 * rng.random_range(0.92..1.08),
        tilt: 0.6,
        phases: (0..MAX_PARTIALS).map(|_| rng.random_range(0.0..2.0 * PI)).collect(),
    };
    let vib_rate = rng.random_range(4.0..6.5);
    let vib_depth = rng.random_range(0.01..0.03);
    let env = speaking_envelope(&mut rng, len, sr);
    let noise_level = rng.random_range(0.02..0.06);
    let gain = rng.random_range(0.3..0.7);

    let amps = [genuine.amplitudes(sr), spoofed.amplitudes(sr)];
    let voices = [&genuine, &spoofed];
    // base phase of the fundamental, shared by both classes
    let mut phase = [0.0f64; 2];
    let mut lp = 0.0f64;
    let mut class_of = vec![0u8; len];
    for s in &spans {
        let c = u8::from(s.class == SpanClass::Spoof);
        class_of[s.start..s.end].iter_mut().for_each(|v| *v = c);
    }
    let mut out = vec![[0.0f64; 2]; 0];
    out.reserve(len);
    let need_both = cfg.crossfade > 0;
    for (i, &cls) in class_of.iter().enumerate() {
        let t = i as f64 / sr;
        let vib = 1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin();
        for (v, p) in voices.iter().zip(phase.iter_mut()) {
            *p += 2.0 * PI * v.f0 * vib / sr;
        }
        lp = 0.9 * lp + 0.1 * rng.random_range(-1.0..1.0);
        let noise = noise_level * lp * 3.0;
        let mut pair = [noise; 2];
        for c in 0..2 {
            if c != cls as usize && !need_both {
                continue;
            }
            let v = voices[c];
            let tone: f64 = amps[c]
                .iter()
                .enumerate()
                .map(|(k, a)| a * ((k + 1) as f64 * phase[c] + v.phases[k]).sin())
                .sum();
            pair[c] += env[i] * tone;
        }
        out.push(pair);
    }
    let fade = cfg.crossfade;
    let samples = (0..len)
        .map(|i| {
            let cls = class_of[i] as usize;
            let mut v = out[i][cls];
            if fade > 0 {
                // blend toward the previous class just after a splice
                if let Some(s) = spans.iter().find(|s| s.start > 0 && i >= s.start && i < s.start + fade) {
                    let w = (i - s.start) as f64 / fade as f64;
                    v = w * out[i][cls] + (1.0 - w) * out[i][1 - cls];
                }
            }
            (gain * v).clamp(-1.0, 1.0) as f32
        })
        .collect();
    Utterance {
        id: format!("utt{index:05}"),
        sample_rate: cfg.sample_rate,
        samples,
        spans,
    }
}

/// Assigns train/dev/eval (70/15/15) to `n` utterances with a seeded shuffle.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5_0117)));
    let n_train = (n as f64 * 0.70).round() as usize;
    let n_dev = (n as f64 * 0.15).round() as usize;
    let mut splits = vec![Split::Eval; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_dev {
            Split::Dev
        } else {
            Split::Eval
        };
    }
    splits
}

/// Writes `cfg.n_utts` utterances and a manifest to `dir`.
pub fn generate_corpus(dir: &Path, cfg: &SynthConfig) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| BamError::io(dir, e))?;
    let wav_dir = dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| BamError::io(&wav_dir, e))?;
    let splits = assign_splits(cfg.n_utts, cfg.seed);
    let mut entries = Vec::with_capacity(cfg.n_utts);
    for (i, split) in splits.into_iter().enumerate() {
        let utt = synthesize(cfg, i);
        let rel = format!("wav/{}.f32", utt.id);
        write_waveform(&dir.join(&rel), &utt.samples)?;
        entries.push(ManifestEntry {
            id: utt.id,
            path: rel,
            sample_rate: utt.sample_rate,
            num_samples: utt.samples.len(),
            split,
            spans: utt.spans,
        });
    }
    write_manifest(dir, &entries)?;
    Ok(entries)
}

/// Externally computed frame features, `frames x dim` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub frames: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

pub const FEATURE_MAGIC: &[u8; 4] = b"BAMF";

impl FeatureFile {
    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.values.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            if bytes.len() >= 4 && &bytes[..4] != FEATURE_MAGIC {
                return Err(BamError::BadMagic([bytes[0], bytes[1], bytes[2], bytes[3]]));
            }
            return Err(BamError::Truncated {
                what: "feature header",
                expected: 12,
                found: bytes.len(),
            });
        }
        if &bytes[..4] != FEATURE_MAGIC {
            return Err(BamError::BadMagic([bytes[0], bytes[1], bytes[2], bytes[3]]));
        }
        let word = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
        let (frames, dim) = (word(4), word(8));
        let expected = frames
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(12))
            .ok_or_else(|| BamError::InvalidArgument(format!("feature size {frames}x{dim} overflows")))?;
        if bytes.len() < expected {
            return Err(BamError::Truncated {
                what: "feature payload",
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(BamError::InvalidArgument(format!(
                "feature file has {} trailing bytes",
                bytes.len() - expected
            )));
        }
        let values: Vec<f32> = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(BamError::NonFinite(format!(
                "feature value at frame {}, dim {}",
                i / dim.max(1),
                i % dim.max(1)
            )));
        }
        Ok(FeatureFile { frames, dim, values })
    }
}

pub fn read_features(path: &Path) -> Result<FeatureFile> {
    let bytes = fs::read(path).map_err(|e| BamError::io(path, e))?;
    FeatureFile::from_bytes(&bytes)
}

pub fn write_features(path: &Path, ff: &FeatureFile) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| BamError::io(path, e))?;
    f.write_all(&ff.to_bytes()).map_err(|e| BamError::io(path, e))
}

/// Path of the feature file that stands in for an utterance's waveform.
pub fn feature_path(dir: &Path, entry: &ManifestEntry) -> PathBuf {
    dir.join(Path::new(&entry.path).with_extension("bamf"))
}
