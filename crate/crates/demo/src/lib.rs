//! Browser bindings: boundary adjacency, frame labels from splice points,
//! and boundary-masked attention weights of a randomly initialised block.

use bam::boundary::adjacency;
use bam::data::{Span, SpanClass};
use bam::fab::{Fab, FrameMask, MaskMode};
use bam::labels::span_labels;
use bam::optim::ParamStore;
use bam::autograd::Graph;
use bam::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Sample rate of the label demo.
pub const SAMPLE_RATE: u32 = 8000;
/// Feature width of the attention demo.
pub const DIM: usize = 8;

fn parse_pattern(pattern: &str) -> Result<Vec<u8>, String> {
    let bits: Vec<u8> = pattern
        .chars()
        .filter(|c| !c.is_whitespace() && *c != ',')
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            other => Err(format!("unexpected {other:?} in boundary pattern")),
        })
        .collect::<Result<_, _>>()?;
    if bits.is_empty() {
        return Err("boundary pattern is empty".into());
    }
    Ok(bits)
}

/// Row-major `T x T` adjacency of a pattern such as `"0010010"`.
pub fn adjacency_of(pattern: &str) -> Result<Vec<f64>, String> {
    let bits = parse_pattern(pattern)?;
    Ok(adjacency(&bits).map_err(|e| e.to_string())?.data().to_vec())
}

/// Frame labels as `{"y": [..], "b": [..]}` for an utterance of
/// `duration_ms` whose class flips at each splice point, starting genuine.
pub fn labels_of(duration_ms: u32, splices_ms: &str, resolution_ms: u32) -> Result<String, String> {
    let mut cuts: Vec<u32> = splices_ms
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u32>().map_err(|_| format!("bad splice point {s:?}")))
        .collect::<Result<_, _>>()?;
    cuts.sort_unstable();
    cuts.dedup();
    if cuts.iter().any(|&c| c == 0 || c >= duration_ms) {
        return Err(format!("splice points must lie inside (0, {duration_ms}) ms"));
    }
    let to_samples = |ms: u32| (ms as u64 * SAMPLE_RATE as u64 / 1000) as usize;
    let mut spans = Vec::new();
    let mut start = 0;
    let mut class = SpanClass::Genuine;
    for end in cuts.iter().map(|&c| to_samples(c)).chain([to_samples(duration_ms)]) {
        spans.push(Span { start, end, class });
        start = end;
        class = match class {
            SpanClass::Genuine => SpanClass::Spoof,
            SpanClass::Spoof => SpanClass::Genuine,
        };
    }
    let labels = span_labels(&spans, to_samples(duration_ms), SAMPLE_RATE, resolution_ms).map_err(|e| e.to_string())?;
    Ok(serde_json::json!({ "y": labels.y, "b": labels.b }).to_string())
}

/// Row-major `T x T` attention weights of one block over random frame
/// features, restricted to the segments the boundary pattern leaves
/// connected. `spread` scales the features, sharpening the weights.
pub fn attention_of(pattern: &str, seed: u32, spread: f64, masked: bool) -> Result<Vec<f64>, String> {
    let bits = parse_pattern(pattern)?;
    let t = bits.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let mut store = ParamStore::new();
    let fab = Fab::new(&mut store, "demo", DIM, 1, MaskMode::Exclude, &mut rng);
    store.get_mut(fab.w_a).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let feats: Vec<f64> = (0..t * DIM).map(|_| spread * rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let f = g.constant(Tensor::new(vec![1, t, DIM], feats).map_err(|e| e.to_string())?);
    let a = fab.attention_from_features(&mut g, &p, f).map_err(|e| e.to_string())?;
    let mask = if masked {
        let adj = adjacency(&bits).map_err(|e| e.to_string())?;
        FrameMask { adjacency: Some(FrameMask::stack(&[adj]).map_err(|e| e.to_string())?), keys: None }
    } else {
        FrameMask::none()
    };
    let w = fab.weights(&mut g, a, &mask).map_err(|e| e.to_string())?;
    Ok(g.value(w).data().to_vec())
}

#[wasm_bindgen]
pub fn boundary_adjacency(pattern: &str) -> Result<Vec<f64>, JsError> {
    adjacency_of(pattern).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn frame_labels(duration_ms: u32, splices_ms: &str, resolution_ms: u32) -> Result<String, JsError> {
    labels_of(duration_ms, splices_ms, resolution_ms).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn attention_weights(pattern: &str, seed: u32, spread: f64, masked: bool) -> Result<Vec<f64>, JsError> {
    attention_of(pattern, seed, spread, masked).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjacency_blocks() {
        let m = adjacency_of("0010").unwrap();
        assert_eq!(m.len(), 16);
        assert_eq!(&m[0..4], &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(&m[8..12], &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(&m[12..16], &[0.0, 0.0, 0.0, 1.0]);
        assert!(adjacency_of("01x").is_err());
        assert!(adjacency_of("").is_err());
    }

    #[test]
    fn labels_mark_straddling_frame() {
        let v: serde_json::Value = serde_json::from_str(&labels_of(480, "200", 160).unwrap()).unwrap();
        assert_eq!(v["y"], serde_json::json!([0, 1, 1]));
        assert_eq!(v["b"], serde_json::json!([0, 1, 0]));
        assert!(labels_of(480, "480", 160).is_err());
        assert!(labels_of(480, "abc", 160).is_err());
    }

    #[test]
    fn masked_attention_stays_in_segment() {
        let w = attention_of("00100", 3, 2.0, true).unwrap();
        let t = 5;
        for i in 0..t {
            let row = &w[i * t..(i + 1) * t];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..t {
                let same = (i < 2 && j < 2) || (i > 2 && j > 2) || i == j;
                if !same {
                    assert_eq!(row[j], 0.0, "{i} {j}");
                }
            }
        }
        let open = attention_of("00100", 3, 2.0, false).unwrap();
        assert!(open.iter().all(|&v| v > 0.0));
    }
}
