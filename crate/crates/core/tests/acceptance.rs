//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bam::ablation::{self, AblationPlan};
use bam::autograd::{Graph, OP_NAMES};
use bam::boundary::{adjacency, Bfa};
use bam::checkpoint::Checkpoint;
use bam::config::BamConfig;
use bam::data::{generate_corpus, read_manifest, Span, SpanClass, Split, SynthConfig};
use bam::fab::{FrameMask, MaskMode};
use bam::gradcheck;
use bam::labels::{repool_labels, span_labels, FrameLabelSet};
use bam::metrics::{compute_eer, ScoredFrames};
use bam::model::{total_loss, Bam};
use bam::nn::Mode;
use bam::optim::{AdamState, ParamStore};
use bam::tensor::Tensor;
use bam::train::{load_examples, make_batch};

// Same allocator as the binary: the in-process trainings allocate heavily.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration) -> String {
    format!("{:.1}s of {}s", elapsed.as_secs_f64(), limit.as_secs())
}

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let report = gradcheck::run(None).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let ops: Vec<&str> = report
        .results
        .iter()
        .filter(|r| r.kind == gradcheck::CheckKind::Op)
        .map(|r| r.name.as_str())
        .collect();
    if ops != OP_NAMES {
        return Err(format!("op coverage {ops:?}"));
    }
    let worst = report.results.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    let control = gradcheck::run(Some("bmm")).map_err(|e| e.to_string())?;
    check(
        report.passed() && control.failures().contains(&"bmm") && elapsed <= Duration::from_secs(120),
        format!(
            "{} checks, worst rel err {worst:.2e}, corrupted bmm caught: {}, {}",
            report.results.len(),
            control.failures().contains(&"bmm"),
            within(elapsed, Duration::from_secs(120))
        ),
    )
}

fn adjacency_oracle() -> Outcome {
    let t = Instant::now();
    let mut patterns = 0;
    for len in 1..=8usize {
        for bits in 0u32..(1 << len) {
            let b: Vec<u8> = (0..len).map(|n| ((bits >> n) & 1) as u8).collect();
            let a = adjacency(&b).map_err(|e| e.to_string())?;
            for i in 0..len {
                for j in 0..len {
                    let want: f64 = if i == j {
                        1.0
                    } else {
                        (i.min(j)..=i.max(j)).map(|n| 1.0 - b[n] as f64).product()
                    };
                    if a.get(&[i, j]) != want {
                        return Err(format!("pattern {b:?} entry ({i},{j}): {} vs {want}", a.get(&[i, j])));
                    }
                }
            }
            patterns += 1;
        }
    }
    let elapsed = t.elapsed();
    check(elapsed <= Duration::from_secs(10), format!("{patterns} patterns exact, {}", within(elapsed, Duration::from_secs(10))))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn bfa_output(bfa: &mut Bfa, store: &ParamStore, f: &Tensor, mask: &FrameMask) -> Tensor {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let x = g.constant(f.clone());
    let y = bfa.forward(&mut g, &p, x, mask, Mode::Eval).unwrap();
    g.value(y).clone()
}

fn mask_isolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut isolated_pairs, mut worst_leak, mut worst_agree) = (0usize, 0.0f64, 0.0f64);
    for trial in 0..200 {
        let t = rng.random_range(3..=10);
        let d = rng.random_range(2..=6);
        let heads = rng.random_range(1..=2);
        let mode = if trial % 2 == 0 { MaskMode::Exclude } else { MaskMode::Renormalize };
        let mut store = ParamStore::new();
        let mut bfa = Bfa::new(&mut store, "bfa", d, heads, 2, mode, &mut rng);
        for bn in bfa.batchnorms_mut() {
            bn.running_mean.iter_mut().for_each(|m| *m = rng.random_range(-0.2..0.2));
            bn.running_var.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
        }
        let f = random_tensor(&mut rng, &[1, t, d]);
        let b: Vec<u8> = (0..t).map(|_| u8::from(rng.random_bool(0.3))).collect();
        let a = adjacency(&b).unwrap();
        let mask = FrameMask { adjacency: Some(FrameMask::stack(&[a.clone()]).unwrap()), keys: None };
        let base = bfa_output(&mut bfa, &store, &f, &mask);
        let j = rng.random_range(0..t);
        let mut g = f.clone();
        for k in 0..d {
            g.set(&[0, j, k], f.get(&[0, j, k]) + rng.random_range(-2.0..2.0));
        }
        let moved = bfa_output(&mut bfa, &store, &g, &mask);
        for i in (0..t).filter(|&i| i != j && a.get(&[i, j]) == 0.0) {
            isolated_pairs += 1;
            for k in 0..d {
                worst_leak = worst_leak.max((moved.get(&[0, i, k]) - base.get(&[0, i, k])).abs());
            }
        }
        let open = FrameMask { adjacency: Some(FrameMask::stack(&[adjacency(&vec![0; t]).unwrap()]).unwrap()), keys: None };
        let masked = bfa_output(&mut bfa, &store, &f, &open);
        let plain = bfa_output(&mut bfa, &store, &f, &FrameMask::none());
        worst_agree = worst_agree.max(masked.max_abs_diff(&plain));
    }
    check(
        worst_leak <= 1e-12 && worst_agree <= 1e-12 && isolated_pairs > 0,
        format!("200 trials, {isolated_pairs} isolated pairs, max leak {worst_leak:.1e}, all-zero mask gap {worst_agree:.1e}"),
    )
}

/// Sweep over midpoints between sorted distinct scores plus both infinities.
fn brute_force_eer(scores: &[f64], labels: &[u8]) -> f64 {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut thresholds = vec![f64::NEG_INFINITY];
    thresholds.extend(distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    thresholds.push(f64::INFINITY);
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut best = (f64::INFINITY, 0.0);
    for thr in thresholds {
        let fp = scores.iter().zip(labels).filter(|(s, l)| **l == 0 && **s >= thr).count() as f64;
        let fn_ = scores.iter().zip(labels).filter(|(s, l)| **l == 1 && **s < thr).count() as f64;
        let (far, frr) = (fp / neg, fn_ / pos);
        if (far - frr).abs() < best.0 {
            best = ((far - frr).abs(), (far + frr) / 2.0);
        }
    }
    best.1
}

fn eer_of(scores: &[f64], labels: &[u8]) -> f64 {
    let mut sf = ScoredFrames::default();
    sf.push("u", scores, labels).unwrap();
    compute_eer(&sf).unwrap().eer
}

fn metric_oracle() -> Outcome {
    let hand = [
        (vec![0.1, 0.9], vec![0, 1], 0.0),
        (vec![0.9, 0.1], vec![0, 1], 1.0),
        (vec![0.2, 0.4, 0.6, 0.8], vec![0, 1, 0, 1], 0.5),
    ];
    for (s, l, want) in &hand {
        let got = eer_of(s, l);
        if got != *want {
            return Err(format!("hand case {s:?} {l:?}: {got} vs {want}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for set in 0..1000 {
        let n = rng.random_range(2..60);
        let levels = rng.random_range(2..20);
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let (got, want) = (eer_of(&scores, &labels), brute_force_eer(&scores, &labels));
        if got != want {
            return Err(format!("set {set}: {got} vs oracle {want}"));
        }
    }
    Ok("3 hand cases and 1000 random sets exact".into())
}

fn random_spans(rng: &mut ChaCha8Rng, len: usize) -> Vec<Span> {
    let edges = (len - 1) / 1280;
    let mut cuts: Vec<usize> = (0..rng.random_range(0..6))
        .map(|_| {
            if edges > 0 && rng.random_bool(0.3) {
                1280 * rng.random_range(1..=edges)
            } else {
                rng.random_range(1..len)
            }
        })
        .collect();
    cuts.sort_unstable();
    cuts.dedup();
    let mut class = if rng.random_bool(0.5) { SpanClass::Genuine } else { SpanClass::Spoof };
    let mut spans = Vec::new();
    let mut at = 0;
    for c in cuts.into_iter().chain([len]) {
        spans.push(Span::new(at, c, class));
        at = c;
        class = if class == SpanClass::Genuine { SpanClass::Spoof } else { SpanClass::Genuine };
    }
    spans
}

fn label_correctness() -> Outcome {
    let hand = span_labels(&[Span::new(0, 2400, SpanClass::Genuine), Span::new(2400, 4800, SpanClass::Spoof)], 4800, 8000, 160)
        .map_err(|e| e.to_string())?;
    if hand != (FrameLabelSet { resolution_ms: 160, y: vec![0, 1, 1], b: vec![0, 1, 0] }) {
        return Err(format!("straddling splice gave {hand:?}"));
    }
    let edge = span_labels(&[Span::new(0, 2560, SpanClass::Genuine), Span::new(2560, 5120, SpanClass::Spoof)], 5120, 8000, 160)
        .map_err(|e| e.to_string())?;
    if edge.b != vec![0; 4] || edge.y != vec![0, 0, 1, 1] {
        return Err(format!("edge-aligned splice gave {edge:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut edge_frames = 0;
    for u in 0..100 {
        let len = rng.random_range(1280..40_000);
        let spans = random_spans(&mut rng, len);
        for res in [20, 40, 80, 160, 320, 640] {
            let l = span_labels(&spans, len, 8000, res).map_err(|e| e.to_string())?;
            if l.y.iter().zip(&l.b).any(|(&y, &b)| b == 1 && y != 1) {
                return Err(format!("utterance {u} at {res} ms has a boundary frame not labelled spoof"));
            }
        }
        let fine = span_labels(&spans, len, 8000, 160).map_err(|e| e.to_string())?;
        let coarse = span_labels(&spans, len, 8000, 320).map_err(|e| e.to_string())?;
        let repooled = repool_labels(&fine, 2).map_err(|e| e.to_string())?;
        if coarse.y != repooled.y || coarse.b.len() != repooled.b.len() {
            return Err(format!("utterance {u}: direct 320 ms authenticity labels differ from repooled 160 ms ones"));
        }
        for t in 0..coarse.b.len() {
            // a splice exactly on the 160 ms edge inside a 320 ms frame makes
            // that frame mixed although neither half is
            let edge_splice = spans.iter().any(|s| s.start == (2 * t + 1) * 1280);
            let want = if edge_splice { 1 } else { repooled.b[t] };
            if coarse.b[t] != want {
                return Err(format!("utterance {u} frame {t}: direct boundary {} vs repooled {}", coarse.b[t], repooled.b[t]));
            }
            edge_frames += usize::from(edge_splice);
        }
    }
    Ok(format!(
        "hand cases exact; B implies Y and repool equivalence on 100 random utterances ({edge_frames} edge-aligned frames)"
    ))
}

fn target_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn default_corpus() -> PathBuf {
    let dir = target_dir().join("corpus");
    let cfg = SynthConfig::default();
    let fresh = read_manifest(&dir).map(|m| m.len() == cfg.n_utts).unwrap_or(false);
    if !fresh {
        let _ = std::fs::remove_dir_all(&dir);
        generate_corpus(&dir, &cfg).expect("generate corpus");
    }
    dir
}

fn run_ablation(dir: &Path) -> Result<(String, Duration), String> {
    let t = Instant::now();
    let rows = ablation::run(dir, &BamConfig::desk(), &AblationPlan::default(), |r| {
        eprintln!("  {}", ablation::to_csv(std::slice::from_ref(r)).lines().nth(1).unwrap_or(""));
    })
    .map_err(|e| e.to_string())?;
    Ok((ablation::to_csv(&rows), t.elapsed()))
}

fn ablation_rows(csv: &str) -> Vec<ablation::AblationRow> {
    csv.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let opt = |s: &str| (s != "nan").then(|| s.parse().unwrap());
            ablation::AblationRow {
                group: if f[0] == "variant" { ablation::Group::Variant } else { ablation::Group::BoundaryHead },
                name: f[1].into(),
                seed: f[2].parse().unwrap(),
                best_epoch: f[3].parse().unwrap(),
                auth_eer: opt(f[4]),
                auth_f1: f[5].parse().unwrap(),
                boundary_eer: opt(f[6]),
                boundary_f1: opt(f[7]),
            }
        })
        .collect()
}

fn stop_gradient_contract(dir: &Path) -> Outcome {
    let mut cfg = BamConfig::desk();
    cfg.train.lambda = 0.0;
    let entries = read_manifest(dir).map_err(|e| e.to_string())?;
    let examples = load_examples(dir, &entries, Split::Train, &cfg).map_err(|e| e.to_string())?;
    let mut model = Bam::new(&cfg.model, 4).map_err(|e| e.to_string())?;
    let mut adam = AdamState::new(cfg.train.adam.clone(), &model.store);
    let head = model.boundary_head_params();
    let before: Vec<Tensor> = head.iter().map(|n| model.store.get(model.store.find(n).unwrap()).clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let items: Vec<_> = examples.iter().take(cfg.train.batch_size).collect();
    let batch = make_batch(&items, &cfg, &mut rng).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let out = model.forward(&mut g, &p, &batch.input, Some(&batch.lengths), None, Mode::Train).map_err(|e| e.to_string())?;
    let loss = total_loss(&mut g, &out, &batch.labels, 0.0).map_err(|e| e.to_string())?;
    g.backward(loss.total).map_err(|e| e.to_string())?;
    let grads = p.grads(&g, &model.store);
    let mut nonzero = 0;
    let mut others = 0.0f64;
    for (id, prm) in model.store.iter() {
        let gsum: f64 = grads[id.index()].data().iter().map(|v| v.abs()).sum();
        if head.contains(&prm.name) {
            nonzero += grads[id.index()].data().iter().filter(|&&v| v != 0.0).count();
        } else {
            others += gsum;
        }
    }
    adam.step(&mut model.store, &grads, 1.0).map_err(|e| e.to_string())?;
    let after: Vec<Tensor> = head.iter().map(|n| model.store.get(model.store.find(n).unwrap()).clone()).collect();
    check(
        head.len() == 2 && nonzero == 0 && after == before && others > 0.0,
        format!("{} head tensors, {nonzero} nonzero gradient entries, unchanged after step: {}", head.len(), after == before),
    )
}

fn multi_resolution(dir: &Path) -> Outcome {
    let mut cfg = BamConfig::desk();
    cfg.model.stride = 1;
    let model = Bam::new(&cfg.model, 2).map_err(|e| e.to_string())?;
    let adam = AdamState::new(cfg.train.adam.clone(), &model.store);
    let ckpt = target_dir().join("fine.bamc");
    Checkpoint::capture(&model, &adam, 0, &cfg).save(&ckpt).map_err(|e| e.to_string())?;
    let csv_path = target_dir().join("resolutions.csv");
    let json_path = target_dir().join("resolutions.json");
    let status = Command::new(env!("CARGO_BIN_EXE_bam"))
        .args(["eval", "--data"])
        .arg(dir)
        .arg("--checkpoint")
        .arg(&ckpt)
        .args(["--resolutions", "20,40,80,160,320,640", "--csv"])
        .arg(&csv_path)
        .arg("--json")
        .arg(&json_path)
        .status()
        .map_err(|e| e.to_string())?;
    if !status.success() {
        return Err(format!("eval exited with {status}"));
    }
    let csv = std::fs::read_to_string(&csv_path).map_err(|e| e.to_string())?;
    let reports: Vec<bam::metrics::EvalReport> =
        serde_json::from_str(&std::fs::read_to_string(&json_path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let entries = read_manifest(dir).map_err(|e| e.to_string())?;
    let eval: Vec<_> = entries.iter().filter(|e| e.split == Split::Eval).collect();
    let mut mismatches = Vec::new();
    for res in [20u32, 40, 80, 160, 320, 640] {
        let factor = (res / 20) as usize;
        let expected: usize = eval.iter().map(|e| e.num_samples / 160 / factor).sum();
        for r in reports.iter().filter(|r| r.resolution_ms == res) {
            if r.frames != expected {
                mismatches.push(format!("{res} ms {}: {} vs {expected}", r.task, r.frames));
            }
        }
    }
    let rows = csv.lines().count() - 1;
    check(
        csv.starts_with("resolution_ms,task,eer,f1,precision,recall,threshold\n") && rows == 12 && mismatches.is_empty(),
        format!("{rows} rows over 6 resolutions, frame-count mismatches {mismatches:?}"),
    )
}

fn main() {
    std::fs::create_dir_all(target_dir()).expect("scratch dir");
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, outcome: Outcome| {
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n:>2} {tag} {name}: {detail}");
        results.push((n, name, outcome));
    };
    report(1, "gradient integrity", gradient_integrity());
    report(2, "adjacency oracle", adjacency_oracle());
    report(3, "mask isolation", mask_isolation());
    report(4, "metric oracle", metric_oracle());
    report(5, "label correctness", label_correctness());

    let corpus = default_corpus();
    let first = run_ablation(&corpus);
    match &first {
        Ok((csv, elapsed)) => {
            std::fs::write(target_dir().join("ablation.csv"), csv).expect("write ablation csv");
            let rows = ablation_rows(csv);
            let limit = Duration::from_secs(30 * 60);
            let v = ablation::variant_ordering(&rows);
            report(6, "ablation ordering", check(v.holds && *elapsed <= limit, format!("{}, {}", v.claim, within(*elapsed, limit))));
            let h = ablation::head_ordering(&rows);
            report(7, "boundary-head ordering", check(h.holds, h.claim));
        }
        Err(e) => {
            report(6, "ablation ordering", Err(e.clone()));
            report(7, "boundary-head ordering", Err(e.clone()));
        }
    }
    report(8, "stop-gradient contract", stop_gradient_contract(&corpus));
    report(9, "multi-resolution harness", multi_resolution(&corpus));
    let repeat = run_ablation(&corpus);
    let determinism = match (&first, &repeat) {
        (Ok((a, _)), Ok((b, _))) => check(a == b, format!("{} CSV bytes, identical: {}", a.len(), a == b)),
        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
    };
    report(10, "determinism", determinism);

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("all 10 criteria pass");
    } else {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
