//! Multi-seed ablations over model variants and boundary heads, and the
//! median-ordering checks run on their results.

use std::fmt::Write as _;
use std::path::Path;

use crate::boundary::BoundaryBranch;
use crate::config::{BamConfig, Variant};
use crate::data::{read_manifest, Split};
use crate::error::{BamError, Result};
use crate::metrics::Task;
use crate::model::Bam;
use crate::optim::AdamState;
use crate::train::{evaluate, load_examples, train, Example};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    /// Model layout, scored on authenticity.
    Variant,
    /// Boundary head of the full model, scored on boundary detection.
    BoundaryHead,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Variant => "variant",
            Group::BoundaryHead => "boundary_head",
        }
    }
}

/// One trained and evaluated configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub group: Group,
    pub name: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub auth_eer: Option<f64>,
    pub auth_f1: f64,
    pub boundary_eer: Option<f64>,
    pub boundary_f1: Option<f64>,
}

pub const CSV_HEADER: &str = "group,name,seed,best_epoch,auth_eer,auth_f1,boundary_eer,boundary_f1";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{},{}",
            r.group.name(),
            r.name,
            r.seed,
            r.best_epoch,
            fmt_opt(r.auth_eer),
            r.auth_f1,
            fmt_opt(r.boundary_eer),
            fmt_opt(r.boundary_f1)
        );
    }
    s
}

/// Name of a boundary head in ablation output.
pub fn head_name(branch: BoundaryBranch) -> &'static str {
    match branch {
        BoundaryBranch::Fc => "fc",
        BoundaryBranch::Inter => "inter",
        BoundaryBranch::Intra => "intra",
        BoundaryBranch::Full => "be",
    }
}

pub struct AblationPlan {
    pub variants: Vec<Variant>,
    pub heads: Vec<BoundaryBranch>,
    pub seeds: Vec<u64>,
}

impl Default for AblationPlan {
    fn default() -> Self {
        AblationPlan {
            variants: Variant::ALL.to_vec(),
            heads: vec![BoundaryBranch::Fc, BoundaryBranch::Inter, BoundaryBranch::Intra, BoundaryBranch::Full],
            seeds: vec![1, 2, 3],
        }
    }
}

/// Trains with `seed` for both initialization and the data stream, then
/// scores the best-dev model on the eval split.
pub fn run_one(
    cfg: &BamConfig,
    seed: u64,
    train_set: &[Example],
    dev_set: &[Example],
    eval_set: &[Example],
) -> Result<(usize, Vec<crate::metrics::EvalReport>)> {
    let mut cfg = cfg.clone();
    cfg.train.seed = seed;
    let mut model = Bam::new(&cfg.model, seed)?;
    let mut adam = AdamState::new(cfg.train.adam.clone(), &model.store);
    let outcome = train(&mut model, &mut adam, 0, &cfg, train_set, dev_set, None)?;
    let mut best = outcome.best;
    let reports = evaluate(&mut best, eval_set, &[cfg.model.resolution_ms()], &cfg)?;
    Ok((outcome.best_epoch, reports))
}

fn row(group: Group, name: &str, seed: u64, best_epoch: usize, reports: &[crate::metrics::EvalReport]) -> AblationRow {
    let auth = reports.iter().find(|r| r.task == Task::Authenticity);
    let bound = reports.iter().find(|r| r.task == Task::Boundary);
    AblationRow {
        group,
        name: name.to_string(),
        seed,
        best_epoch,
        auth_eer: auth.and_then(|r| r.eer),
        auth_f1: auth.map_or(0.0, |r| r.f1),
        boundary_eer: bound.and_then(|r| r.eer),
        boundary_f1: bound.map(|r| r.f1),
    }
}

/// Runs every variant and boundary head for every seed on the corpus in
/// `dir`. The full boundary head reuses the matching `bfa_be` run.
/// `progress` sees each row as it completes.
pub fn run(
    dir: &Path,
    cfg: &BamConfig,
    plan: &AblationPlan,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if plan.seeds.is_empty() {
        return Err(BamError::InvalidArgument("no seeds to run".into()));
    }
    let entries = read_manifest(dir)?;
    let train_set = load_examples(dir, &entries, Split::Train, cfg)?;
    let dev_set = load_examples(dir, &entries, Split::Dev, cfg)?;
    let eval_set = load_examples(dir, &entries, Split::Eval, cfg)?;
    let mut rows = Vec::new();
    for &seed in &plan.seeds {
        let mut full = None;
        for &variant in &plan.variants {
            let mut c = cfg.clone();
            c.model.variant = variant;
            c.model.boundary_branch = BoundaryBranch::Full;
            let (epoch, reports) = run_one(&c, seed, &train_set, &dev_set, &eval_set)?;
            if variant == Variant::BfaBe {
                full = Some((epoch, reports.clone()));
            }
            let r = row(Group::Variant, variant.name(), seed, epoch, &reports);
            progress(&r);
            rows.push(r);
        }
        for &head in &plan.heads {
            let (epoch, reports) = match (head, &full) {
                (BoundaryBranch::Full, Some(done)) => done.clone(),
                _ => {
                    let mut c = cfg.clone();
                    c.model.variant = Variant::BfaBe;
                    c.model.boundary_branch = head;
                    run_one(&c, seed, &train_set, &dev_set, &eval_set)?
                }
            };
            let r = row(Group::BoundaryHead, head_name(head), seed, epoch, &reports);
            progress(&r);
            rows.push(r);
        }
    }
    Ok(rows)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Median over seeds of the group's headline EER: authenticity for
/// variants, boundary detection for boundary heads.
pub fn median_eer(rows: &[AblationRow], group: Group, name: &str) -> Option<f64> {
    let vals: Option<Vec<f64>> = rows
        .iter()
        .filter(|r| r.group == group && r.name == name)
        .map(|r| match group {
            Group::Variant => r.auth_eer,
            Group::BoundaryHead => r.boundary_eer,
        })
        .collect();
    vals.and_then(median)
}

/// Outcome of one ordering claim.
#[derive(Clone, Debug)]
pub struct OrderingCheck {
    pub claim: String,
    pub holds: bool,
}

fn medians(rows: &[AblationRow], group: Group, names: &[&str]) -> Option<Vec<f64>> {
    names.iter().map(|n| median_eer(rows, group, n)).collect()
}

/// `bfa_be <= fa_be <= fa <= baseline`, with `bfa_be` at least one EER
/// point below `baseline`.
pub fn variant_ordering(rows: &[AblationRow]) -> OrderingCheck {
    let names = ["bfa_be", "fa_be", "fa", "baseline"];
    match medians(rows, Group::Variant, &names) {
        Some(m) => {
            let chain = m.windows(2).all(|w| w[0] <= w[1]);
            let margin = m[3] - m[0];
            OrderingCheck {
                claim: format!(
                    "median eer bfa_be {:.4} <= fa_be {:.4} <= fa {:.4} <= baseline {:.4}, margin {:.4} >= 0.01",
                    m[0], m[1], m[2], m[3], margin
                ),
                holds: chain && margin >= 0.01,
            }
        }
        None => OrderingCheck { claim: "variant medians missing".into(), holds: false },
    }
}

/// `be <= min(inter, intra) <= fc` on boundary-detection EER.
pub fn head_ordering(rows: &[AblationRow]) -> OrderingCheck {
    let names = ["be", "inter", "intra", "fc"];
    match medians(rows, Group::BoundaryHead, &names) {
        Some(m) => {
            let branch = m[1].min(m[2]);
            OrderingCheck {
                claim: format!(
                    "median boundary eer be {:.4} <= min(inter {:.4}, intra {:.4}) <= fc {:.4}",
                    m[0], m[1], m[2], m[3]
                ),
                holds: m[0] <= branch && branch <= m[3],
            }
        }
        None => OrderingCheck { claim: "boundary head medians missing".into(), holds: false },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(group: Group, name: &str, seed: u64, eer: f64) -> AblationRow {
        AblationRow {
            group,
            name: name.into(),
            seed,
            best_epoch: 0,
            auth_eer: Some(eer),
            auth_f1: 0.5,
            boundary_eer: Some(eer),
            boundary_f1: None,
        }
    }

    #[test]
    fn medians_and_orderings() {
        let mut rows = Vec::new();
        for (name, base) in [("bfa_be", 0.05), ("fa_be", 0.06), ("fa", 0.07), ("baseline", 0.08)] {
            for (seed, jitter) in [(1, 0.0), (2, 0.5), (3, -0.001)] {
                rows.push(r(Group::Variant, name, seed, base + jitter));
            }
        }
        assert_eq!(median_eer(&rows, Group::Variant, "fa"), Some(0.07));
        assert!(variant_ordering(&rows).holds);
        rows.iter_mut().filter(|r| r.name == "baseline").for_each(|r| r.auth_eer = r.auth_eer.map(|e| e - 0.025));
        assert!(!variant_ordering(&rows).holds, "margin below one point");

        let mut heads = Vec::new();
        for (name, e) in [("be", 0.1), ("inter", 0.2), ("intra", 0.15), ("fc", 0.3)] {
            heads.push(r(Group::BoundaryHead, name, 1, e));
        }
        assert!(head_ordering(&heads).holds);
        heads[3].boundary_eer = Some(0.12);
        assert!(!head_ordering(&heads).holds);
        assert!(!head_ordering(&[]).holds);
    }

    #[test]
    fn csv_is_fixed_precision() {
        let mut row = r(Group::BoundaryHead, "be", 2, 0.125);
        row.boundary_f1 = None;
        let csv = to_csv(&[row]);
        assert_eq!(csv, format!("{CSV_HEADER}\nboundary_head,be,2,0,0.125000,0.500000,0.125000,nan\n"));
    }
}
