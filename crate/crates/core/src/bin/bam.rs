#[cfg(not(target_arch = "wasm32"))]
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use bam::ablation::{self, AblationPlan, AblationRow, Group};
use bam::boundary::BoundaryBranch;
use bam::checkpoint::Checkpoint;
use bam::config::{BamConfig, Variant};
use bam::data::{generate_corpus, read_manifest, Split, SynthConfig};
use bam::error::BamError;
use bam::gradcheck;
use bam::labels::{repool_labels, LabelDump};
use bam::metrics::EvalReport;
use bam::model::Bam;
use bam::optim::AdamState;
use bam::train::{load_examples, reports_csv, reports_from_scores, score_split, train};

#[derive(Parser)]
#[command(name = "bam", version, about = "Frame-level localization of partially spoofed audio")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic partially spoofed corpus.
    GenData(GenData),
    /// Train a model, writing checkpoints and an epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint at one or more resolutions.
    Eval(EvalArgs),
    /// Train every variant and boundary head over several seeds.
    Ablate(AblateArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Summarize an ablation CSV or convert an eval JSON report to CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 600)]
    n_utts: usize,
    /// Defaults to BAM_SEED, then 42.
    #[arg(long)]
    seed: Option<u64>,
    /// Spoofed fraction range per utterance, `min:max`.
    #[arg(long, value_parser = parse_ratio)]
    spoof_ratio: Option<(f64, f64)>,
    #[arg(long, default_value_t = 8000)]
    sample_rate: u32,
    /// Utterance duration range in seconds, `min:max`.
    #[arg(long, value_parser = parse_ratio)]
    duration: Option<(f64, f64)>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Preset name (`desk`, `paper`) or JSON file.
    #[arg(long, default_value = "desk")]
    config: String,
    /// Override a config value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for `epochs.jsonl`, `best.bamc`, `last.bamc`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Start from the matching parameters of another checkpoint.
    #[arg(long, conflicts_with = "resume")]
    init_from: Option<PathBuf>,
    /// Continue an interrupted run from its checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "eval", value_parser = parse_split)]
    split: Split,
    /// Comma-separated resolutions in ms; defaults to the model's own.
    #[arg(long, value_delimiter = ',')]
    resolutions: Vec<u32>,
    /// Score each utterance separately and average the EERs.
    #[arg(long)]
    per_utterance_eer: bool,
    /// Write the reports as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write per-utterance labels at every resolution as JSON lines.
    #[arg(long)]
    dump_labels: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',', value_parser = parse_variant, default_value = "baseline,fa,fa_be,bfa_be")]
    variants: Vec<Variant>,
    /// Boundary heads of the full model; empty to skip.
    #[arg(long, value_delimiter = ',', value_parser = parse_branch, default_value = "fc,inter,intra,full")]
    heads: Vec<BoundaryBranch>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Perturb this op's backward rule (negative control).
    #[arg(long)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Ablation CSV or eval JSON report.
    input: PathBuf,
}

fn parse_ratio(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(':').ok_or("expected min:max")?;
    let a: f64 = a.parse().map_err(|_| format!("bad number {a:?}"))?;
    let b: f64 = b.parse().map_err(|_| format!("bad number {b:?}"))?;
    Ok((a, b))
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: BamError| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: BamError| e.to_string())
}

fn parse_branch(s: &str) -> Result<BoundaryBranch, String> {
    s.parse().map_err(|e: BamError| e.to_string())
}

/// Exit status 2 for problems with the invocation itself.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var("BAM_SEED") {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| Usage(format!("BAM_SEED={s:?} is not an integer")).into()),
        Err(_) => Ok(None),
    }
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<BamConfig> {
    let mut cfg = match BamConfig::load(&args.config) {
        Ok(c) => c,
        Err(e @ BamError::Io { .. }) => return Err(Usage(format!("config {:?}: {e}", args.config)).into()),
        Err(e) => return Err(e.into()),
    };
    for o in &args.overrides {
        cfg.apply_override(o).map_err(|e| Usage(e.to_string()))?;
    }
    if let Some(seed) = env_seed()? {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: GenData) -> anyhow::Result<()> {
    let mut cfg = SynthConfig {
        n_utts: a.n_utts,
        sample_rate: a.sample_rate,
        seed: a.seed.or(env_seed()?).unwrap_or(42),
        ..SynthConfig::default()
    };
    if let Some((lo, hi)) = a.spoof_ratio {
        cfg.min_spoof_ratio = lo;
        cfg.max_spoof_ratio = hi;
    }
    if let Some((lo, hi)) = a.duration {
        cfg.min_duration_s = lo;
        cfg.max_duration_s = hi;
    }
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    let entries = generate_corpus(&a.out, &cfg)?;
    println!("wrote {} utterances to {}", entries.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let (mut model, mut adam, start, cfg) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let (model, adam) = ck.restore()?;
            let mut cfg = ck.config.clone();
            for o in &a.config.overrides {
                cfg.apply_override(o).map_err(|e| Usage(e.to_string()))?;
            }
            (model, adam, ck.epoch as usize, cfg)
        }
        None => {
            let cfg = load_config(&a.config)?;
            let mut model = Bam::new(&cfg.model, cfg.train.seed)?;
            if let Some(path) = &a.init_from {
                let copied = Checkpoint::load(path)?.load_matching(&mut model);
                eprintln!("initialized {copied} of {} parameters from {}", model.store.len(), path.display());
            }
            let adam = AdamState::new(cfg.train.adam.clone(), &model.store);
            (model, adam, 0, cfg)
        }
    };
    let entries = read_manifest(&a.data)?;
    let train_set = load_examples(&a.data, &entries, Split::Train, &cfg)?;
    let dev_set = load_examples(&a.data, &entries, Split::Dev, &cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_file(&a.out.join("config.json"), &cfg.to_json())?;
    let outcome = train(&mut model, &mut adam, start, &cfg, &train_set, &dev_set, Some(&a.out))?;
    for e in &outcome.log {
        println!("{}", serde_json::to_string(e)?);
    }
    println!("best epoch {}", outcome.best_epoch);
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (mut model, _) = ck.restore()?;
    let mut cfg = ck.config.clone();
    cfg.eval.per_utterance_eer |= a.per_utterance_eer;
    let native = model.cfg.resolution_ms();
    let resolutions = if a.resolutions.is_empty() { vec![native] } else { a.resolutions.clone() };
    if let Some(&bad) = resolutions.iter().find(|&&r| r == 0 || r % native != 0) {
        return Err(Usage(format!("resolution {bad} ms is not a multiple of the model's {native} ms")).into());
    }
    let entries = read_manifest(&a.data)?;
    let examples = load_examples(&a.data, &entries, a.split, &cfg)?;
    if examples.is_empty() {
        bail!("split {:?} is empty", a.split);
    }
    let scores = score_split(&mut model, &examples)?;
    let reports = reports_from_scores(&scores, native, &resolutions, &cfg)?;
    let csv = reports_csv(&reports);
    match &a.csv {
        Some(p) => write_file(p, &csv)?,
        None => print!("{csv}"),
    }
    if let Some(p) = &a.json {
        write_file(p, &serde_json::to_string_pretty(&reports)?)?;
    }
    if let Some(p) = &a.dump_labels {
        let mut out = String::new();
        for &res in &resolutions {
            for (id, labels) in scores.ids.iter().zip(&scores.labels) {
                let l = repool_labels(labels, (res / native) as usize)?;
                out.push_str(&serde_json::to_string(&LabelDump::new(id, &l))?);
                out.push('\n');
            }
        }
        write_file(p, &out)?;
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> anyhow::Result<()> {
    let cfg = load_config(&a.config)?;
    let plan = AblationPlan { variants: a.variants, heads: a.heads, seeds: a.seeds };
    let stderr = std::io::stderr();
    let rows = ablation::run(&a.data, &cfg, &plan, |r| {
        let _ = writeln!(stderr.lock(), "{}", ablation::to_csv(std::slice::from_ref(r)).lines().nth(1).unwrap_or(""));
    })?;
    write_file(&a.out, &ablation::to_csv(&rows))?;
    print_orderings(&rows);
    Ok(())
}

fn print_orderings(rows: &[AblationRow]) {
    for check in [ablation::variant_ordering(rows), ablation::head_ordering(rows)] {
        println!("{} {}", if check.holds { "holds:" } else { "fails:" }, check.claim);
    }
}

fn gradcheck_cmd(a: GradcheckArgs) -> anyhow::Result<ExitCode> {
    if let Some(op) = &a.corrupt {
        if !bam::autograd::OP_NAMES.contains(&op.as_str()) {
            return Err(Usage(format!("unknown op {op:?}")).into());
        }
    }
    let report = gradcheck::run(a.corrupt.as_deref())?;
    print!("{report}");
    if report.passed() {
        println!("all gradients within {:e}", gradcheck::TOLERANCE);
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradient mismatch in: {}", report.failures().join(", "));
        Ok(ExitCode::from(1))
    }
}

fn parse_ablation_csv(text: &str) -> anyhow::Result<Vec<AblationRow>> {
    let opt = |s: &str| -> anyhow::Result<Option<f64>> {
        Ok(if s == "nan" { None } else { Some(s.parse()?) })
    };
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            bail!("line {}: expected 8 fields", i + 1);
        }
        let group = match f[0] {
            "variant" => Group::Variant,
            "boundary_head" => Group::BoundaryHead,
            other => bail!("line {}: unknown group {other:?}", i + 1),
        };
        rows.push(AblationRow {
            group,
            name: f[1].to_string(),
            seed: f[2].parse()?,
            best_epoch: f[3].parse()?,
            auth_eer: opt(f[4])?,
            auth_f1: f[5].parse()?,
            boundary_eer: opt(f[6])?,
            boundary_f1: opt(f[7])?,
        });
    }
    Ok(rows)
}

fn report_cmd(a: ReportArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    if text.starts_with(ablation::CSV_HEADER) {
        let rows = parse_ablation_csv(&text)?;
        println!("group,name,median_eer,seeds");
        let mut seen: Vec<(Group, String)> = Vec::new();
        for r in &rows {
            if !seen.iter().any(|(g, n)| *g == r.group && *n == r.name) {
                seen.push((r.group, r.name.clone()));
            }
        }
        for (g, n) in &seen {
            let count = rows.iter().filter(|r| r.group == *g && r.name == *n).count();
            let m = ablation::median_eer(&rows, *g, n).map_or("nan".into(), |v| format!("{v:.6}"));
            println!("{},{n},{m},{count}", g.name());
        }
        print_orderings(&rows);
    } else {
        let reports: Vec<EvalReport> = serde_json::from_str(&text)
            .with_context(|| format!("{} is neither an ablation CSV nor an eval JSON report", a.input.display()))?;
        print!("{}", reports_csv(&reports));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => train_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => eval_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Ablate(a) => ablate_cmd(a).map(|_| ExitCode::SUCCESS),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Report(a) => report_cmd(a).map(|_| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
