//! Command-line surface: dataset synthesis, training, factor sweeps,
//! constrained selection, weight export, and the analysis studies.
//!
//! Exit codes: 0 success, 2 usage, 3 infeasible selection, 4 numerical
//! failure. All randomness in a command flows from its `--seed`.

mod svg;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use hyperscale_core::checkpoint::Checkpoint;
use hyperscale_core::cost::{self, AccuracyMetric, SelectError, SelectionConstraint};
use hyperscale_core::data;
use hyperscale_core::eval::{self, SweepCurve};
use hyperscale_core::experiments;
use hyperscale_core::hypernet;
use hyperscale_core::opt::AdamError;
use hyperscale_core::tensor::TensorError;
use hyperscale_core::train::{self, PolicyMode, PriorSpec, TrainConfig, TrainError, TrainMode};
use hyperscale_core::unet::{self, PrimaryNetConfig, RescalePolicy};

#[derive(Parser)]
#[command(name = "hyperscale", version, about = "Amortized rescaling-factor search for segmentation networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset directory.
    Synth(SynthArgs),
    /// Train a hypernetwork or a baseline network.
    Train(TrainArgs),
    /// Evaluate a trained hypernetwork over a factor grid.
    Sweep(SweepArgs),
    /// Pick the cheapest factor meeting an accuracy floor from a sweep CSV.
    Select(SelectArgs),
    /// Export standalone inference weights predicted at one factor.
    Export(ExportArgs),
    /// Run an analysis study.
    Study(StudyArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Foreground classes (1-3: disk, rectangle, triangle).
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of items assigned to the test list.
    #[arg(long, default_value_t = 0.2)]
    test_frac: f64,
    /// Overwrite an existing non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// hyper, fixed, or varres.
    #[arg(long)]
    mode: String,
    #[arg(long)]
    out: PathBuf,
    /// Uniform prior as LO:HI (hyper mode).
    #[arg(long)]
    prior: Option<String>,
    /// Fixed rescaling factor (fixed/varres mode).
    #[arg(long)]
    phi: Option<f64>,
    /// single or separate (one factor per rescale step).
    #[arg(long, default_value = "single")]
    policy: String,
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    patience: u32,
    /// Steps between validation rounds (0 = once per epoch).
    #[arg(long, default_value_t = 0)]
    val_interval: u64,
    /// Enable horizontal-flip augmentation.
    #[arg(long)]
    flip: bool,
    /// JSON file holding a full training config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the training log CSV here.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which split to evaluate: test or train.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0.01)]
    step: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write Dice-vs-factor and Dice-vs-GFLOPs panels here.
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    batch: usize,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    curve: PathBuf,
    #[arg(long)]
    alpha: f64,
    /// Accuracy column: mean or label:N.
    #[arg(long, default_value = "mean")]
    metric: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    phi: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StudyArgs {
    /// prior_width, transfer, separate, or cv.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Hyper checkpoint (transfer, separate, cv).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Baseline checkpoint (transfer).
    #[arg(long)]
    fixed: Option<PathBuf>,
    /// Comma-separated prior half-widths r (prior_width).
    #[arg(long)]
    r: Option<String>,
    /// Comma-separated seeds (prior_width).
    #[arg(long)]
    seeds: Option<String>,
    /// Grid step per axis (separate, cv) or for the transfer factor grid.
    #[arg(long, default_value_t = 0.1)]
    step: f64,
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Errors that are the caller's fault; mapped to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("HYPERSCALE_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(SelectError::Infeasible { .. }) = cause.downcast_ref::<SelectError>() {
            return 3;
        }
        if let Some(TrainError::NonFiniteLoss { .. }) = cause.downcast_ref::<TrainError>() {
            return 4;
        }
        if let Some(AdamError::NonFiniteGrad { .. }) = cause.downcast_ref::<AdamError>() {
            return 4;
        }
        if let Some(TensorError::NonFinite { .. }) = cause.downcast_ref::<TensorError>() {
            return 4;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Select(a) => cmd_select(a),
        Command::Export(a) => cmd_export(a),
        Command::Study(a) => cmd_study(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be >= 1"));
    }
    if a.out.exists() && a.out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) && !a.force {
        return Err(usage(format!("{} exists and is not empty; pass --force to overwrite", a.out.display())));
    }
    let ds = data::synth_shapes(a.n, a.size, a.classes, a.seed).map_err(|e| usage(e.to_string()))?;
    data::save_dataset(&ds, &a.out, a.test_frac, a.seed).context("writing dataset")?;
    println!(
        "wrote {} items ({}x{}, {} classes incl. background) to {}",
        a.n,
        a.size,
        a.size,
        a.classes + 1,
        a.out.display()
    );
    Ok(())
}

fn parse_prior(s: &str) -> Result<PriorSpec> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| usage(format!("--prior must be LO:HI, got {s}")))?;
    let (lo, hi) = (
        lo.parse::<f64>().map_err(|_| usage(format!("bad prior bound {lo}")))?,
        hi.parse::<f64>().map_err(|_| usage(format!("bad prior bound {hi}")))?,
    );
    PriorSpec::new(lo, hi).map_err(|e| usage(e.to_string()))
}

fn default_net(in_channels: usize, num_classes: usize) -> PrimaryNetConfig {
    PrimaryNetConfig::with_channels(in_channels, num_classes, vec![8, 16, 32, 64, 128], vec![16, 8, 4, 4])
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mode = match a.mode.as_str() {
        "hyper" => TrainMode::Hyper,
        "fixed" => TrainMode::Fixed,
        "varres" => TrainMode::VariableResolution,
        other => return Err(usage(format!("unknown mode {other}; use hyper, fixed or varres"))),
    };
    if mode != TrainMode::Hyper && a.prior.is_some() {
        return Err(usage(format!("--prior conflicts with --mode {}", a.mode)));
    }
    if mode == TrainMode::Hyper && a.phi.is_some() {
        return Err(usage("--phi conflicts with --mode hyper"));
    }

    let dir = data::load_dataset(&a.data).context("loading dataset")?;
    if dir.train.is_empty() {
        return Err(usage("dataset has an empty train list"));
    }

    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<TrainConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::new(mode, default_net(dir.train.in_channels(), dir.num_classes)),
    };
    cfg.mode = mode;
    cfg.policy_mode = match a.policy.as_str() {
        "single" => PolicyMode::Single,
        "separate" => PolicyMode::Separate,
        other => return Err(usage(format!("unknown policy {other}; use single or separate"))),
    };
    cfg.prior = match (&a.prior, mode) {
        (Some(s), _) => Some(parse_prior(s)?),
        (None, TrainMode::Hyper) => Some(PriorSpec { low: 0.0, high: 1.0 }),
        _ => None,
    };
    cfg.phi_fixed = match (a.phi, mode) {
        (Some(p), _) => Some(p),
        (None, TrainMode::Fixed) | (None, TrainMode::VariableResolution) => Some(0.5),
        _ => None,
    };
    cfg.batch_size = a.batch;
    cfg.adam.lr = a.lr;
    cfg.max_steps = a.steps;
    cfg.patience = a.patience;
    cfg.val_interval = a.val_interval;
    cfg.seed = a.seed;
    cfg.flip_augment = a.flip;
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let (train_split, val_split) = data::split(&dir.train, 0.8, cfg.seed).map_err(|e| usage(e.to_string()))?;
    let outcome = train::fit(cfg, train_split, val_split)?;
    outcome.checkpoint.save(&a.out).context("writing checkpoint")?;

    if let Some(log_path) = &a.log {
        let mut csv = String::from("step,train_loss,val_loss,phi\n");
        for row in &outcome.log {
            let phis: Vec<String> = row.phi.iter().map(|p| p.to_string()).collect();
            let val = row.val_loss.map(|v| v.to_string()).unwrap_or_default();
            writeln!(csv, "{},{},{},{}", row.step, row.train_loss, val, phis.join("|"))?;
        }
        std::fs::write(log_path, csv).context("writing training log")?;
    }
    println!(
        "trained to step {} ({:?}); best val loss {:?}; checkpoint {}",
        outcome.checkpoint.meta.step,
        outcome.reason,
        outcome.best_val_loss,
        a.out.display()
    );
    Ok(())
}

fn load_split(dir_path: &Path, split: &str) -> Result<data::Dataset> {
    let dir = data::load_dataset(dir_path).context("loading dataset")?;
    let ds = match split {
        "test" => dir.test,
        "train" => dir.train,
        other => return Err(usage(format!("unknown split {other}"))),
    };
    if ds.is_empty() {
        return Err(usage(format!("dataset split '{split}' is empty")));
    }
    Ok(ds)
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    if a.step <= 0.0 {
        return Err(usage("--step must be > 0"));
    }
    let ck = Checkpoint::load(&a.ckpt).context("loading checkpoint")?;
    let ds = load_split(&a.data, &a.split)?;
    let curve = eval::sweep(&ck, &ds, a.step, a.batch)?;
    std::fs::write(&a.out, curve.to_csv()).context("writing sweep csv")?;
    println!("swept {} factors into {}", curve.records.len(), a.out.display());

    if let Some(svg_path) = &a.svg {
        let dice_phi: Vec<(f64, f64)> = curve.records.iter().map(|r| (r.phi, r.mean_dice)).collect();
        let dice_flops: Vec<(f64, f64)> =
            curve.records.iter().map(|r| (r.flops as f64 / 1e9, r.mean_dice)).collect();
        let doc = svg::plot(&[
            (
                "Dice vs rescaling factor",
                "factor",
                "mean foreground Dice",
                vec![svg::Series { label: "hyper".into(), points: dice_phi }],
            ),
            (
                "Dice vs inference cost",
                "GFLOPs",
                "mean foreground Dice",
                vec![svg::Series { label: "hyper".into(), points: dice_flops }],
            ),
        ]);
        std::fs::write(svg_path, doc).context("writing svg")?;
    }
    Ok(())
}

fn parse_metric(s: &str) -> Result<AccuracyMetric> {
    match s {
        "mean" => Ok(AccuracyMetric::MeanDice),
        other => match other.strip_prefix("label:") {
            Some(n) => Ok(AccuracyMetric::Label(
                n.parse::<u32>().map_err(|_| usage(format!("bad label in --metric {other}")))?,
            )),
            None => Err(usage(format!("unknown metric {other}; use mean or label:N"))),
        },
    }
}

fn cmd_select(a: SelectArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(usage(format!("--alpha must be in [0, 1], got {}", a.alpha)));
    }
    let text = std::fs::read_to_string(&a.curve).context("reading curve csv")?;
    let curve = SweepCurve::from_csv(&text)?;
    let metric = parse_metric(&a.metric)?;
    let constraint = SelectionConstraint { alpha: a.alpha, metric };
    let points = cost::curve_points(&curve, metric).map_err(|e| anyhow!(e))?;

    let selection = cost::select_from_points(&points, &constraint);
    let report = cost::selection_report_csv(&points, selection.as_ref().ok().map(|s| s.phi));
    std::fs::write(&a.out, report).context("writing selection report")?;

    let s = selection?;
    println!("phi*={} accuracy={:.6} flops={}", s.phi, s.accuracy, s.flops);
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    if !(a.phi > 0.0 && a.phi <= 1.0) {
        return Err(usage(format!("--phi must be in (0, 1], got {}", a.phi)));
    }
    let ck = Checkpoint::load(&a.ckpt).context("loading checkpoint")?;
    if ck.meta.mode != TrainMode::Hyper {
        return Err(usage("export needs a hyper-mode checkpoint"));
    }
    let net = ck.meta.net.clone();
    let manifest = unet::build_manifest(&net).map_err(|e| anyhow!(e))?;
    let params = eval::checkpoint_hyper_params(&ck, &manifest)?;
    let k = net.num_rescale_steps();
    let policy = match ck.meta.policy_mode {
        PolicyMode::Single => RescalePolicy::Single(a.phi),
        PolicyMode::Separate => RescalePolicy::Separate(vec![a.phi; k]),
    };
    let theta = hypernet::predict_values(&params, &policy, net.leaky_slope).map_err(|e| anyhow!(e))?;

    let exported = Checkpoint {
        meta: hyperscale_core::checkpoint::CheckpointMeta {
            mode: TrainMode::Fixed,
            policy_mode: ck.meta.policy_mode,
            net,
            prior: None,
            phi_fixed: Some(a.phi),
            seed: ck.meta.seed,
            step: ck.meta.step,
            manifest: manifest.slots().to_vec(),
            tensors: Vec::new(),
            train_config: None,
            resume: None,
            source_phi: Some(a.phi),
        },
        tensors: vec![("theta".into(), theta)],
    };
    exported.save(&a.out).context("writing exported checkpoint")?;
    println!("exported standalone weights at phi={} to {}", a.phi, a.out.display());
    Ok(())
}

fn parse_f64_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| usage(format!("bad {what} entry {p}"))))
        .collect()
}

fn cmd_study(a: StudyArgs) -> Result<()> {
    let need_data = |a: &StudyArgs| -> Result<data::Dataset> {
        let path = a.data.as_ref().ok_or_else(|| usage("this study needs --data"))?;
        load_split(path, "test")
    };
    let need_ckpt = |p: &Option<PathBuf>, flag: &str| -> Result<Checkpoint> {
        let path = p.as_ref().ok_or_else(|| usage(format!("this study needs {flag}")))?;
        Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
    };

    let report = match a.kind.as_str() {
        "prior_width" => {
            let data_path = a.data.as_ref().ok_or_else(|| usage("prior_width needs --data"))?;
            let dir = data::load_dataset(data_path).context("loading dataset")?;
            let r_values = parse_f64_list(a.r.as_deref().unwrap_or("0,0.1"), "--r")?;
            let seeds: Vec<u64> = a
                .seeds
                .as_deref()
                .unwrap_or("0,1,2")
                .split(',')
                .map(|s| s.trim().parse::<u64>().map_err(|_| usage(format!("bad seed {s}"))))
                .collect::<Result<_>>()?;
            let mut base = match &a.config {
                Some(path) => {
                    let text = std::fs::read_to_string(path)?;
                    serde_json::from_str::<TrainConfig>(&text)?
                }
                None => TrainConfig::new(TrainMode::Hyper, default_net(dir.train.in_channels(), dir.num_classes)),
            };
            base.max_steps = a.steps;
            base.batch_size = a.batch;
            let (tr, va) = data::split(&dir.train, 0.8, 0).map_err(|e| usage(e.to_string()))?;
            if dir.test.is_empty() {
                return Err(usage("prior_width needs a nonempty test split"));
            }
            experiments::prior_width_study(&base, &tr, &va, &dir.test, &r_values, &seeds)?.report
        }
        "transfer" => {
            let ck_hyper = need_ckpt(&a.ckpt, "--ckpt")?;
            let ck_fixed = need_ckpt(&a.fixed, "--fixed")?;
            let ds = need_data(&a)?;
            let grid = eval::grid(a.step)?;
            experiments::transfer_study(&ck_hyper, &ck_fixed, &grid, &ds, a.batch)?.report
        }
        "separate" => {
            let ck = need_ckpt(&a.ckpt, "--ckpt")?;
            let ds = need_data(&a)?;
            experiments::separate_factor_study(&ck, a.step, &ds, a.batch)?.report
        }
        "cv" => {
            let ck = need_ckpt(&a.ckpt, "--ckpt")?;
            let net = ck.meta.net.clone();
            let manifest = unet::build_manifest(&net).map_err(|e| anyhow!(e))?;
            let params = eval::checkpoint_hyper_params(&ck, &manifest)?;
            let n = (1.0 / a.step + 1e-9).floor() as usize;
            let grid: Vec<f64> = (0..=n).map(|i| (i as f64 * a.step).min(1.0)).collect();
            experiments::weight_cv_analysis(&params, &net, &manifest, &grid)?.report
        }
        other => return Err(usage(format!("unknown study kind {other}"))),
    };
    report.write_csv(&a.out).map_err(|e| anyhow!(e))?;
    println!("study {} wrote {} rows to {}", report.id, report.rows.len(), a.out.display());
    Ok(())
}
