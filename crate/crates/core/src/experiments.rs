//! Scripted analysis studies: prior-width sensitivity, weight transfer,
//! separate per-step factors, and weight variation across factors.
//!
//! Every study is a pure function of its config and seeds; reruns emit
//! byte-identical CSVs. Studies never mutate checkpoints.

use rayon::prelude::*;
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::cost;
use crate::data::Dataset;
use crate::eval::{self, EvalError};
use crate::hypernet::{self, HyperNetParams};
use crate::train::{self, fit, PriorSpec, TrainConfig, TrainMode};
use crate::unet::{self, ParamManifest, PrimaryNetConfig, RescalePolicy};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("invalid study argument: {0}")]
    InvalidArg(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Tabular study result; rows are already in canonical grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub id: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub seeds: Vec<u64>,
}

impl ExperimentReport {
    pub fn to_csv(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let mut out = format!("# study={} seeds={}\n", self.id, seeds.join("|"));
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), StudyError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

// ── prior width ──────────────────────────────────────────────────────

#[derive(Debug)]
pub struct PriorWidthOutcome {
    pub report: ExperimentReport,
    /// (r, seed, test dice at factor 0.5) per hypernetwork cell.
    pub hyper: Vec<(f64, u64, f64)>,
    /// (seed, test dice) for the fixed-factor baseline.
    pub baseline: Vec<(u64, f64)>,
}

/// Train one hypernetwork per `(r, seed)` with prior `U(0.5-r, 0.5+r)`,
/// plus a fixed-0.5 baseline per seed, and evaluate everything at 0.5.
pub fn prior_width_study(
    base: &TrainConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    test_ds: &Dataset,
    r_values: &[f64],
    seeds: &[u64],
) -> Result<PriorWidthOutcome, StudyError> {
    for &r in r_values {
        if !(0.0..=0.5).contains(&r) {
            return Err(StudyError::InvalidArg(format!("prior half-width r must be in [0, 0.5], got {r}")));
        }
    }
    let manifest = unet::build_manifest(&base.net)?;
    let eval_policy = RescalePolicy::Single(0.5);
    let eval_dice = |theta: &[f32]| -> Result<f64, StudyError> {
        Ok(eval::evaluate_dataset(&base.net, &manifest, theta, &eval_policy, test_ds, base.batch_size)?.mean_dice)
    };

    let mut hyper = Vec::new();
    for &r in r_values {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.mode = TrainMode::Hyper;
            cfg.prior = Some(PriorSpec::new(0.5 - r, 0.5 + r).map_err(train::TrainError::from)?);
            cfg.phi_fixed = None;
            cfg.seed = seed;
            let outcome = fit(cfg, train_ds.clone(), val_ds.clone())?;
            let params = eval::checkpoint_hyper_params(&outcome.checkpoint, &manifest)?;
            let theta = hypernet::predict_values(&params, &eval_policy, base.net.leaky_slope)?;
            hyper.push((r, seed, eval_dice(&theta)?));
        }
    }

    let mut baseline = Vec::new();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.mode = TrainMode::Fixed;
        cfg.prior = None;
        cfg.phi_fixed = Some(0.5);
        cfg.seed = seed;
        let outcome = fit(cfg, train_ds.clone(), val_ds.clone())?;
        let theta = outcome
            .checkpoint
            .tensor("theta")
            .ok_or_else(|| StudyError::InvalidArg("baseline checkpoint missing theta".into()))?
            .to_vec();
        baseline.push((seed, eval_dice(&theta)?));
    }

    let mut rows = Vec::new();
    for &(r, seed, dice) in &hyper {
        rows.push(vec!["hyper".into(), fmt(r), seed.to_string(), fmt(dice)]);
    }
    for &(seed, dice) in &baseline {
        rows.push(vec!["baseline".into(), String::new(), seed.to_string(), fmt(dice)]);
    }
    Ok(PriorWidthOutcome {
        report: ExperimentReport {
            id: "prior_width".into(),
            columns: vec!["model".into(), "r".into(), "seed".into(), "dice_at_0.5".into()],
            rows,
            seeds: seeds.to_vec(),
        },
        hyper,
        baseline,
    })
}

// ── weight transfer ──────────────────────────────────────────────────

#[derive(Debug)]
pub struct TransferOutcome {
    pub report: ExperimentReport,
    /// (phi, dice) using the frozen hypernetwork prediction theta' = h(0.5).
    pub hyper: Vec<(f64, f64)>,
    /// (phi, dice) using the frozen baseline weights.
    pub baseline: Vec<(f64, f64)>,
}

/// Freeze `theta' = h(0.5; omega)` once, freeze the baseline's theta, and
/// run inference with both at every grid factor. Neither weight vector is
/// re-predicted across the sweep.
pub fn transfer_study(
    ck_hyper: &Checkpoint,
    ck_fixed: &Checkpoint,
    phi_grid: &[f64],
    test_ds: &Dataset,
    batch_size: usize,
) -> Result<TransferOutcome, StudyError> {
    let net = &ck_hyper.meta.net;
    let manifest = unet::build_manifest(net)?;
    let params = eval::checkpoint_hyper_params(ck_hyper, &manifest)?;
    let theta_hyper = hypernet::predict_values(&params, &RescalePolicy::Single(0.5), net.leaky_slope)?;
    let theta_base = ck_fixed
        .tensor("theta")
        .ok_or_else(|| StudyError::InvalidArg("baseline checkpoint missing theta".into()))?
        .to_vec();

    let eval_at = |theta: &[f32], phi: f64| -> Result<f64, StudyError> {
        let policy = RescalePolicy::Single(phi);
        Ok(eval::evaluate_dataset(net, &manifest, theta, &policy, test_ds, batch_size)?.mean_dice)
    };

    let mut hyper = Vec::new();
    let mut baseline = Vec::new();
    for &phi in phi_grid {
        hyper.push((phi, eval_at(&theta_hyper, phi)?));
        baseline.push((phi, eval_at(&theta_base, phi)?));
    }

    let mut rows = Vec::new();
    for &(phi, dice) in &hyper {
        rows.push(vec!["t_hyper".into(), fmt(phi), fmt(dice)]);
    }
    for &(phi, dice) in &baseline {
        rows.push(vec!["t_unet".into(), fmt(phi), fmt(dice)]);
    }
    Ok(TransferOutcome {
        report: ExperimentReport {
            id: "transfer".into(),
            columns: vec!["model".into(), "phi".into(), "dice".into()],
            rows,
            seeds: vec![ck_hyper.meta.seed, ck_fixed.meta.seed],
        },
        hyper,
        baseline,
    })
}

// ── separate factors ─────────────────────────────────────────────────

#[derive(Debug)]
pub struct SeparateFactorOutcome {
    pub report: ExperimentReport,
    /// One entry per grid cell, canonical order (last axis fastest).
    pub cells: Vec<(Vec<f64>, f64, u64)>,
    /// Indices into `cells` on the accuracy/FLOPs Pareto frontier.
    pub frontier: Vec<usize>,
}

/// Evaluate a separate-factor hypernetwork on the full Cartesian grid
/// `{0, step, .., 1}^K` (11^K cells for step 0.1) and extract the Pareto
/// frontier of the resulting (dice, flops) cloud.
pub fn separate_factor_study(
    ck: &Checkpoint,
    step: f64,
    test_ds: &Dataset,
    batch_size: usize,
) -> Result<SeparateFactorOutcome, StudyError> {
    if ck.meta.policy_mode != train::PolicyMode::Separate {
        return Err(StudyError::InvalidArg("separate_factor_study needs a separate-mode checkpoint".into()));
    }
    if !(step > 0.0 && step <= 1.0) {
        return Err(StudyError::InvalidArg(format!("step must be in (0, 1], got {step}")));
    }
    let net = &ck.meta.net;
    let k = net.num_rescale_steps();
    let manifest = unet::build_manifest(net)?;
    let params = eval::checkpoint_hyper_params(ck, &manifest)?;

    // axis includes both endpoints: 0, step, .., 1
    let per_axis = (1.0 / step + 1e-9).floor() as usize + 1;
    let axis: Vec<f64> = (0..per_axis).map(|i| (i as f64 * step).min(1.0)).collect();
    let n_cells = per_axis.pow(k as u32);

    let (h, w) = {
        let (_, h, w) = test_ds.items[0].dims();
        (h, w)
    };

    let cells: Vec<Result<(Vec<f64>, f64, u64), StudyError>> = (0..n_cells)
        .into_par_iter()
        .map(|mut flat| {
            let mut factors = vec![0.0f64; k];
            for ax in (0..k).rev() {
                factors[ax] = axis[flat % per_axis];
                flat /= per_axis;
            }
            let policy = RescalePolicy::Separate(factors.clone());
            let theta = hypernet::predict_values(&params, &policy, net.leaky_slope)?;
            let result = eval::evaluate_dataset(net, &manifest, &theta, &policy, test_ds, batch_size)?;
            let cost = cost::flops(net, &policy, h, w)?;
            Ok((factors, result.mean_dice, cost.total_flops))
        })
        .collect();
    let cells: Vec<(Vec<f64>, f64, u64)> = cells.into_iter().collect::<Result<_, _>>()?;

    let points: Vec<(f64, f64)> = cells.iter().map(|(_, d, f)| (*d, *f as f64)).collect();
    let frontier = cost::pareto_front(&points);
    let on_frontier: std::collections::BTreeSet<usize> = frontier.iter().copied().collect();

    let mut columns: Vec<String> = (0..k).map(|i| format!("phi_{i}")).collect();
    columns.extend(["mean_dice".into(), "flops".into(), "on_frontier".into()]);
    let rows = cells
        .iter()
        .enumerate()
        .map(|(i, (factors, dice, flops))| {
            let mut row: Vec<String> = factors.iter().map(|&f| fmt(f)).collect();
            row.push(fmt(*dice));
            row.push(flops.to_string());
            row.push((on_frontier.contains(&i) as u8).to_string());
            row
        })
        .collect();

    Ok(SeparateFactorOutcome {
        report: ExperimentReport {
            id: "separate_factors".into(),
            columns,
            rows,
            seeds: vec![ck.meta.seed],
        },
        cells,
        frontier,
    })
}

// ── weight coefficient of variation ──────────────────────────────────

#[derive(Debug)]
pub struct CvOutcome {
    pub report: ExperimentReport,
    /// Per slot: (name, per-parameter CVs; NaN marks an undefined CV).
    pub per_slot: Vec<(String, Vec<f64>)>,
}

/// Coefficient of variation (population sigma over |mean|) of every
/// predicted parameter across the factor grid, summarized per layer.
/// Parameters whose mean is exactly zero get a NaN sentinel and are
/// excluded from the aggregates.
pub fn weight_cv_analysis(
    params: &HyperNetParams,
    net: &PrimaryNetConfig,
    manifest: &ParamManifest,
    phi_grid: &[f64],
) -> Result<CvOutcome, StudyError> {
    if phi_grid.len() < 2 {
        return Err(StudyError::InvalidArg("cv analysis needs at least 2 grid points".into()));
    }
    let k = net.num_rescale_steps();
    let thetas: Vec<Vec<f32>> = phi_grid
        .iter()
        .map(|&phi| {
            let policy = if params.input_dim == 2 {
                RescalePolicy::Single(phi)
            } else {
                RescalePolicy::Separate(vec![phi; k])
            };
            hypernet::predict_values(params, &policy, net.leaky_slope)
        })
        .collect::<Result<_, _>>()?;

    let g = phi_grid.len() as f64;
    let per_slot: Vec<(String, Vec<f64>)> = manifest
        .slots()
        .iter()
        .map(|slot| {
            let cvs: Vec<f64> = (slot.offset..slot.offset + slot.len())
                .map(|i| {
                    let mean: f64 = thetas.iter().map(|t| t[i] as f64).sum::<f64>() / g;
                    let var: f64 = thetas.iter().map(|t| (t[i] as f64 - mean).powi(2)).sum::<f64>() / g;
                    if mean == 0.0 {
                        f64::NAN
                    } else {
                        var.sqrt() / mean.abs()
                    }
                })
                .collect();
            (slot.name.clone(), cvs)
        })
        .collect();

    let mut rows = Vec::new();
    for (name, cvs) in &per_slot {
        let mut defined: Vec<f64> = cvs.iter().copied().filter(|v| v.is_finite()).collect();
        defined.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let q = |p: f64| -> f64 {
            if defined.is_empty() {
                return f64::NAN;
            }
            let pos = p * (defined.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            defined[lo] + (defined[hi] - defined[lo]) * (pos - lo as f64)
        };
        let mean = if defined.is_empty() { f64::NAN } else { defined.iter().sum::<f64>() / defined.len() as f64 };
        rows.push(vec![
            name.clone(),
            cvs.len().to_string(),
            defined.len().to_string(),
            fmt(mean),
            fmt(q(0.25)),
            fmt(q(0.5)),
            fmt(q(0.75)),
        ]);
    }

    Ok(CvOutcome {
        report: ExperimentReport {
            id: "weight_cv".into(),
            columns: vec![
                "slot".into(),
                "n_params".into(),
                "n_defined".into(),
                "cv_mean".into(),
                "cv_p25".into(),
                "cv_median".into(),
                "cv_p75".into(),
            ],
            rows,
            seeds: vec![],
        },
        per_slot,
    })
}
