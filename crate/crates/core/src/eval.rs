//! Dice metric, dataset evaluation, factor sweeps and multi-seed stats.

use rayon::prelude::*;
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::cost;
use crate::data::Dataset;
use crate::hypernet;
use crate::tensor::{Graph, Tensor, TensorError};
use crate::train::{self, group_same_shape, make_batch, TrainMode};
use crate::unet::{self, ParamManifest, PrimaryNetConfig, RescalePolicy};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error("checkpoint not usable here: {0}")]
    BadCheckpoint(String),
    #[error("curves disagree: {0}")]
    GridMismatch(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

/// Dice overlap of one label between two label maps. When the label is
/// absent from both maps the structure was correctly predicted absent and
/// the score is 1.
pub fn dice(y: &[u32], y_hat: &[u32], label: u32) -> f64 {
    debug_assert_eq!(y.len(), y_hat.len());
    let mut ny = 0u64;
    let mut nyh = 0u64;
    let mut inter = 0u64;
    for (&a, &b) in y.iter().zip(y_hat) {
        let ia = a == label;
        let ib = b == label;
        ny += ia as u64;
        nyh += ib as u64;
        inter += (ia && ib) as u64;
    }
    if ny + nyh == 0 {
        return 1.0;
    }
    2.0 * inter as f64 / (ny + nyh) as f64
}

/// Unweighted mean of [`dice`] over the foreground labels `1..num_classes`.
pub fn mean_foreground_dice(y: &[u32], y_hat: &[u32], num_classes: usize) -> f64 {
    let labels = num_classes.saturating_sub(1).max(1);
    (1..num_classes).map(|l| dice(y, y_hat, l as u32)).sum::<f64>() / labels as f64
}

/// Per-pixel argmax over the channel axis; ties break toward the lower
/// class index.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<u32>, TensorError> {
    let (b, c, h, w) = logits.dims4()?;
    let plane = h * w;
    let data = logits.data();
    let mut out = vec![0u32; b * plane];
    for bi in 0..b {
        let base = bi * c * plane;
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = data[base + p];
            for ci in 1..c {
                let v = data[base + ci * plane + p];
                if v > best_v {
                    best_v = v;
                    best = ci;
                }
            }
            out[bi * plane + p] = best as u32;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// Mean over items of the per-item mean foreground Dice.
    pub mean_dice: f64,
    /// Mean over items of the per-item Dice for each foreground label.
    pub per_label: Vec<f64>,
}

/// Evaluate a weight vector over a dataset. Batches run in parallel;
/// results reduce in item order, so the outcome is deterministic.
pub fn evaluate_dataset(
    net: &PrimaryNetConfig,
    manifest: &ParamManifest,
    theta: &[f32],
    policy: &RescalePolicy,
    ds: &Dataset,
    batch_size: usize,
) -> Result<EvalResult, EvalError> {
    if ds.is_empty() {
        return Err(EvalError::InvalidArg("cannot evaluate an empty dataset".into()));
    }
    let groups = group_same_shape(ds, batch_size.max(1));
    let per_batch: Vec<Result<Vec<Vec<f64>>, EvalError>> = groups
        .par_iter()
        .map(|indices| {
            let batch = make_batch(ds, indices, None)?;
            let (bsz, _, h, w) = batch.images.dims4().map_err(EvalError::Tensor)?;
            let mut g = Graph::new();
            let theta_id = g.constant(Tensor::new(vec![theta.len()], theta.to_vec())?);
            let x = g.constant(batch.images);
            let logits = unet::forward(&mut g, x, theta_id, manifest, net, policy)?;
            let pred = argmax_labels(g.value(logits))?;
            let plane = h * w;
            let mut rows = Vec::with_capacity(bsz);
            for i in 0..bsz {
                let yh = &pred[i * plane..(i + 1) * plane];
                let y = &batch.labels[i * plane..(i + 1) * plane];
                rows.push((1..ds.num_classes).map(|l| dice(y, yh, l as u32)).collect());
            }
            Ok(rows)
        })
        .collect();

    let labels = ds.num_classes - 1;
    let mut per_label = vec![0.0f64; labels];
    let mut mean_dice = 0.0f64;
    let mut n = 0usize;
    for batch_rows in per_batch {
        for row in batch_rows? {
            mean_dice += row.iter().sum::<f64>() / labels as f64;
            for (acc, v) in per_label.iter_mut().zip(&row) {
                *acc += v;
            }
            n += 1;
        }
    }
    mean_dice /= n as f64;
    for v in per_label.iter_mut() {
        *v /= n as f64;
    }
    Ok(EvalResult { mean_dice, per_label })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub phi: f64,
    pub seed: u64,
    pub mean_dice: f64,
    pub flops: u64,
    pub peak_mem: u64,
    pub per_label: Vec<f64>,
}

/// Records of a factor sweep, strictly increasing in phi.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCurve {
    pub grid_step: f64,
    pub records: Vec<SweepRecord>,
}

/// Evaluation grid `{step, 2*step, ..} up to 1.0`.
pub fn grid(step: f64) -> Result<Vec<f64>, EvalError> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(EvalError::InvalidArg(format!("grid step must be in (0, 1], got {step}")));
    }
    let n = (1.0 / step + 1e-9).floor() as usize;
    Ok((1..=n).map(|k| k as f64 * step).collect())
}

/// Sweep a trained hypernetwork over the factor grid: predict the weights
/// once per grid point, evaluate the whole dataset, and record Dice
/// together with the analytic cost at that factor. The hypernetwork plays
/// no further part once a point's weights are predicted.
pub fn sweep(ck: &Checkpoint, ds: &Dataset, step: f64, batch_size: usize) -> Result<SweepCurve, EvalError> {
    let phis = grid(step)?;
    let net = &ck.meta.net;
    let manifest = unet::build_manifest(net)?;
    let (h, w) = {
        let item = ds.items.first().ok_or_else(|| EvalError::InvalidArg("empty dataset".into()))?;
        let (_, h, w) = item.dims();
        (h, w)
    };

    let theta_for = |phi: f64| -> Result<Vec<f32>, EvalError> {
        match ck.meta.mode {
            TrainMode::Hyper => {
                let params = checkpoint_hyper_params(ck, &manifest)?;
                Ok(hypernet::predict_values(&params, &policy_for(ck, phi, net), net.leaky_slope)?)
            }
            _ => {
                if phi != ck.meta.phi_fixed.unwrap_or(f64::NAN) {
                    return Err(EvalError::BadCheckpoint(format!(
                        "fixed-mode checkpoint evaluates only at its own factor, not {phi}"
                    )));
                }
                Ok(ck
                    .tensor("theta")
                    .ok_or_else(|| EvalError::BadCheckpoint("missing theta tensor".into()))?
                    .to_vec())
            }
        }
    };

    let mut records = Vec::with_capacity(phis.len());
    for phi in phis {
        let theta = theta_for(phi)?;
        let policy = policy_for(ck, phi, net);
        let result = evaluate_dataset(net, &manifest, &theta, &policy, ds, batch_size)?;
        let cost = cost::flops(net, &policy, h, w)?;
        records.push(SweepRecord {
            phi,
            seed: ck.meta.seed,
            mean_dice: result.mean_dice,
            flops: cost.total_flops,
            peak_mem: cost.peak_memory_elems,
            per_label: result.per_label,
        });
    }
    Ok(SweepCurve { grid_step: step, records })
}

fn policy_for(ck: &Checkpoint, phi: f64, net: &PrimaryNetConfig) -> RescalePolicy {
    match ck.meta.policy_mode {
        train::PolicyMode::Single => RescalePolicy::Single(phi),
        train::PolicyMode::Separate => RescalePolicy::Separate(vec![phi; net.num_rescale_steps()]),
    }
}

/// Rebuild hypernetwork parameters from a checkpoint's tensors.
pub fn checkpoint_hyper_params(
    ck: &Checkpoint,
    manifest: &ParamManifest,
) -> Result<hypernet::HyperNetParams, EvalError> {
    if ck.meta.mode != TrainMode::Hyper {
        return Err(EvalError::BadCheckpoint("expected a hyper-mode checkpoint".into()));
    }
    let get = |n: &str| -> Result<Vec<f32>, EvalError> {
        ck.tensor(n)
            .map(|t| t.to_vec())
            .ok_or_else(|| EvalError::BadCheckpoint(format!("missing tensor {n}")))
    };
    let w1 = get("hyper.w1")?;
    let input_dim = w1.len() / hypernet::HIDDEN1;
    Ok(hypernet::HyperNetParams {
        w1,
        b1: get("hyper.b1")?,
        w2: get("hyper.w2")?,
        b2: get("hyper.b2")?,
        w3: get("hyper.w3")?,
        b3: get("hyper.b3")?,
        input_dim,
        output_dim: manifest.total_len(),
    })
}

impl SweepCurve {
    pub fn num_labels(&self) -> usize {
        self.records.first().map(|r| r.per_label.len()).unwrap_or(0)
    }

    /// `phi,seed,mean_dice,flops,peak_mem[,dice_label_1..]`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phi,seed,mean_dice,flops,peak_mem");
        for l in 1..=self.num_labels() {
            out.push_str(&format!(",dice_label_{l}"));
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{},{},{},{}", r.phi, r.seed, r.mean_dice, r.flops, r.peak_mem));
            for v in &r.per_label {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<SweepCurve, EvalError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| EvalError::Csv("empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 5 || cols[0] != "phi" {
            return Err(EvalError::Csv("expected header phi,seed,mean_dice,flops,peak_mem[,..]".into()));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols.len() {
                return Err(EvalError::Csv(format!("row {} has {} fields, header has {}", i + 2, f.len(), cols.len())));
            }
            let parse = |s: &str| s.parse::<f64>().map_err(|e| EvalError::Csv(format!("row {}: {e}", i + 2)));
            records.push(SweepRecord {
                phi: parse(f[0])?,
                seed: f[1].parse().map_err(|e| EvalError::Csv(format!("row {}: {e}", i + 2)))?,
                mean_dice: parse(f[2])?,
                flops: f[3].parse().map_err(|e| EvalError::Csv(format!("row {}: {e}", i + 2)))?,
                peak_mem: f[4].parse().map_err(|e| EvalError::Csv(format!("row {}: {e}", i + 2)))?,
                per_label: f[5..].iter().map(|s| parse(s)).collect::<Result<_, _>>()?,
            });
        }
        let grid_step = if records.len() >= 2 { records[1].phi - records[0].phi } else { 0.0 };
        Ok(SweepCurve { grid_step, records })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedStats {
    pub phi: f64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Per-phi sample mean and (n-1) standard deviation of mean Dice across
/// replica runs. Curves must share one grid.
pub fn multi_seed(curves: &[SweepCurve]) -> Result<Vec<SeedStats>, EvalError> {
    if curves.len() < 2 {
        return Err(EvalError::InvalidArg("need at least 2 runs".into()));
    }
    let base = &curves[0];
    for c in &curves[1..] {
        if c.records.len() != base.records.len()
            || c.records.iter().zip(&base.records).any(|(a, b)| a.phi != b.phi)
        {
            return Err(EvalError::GridMismatch("sweep grids differ".into()));
        }
    }
    Ok(base
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let vals: Vec<f64> = curves.iter().map(|c| c.records[i].mean_dice).collect();
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            SeedStats { phi: r.phi, mean, std: var.sqrt(), n }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_basics() {
        let y = [1, 1, 0, 0];
        assert_eq!(dice(&y, &y, 1), 1.0);
        assert_eq!(dice(&[1, 1, 0, 0], &[0, 0, 1, 1], 1), 0.0);
        // |y|=2, |yhat|=2, overlap 1
        assert_eq!(dice(&[1, 1, 0, 0], &[1, 0, 1, 0], 1), 0.5);
        // both empty
        assert_eq!(dice(&[0, 0], &[0, 0], 3), 1.0);
    }

    #[test]
    fn dice_is_symmetric_and_bounded() {
        let a = [0u32, 1, 2, 1, 0, 2, 2, 1];
        let b = [1u32, 1, 2, 0, 0, 2, 1, 1];
        for l in 0..3 {
            let d = dice(&a, &b, l);
            assert_eq!(d, dice(&b, &a, l));
            assert!((0.0..=1.0).contains(&d));
        }
    }

    #[test]
    fn foreground_mean_excludes_background() {
        // labels 1 and 2: dice 1.0 and 0.5 -> 0.75
        let y = [1, 2, 2, 0];
        let yh = [1, 2, 1, 0];
        let d1 = dice(&y, &yh, 1);
        let d2 = dice(&y, &yh, 2);
        assert!((mean_foreground_dice(&y, &yh, 3) - (d1 + d2) / 2.0).abs() < 1e-12);

        // background disagreement with perfect foreground
        let y = [0, 0, 1, 2];
        let yh = [0, 0, 1, 2];
        assert_eq!(mean_foreground_dice(&y, &yh, 3), 1.0);
    }

    #[test]
    fn argmax_breaks_ties_toward_lower_index() {
        let logits = Tensor::new(vec![1, 3, 1, 2], vec![1.0, 0.5, 1.0, 0.5, 0.3, 0.7]).unwrap();
        assert_eq!(argmax_labels(&logits).unwrap(), vec![0, 2]);
    }

    #[test]
    fn grid_counts() {
        assert_eq!(grid(0.01).unwrap().len(), 100);
        assert_eq!(grid(0.25).unwrap(), vec![0.25, 0.5, 0.75, 1.0]);
        assert!(grid(0.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let curve = SweepCurve {
            grid_step: 0.5,
            records: vec![
                SweepRecord { phi: 0.5, seed: 7, mean_dice: 0.875, flops: 123, peak_mem: 9, per_label: vec![1.0, 0.75] },
                SweepRecord { phi: 1.0, seed: 7, mean_dice: 0.5, flops: 456, peak_mem: 12, per_label: vec![0.5, 0.5] },
            ],
        };
        let parsed = SweepCurve::from_csv(&curve.to_csv()).unwrap();
        assert_eq!(parsed, curve);
    }

    #[test]
    fn multi_seed_degenerate_and_two_point() {
        let mk = |d: f64| SweepCurve {
            grid_step: 1.0,
            records: vec![SweepRecord { phi: 1.0, seed: 0, mean_dice: d, flops: 1, peak_mem: 1, per_label: vec![] }],
        };
        let same = multi_seed(&[mk(0.9), mk(0.9), mk(0.9)]).unwrap();
        assert_eq!(same[0].std, 0.0);

        let stats = multi_seed(&[mk(0.8), mk(0.9)]).unwrap();
        assert!((stats[0].mean - 0.85).abs() < 1e-12);
        assert!((stats[0].std - 0.070710678).abs() < 1e-6);

        assert!(multi_seed(&[mk(0.8)]).is_err());
    }
}
