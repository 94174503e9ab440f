//! Analytic inference-cost model, Pareto-frontier extraction, and
//! constrained factor selection.
//!
//! FLOPs convention, pinned here because published tables rarely state
//! theirs: 2 per multiply-accumulate, biases and activations free, bilinear
//! resize at 8 per output element (4 taps, weighted sum). Peak memory is
//! counted in activation elements per sample: inputs and output of the
//! running op are live together, skip tensors stay live until their
//! concatenation consumes them, activations apply in place.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::eval::{self, EvalError, SweepCurve};
use crate::hypernet::HyperNetParams;
use crate::resize::target_size;
use crate::tensor::TensorError;
use crate::unet::{ParamManifest, PrimaryNetConfig, RescalePolicy};

pub fn conv_flops(cin: usize, cout: usize, k: usize, out_h: usize, out_w: usize) -> u64 {
    2 * (k * k * cin * cout) as u64 * (out_h * out_w) as u64
}

pub fn resize_flops(c: usize, out_h: usize, out_w: usize) -> u64 {
    8 * (c * out_h * out_w) as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub total_flops: u64,
    pub per_layer: Vec<LayerCost>,
    /// Peak live activation elements for one sample.
    pub peak_memory_elems: u64,
    pub input_h: usize,
    pub input_w: usize,
}

/// Walk the network layer by layer, deriving every feature size through
/// the same `target_size` chain the forward pass uses.
pub fn flops(
    cfg: &PrimaryNetConfig,
    policy: &RescalePolicy,
    input_h: usize,
    input_w: usize,
) -> Result<CostReport, TensorError> {
    cfg.validate()?;
    let steps = cfg.num_rescale_steps();
    let factors = policy.expand(steps)?;
    let k = cfg.kernel;

    let mut per_layer = Vec::new();
    let mut peak = 0u64;
    let mut skip_live = 0u64; // elements of skip tensors awaiting their concat
    let mut skips: Vec<(usize, usize, usize)> = Vec::new();

    let mut cur = (cfg.in_channels, input_h, input_w);
    let elems = |(c, h, w): (usize, usize, usize)| (c * h * w) as u64;

    let touch = |live: u64, peak: &mut u64| {
        if live > *peak {
            *peak = live;
        }
    };

    for (s, &cout) in cfg.encoder_channels.iter().enumerate() {
        let mut cin = cur.0;
        for c in 0..cfg.convs_per_stage {
            let out = (cout, cur.1, cur.2);
            per_layer.push(LayerCost {
                name: format!("enc{s}.conv{c}"),
                flops: conv_flops(cin, cout, k, out.1, out.2),
            });
            touch(skip_live + elems(cur) + elems(out), &mut peak);
            cur = out;
            cin = cout;
        }
        if s < steps {
            skips.push(cur);
            skip_live += elems(cur);
            let out = (cur.0, target_size(cur.1, factors[s])?, target_size(cur.2, factors[s])?);
            per_layer.push(LayerCost { name: format!("enc{s}.down"), flops: resize_flops(out.0, out.1, out.2) });
            // the downscale input doubles as the skip, so it stays live
            touch(skip_live + elems(out), &mut peak);
            cur = out;
        }
    }

    for (j, &cout) in cfg.decoder_channels.iter().enumerate() {
        let skip = skips.pop().expect("one skip per decoder stage");
        let up = (cur.0, skip.1, skip.2);
        per_layer.push(LayerCost { name: format!("dec{j}.up"), flops: resize_flops(up.0, up.1, up.2) });
        touch(skip_live + elems(cur) + elems(up), &mut peak);
        let cat = (up.0 + skip.0, skip.1, skip.2);
        touch(skip_live + elems(up) + elems(cat), &mut peak);
        skip_live -= elems(skip); // consumed by the concat
        cur = cat;
        let mut cin = cur.0;
        for c in 0..cfg.convs_per_stage {
            let out = (cout, cur.1, cur.2);
            per_layer.push(LayerCost {
                name: format!("dec{j}.conv{c}"),
                flops: conv_flops(cin, cout, k, out.1, out.2),
            });
            touch(skip_live + elems(cur) + elems(out), &mut peak);
            cur = out;
            cin = cout;
        }
    }

    let out = (cfg.num_classes, cur.1, cur.2);
    per_layer.push(LayerCost { name: "final".into(), flops: conv_flops(cur.0, out.0, 1, out.1, out.2) });
    touch(skip_live + elems(cur) + elems(out), &mut peak);

    Ok(CostReport {
        total_flops: per_layer.iter().map(|l| l.flops).sum(),
        per_layer,
        peak_memory_elems: peak,
        input_h,
        input_w,
    })
}

/// Indices of the non-dominated points, in input order. A point dominates
/// another when it is at least as accurate and strictly cheaper, or
/// strictly more accurate and no more expensive.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<usize> {
    if points.is_empty() {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .1
            .partial_cmp(&points[b].1)
            .expect("finite costs")
            .then(points[b].0.partial_cmp(&points[a].0).expect("finite accuracies"))
    });

    let mut dominated = vec![false; points.len()];
    let mut best_cheaper_acc = f64::NEG_INFINITY; // max accuracy among strictly cheaper points
    let mut i = 0;
    while i < order.len() {
        // one cost group at a time
        let cost = points[order[i]].1;
        let mut j = i;
        let mut group_max_acc = f64::NEG_INFINITY;
        while j < order.len() && points[order[j]].1 == cost {
            group_max_acc = group_max_acc.max(points[order[j]].0);
            j += 1;
        }
        for &idx in &order[i..j] {
            let acc = points[idx].0;
            // dominated by a strictly cheaper point with >= accuracy,
            // or by an equal-cost point with strictly higher accuracy
            if best_cheaper_acc >= acc || group_max_acc > acc {
                dominated[idx] = true;
            }
        }
        best_cheaper_acc = best_cheaper_acc.max(group_max_acc);
        i = j;
    }
    (0..points.len()).filter(|&i| !dominated[i]).collect()
}

/// Which accuracy column of a sweep drives selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AccuracyMetric {
    MeanDice,
    /// A single foreground label's Dice column.
    Label(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConstraint {
    /// Minimum acceptable accuracy.
    pub alpha: f64,
    pub metric: AccuracyMetric,
}

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("no grid point reaches accuracy {alpha}; best achievable is {max_accuracy}")]
    Infeasible { alpha: f64, max_accuracy: f64 },
    #[error("empty curve")]
    Empty,
    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub phi: f64,
    pub accuracy: f64,
    pub flops: f64,
}

/// Seed-aggregated (phi, accuracy, cost) points of a sweep, ascending phi.
pub fn curve_points(curve: &SweepCurve, metric: AccuracyMetric) -> Result<Vec<CurvePoint>, SelectError> {
    if curve.records.is_empty() {
        return Err(SelectError::Empty);
    }
    let mut by_phi: Vec<(f64, Vec<(f64, f64)>)> = Vec::new();
    for r in &curve.records {
        let acc = match metric {
            AccuracyMetric::MeanDice => r.mean_dice,
            AccuracyMetric::Label(l) => {
                let idx = l
                    .checked_sub(1)
                    .map(|i| i as usize)
                    .filter(|&i| i < r.per_label.len())
                    .ok_or_else(|| SelectError::InvalidArg(format!("no dice column for label {l}")))?;
                r.per_label[idx]
            }
        };
        match by_phi.iter_mut().find(|(p, _)| *p == r.phi) {
            Some((_, v)) => v.push((acc, r.flops as f64)),
            None => by_phi.push((r.phi, vec![(acc, r.flops as f64)])),
        }
    }
    by_phi.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite phis"));
    Ok(by_phi
        .into_iter()
        .map(|(phi, v)| {
            let n = v.len() as f64;
            CurvePoint {
                phi,
                accuracy: v.iter().map(|p| p.0).sum::<f64>() / n,
                flops: v.iter().map(|p| p.1).sum::<f64>() / n,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub phi: f64,
    pub accuracy: f64,
    pub flops: f64,
}

/// Cheapest grid point whose accuracy clears the floor; ties go to the
/// smaller factor. Infeasible constraints report the best achievable
/// accuracy.
pub fn select_factor(curve: &SweepCurve, c: &SelectionConstraint) -> Result<Selection, SelectError> {
    let points = curve_points(curve, c.metric)?;
    select_from_points(&points, c)
}

pub fn select_from_points(points: &[CurvePoint], c: &SelectionConstraint) -> Result<Selection, SelectError> {
    if points.is_empty() {
        return Err(SelectError::Empty);
    }
    let mut best: Option<&CurvePoint> = None;
    for p in points {
        if p.accuracy >= c.alpha {
            let better = match best {
                None => true,
                Some(b) => p.flops < b.flops || (p.flops == b.flops && p.phi < b.phi),
            };
            if better {
                best = Some(p);
            }
        }
    }
    match best {
        Some(p) => Ok(Selection { phi: p.phi, accuracy: p.accuracy, flops: p.flops }),
        None => Err(SelectError::Infeasible {
            alpha: c.alpha,
            max_accuracy: points.iter().map(|p| p.accuracy).fold(f64::NEG_INFINITY, f64::max),
        }),
    }
}

/// `phi,accuracy,flops,on_frontier,selected` rows for a whole curve.
pub fn selection_report_csv(points: &[CurvePoint], selected: Option<f64>) -> String {
    let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.accuracy, p.flops)).collect();
    let frontier: std::collections::BTreeSet<usize> = pareto_front(&pairs).into_iter().collect();
    let mut out = String::from("phi,accuracy,flops,on_frontier,selected\n");
    for (i, p) in points.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.phi,
            p.accuracy,
            p.flops,
            frontier.contains(&i) as u8,
            (selected == Some(p.phi)) as u8,
        ));
    }
    out
}

/// Random search over the factor grid: draw grid points without
/// replacement, evaluate each (one hypernetwork forward plus one dataset
/// pass, no training), and keep the cheapest feasible one.
#[allow(clippy::too_many_arguments)]
pub fn random_search_select(
    params: &HyperNetParams,
    net: &PrimaryNetConfig,
    manifest: &ParamManifest,
    ds: &Dataset,
    c: &SelectionConstraint,
    budget: usize,
    grid_step: f64,
    rng: &mut ChaCha8Rng,
    batch_size: usize,
) -> Result<Selection, EvalError> {
    if budget == 0 {
        return Err(EvalError::InvalidArg("budget must be >= 1".into()));
    }
    let mut pool = eval::grid(grid_step)?;
    // partial Fisher-Yates: the first `budget` entries are the draws
    let draws = budget.min(pool.len());
    for i in 0..draws {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }

    let (h, w) = {
        let (_, h, w) = ds.items[0].dims();
        (h, w)
    };
    let mut best: Option<Selection> = None;
    let mut max_acc = f64::NEG_INFINITY;
    for &phi in &pool[..draws] {
        let policy = match params.input_dim {
            2 => RescalePolicy::Single(phi),
            _ => RescalePolicy::Separate(vec![phi; net.num_rescale_steps()]),
        };
        let theta = crate::hypernet::predict_values(params, &policy, net.leaky_slope)?;
        let result = eval::evaluate_dataset(net, manifest, &theta, &policy, ds, batch_size)?;
        let cost = flops(net, &policy, h, w)?;
        max_acc = max_acc.max(result.mean_dice);
        if result.mean_dice >= c.alpha {
            let cand = Selection { phi, accuracy: result.mean_dice, flops: cost.total_flops as f64 };
            let better = match &best {
                None => true,
                Some(b) => cand.flops < b.flops || (cand.flops == b.flops && cand.phi < b.phi),
            };
            if better {
                best = Some(cand);
            }
        }
    }
    best.ok_or(EvalError::InvalidArg(format!(
        "no feasible factor within budget {budget}: alpha {} vs best {max_acc}",
        c.alpha
    )))
}
