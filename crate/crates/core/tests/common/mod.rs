//! Shared test oracles: straight-line f64 reference implementations of
//! every differentiable op, plus a central finite-difference harness.
//! Everything here is independent of the engine's compute paths.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Relative error with a small floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

/// Max absolute error normalized by the reference's overall scale; the
/// right yardstick for elementwise forward comparisons where individual
/// outputs may cancel toward zero.
pub fn max_err_scaled(got: &[f64], expected: &[f64]) -> f64 {
    assert_eq!(got.len(), expected.len());
    let scale = expected.iter().fold(1.0f64, |m, &v| m.max(v.abs()));
    got.iter()
        .zip(expected)
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Central finite differences of a scalar function, computed in f64.
pub fn fd_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = f(&xp);
        xp[i] = x[i] - h;
        let down = f(&xp);
        xp[i] = x[i];
        g.push((up - down) / (2.0 * h));
    }
    g
}

// ── reference forward ops (six-loop style, f64) ──────────────────────

/// Direct convolution: same zero padding, stride 1, odd square kernel.
pub fn conv2d_ref(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
) -> Vec<f64> {
    let pad = (k as isize - 1) / 2;
    let mut out = vec![0.0; b * cout * h * w];
    for bi in 0..b {
        for co in 0..cout {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for dy in 0..k {
                            for dx in 0..k {
                                let sy = y as isize + dy as isize - pad;
                                let sx = x as isize + dx as isize - pad;
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let iv = input[((bi * cin + ci) * h + sy as usize) * w + sx as usize];
                                let kv = kernel[((co * cin + ci) * k + dy) * k + dx];
                                acc += iv * kv;
                            }
                        }
                    }
                    out[((bi * cout + co) * h + y) * w + x] = acc;
                }
            }
        }
    }
    out
}

/// y = x W^T + b via explicit dot products.
pub fn linear_ref(x: &[f64], w: &[f64], bias: &[f64], b: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * m];
    for bi in 0..b {
        for mi in 0..m {
            let mut acc = bias[mi];
            for ni in 0..n {
                acc += x[bi * n + ni] * w[mi * n + ni];
            }
            out[bi * m + mi] = acc;
        }
    }
    out
}

pub fn leaky_relu_ref(x: &[f64], slope: f64) -> Vec<f64> {
    x.iter().map(|&v| if v >= 0.0 { v } else { slope * v }).collect()
}

/// Mean over pixels of -log softmax(logits)[label], per-pixel softmax.
pub fn cross_entropy_ref(logits: &[f64], labels: &[u32], b: usize, c: usize, h: usize, w: usize) -> f64 {
    let plane = h * w;
    let mut total = 0.0;
    for bi in 0..b {
        for p in 0..plane {
            let vals: Vec<f64> = (0..c).map(|ci| logits[(bi * c + ci) * plane + p]).collect();
            let maxv = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = vals.iter().map(|v| (v - maxv).exp()).sum();
            let lab = labels[bi * plane + p] as usize;
            let prob = (vals[lab] - maxv).exp() / denom;
            total += -prob.ln();
        }
    }
    total / (b * plane) as f64
}

pub fn concat_channels_ref(
    a: &[f64],
    bb: &[f64],
    b: usize,
    ca: usize,
    cb: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let plane = h * w;
    let mut out = Vec::with_capacity(b * (ca + cb) * plane);
    for bi in 0..b {
        out.extend_from_slice(&a[bi * ca * plane..(bi + 1) * ca * plane]);
        out.extend_from_slice(&bb[bi * cb * plane..(bi + 1) * cb * plane]);
    }
    out
}

/// Scalar half-pixel-center bilinear sampler with edge clamping, written
/// as the explicit four-tap weighted sum.
pub fn bilinear_ref(
    input: &[f64],
    planes: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; planes * out_h * out_w];
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    for p in 0..planes {
        for yo in 0..out_h {
            let sy = (yo as f64 + 0.5) * (in_h as f64 / out_h as f64) - 0.5;
            let y0 = sy.floor();
            let fy = sy - y0;
            for xo in 0..out_w {
                let sx = (xo as f64 + 0.5) * (in_w as f64 / out_w as f64) - 0.5;
                let x0 = sx.floor();
                let fx = sx - x0;
                let at = |yy: isize, xx: isize| {
                    input[p * in_h * in_w + clamp(yy, in_h) * in_w + clamp(xx, in_w)]
                };
                let (y0i, x0i) = (y0 as isize, x0 as isize);
                out[p * out_h * out_w + yo * out_w + xo] = (1.0 - fy) * (1.0 - fx) * at(y0i, x0i)
                    + (1.0 - fy) * fx * at(y0i, x0i + 1)
                    + fy * (1.0 - fx) * at(y0i + 1, x0i)
                    + fy * fx * at(y0i + 1, x0i + 1);
            }
        }
    }
    out
}

/// Independent reimplementation of the output-extent rule: round half away
/// from zero, clamp to at least one pixel.
pub fn target_size_ref(extent: usize, factor: f64) -> usize {
    let v = (extent as f64 * factor).round();
    if v < 1.0 {
        1
    } else {
        v as usize
    }
}

/// Set-arithmetic Dice: collect pixel-index sets, intersect, apply the
/// formula. Both-empty convention: 1.
pub fn dice_set_ref(y: &[u32], y_hat: &[u32], label: u32) -> f64 {
    use std::collections::HashSet;
    let sy: HashSet<usize> = y.iter().enumerate().filter(|(_, &v)| v == label).map(|(i, _)| i).collect();
    let sh: HashSet<usize> =
        y_hat.iter().enumerate().filter(|(_, &v)| v == label).map(|(i, _)| i).collect();
    if sy.is_empty() && sh.is_empty() {
        return 1.0;
    }
    2.0 * sy.intersection(&sh).count() as f64 / (sy.len() + sh.len()) as f64
}

/// All-pairs dominance scan.
pub fn pareto_ref(points: &[(f64, f64)]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            !(0..points.len()).any(|j| {
                let (ai, ci) = points[i];
                let (aj, cj) = points[j];
                (aj >= ai && cj < ci) || (aj > ai && cj <= ci)
            })
        })
        .collect()
}
