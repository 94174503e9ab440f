//! Continuous-factor spatial rescaling.
//!
//! Output extents come from [`target_size`] (round half away from zero,
//! clamped to a minimum of 1 so the factor may approach zero). Sampling
//! uses half-pixel centers with edge clamping; the paper this follows is
//! silent on both conventions, so they are pinned here and everything
//! downstream (cost model, sweeps) inherits them.

use rayon::prelude::*;

use crate::tensor::TensorError;

/// Rescaled extent for one spatial axis: `max(1, round(extent * factor))`
/// with ties rounded away from zero.
pub fn target_size(extent: usize, factor: f64) -> Result<usize, TensorError> {
    if !factor.is_finite() || factor < 0.0 {
        return Err(TensorError::InvalidArg {
            op: "target_size",
            msg: format!("factor must be finite and >= 0, got {factor}"),
        });
    }
    Ok(((extent as f64) * factor).round().max(1.0) as usize)
}

/// Per-axis sampling plan: output coordinate `o` reads source cells
/// `lo[o]` and `hi[o]` blended by `frac[o]`.
pub(crate) struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f32>,
}

pub(crate) fn axis_taps(in_extent: usize, out_extent: usize) -> AxisTaps {
    let scale = in_extent as f64 / out_extent as f64;
    let mut lo = Vec::with_capacity(out_extent);
    let mut hi = Vec::with_capacity(out_extent);
    let mut frac = Vec::with_capacity(out_extent);
    let max = in_extent - 1;
    for o in 0..out_extent {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let floor = src.floor();
        let i = floor as isize;
        lo.push(i.clamp(0, max as isize) as usize);
        hi.push((i + 1).clamp(0, max as isize) as usize);
        frac.push((src - floor) as f32);
    }
    AxisTaps { lo, hi, frac }
}

/// Resample `[b, c, in_h, in_w]` planes to `[out_h, out_w]`.
///
/// Written in lerp form `v0 + t*(v1 - v0)` so constant inputs reproduce
/// exactly and the identity size is a bit-exact copy.
pub(crate) fn bilinear_forward(
    input: &[f32],
    planes: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    out: &mut [f32],
) {
    let ty = axis_taps(in_h, out_h);
    let tx = axis_taps(in_w, out_w);
    let in_plane = in_h * in_w;
    let out_plane = out_h * out_w;
    debug_assert_eq!(input.len(), planes * in_plane);
    debug_assert_eq!(out.len(), planes * out_plane);
    out.par_chunks_mut(out_plane).enumerate().for_each(|(p, out_p)| {
        let in_p = &input[p * in_plane..(p + 1) * in_plane];
        for yo in 0..out_h {
            let (y0, y1, fy) = (ty.lo[yo], ty.hi[yo], ty.frac[yo]);
            let row0 = &in_p[y0 * in_w..(y0 + 1) * in_w];
            let row1 = &in_p[y1 * in_w..(y1 + 1) * in_w];
            let dst = &mut out_p[yo * out_w..(yo + 1) * out_w];
            for xo in 0..out_w {
                let (x0, x1, fx) = (tx.lo[xo], tx.hi[xo], tx.frac[xo]);
                let top = row0[x0] + fx * (row0[x1] - row0[x0]);
                let bot = row1[x0] + fx * (row1[x1] - row1[x0]);
                dst[xo] = top + fy * (bot - top);
            }
        }
    });
}

/// Scatter the output gradient back through the sampling weights.
pub(crate) fn bilinear_backward(
    grad_out: &[f32],
    planes: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    grad_in: &mut [f32],
) {
    let ty = axis_taps(in_h, out_h);
    let tx = axis_taps(in_w, out_w);
    let in_plane = in_h * in_w;
    let out_plane = out_h * out_w;
    debug_assert_eq!(grad_out.len(), planes * out_plane);
    debug_assert_eq!(grad_in.len(), planes * in_plane);
    grad_in.par_chunks_mut(in_plane).enumerate().for_each(|(p, gi_p)| {
        let go_p = &grad_out[p * out_plane..(p + 1) * out_plane];
        for yo in 0..out_h {
            let (y0, y1, fy) = (ty.lo[yo], ty.hi[yo], ty.frac[yo]);
            for xo in 0..out_w {
                let (x0, x1, fx) = (tx.lo[xo], tx.hi[xo], tx.frac[xo]);
                let g = go_p[yo * out_w + xo];
                gi_p[y0 * in_w + x0] += g * (1.0 - fy) * (1.0 - fx);
                gi_p[y0 * in_w + x1] += g * (1.0 - fy) * fx;
                gi_p[y1 * in_w + x0] += g * fy * (1.0 - fx);
                gi_p[y1 * in_w + x1] += g * fy * fx;
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_size_basics() {
        assert_eq!(target_size(160, 0.5).unwrap(), 80);
        // round half away from zero
        assert_eq!(target_size(7, 0.5).unwrap(), 4);
        // clamped to the minimum extent
        assert_eq!(target_size(4, 0.1).unwrap(), 1);
        assert_eq!(target_size(64, 0.0).unwrap(), 1);
        assert!(target_size(10, -0.1).is_err());
        assert!(target_size(10, f64::NAN).is_err());
    }

    #[test]
    fn identity_taps_are_exact() {
        let t = axis_taps(5, 5);
        for o in 0..5 {
            assert_eq!(t.lo[o], o);
            assert_eq!(t.frac[o], 0.0);
        }
    }

    #[test]
    fn constant_plane_stays_constant() {
        let input = vec![3.25f32; 4 * 6];
        let mut out = vec![0.0f32; 9 * 13];
        bilinear_forward(&input, 1, 4, 6, 9, 13, &mut out);
        assert!(out.iter().all(|&v| v == 3.25));
    }
}
