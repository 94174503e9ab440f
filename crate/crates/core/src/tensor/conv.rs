//! Direct 2-D convolution kernels: im2col + GEMM forward, col2im backward.
//!
//! Stride is always 1 and padding is always "same" ((k-1)/2 zeros); all
//! feature rescaling in this crate happens in dedicated resize layers, so
//! the convolutions never change spatial dims.

use rayon::prelude::*;

use super::gemm::{sgemm, Layout};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvDims {
    pub fn pad(&self) -> usize {
        (self.k - 1) / 2
    }
    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    pub fn plane(&self) -> usize {
        self.h * self.w
    }
    pub fn macs(&self) -> u64 {
        (self.batch * self.k * self.k * self.cin * self.cout) as u64 * self.plane() as u64
    }
}

/// Unfold one input item `[cin, h, w]` into `[cin*k*k, h*w]` patch columns.
fn im2col(input: &[f32], d: &ConvDims, col: &mut [f32]) {
    let (h, w, k) = (d.h, d.w, d.k);
    let pad = d.pad() as isize;
    let plane = d.plane();
    for ci in 0..d.cin {
        let in_base = ci * plane;
        for dy in 0..k {
            for dx in 0..k {
                let row_base = ((ci * k + dy) * k + dx) * plane;
                let shift = dx as isize - pad;
                let x0 = (-shift).max(0) as usize;
                let x1 = ((w as isize - shift).max(0) as usize).min(w);
                for y in 0..h {
                    let sy = y as isize + dy as isize - pad;
                    let dst = &mut col[row_base + y * w..row_base + (y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = in_base + sy as usize * w;
                    dst[..x0].fill(0.0);
                    dst[x1..].fill(0.0);
                    if x1 > x0 {
                        let s0 = (x0 as isize + shift) as usize;
                        dst[x0..x1].copy_from_slice(&input[src_row + s0..src_row + s0 + (x1 - x0)]);
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add patch columns back onto the input grid.
fn col2im_add(col: &[f32], d: &ConvDims, grad_input: &mut [f32]) {
    let (h, w, k) = (d.h, d.w, d.k);
    let pad = d.pad() as isize;
    let plane = d.plane();
    for ci in 0..d.cin {
        let in_base = ci * plane;
        for dy in 0..k {
            for dx in 0..k {
                let row_base = ((ci * k + dy) * k + dx) * plane;
                let shift = dx as isize - pad;
                let x0 = (-shift).max(0) as usize;
                let x1 = ((w as isize - shift).max(0) as usize).min(w);
                if x1 <= x0 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &col[row_base + y * w + x0..row_base + y * w + x1];
                    let s0 = (x0 as isize + shift) as usize;
                    let dst_row = in_base + sy as usize * w + s0;
                    for (i, v) in src.iter().enumerate() {
                        grad_input[dst_row + i] += v;
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(input: &[f32], kernel: &[f32], bias: &[f32], d: &ConvDims, out: &mut [f32]) {
    let plane = d.plane();
    let item_in = d.cin * plane;
    let item_out = d.cout * plane;
    out.par_chunks_mut(item_out).enumerate().for_each(|(bi, out_item)| {
        let mut col = vec![0.0f32; d.col_rows() * plane];
        im2col(&input[bi * item_in..(bi + 1) * item_in], d, &mut col);
        sgemm(
            d.cout,
            d.col_rows(),
            plane,
            kernel,
            Layout::RowMajor,
            &col,
            Layout::RowMajor,
            0.0,
            out_item,
        );
        for co in 0..d.cout {
            let b = bias[co];
            for v in out_item[co * plane..(co + 1) * plane].iter_mut() {
                *v += b;
            }
        }
    });
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub kernel: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

/// Backward pass; each gradient is computed only when requested.
///
/// Parallel over batch items with per-item kernel/bias partials reduced in
/// batch order, so results are bit-identical regardless of thread count.
pub(crate) fn backward(
    input: &[f32],
    kernel: &[f32],
    grad_out: &[f32],
    d: &ConvDims,
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
) -> ConvGrads {
    let plane = d.plane();
    let item_in = d.cin * plane;
    let kelems = d.cout * d.col_rows();

    let mut grad_input = if need_input { vec![0.0f32; d.batch * item_in] } else { Vec::new() };
    let per_item: Vec<(Vec<f32>, Vec<f32>)> = if need_input {
        grad_input
            .par_chunks_mut(item_in)
            .enumerate()
            .map(|(bi, gi_item)| backward_item(input, kernel, grad_out, d, bi, Some(gi_item), need_kernel, need_bias))
            .collect()
    } else {
        (0..d.batch)
            .into_par_iter()
            .map(|bi| backward_item(input, kernel, grad_out, d, bi, None, need_kernel, need_bias))
            .collect()
    };

    let mut grad_kernel = if need_kernel { Some(vec![0.0f32; kelems]) } else { None };
    let mut grad_bias = if need_bias { Some(vec![0.0f32; d.cout]) } else { None };
    for (gk_item, gb_item) in per_item {
        if let Some(gk) = grad_kernel.as_mut() {
            for (a, b) in gk.iter_mut().zip(gk_item.iter()) {
                *a += b;
            }
        }
        if let Some(gb) = grad_bias.as_mut() {
            for (a, b) in gb.iter_mut().zip(gb_item.iter()) {
                *a += b;
            }
        }
    }
    ConvGrads {
        input: if need_input { Some(grad_input) } else { None },
        kernel: grad_kernel,
        bias: grad_bias,
    }
}

fn backward_item(
    input: &[f32],
    kernel: &[f32],
    grad_out: &[f32],
    d: &ConvDims,
    bi: usize,
    grad_input_item: Option<&mut [f32]>,
    need_kernel: bool,
    need_bias: bool,
) -> (Vec<f32>, Vec<f32>) {
    let plane = d.plane();
    let item_in = d.cin * plane;
    let item_out = d.cout * plane;
    let go_item = &grad_out[bi * item_out..(bi + 1) * item_out];

    let mut gk_item = Vec::new();
    if need_kernel {
        let mut col = vec![0.0f32; d.col_rows() * plane];
        im2col(&input[bi * item_in..(bi + 1) * item_in], d, &mut col);
        gk_item = vec![0.0f32; d.cout * d.col_rows()];
        // dK = dY [cout, hw] x col^T [hw, cin*k*k]
        sgemm(
            d.cout,
            plane,
            d.col_rows(),
            go_item,
            Layout::RowMajor,
            &col,
            Layout::Transposed,
            0.0,
            &mut gk_item,
        );
    }

    let mut gb_item = Vec::new();
    if need_bias {
        gb_item = go_item
            .chunks_exact(plane)
            .map(|ch| ch.iter().sum::<f32>())
            .collect();
    }

    if let Some(gi_item) = grad_input_item {
        // dcol = K^T [cin*k*k, cout] x dY [cout, hw], then fold back.
        let mut dcol = vec![0.0f32; d.col_rows() * plane];
        sgemm(
            d.col_rows(),
            d.cout,
            plane,
            kernel,
            Layout::Transposed,
            go_item,
            Layout::RowMajor,
            0.0,
            &mut dcol,
        );
        col2im_add(&dcol, d, gi_item);
    }

    (gk_item, gb_item)
}
