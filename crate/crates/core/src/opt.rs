//! Adam optimizer with bias correction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdamError {
    #[error("non-finite gradient in tensor {index} at step {step}")]
    NonFiniteGrad { index: usize, step: u64 },
    #[error("parameter/gradient size mismatch in tensor {index}")]
    SizeMismatch { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

/// First/second moment estimates for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

const PAR_THRESHOLD: usize = 1 << 15;

impl Adam {
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        Adam {
            cfg,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn num_tensors(&self) -> usize {
        self.m.len()
    }

    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    /// Restore a saved optimizer state (moments + step counter).
    pub fn restore(cfg: AdamConfig, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Self {
        Adam { cfg, step, m, v }
    }

    /// One update. Gradients are scanned first; a non-finite gradient
    /// aborts before any state is touched.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) -> Result<(), AdamError> {
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(AdamError::SizeMismatch { index: i });
            }
        }
        for (i, g) in grads.iter().enumerate() {
            let finite = if g.len() >= PAR_THRESHOLD {
                g.par_chunks(PAR_THRESHOLD).all(|c| c.iter().all(|v| v.is_finite()))
            } else {
                g.iter().all(|v| v.is_finite())
            };
            if !finite {
                return Err(AdamError::NonFiniteGrad { index: i, step: self.step + 1 });
            }
        }

        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        let (b1, b2) = (self.cfg.beta1 as f32, self.cfg.beta2 as f32);
        let (inv_bc1, inv_bc2) = ((1.0 / bc1) as f32, (1.0 / bc2) as f32);
        let (lr, eps) = (self.cfg.lr as f32, self.cfg.eps as f32);

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let update = |p: &mut [f32], m: &mut [f32], v: &mut [f32], g: &[f32]| {
                for j in 0..p.len() {
                    m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                    v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                    let m_hat = m[j] * inv_bc1;
                    let v_hat = v[j] * inv_bc2;
                    p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            };
            if p.len() >= PAR_THRESHOLD {
                p.par_chunks_mut(PAR_THRESHOLD)
                    .zip(m.par_chunks_mut(PAR_THRESHOLD))
                    .zip(v.par_chunks_mut(PAR_THRESHOLD))
                    .zip(g.par_chunks(PAR_THRESHOLD))
                    .for_each(|(((pc, mc), vc), gc)| update(pc, mc, vc, gc));
            } else {
                update(p, m, v, g);
            }
        }
        Ok(())
    }
}
