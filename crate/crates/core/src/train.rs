//! Training loops: the amortized hypernetwork objective, the fixed-factor
//! baseline, and the variable-resolution baseline.
//!
//! All randomness flows from one seed through separate ChaCha streams
//! (stream 0 initializes weights, stream 1 drives the step loop), so a
//! run is reproducible and a mid-training checkpoint resumes
//! bit-identically: the checkpoint stores parameters, optimizer moments,
//! the step counter and the RNG word position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, ResumeState, TensorDecl};
use crate::data::Dataset;
use crate::hypernet::{self, HyperNetParams};
use crate::opt::{Adam, AdamConfig, AdamError};
use crate::resize::target_size;
use crate::tensor::{Graph, Tensor, TensorError, TensorId};
use crate::unet::{self, ParamManifest, PrimaryNetConfig, RescalePolicy};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Adam(#[from] AdamError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("batch items must share one shape")]
    MixedShapes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Hyper,
    Fixed,
    VariableResolution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    Single,
    Separate,
}

/// Uniform prior over the rescaling factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub low: f64,
    pub high: f64,
}

impl PriorSpec {
    pub fn new(low: f64, high: f64) -> Result<Self, TrainError> {
        let p = PriorSpec { low, high };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0 <= self.low && self.low <= self.high && self.high <= 1.0) {
            return Err(TrainError::InvalidConfig(format!(
                "prior must satisfy 0 <= low <= high <= 1, got [{}, {}]",
                self.low, self.high
            )));
        }
        Ok(())
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.low + self.high)
    }
}

/// One uniform draw from the prior; the same value is used for the whole
/// minibatch so every sample in a step sees identical feature shapes.
pub fn sample_factor(prior: &PriorSpec, rng: &mut ChaCha8Rng) -> f64 {
    if prior.high == prior.low {
        return prior.low;
    }
    prior.low + rng.gen::<f64>() * (prior.high - prior.low)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub policy_mode: PolicyMode,
    pub net: PrimaryNetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_fixed: Option<f64>,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub max_steps: u64,
    /// Validation rounds with no improvement before stopping.
    pub patience: u32,
    /// Steps between validation rounds; 0 means once per epoch.
    pub val_interval: u64,
    pub seed: u64,
    pub flip_augment: bool,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, net: PrimaryNetConfig) -> Self {
        TrainConfig {
            mode,
            policy_mode: PolicyMode::Single,
            net,
            prior: None,
            phi_fixed: None,
            batch_size: 8,
            adam: AdamConfig::default(),
            max_steps: 1000,
            patience: 10,
            val_interval: 0,
            seed: 0,
            flip_augment: false,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.net.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::InvalidConfig("patience must be >= 1".into()));
        }
        match self.mode {
            TrainMode::Hyper => {
                let prior = self
                    .prior
                    .ok_or_else(|| TrainError::InvalidConfig("hyper mode needs a prior".into()))?;
                prior.validate()?;
            }
            TrainMode::Fixed => {
                let phi = self
                    .phi_fixed
                    .ok_or_else(|| TrainError::InvalidConfig("fixed mode needs phi_fixed".into()))?;
                if !(0.0..=1.0).contains(&phi) {
                    return Err(TrainError::InvalidConfig(format!("phi_fixed must be in [0,1], got {phi}")));
                }
                if self.prior.is_some() {
                    return Err(TrainError::InvalidConfig("fixed mode does not take a prior".into()));
                }
            }
            TrainMode::VariableResolution => {
                if self.prior.is_some() {
                    return Err(TrainError::InvalidConfig(
                        "variable-resolution mode draws r from U(0,1); it does not take a prior".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Internal factor used when this config's network is evaluated:
    /// the prior midpoint for hyper mode, the fixed factor otherwise
    /// (variable-resolution training runs the network at 0.5).
    pub fn eval_policy(&self) -> RescalePolicy {
        let k = self.net.num_rescale_steps();
        let phi = match self.mode {
            TrainMode::Hyper => self.prior.map(|p| p.midpoint()).unwrap_or(0.5),
            TrainMode::Fixed => self.phi_fixed.unwrap_or(0.5),
            TrainMode::VariableResolution => self.phi_fixed.unwrap_or(0.5),
        };
        match self.policy_mode {
            PolicyMode::Single => RescalePolicy::Single(phi),
            PolicyMode::Separate => RescalePolicy::Separate(vec![phi; k]),
        }
    }
}

/// One assembled minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<u32>,
}

pub fn make_batch(ds: &Dataset, indices: &[usize], flips: Option<&[bool]>) -> Result<Batch, TrainError> {
    let (c, h, w) = ds.items[indices[0]].dims();
    let mut images = Vec::with_capacity(indices.len() * c * h * w);
    let mut labels = Vec::with_capacity(indices.len() * h * w);
    for (pos, &i) in indices.iter().enumerate() {
        let item = &ds.items[i];
        if item.dims() != (c, h, w) {
            return Err(TrainError::MixedShapes);
        }
        let flip = flips.map(|f| f[pos]).unwrap_or(false);
        if flip {
            for ci in 0..c {
                for y in 0..h {
                    let row = &item.image.data()[ci * h * w + y * w..ci * h * w + (y + 1) * w];
                    images.extend(row.iter().rev());
                }
            }
            for y in 0..h {
                let row = &item.labels[y * w..(y + 1) * w];
                labels.extend(row.iter().rev());
            }
        } else {
            images.extend_from_slice(item.image.data());
            labels.extend_from_slice(&item.labels);
        }
    }
    Ok(Batch {
        images: Tensor::new(vec![indices.len(), c, h, w], images).expect("sized buffer"),
        labels,
    })
}

/// Borrowed network description shared by the step functions.
#[derive(Clone, Copy)]
pub struct StepEnv<'a> {
    pub net: &'a PrimaryNetConfig,
    pub manifest: &'a ParamManifest,
}

fn unet_ce_loss(
    g: &mut Graph,
    env: &StepEnv,
    x: TensorId,
    theta: TensorId,
    policy: &RescalePolicy,
    labels: &[u32],
) -> Result<TensorId, TensorError> {
    let logits = unet::forward(g, x, theta, env.manifest, env.net, policy)?;
    g.cross_entropy(logits, labels)
}

/// One amortized step: predict theta from the policy, run the network,
/// backpropagate, and update only the hypernetwork parameters. The
/// predicted weights are graph intermediates, never optimizer state.
pub fn train_step_hyper(
    env: &StepEnv,
    batch: &Batch,
    policy: &RescalePolicy,
    params: HyperNetParams,
    opt: &mut Adam,
) -> Result<(f32, HyperNetParams), TrainError> {
    let (input_dim, output_dim) = (params.input_dim, params.output_dim);
    let mut g = Graph::new();
    let nodes = hypernet::insert_params(&mut g, params, true);
    let theta = hypernet::predict_weights(&mut g, &nodes, policy, env.net.leaky_slope)?;
    let x = g.constant(batch.images.clone());
    let loss_id = unet_ce_loss(&mut g, env, x, theta, policy, &batch.labels)?;
    let loss = g.value(loss_id).data()[0];
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step: opt.steps_taken() + 1 });
    }
    g.backward(loss_id)?;
    let grads: Vec<Vec<f32>> = nodes
        .ids()
        .iter()
        .map(|&id| g.take_grad(id).expect("leaf grads populated by backward"))
        .collect();
    let mut updated = hypernet::extract_params(&mut g, &nodes, input_dim, output_dim);
    drop(g);
    {
        let mut tensors = updated.tensors_mut();
        let mut param_refs: Vec<&mut [f32]> = tensors.iter_mut().map(|(_, t)| t.as_mut_slice()).collect();
        let grad_refs: Vec<&[f32]> = grads.iter().map(|g| g.as_slice()).collect();
        opt.step(&mut param_refs, &grad_refs)?;
    }
    Ok((loss, updated))
}

/// One conventional step at a fixed factor; theta is the trained leaf.
pub fn train_step_fixed(
    env: &StepEnv,
    batch: &Batch,
    phi: f64,
    theta: Vec<f32>,
    opt: &mut Adam,
) -> Result<(f32, Vec<f32>), TrainError> {
    let mut g = Graph::new();
    let theta_id = g.leaf(Tensor::new(vec![theta.len()], theta).expect("flat"), true);
    let x = g.constant(batch.images.clone());
    let policy = RescalePolicy::Single(phi);
    let loss_id = unet_ce_loss(&mut g, env, x, theta_id, &policy, &batch.labels)?;
    let loss = g.value(loss_id).data()[0];
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step: opt.steps_taken() + 1 });
    }
    g.backward(loss_id)?;
    let grad = g.take_grad(theta_id).expect("leaf grad populated");
    let mut theta = g.take_value(theta_id).into_data();
    drop(g);
    opt.step(&mut [theta.as_mut_slice()], &[grad.as_slice()])?;
    Ok((loss, theta))
}

/// Variable-resolution baseline step: the input is downscaled by `r`, the
/// network runs at its fixed internal factor of 0.5, and the logits are
/// resized back to label resolution before the loss. Labels are
/// categorical and are never interpolated.
pub fn train_step_variable_resolution(
    env: &StepEnv,
    batch: &Batch,
    r: f64,
    theta: Vec<f32>,
    opt: &mut Adam,
) -> Result<(f32, Vec<f32>), TrainError> {
    let (_, _, h, w) = batch.images.dims4()?;
    let mut g = Graph::new();
    let theta_id = g.leaf(Tensor::new(vec![theta.len()], theta).expect("flat"), true);
    let x = g.constant(batch.images.clone());
    let xr = g.bilinear_resize(x, target_size(h, r)?, target_size(w, r)?)?;
    let policy = RescalePolicy::Single(0.5);
    let logits = unet::forward(&mut g, xr, theta_id, env.manifest, env.net, &policy)?;
    let logits_full = g.bilinear_resize(logits, h, w)?;
    let loss_id = g.cross_entropy(logits_full, &batch.labels)?;
    let loss = g.value(loss_id).data()[0];
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step: opt.steps_taken() + 1 });
    }
    g.backward(loss_id)?;
    let grad = g.take_grad(theta_id).expect("leaf grad populated");
    let mut theta = g.take_value(theta_id).into_data();
    drop(g);
    opt.step(&mut [theta.as_mut_slice()], &[grad.as_slice()])?;
    Ok((loss, theta))
}

/// Mean cross-entropy of a weight vector over a dataset, batched, with a
/// 64-bit pixel-weighted reduction. No gradients are recorded.
pub fn dataset_loss(
    env: &StepEnv,
    theta: &[f32],
    policy: &RescalePolicy,
    ds: &Dataset,
    batch_size: usize,
) -> Result<f64, TrainError> {
    let mut total = 0.0f64;
    let mut pixels = 0.0f64;
    for chunk in group_same_shape(ds, batch_size) {
        let batch = make_batch(ds, &chunk, None)?;
        let (b, _, h, w) = batch.images.dims4()?;
        let mut g = Graph::new();
        let theta_id = g.constant(Tensor::new(vec![theta.len()], theta.to_vec()).expect("flat"));
        let x = g.constant(batch.images);
        let loss_id = unet_ce_loss(&mut g, env, x, theta_id, policy, &batch.labels)?;
        let n = (b * h * w) as f64;
        total += g.value(loss_id).data()[0] as f64 * n;
        pixels += n;
    }
    Ok(total / pixels)
}

/// Consecutive same-shape index groups of at most `batch_size` items.
pub fn group_same_shape(ds: &Dataset, batch_size: usize) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, item) in ds.items.iter().enumerate() {
        match groups.last_mut() {
            Some(g) if g.len() < batch_size && ds.items[g[0]].dims() == item.dims() => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub train_loss: f32,
    pub phi: Vec<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxSteps,
    EarlyStop,
    Diverged,
}

#[derive(Debug)]
pub struct FitOutcome {
    /// Best-validation parameters (terminal checkpoint, no optimizer state).
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    pub reason: StopReason,
    pub best_val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
enum ModelParams {
    Hyper(HyperNetParams),
    Theta(Vec<f32>),
}

impl ModelParams {
    fn tensors(&self) -> Vec<(String, Vec<f32>)> {
        match self {
            ModelParams::Hyper(p) => {
                p.tensors().iter().map(|(n, d)| (n.to_string(), d.to_vec())).collect()
            }
            ModelParams::Theta(t) => vec![("theta".to_string(), t.clone())],
        }
    }
}

struct Best {
    val_loss: f64,
    step: u64,
    params: ModelParams,
}

/// Single-writer training loop with periodic validation, early stopping
/// and full-state checkpointing.
pub struct Trainer {
    cfg: TrainConfig,
    manifest: ParamManifest,
    train_ds: Dataset,
    val_ds: Dataset,
    params: Option<ModelParams>,
    opt: Adam,
    rng: ChaCha8Rng,
    step: u64,
    best: Option<Best>,
    rounds_since_improve: u32,
    log: Vec<LogRow>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, train_ds: Dataset, val_ds: Dataset) -> Result<Self, TrainError> {
        cfg.validate()?;
        if train_ds.is_empty() || val_ds.is_empty() {
            return Err(TrainError::InvalidConfig("train and validation splits must be nonempty".into()));
        }
        let manifest = unet::build_manifest(&cfg.net)?;
        let params = match cfg.mode {
            TrainMode::Hyper => {
                let input_dim = match cfg.policy_mode {
                    PolicyMode::Single => 2,
                    PolicyMode::Separate => 2 * cfg.net.num_rescale_steps(),
                };
                ModelParams::Hyper(hypernet::init_hypernet(&manifest, input_dim, cfg.net.leaky_slope, cfg.seed))
            }
            _ => ModelParams::Theta(unet::init_weights(&manifest, cfg.net.leaky_slope, cfg.seed)),
        };
        let sizes: Vec<usize> = match &params {
            ModelParams::Hyper(p) => p.tensors().iter().map(|(_, t)| t.len()).collect(),
            ModelParams::Theta(t) => vec![t.len()],
        };
        let opt = Adam::new(cfg.adam, &sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer {
            cfg,
            manifest,
            train_ds,
            val_ds,
            params: Some(params),
            opt,
            rng,
            step: 0,
            best: None,
            rounds_since_improve: 0,
            log: Vec::new(),
        })
    }

    /// Rebuild a trainer from a full-state checkpoint; the subsequent
    /// trajectory is bit-identical to the uninterrupted run.
    pub fn from_checkpoint(mut ck: Checkpoint, train_ds: Dataset, val_ds: Dataset) -> Result<Self, TrainError> {
        let cfg = ck
            .meta
            .train_config
            .clone()
            .ok_or_else(|| TrainError::InvalidConfig("checkpoint carries no train config".into()))?;
        let resume = ck
            .meta
            .resume
            .clone()
            .ok_or_else(|| TrainError::InvalidConfig("checkpoint carries no resume state".into()))?;
        let manifest = unet::build_manifest(&cfg.net)?;

        let take_params = |ck: &mut Checkpoint, prefix: &str| -> Result<ModelParams, TrainError> {
            match cfg.mode {
                TrainMode::Hyper => {
                    let input_dim = match cfg.policy_mode {
                        PolicyMode::Single => 2,
                        PolicyMode::Separate => 2 * cfg.net.num_rescale_steps(),
                    };
                    let mut get = |n: &str| -> Result<Vec<f32>, TrainError> {
                        ck.take_tensor(&format!("{prefix}{n}"))
                            .ok_or_else(|| TrainError::InvalidConfig(format!("checkpoint missing tensor {prefix}{n}")))
                    };
                    Ok(ModelParams::Hyper(HyperNetParams {
                        w1: get("hyper.w1")?,
                        b1: get("hyper.b1")?,
                        w2: get("hyper.w2")?,
                        b2: get("hyper.b2")?,
                        w3: get("hyper.w3")?,
                        b3: get("hyper.b3")?,
                        input_dim,
                        output_dim: manifest.total_len(),
                    }))
                }
                _ => Ok(ModelParams::Theta(ck.take_tensor(&format!("{prefix}theta")).ok_or_else(
                    || TrainError::InvalidConfig(format!("checkpoint missing tensor {prefix}theta")),
                )?)),
            }
        };

        let params = take_params(&mut ck, "")?;
        let n_tensors = match &params {
            ModelParams::Hyper(_) => 6,
            ModelParams::Theta(_) => 1,
        };
        let mut m = Vec::with_capacity(n_tensors);
        let mut v = Vec::with_capacity(n_tensors);
        for i in 0..n_tensors {
            m.push(ck.take_tensor(&format!("opt.m.{i}")).ok_or_else(|| {
                TrainError::InvalidConfig(format!("checkpoint missing tensor opt.m.{i}"))
            })?);
            v.push(ck.take_tensor(&format!("opt.v.{i}")).ok_or_else(|| {
                TrainError::InvalidConfig(format!("checkpoint missing tensor opt.v.{i}"))
            })?);
        }
        let opt = Adam::restore(cfg.adam, resume.adam_step, m, v);

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let pos: u128 = resume
            .rng_word_pos
            .parse()
            .map_err(|_| TrainError::InvalidConfig("bad rng_word_pos".into()))?;
        rng.set_word_pos(pos);

        let best = match resume.best_val_loss {
            Some(val_loss) => Some(Best {
                val_loss,
                step: resume.best_step,
                params: take_params(&mut ck, "best.")?,
            }),
            None => None,
        };

        Ok(Trainer {
            manifest,
            train_ds,
            val_ds,
            params: Some(params),
            opt,
            rng,
            step: ck.meta.step,
            best,
            rounds_since_improve: resume.rounds_since_improve,
            log: Vec::new(),
            cfg,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    fn val_every(&self) -> u64 {
        if self.cfg.val_interval > 0 {
            self.cfg.val_interval
        } else {
            (self.train_ds.len() as u64).div_ceil(self.cfg.batch_size as u64).max(1)
        }
    }

    /// Draw the step's policy (or variable-resolution `r`), then the batch
    /// indices, then the flip coins; the order is part of the format.
    fn one_step(&mut self) -> Result<(f32, Vec<f64>), TrainError> {
        let k = self.cfg.net.num_rescale_steps();
        let drawn: Vec<f64> = match self.cfg.mode {
            TrainMode::Hyper => {
                let prior = self.cfg.prior.expect("validated");
                let n = match self.cfg.policy_mode {
                    PolicyMode::Single => 1,
                    PolicyMode::Separate => k,
                };
                (0..n).map(|_| sample_factor(&prior, &mut self.rng)).collect()
            }
            TrainMode::Fixed => vec![self.cfg.phi_fixed.expect("validated")],
            TrainMode::VariableResolution => vec![self.rng.gen::<f64>()],
        };
        let indices: Vec<usize> =
            (0..self.cfg.batch_size).map(|_| self.rng.gen_range(0..self.train_ds.len())).collect();
        let flips: Option<Vec<bool>> = if self.cfg.flip_augment {
            Some((0..self.cfg.batch_size).map(|_| self.rng.gen::<bool>()).collect())
        } else {
            None
        };
        let batch = make_batch(&self.train_ds, &indices, flips.as_deref())?;

        let env = StepEnv { net: &self.cfg.net, manifest: &self.manifest };
        let params = self.params.take().expect("params present between steps");
        let (loss, params) = match (self.cfg.mode, params) {
            (TrainMode::Hyper, ModelParams::Hyper(p)) => {
                let policy = match self.cfg.policy_mode {
                    PolicyMode::Single => RescalePolicy::Single(drawn[0]),
                    PolicyMode::Separate => RescalePolicy::Separate(drawn.clone()),
                };
                let (loss, p) = train_step_hyper(&env, &batch, &policy, p, &mut self.opt)?;
                (loss, ModelParams::Hyper(p))
            }
            (TrainMode::Fixed, ModelParams::Theta(t)) => {
                let (loss, t) = train_step_fixed(&env, &batch, drawn[0], t, &mut self.opt)?;
                (loss, ModelParams::Theta(t))
            }
            (TrainMode::VariableResolution, ModelParams::Theta(t)) => {
                let (loss, t) = train_step_variable_resolution(&env, &batch, drawn[0], t, &mut self.opt)?;
                (loss, ModelParams::Theta(t))
            }
            _ => unreachable!("mode/params pairing fixed at construction"),
        };
        self.params = Some(params);
        Ok((loss, drawn))
    }

    /// Current parameters evaluated as a flat weight vector.
    fn current_theta(&self, policy: &RescalePolicy) -> Result<Vec<f32>, TrainError> {
        match self.params.as_ref().expect("params present") {
            ModelParams::Hyper(p) => Ok(hypernet::predict_values(p, policy, self.cfg.net.leaky_slope)?),
            ModelParams::Theta(t) => Ok(t.clone()),
        }
    }

    fn validate_round(&mut self) -> Result<f64, TrainError> {
        let policy = self.cfg.eval_policy();
        let theta = self.current_theta(&policy)?;
        let env = StepEnv { net: &self.cfg.net, manifest: &self.manifest };
        let val = dataset_loss(&env, &theta, &policy, &self.val_ds, self.cfg.batch_size)?;
        let improved = self.best.as_ref().map(|b| val < b.val_loss).unwrap_or(true);
        if improved {
            self.best = Some(Best {
                val_loss: val,
                step: self.step,
                params: self.params.clone().expect("params present"),
            });
            self.rounds_since_improve = 0;
        } else {
            self.rounds_since_improve += 1;
        }
        Ok(val)
    }

    /// Train until max_steps, early stop, or divergence. On divergence the
    /// last good parameters are returned (the failed update is never
    /// applied).
    pub fn run(&mut self) -> Result<FitOutcome, TrainError> {
        let reason = self.run_loop()?;
        Ok(FitOutcome {
            checkpoint: self.terminal_checkpoint(),
            log: std::mem::take(&mut self.log),
            reason,
            best_val_loss: self.best.as_ref().map(|b| b.val_loss),
        })
    }

    fn run_loop(&mut self) -> Result<StopReason, TrainError> {
        if self.cfg.max_steps == 0 {
            return Ok(StopReason::MaxSteps);
        }
        let val_every = self.val_every();
        while self.step < self.cfg.max_steps {
            self.step += 1;
            let (loss, phi) = match self.one_step() {
                Ok(r) => r,
                Err(TrainError::NonFiniteLoss { .. }) | Err(TrainError::Adam(AdamError::NonFiniteGrad { .. })) => {
                    return Ok(StopReason::Diverged);
                }
                Err(e) => return Err(e),
            };
            let mut row = LogRow { step: self.step, train_loss: loss, phi, val_loss: None };
            if self.step % val_every == 0 || self.step == self.cfg.max_steps {
                let val = self.validate_round()?;
                row.val_loss = Some(val);
                self.log.push(row);
                if self.rounds_since_improve >= self.cfg.patience {
                    return Ok(StopReason::EarlyStop);
                }
            } else {
                self.log.push(row);
            }
        }
        Ok(StopReason::MaxSteps)
    }

    fn base_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            mode: self.cfg.mode,
            policy_mode: self.cfg.policy_mode,
            net: self.cfg.net.clone(),
            prior: self.cfg.prior,
            phi_fixed: self.cfg.phi_fixed,
            seed: self.cfg.seed,
            step: self.step,
            manifest: self.manifest.slots().to_vec(),
            tensors: Vec::new(),
            train_config: Some(self.cfg.clone()),
            resume: None,
            source_phi: None,
        }
    }

    /// Best-validation parameters as a terminal checkpoint (no optimizer
    /// state); falls back to current parameters when no validation ran.
    pub fn terminal_checkpoint(&self) -> Checkpoint {
        let mut meta = self.base_meta();
        let tensors = match &self.best {
            Some(b) => {
                meta.step = b.step;
                b.params.tensors()
            }
            None => self.params.as_ref().expect("params present").tensors(),
        };
        let mut ck = Checkpoint { meta, tensors };
        ck.meta.tensors = ck
            .tensors
            .iter()
            .map(|(n, d)| TensorDecl { name: n.clone(), len: d.len() as u64 })
            .collect();
        ck
    }

    /// Full training state: parameters, optimizer moments, RNG position
    /// and early-stop bookkeeping. Reload + resume is bit-identical to an
    /// uninterrupted run.
    pub fn resumable_checkpoint(&self) -> Checkpoint {
        let mut meta = self.base_meta();
        meta.resume = Some(ResumeState {
            rng_word_pos: self.rng.get_word_pos().to_string(),
            adam_step: self.opt.steps_taken(),
            best_val_loss: self.best.as_ref().map(|b| b.val_loss),
            best_step: self.best.as_ref().map(|b| b.step).unwrap_or(0),
            rounds_since_improve: self.rounds_since_improve,
        });
        let mut tensors = self.params.as_ref().expect("params present").tensors();
        let (m, v) = self.opt.moments();
        for (i, t) in m.iter().enumerate() {
            tensors.push((format!("opt.m.{i}"), t.clone()));
        }
        for (i, t) in v.iter().enumerate() {
            tensors.push((format!("opt.v.{i}"), t.clone()));
        }
        if let Some(b) = &self.best {
            for (n, d) in b.params.tensors() {
                tensors.push((format!("best.{n}"), d));
            }
        }
        let mut ck = Checkpoint { meta, tensors };
        ck.meta.tensors = ck
            .tensors
            .iter()
            .map(|(n, d)| TensorDecl { name: n.clone(), len: d.len() as u64 })
            .collect();
        ck
    }

    /// Run at most `n` more steps (no early-stop checks); used by resume
    /// tests and incremental drivers.
    pub fn run_steps(&mut self, n: u64) -> Result<(), TrainError> {
        let val_every = self.val_every();
        for _ in 0..n {
            if self.step >= self.cfg.max_steps {
                break;
            }
            self.step += 1;
            let (loss, phi) = self.one_step()?;
            let mut row = LogRow { step: self.step, train_loss: loss, phi, val_loss: None };
            if self.step % val_every == 0 || self.step == self.cfg.max_steps {
                row.val_loss = Some(self.validate_round()?);
            }
            self.log.push(row);
        }
        Ok(())
    }
}

/// Train with early stopping and return the best-validation checkpoint.
pub fn fit(cfg: TrainConfig, train_ds: Dataset, val_ds: Dataset) -> Result<FitOutcome, TrainError> {
    let mut trainer = Trainer::new(cfg, train_ds, val_ds)?;
    trainer.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_shapes;

    fn tiny_net() -> PrimaryNetConfig {
        PrimaryNetConfig::with_channels(1, 3, vec![2, 4, 4], vec![4, 2])
    }

    fn tiny_data() -> (Dataset, Dataset) {
        let ds = synth_shapes(8, 16, 2, 11).unwrap();
        crate::data::split(&ds, 0.75, 1).unwrap()
    }

    fn hyper_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::new(TrainMode::Hyper, tiny_net());
        cfg.prior = Some(PriorSpec::new(0.2, 0.8).unwrap());
        cfg.batch_size = 2;
        cfg.max_steps = 4;
        cfg.seed = 5;
        cfg
    }

    #[test]
    fn sample_factor_degenerate_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PriorSpec::new(0.5, 0.5).unwrap();
        for _ in 0..10 {
            assert_eq!(sample_factor(&p, &mut rng), 0.5);
        }
        let p = PriorSpec::new(0.0, 0.6).unwrap();
        let draws: Vec<f64> = (0..2000).map(|_| sample_factor(&p, &mut rng)).collect();
        assert!(draws.iter().all(|&v| (0.0..=0.6).contains(&v)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.3).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn uniform_prior_mean_matches_moment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PriorSpec::new(0.0, 1.0).unwrap();
        let n = 100_000;
        let mean = (0..n).map(|_| sample_factor(&p, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn config_validation_catches_mode_conflicts() {
        let mut cfg = TrainConfig::new(TrainMode::Fixed, tiny_net());
        cfg.phi_fixed = Some(0.5);
        cfg.prior = Some(PriorSpec { low: 0.0, high: 1.0 });
        assert!(cfg.validate().is_err());
        cfg.prior = None;
        assert!(cfg.validate().is_ok());
        let cfg = TrainConfig::new(TrainMode::Hyper, tiny_net());
        assert!(cfg.validate().is_err(), "hyper mode without prior must fail");
    }

    #[test]
    fn first_hyper_loss_is_near_uniform_entropy() {
        // Fan-out scaling shrinks activations through a widening decoder,
        // so an untrained net emits near-zero logits and the first loss
        // sits at the uniform-classifier entropy. (A decoder much narrower
        // than its concatenated inputs would amplify instead.)
        let net = PrimaryNetConfig::with_channels(1, 3, vec![4, 8, 16], vec![16, 8]);
        let ds = synth_shapes(8, 16, 2, 11).unwrap();
        let (tr, va) = crate::data::split(&ds, 0.75, 1).unwrap();
        let mut cfg = TrainConfig::new(TrainMode::Hyper, net);
        cfg.prior = Some(PriorSpec::new(0.2, 0.8).unwrap());
        cfg.batch_size = 2;
        cfg.max_steps = 1;
        cfg.seed = 5;
        let mut t = Trainer::new(cfg, tr, va).unwrap();
        t.step += 1;
        let (loss, _) = t.one_step().unwrap();
        let expected = (3.0f32).ln();
        assert!((loss - expected).abs() < 0.5, "loss {loss} vs ln(3) {expected}");
    }

    #[test]
    fn hyper_mode_keeps_moments_for_omega_only() {
        let (tr, va) = tiny_data();
        let t = Trainer::new(hyper_cfg(), tr, va).unwrap();
        assert_eq!(t.opt.num_tensors(), 6);
    }

    #[test]
    fn same_seed_gives_identical_loss_traces() {
        let run = || {
            let (tr, va) = tiny_data();
            let mut cfg = hyper_cfg();
            cfg.max_steps = 10;
            cfg.val_interval = 100;
            let mut t = Trainer::new(cfg, tr, va).unwrap();
            let mut losses = Vec::new();
            for _ in 0..10 {
                t.step += 1;
                losses.push(t.one_step().unwrap().0);
            }
            losses
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradient_flows_to_theta_in_fixed_mode() {
        let (tr, va) = tiny_data();
        let mut cfg = TrainConfig::new(TrainMode::Fixed, tiny_net());
        cfg.phi_fixed = Some(0.5);
        cfg.batch_size = 2;
        cfg.max_steps = 1;
        cfg.seed = 2;
        let mut t = Trainer::new(cfg, tr, va).unwrap();
        let before = match t.params.clone().unwrap() {
            ModelParams::Theta(t) => t,
            _ => unreachable!(),
        };
        t.step += 1;
        t.one_step().unwrap();
        let after = match t.params.clone().unwrap() {
            ModelParams::Theta(t) => t,
            _ => unreachable!(),
        };
        assert_ne!(before, after, "an update must move theta");
    }

    #[test]
    fn frozen_hypernet_matches_fixed_mode_loss() {
        // Zero the hypernet weights and write theta into the output bias:
        // h(phi) is then constant and the hyper loss must equal the fixed
        // loss on the same batch to float exactness.
        let net = tiny_net();
        let manifest = unet::build_manifest(&net).unwrap();
        let theta = unet::init_weights(&manifest, net.leaky_slope, 3);
        let ds = synth_shapes(4, 16, 2, 21).unwrap();
        let batch = make_batch(&ds, &[0, 1], None).unwrap();
        let env = StepEnv { net: &net, manifest: &manifest };

        let mut frozen = hypernet::init_hypernet(&manifest, 2, net.leaky_slope, 0);
        for (name, t) in frozen.tensors_mut() {
            if name != "hyper.b3" {
                t.fill(0.0);
            }
        }
        frozen.b3.copy_from_slice(&theta);

        let mut opt_h = Adam::new(AdamConfig::default(), &[
            frozen.w1.len(),
            frozen.b1.len(),
            frozen.w2.len(),
            frozen.b2.len(),
            frozen.w3.len(),
            frozen.b3.len(),
        ]);
        let policy = RescalePolicy::Single(0.5);
        let (hyper_loss, _) = train_step_hyper(&env, &batch, &policy, frozen, &mut opt_h).unwrap();

        let mut opt_f = Adam::new(AdamConfig::default(), &[theta.len()]);
        let (fixed_loss, _) = train_step_fixed(&env, &batch, 0.5, theta, &mut opt_f).unwrap();
        assert!(
            (hyper_loss - fixed_loss).abs() < 1e-6,
            "hyper {hyper_loss} vs fixed {fixed_loss}"
        );
    }

    #[test]
    fn varres_r1_equals_fixed_half() {
        let net = tiny_net();
        let manifest = unet::build_manifest(&net).unwrap();
        let theta = unet::init_weights(&manifest, net.leaky_slope, 9);
        let ds = synth_shapes(4, 16, 2, 22).unwrap();
        let batch = make_batch(&ds, &[0, 1, 2], None).unwrap();
        let env = StepEnv { net: &net, manifest: &manifest };

        let mut opt_a = Adam::new(AdamConfig::default(), &[theta.len()]);
        let (loss_var, _) =
            train_step_variable_resolution(&env, &batch, 1.0, theta.clone(), &mut opt_a).unwrap();
        let mut opt_b = Adam::new(AdamConfig::default(), &[theta.len()]);
        let (loss_fixed, _) = train_step_fixed(&env, &batch, 0.5, theta, &mut opt_b).unwrap();
        assert_eq!(loss_var, loss_fixed, "identity resize must be exact");
    }

    #[test]
    fn fixed_smoke_run_decreases_smoothed_loss() {
        let ds = synth_shapes(16, 16, 2, 31).unwrap();
        let (tr, va) = crate::data::split(&ds, 0.75, 1).unwrap();
        let mut cfg = TrainConfig::new(TrainMode::Fixed, tiny_net());
        cfg.phi_fixed = Some(0.5);
        cfg.batch_size = 4;
        cfg.max_steps = 200;
        cfg.val_interval = 1000;
        cfg.seed = 31;
        let mut t = Trainer::new(cfg, tr, va).unwrap();
        t.run_steps(200).unwrap();
        let losses: Vec<f32> = t.log().iter().map(|r| r.train_loss).collect();
        let head: f32 = losses[..20].iter().sum::<f32>() / 20.0;
        let tail: f32 = losses[180..].iter().sum::<f32>() / 20.0;
        assert!(tail < head, "smoothed loss must decrease: head {head} tail {tail}");
    }

    #[test]
    fn early_stop_on_worsening_validation() {
        let (tr, va) = tiny_data();
        let mut cfg = hyper_cfg();
        cfg.max_steps = 100;
        cfg.patience = 1;
        cfg.val_interval = 1;
        // Huge learning rate makes validation worsen almost immediately.
        cfg.adam.lr = 0.5;
        let outcome = fit(cfg, tr, va).unwrap();
        assert_eq!(outcome.reason, StopReason::EarlyStop);
        assert!(outcome.checkpoint.meta.step < 100);
    }

    #[test]
    fn max_steps_zero_returns_initialization() {
        let (tr, va) = tiny_data();
        let mut cfg = hyper_cfg();
        cfg.max_steps = 0;
        let outcome = fit(cfg.clone(), tr, va).unwrap();
        assert_eq!(outcome.checkpoint.meta.step, 0);
        let manifest = unet::build_manifest(&cfg.net).unwrap();
        let init = hypernet::init_hypernet(&manifest, 2, cfg.net.leaky_slope, cfg.seed);
        assert_eq!(outcome.checkpoint.tensor("hyper.w1").unwrap(), init.w1.as_slice());
    }

    #[test]
    fn resume_is_bit_identical_to_uninterrupted() {
        let (tr, va) = tiny_data();
        let mut cfg = hyper_cfg();
        cfg.max_steps = 8;
        cfg.val_interval = 2;

        let mut straight = Trainer::new(cfg.clone(), tr.clone(), va.clone()).unwrap();
        straight.run_steps(8).unwrap();
        let full = straight.resumable_checkpoint();

        let mut first = Trainer::new(cfg, tr.clone(), va.clone()).unwrap();
        first.run_steps(4).unwrap();
        let mid = first.resumable_checkpoint();
        let mut resumed = Trainer::from_checkpoint(mid, tr, va).unwrap();
        resumed.run_steps(4).unwrap();
        let resumed_ck = resumed.resumable_checkpoint();

        assert_eq!(full.tensors, resumed_ck.tensors);
        assert_eq!(full.meta.resume, resumed_ck.meta.resume);
    }
}
