//! Variable-rescale UNet: an encoder-decoder whose downscale factors come
//! from a [`RescalePolicy`] and whose weights arrive as one flat vector.
//!
//! The parameter layout is fixed by [`ParamManifest`] and depends only on
//! the channel configuration, never on the rescaling factor: every factor
//! yields a network with identical parameter count, only the intermediate
//! feature-map sizes change.

use serde::{Deserialize, Serialize};

use crate::resize::target_size;
use crate::tensor::{Graph, TensorError, TensorId};

/// Channel configuration of the segmentation network.
///
/// `encoder_channels` has one entry per encoder stage (the last stage is
/// the bottleneck), `decoder_channels` one per decoder stage; there is one
/// rescale step per decoder stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimaryNetConfig {
    pub in_channels: usize,
    /// Number of output classes, including the background class 0.
    pub num_classes: usize,
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub convs_per_stage: usize,
    pub kernel: usize,
    pub leaky_slope: f32,
}

impl PrimaryNetConfig {
    /// Five encoder stages, four decoder stages, two 3x3 convolutions per
    /// stage and LeakyReLU activations.
    pub fn with_channels(
        in_channels: usize,
        num_classes: usize,
        encoder_channels: Vec<usize>,
        decoder_channels: Vec<usize>,
    ) -> Self {
        PrimaryNetConfig {
            in_channels,
            num_classes,
            encoder_channels,
            decoder_channels,
            convs_per_stage: 2,
            kernel: 3,
            leaky_slope: 0.01,
        }
    }

    /// Number of rescale steps (= decoder stages).
    pub fn num_rescale_steps(&self) -> usize {
        self.decoder_channels.len()
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.encoder_channels.len() < 2 {
            return Err(TensorError::InvalidArg {
                op: "PrimaryNetConfig",
                msg: "need at least two encoder stages".into(),
            });
        }
        if self.decoder_channels.len() != self.encoder_channels.len() - 1 {
            return Err(TensorError::InvalidArg {
                op: "PrimaryNetConfig",
                msg: format!(
                    "decoder stage count {} must be encoder stage count {} minus one",
                    self.decoder_channels.len(),
                    self.encoder_channels.len()
                ),
            });
        }
        if self.num_classes < 2 {
            return Err(TensorError::InvalidArg {
                op: "PrimaryNetConfig",
                msg: "need at least two classes (background plus one)".into(),
            });
        }
        if self.convs_per_stage < 1 || self.kernel % 2 == 0 || self.in_channels == 0 {
            return Err(TensorError::InvalidArg {
                op: "PrimaryNetConfig",
                msg: "convs_per_stage >= 1, odd kernel and in_channels >= 1 required".into(),
            });
        }
        Ok(())
    }
}

/// A single factor shared by every rescale step, or one factor per step.
///
/// Factors live in `[0, 1]`; 0 is the degenerate limit where every
/// downscaled extent clamps to 1 pixel (needed so evaluation grids may
/// include the endpoint).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RescalePolicy {
    Single(f64),
    Separate(Vec<f64>),
}

impl RescalePolicy {
    pub fn validate(&self) -> Result<(), TensorError> {
        let check = |f: f64| -> Result<(), TensorError> {
            if !f.is_finite() || !(0.0..=1.0).contains(&f) {
                return Err(TensorError::InvalidArg {
                    op: "RescalePolicy",
                    msg: format!("factor must be in [0, 1], got {f}"),
                });
            }
            Ok(())
        };
        match self {
            RescalePolicy::Single(f) => check(*f),
            RescalePolicy::Separate(fs) => {
                if fs.is_empty() {
                    return Err(TensorError::InvalidArg {
                        op: "RescalePolicy",
                        msg: "separate policy needs at least one factor".into(),
                    });
                }
                fs.iter().try_for_each(|f| check(*f))
            }
        }
    }

    /// Per-step factors for a network with `k` rescale steps. A single
    /// factor is replicated; a separate vector must match `k` exactly.
    /// Step `i`'s factor governs downscale `i` and, because upsampling
    /// always matches the paired skip connection, upscale `k - 1 - i`.
    pub fn expand(&self, k: usize) -> Result<Vec<f64>, TensorError> {
        self.validate()?;
        match self {
            RescalePolicy::Single(f) => Ok(vec![*f; k]),
            RescalePolicy::Separate(fs) => {
                if fs.len() != k {
                    return Err(TensorError::InvalidArg {
                        op: "RescalePolicy",
                        msg: format!("policy has {} factors but the network has {k} rescale steps", fs.len()),
                    });
                }
                Ok(fs.clone())
            }
        }
    }

    pub fn factors(&self) -> &[f64] {
        match self {
            RescalePolicy::Single(f) => std::slice::from_ref(f),
            RescalePolicy::Separate(fs) => fs,
        }
    }
}

/// Role of a parameter slot, which decides how its fan is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotRole {
    ConvKernel,
    ConvBias,
}

/// One named parameter tensor of the primary network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: SlotRole,
    pub fan_in: usize,
    pub fan_out: usize,
    /// Offset into the flattened weight vector.
    pub offset: usize,
}

impl SlotSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered list of parameter slots; defines the flattening order of the
/// weight vector. Encoder stages shallow to deep, then decoder stages deep
/// to shallow, kernel before bias within each convolution, final 1x1
/// projection last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamManifest {
    slots: Vec<SlotSpec>,
    total_len: usize,
}

impl ParamManifest {
    pub fn slots(&self) -> &[SlotSpec] {
        &self.slots
    }

    /// Total parameter count; independent of any rescaling policy.
    pub fn total_len(&self) -> usize {
        self.total_len
    }
}

/// Flat weight vector checked against a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    values: Vec<f32>,
}

impl WeightSet {
    pub fn new(values: Vec<f32>, manifest: &ParamManifest) -> Result<Self, TensorError> {
        if values.len() != manifest.total_len() {
            return Err(TensorError::Shape {
                op: "WeightSet",
                msg: format!("expected {} weights, got {}", manifest.total_len(), values.len()),
            });
        }
        Ok(WeightSet { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

/// Enumerate every conv kernel and bias of the network in execution order.
pub fn build_manifest(cfg: &PrimaryNetConfig) -> Result<ParamManifest, TensorError> {
    cfg.validate()?;
    let k = cfg.kernel;
    let mut slots = Vec::new();
    let mut offset = 0usize;
    let push = |name: String, cout: usize, cin: usize, kk: usize, offset: &mut usize, slots: &mut Vec<SlotSpec>| {
        let kernel = SlotSpec {
            name: format!("{name}.weight"),
            shape: vec![cout, cin, kk, kk],
            role: SlotRole::ConvKernel,
            fan_in: cin * kk * kk,
            fan_out: cout * kk * kk,
            offset: *offset,
        };
        *offset += kernel.len();
        slots.push(kernel);
        let bias = SlotSpec {
            name: format!("{name}.bias"),
            shape: vec![cout],
            role: SlotRole::ConvBias,
            fan_in: cin * kk * kk,
            fan_out: cout,
            offset: *offset,
        };
        *offset += bias.len();
        slots.push(bias);
    };

    let enc = &cfg.encoder_channels;
    for (s, &cout) in enc.iter().enumerate() {
        let mut cin = if s == 0 { cfg.in_channels } else { enc[s - 1] };
        for c in 0..cfg.convs_per_stage {
            push(format!("enc{s}.conv{c}"), cout, cin, k, &mut offset, &mut slots);
            cin = cout;
        }
    }
    let dec = &cfg.decoder_channels;
    let deepest = enc.len() - 1;
    for (j, &cout) in dec.iter().enumerate() {
        let prev = if j == 0 { enc[deepest] } else { dec[j - 1] };
        let skip = enc[deepest - 1 - j];
        let mut cin = prev + skip;
        for c in 0..cfg.convs_per_stage {
            push(format!("dec{j}.conv{c}"), cout, cin, k, &mut offset, &mut slots);
            cin = cout;
        }
    }
    push("final".into(), cfg.num_classes, dec[dec.len() - 1], 1, &mut offset, &mut slots);

    Ok(ParamManifest { slots, total_len: offset })
}

/// Kaiming-normal initialization of a flat weight vector for conventional
/// (non-hypernetwork) training; bias slots start at zero. Fan-in keeps
/// forward activation variance level through the decoder, whose
/// concatenations otherwise amplify it.
pub fn init_weights(manifest: &ParamManifest, slope: f32, seed: u64) -> Vec<f32> {
    use rand::SeedableRng;
    use rand_distr::Distribution;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let gain = (2.0 / (1.0 + (slope as f64).powi(2))).sqrt();
    let mut theta = vec![0.0f32; manifest.total_len()];
    for slot in manifest.slots() {
        if slot.role == SlotRole::ConvKernel {
            let std = gain / (slot.fan_in as f64).sqrt();
            let dist = rand_distr::Normal::new(0.0f64, std).expect("std > 0");
            for v in theta[slot.offset..slot.offset + slot.len()].iter_mut() {
                *v = dist.sample(&mut rng) as f32;
            }
        }
    }
    theta
}

/// Run the network: per encoder stage two conv+LeakyReLU then a downscale
/// by that step's factor; per decoder stage an upsample to the paired skip,
/// channel concat and two conv+LeakyReLU; a final 1x1 convolution with no
/// activation maps to class logits. Output spatial dims equal input dims.
///
/// `theta` is the flat weight vector as a graph node, so it may be either a
/// trainable leaf (conventional training) or the output of a hypernetwork.
pub fn forward(
    g: &mut Graph,
    x: TensorId,
    theta: TensorId,
    manifest: &ParamManifest,
    cfg: &PrimaryNetConfig,
    policy: &RescalePolicy,
) -> Result<TensorId, TensorError> {
    let steps = cfg.num_rescale_steps();
    let factors = policy.expand(steps)?;
    if g.value(theta).numel() != manifest.total_len() {
        return Err(TensorError::Shape {
            op: "unet::forward",
            msg: format!(
                "weight vector has {} elements, manifest needs {}",
                g.value(theta).numel(),
                manifest.total_len()
            ),
        });
    }

    let mut slot_iter = manifest.slots().iter();
    let mut next_conv = |g: &mut Graph| -> Result<(TensorId, TensorId), TensorError> {
        let kspec = slot_iter.next().expect("manifest exhausted");
        let bspec = slot_iter.next().expect("manifest exhausted");
        let kid = g.view_slice(theta, kspec.offset, kspec.shape.clone())?;
        let bid = g.view_slice(theta, bspec.offset, bspec.shape.clone())?;
        Ok((kid, bid))
    };

    let slope = cfg.leaky_slope;
    let mut cur = x;
    let mut skips = Vec::with_capacity(steps);
    for stage in 0..cfg.encoder_channels.len() {
        for _ in 0..cfg.convs_per_stage {
            let (kid, bid) = next_conv(g)?;
            cur = g.conv2d(cur, kid, bid)?;
            cur = g.leaky_relu(cur, slope)?;
        }
        if stage < steps {
            skips.push(cur);
            let (_, _, h, w) = g.value(cur).dims4()?;
            let oh = target_size(h, factors[stage])?;
            let ow = target_size(w, factors[stage])?;
            cur = g.bilinear_resize(cur, oh, ow)?;
        }
    }
    for _ in 0..cfg.decoder_channels.len() {
        let skip = skips.pop().expect("one skip per decoder stage");
        cur = g.upsample_to_match(cur, skip)?;
        cur = g.concat_channels(cur, skip)?;
        for _ in 0..cfg.convs_per_stage {
            let (kid, bid) = next_conv(g)?;
            cur = g.conv2d(cur, kid, bid)?;
            cur = g.leaky_relu(cur, slope)?;
        }
    }
    let (kid, bid) = next_conv(g)?;
    cur = g.conv2d(cur, kid, bid)?;
    debug_assert!(slot_iter.next().is_none(), "manifest fully consumed");
    Ok(cur)
}
