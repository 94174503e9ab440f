//! MLP hypernetwork mapping an encoded rescaling policy to the full flat
//! weight vector of the primary network.
//!
//! Three fully connected layers with hidden sizes 10 and 100, LeakyReLU on
//! all but the last layer. The last layer is conceptually one linear layer
//! per manifest slot; the groups are stored as contiguous row blocks of a
//! single weight matrix so prediction is one matrix-vector product, while
//! initialization still scales each block by its own slot's fan.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Graph, Tensor, TensorError, TensorId};
use crate::unet::{ParamManifest, RescalePolicy};

pub const HIDDEN1: usize = 10;
pub const HIDDEN2: usize = 100;

/// Kaiming-normal gain for LeakyReLU with the given negative slope.
pub fn kaiming_gain(slope: f32) -> f64 {
    (2.0 / (1.0 + (slope as f64).powi(2))).sqrt()
}

/// Encode a policy as `(phi, 1 - phi)` pairs so the input layer sees a
/// constant-magnitude vector regardless of the factor.
pub fn encode_policy(policy: &RescalePolicy) -> Vec<f32> {
    policy
        .factors()
        .iter()
        .flat_map(|&f| [f as f32, 1.0 - f as f32])
        .collect()
}

/// Learnable weights of the hypernetwork.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperNetParams {
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
    pub w3: Vec<f32>,
    pub b3: Vec<f32>,
    /// Policy encoding length the first layer expects (2 or 2K).
    pub input_dim: usize,
    /// Output length |theta|.
    pub output_dim: usize,
}

impl HyperNetParams {
    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + self.b3.len()
    }

    /// Flat views in a fixed order, used by the optimizer and checkpoints.
    pub fn tensors(&self) -> [(&'static str, &[f32]); 6] {
        [
            ("hyper.w1", &self.w1),
            ("hyper.b1", &self.b1),
            ("hyper.w2", &self.w2),
            ("hyper.b2", &self.b2),
            ("hyper.w3", &self.w3),
            ("hyper.b3", &self.b3),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Vec<f32>); 6] {
        [
            ("hyper.w1", &mut self.w1),
            ("hyper.b1", &mut self.b1),
            ("hyper.w2", &mut self.w2),
            ("hyper.b2", &mut self.b2),
            ("hyper.w3", &mut self.w3),
            ("hyper.b3", &mut self.b3),
        ]
    }
}

/// Kaiming-normal fan-out initialization, biases zero.
///
/// Layers 1 and 2 use their own fan-out (10 and 100). Each row block of
/// layer 3 uses the fan-out of the primary-network slot it predicts, so a
/// predicted parameter's initial scale depends only on its own dimensions.
pub fn init_hypernet(manifest: &ParamManifest, input_dim: usize, slope: f32, seed: u64) -> HyperNetParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gain = kaiming_gain(slope);
    let sample = |rng: &mut ChaCha8Rng, n: usize, std: f64| -> Vec<f32> {
        let dist = Normal::new(0.0f64, std).expect("std > 0");
        (0..n).map(|_| dist.sample(rng) as f32).collect()
    };

    let w1 = sample(&mut rng, HIDDEN1 * input_dim, gain / (HIDDEN1 as f64).sqrt());
    let w2 = sample(&mut rng, HIDDEN2 * HIDDEN1, gain / (HIDDEN2 as f64).sqrt());
    let mut w3 = Vec::with_capacity(manifest.total_len() * HIDDEN2);
    for slot in manifest.slots() {
        let std = gain / (slot.fan_out as f64).sqrt();
        w3.extend(sample(&mut rng, slot.len() * HIDDEN2, std));
    }
    HyperNetParams {
        w1,
        b1: vec![0.0; HIDDEN1],
        w2,
        b2: vec![0.0; HIDDEN2],
        w3,
        b3: vec![0.0; manifest.total_len()],
        input_dim,
        output_dim: manifest.total_len(),
    }
}

/// Graph handles for hypernetwork leaves inserted into a graph.
#[derive(Debug, Clone, Copy)]
pub struct HyperNetNodes {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
    pub w3: TensorId,
    pub b3: TensorId,
}

impl HyperNetNodes {
    pub fn ids(&self) -> [TensorId; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

/// Move the parameters into a graph as leaves (no copy).
pub fn insert_params(g: &mut Graph, params: HyperNetParams, requires_grad: bool) -> HyperNetNodes {
    let HyperNetParams { w1, b1, w2, b2, w3, b3, input_dim, output_dim } = params;
    let mk = |g: &mut Graph, shape: Vec<usize>, data: Vec<f32>| {
        let t = Tensor::new(shape, data).expect("params are internally consistent");
        g.leaf(t, requires_grad)
    };
    HyperNetNodes {
        w1: mk(g, vec![HIDDEN1, input_dim], w1),
        b1: mk(g, vec![HIDDEN1], b1),
        w2: mk(g, vec![HIDDEN2, HIDDEN1], w2),
        b2: mk(g, vec![HIDDEN2], b2),
        w3: mk(g, vec![output_dim, HIDDEN2], w3),
        b3: mk(g, vec![output_dim], b3),
    }
}

/// Move the parameters back out of the graph after a step.
pub fn extract_params(g: &mut Graph, nodes: &HyperNetNodes, input_dim: usize, output_dim: usize) -> HyperNetParams {
    HyperNetParams {
        w1: g.take_value(nodes.w1).into_data(),
        b1: g.take_value(nodes.b1).into_data(),
        w2: g.take_value(nodes.w2).into_data(),
        b2: g.take_value(nodes.b2).into_data(),
        w3: g.take_value(nodes.w3).into_data(),
        b3: g.take_value(nodes.b3).into_data(),
        input_dim,
        output_dim,
    }
}

/// Predict the flat weight vector for a policy: two LeakyReLU layers, then
/// the grouped linear output layer. Differentiable w.r.t. the hypernetwork
/// leaves; one forward pass regardless of the factor value.
pub fn predict_weights(
    g: &mut Graph,
    nodes: &HyperNetNodes,
    policy: &RescalePolicy,
    slope: f32,
) -> Result<TensorId, TensorError> {
    policy.validate()?;
    let enc = encode_policy(policy);
    let input_dim = g.value(nodes.w1).shape()[1];
    if enc.len() != input_dim {
        return Err(TensorError::Shape {
            op: "predict_weights",
            msg: format!("policy encodes to {} values but the input layer expects {input_dim}", enc.len()),
        });
    }
    let x = g.constant(Tensor::new(vec![1, enc.len()], enc)?);
    let h1 = g.linear(x, nodes.w1, nodes.b1)?;
    let h1 = g.leaky_relu(h1, slope)?;
    let h2 = g.linear(h1, nodes.w2, nodes.b2)?;
    let h2 = g.leaky_relu(h2, slope)?;
    let out = g.linear(h2, nodes.w3, nodes.b3)?;
    let total = g.value(out).numel();
    g.view_slice(out, 0, vec![total])
}

/// Predict the weight vector as plain values (throwaway graph, no
/// gradients). This is the inference path: after a factor is chosen the
/// hypernetwork runs once here and is not needed again.
pub fn predict_values(
    params: &HyperNetParams,
    policy: &RescalePolicy,
    slope: f32,
) -> Result<Vec<f32>, TensorError> {
    let mut g = Graph::new();
    let nodes = insert_params(&mut g, params.clone(), false);
    let theta = predict_weights(&mut g, &nodes, policy, slope)?;
    Ok(g.take_value(theta).into_data())
}
