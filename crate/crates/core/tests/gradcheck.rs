//! Finite-difference gradient checks for every differentiable op.
//!
//! The analytic f32 gradients from the engine are compared against central
//! differences of the f64 reference implementations in `common`; inputs
//! are drawn away from activation kinks.

mod common;

use common::*;
use hyperscale_core::tensor::{Graph, Tensor, TensorId};

const H_FD: f64 = 1e-4;
const TOL: f64 = 1e-4;

/// Weighted sum of an output tensor makes a scalar loss that exercises
/// every output coordinate with a distinct gradient.
fn weighted_loss(g: &mut Graph, out: TensorId, weights: &[f64]) -> TensorId {
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(Tensor::new(shape, to_f32(weights)).unwrap());
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

fn weighted_sum_ref(out: &[f64], weights: &[f64]) -> f64 {
    out.iter().zip(weights).map(|(a, b)| a * b).sum()
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut r = rng(10);
    for trial in 0..8 {
        let (b, cin, cout, k) = (1 + trial % 2, 1 + trial % 3, 1 + (trial + 1) % 3, [1, 3, 5][trial % 3]);
        let (h, w) = (3 + trial % 3, 4 + trial % 2);
        let input = rand_vec(&mut r, b * cin * h * w, -1.0, 1.0);
        let kernel = rand_vec(&mut r, cout * cin * k * k, -1.0, 1.0);
        let bias = rand_vec(&mut r, cout, -0.5, 0.5);
        let weights = rand_vec(&mut r, b * cout * h * w, -1.0, 1.0);

        let mut g = Graph::new();
        let xi = g.leaf(Tensor::new(vec![b, cin, h, w], to_f32(&input)).unwrap(), true);
        let ki = g.leaf(Tensor::new(vec![cout, cin, k, k], to_f32(&kernel)).unwrap(), true);
        let bi = g.leaf(Tensor::new(vec![cout], to_f32(&bias)).unwrap(), true);
        let out = g.conv2d(xi, ki, bi).unwrap();
        let loss = weighted_loss(&mut g, out, &weights);
        g.backward(loss).unwrap();

        let analytic: Vec<Vec<f64>> = [xi, ki, bi]
            .iter()
            .map(|&id| g.grad(id).unwrap().iter().map(|&v| v as f64).collect())
            .collect();

        let run = |input: &[f64], kernel: &[f64], bias: &[f64]| {
            weighted_sum_ref(&conv2d_ref(input, kernel, bias, b, cin, h, w, cout, k), &weights)
        };
        let fd_in = fd_grad(&mut |x| run(x, &kernel, &bias), &input, H_FD);
        let fd_k = fd_grad(&mut |x| run(&input, x, &bias), &kernel, H_FD);
        let fd_b = fd_grad(&mut |x| run(&input, &kernel, x), &bias, H_FD);

        for (name, a, f) in [("input", &analytic[0], &fd_in), ("kernel", &analytic[1], &fd_k), ("bias", &analytic[2], &fd_b)] {
            let err = max_err_scaled(a, f);
            assert!(err < TOL, "conv2d trial {trial} {name} grad err {err}");
        }
    }
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut r = rng(11);
    for trial in 0..8 {
        let (b, n, m) = (1 + trial % 3, 2 + trial % 4, 1 + (trial * 2) % 5);
        let x = rand_vec(&mut r, b * n, -1.0, 1.0);
        let w = rand_vec(&mut r, m * n, -1.0, 1.0);
        let bias = rand_vec(&mut r, m, -1.0, 1.0);
        let weights = rand_vec(&mut r, b * m, -1.0, 1.0);

        let mut g = Graph::new();
        let xi = g.leaf(Tensor::new(vec![b, n], to_f32(&x)).unwrap(), true);
        let wi = g.leaf(Tensor::new(vec![m, n], to_f32(&w)).unwrap(), true);
        let bi = g.leaf(Tensor::new(vec![m], to_f32(&bias)).unwrap(), true);
        let out = g.linear(xi, wi, bi).unwrap();
        let loss = weighted_loss(&mut g, out, &weights);
        g.backward(loss).unwrap();

        let run = |x: &[f64], w: &[f64], bias: &[f64]| {
            weighted_sum_ref(&linear_ref(x, w, bias, b, n, m), &weights)
        };
        for (name, id, fd) in [
            ("x", xi, fd_grad(&mut |v| run(v, &w, &bias), &x, H_FD)),
            ("w", wi, fd_grad(&mut |v| run(&x, v, &bias), &w, H_FD)),
            ("b", bi, fd_grad(&mut |v| run(&x, &w, v), &bias, H_FD)),
        ] {
            let analytic: Vec<f64> = g.grad(id).unwrap().iter().map(|&v| v as f64).collect();
            let err = max_err_scaled(&analytic, &fd);
            assert!(err < TOL, "linear trial {trial} {name} grad err {err}");
        }
    }
}

#[test]
fn leaky_relu_gradient_matches_finite_differences() {
    let mut r = rng(12);
    for trial in 0..6 {
        let n = 16;
        // keep samples away from the kink at zero
        let x: Vec<f64> = rand_vec(&mut r, n, 0.05, 1.0)
            .into_iter()
            .enumerate()
            .map(|(i, v)| if i % 2 == 0 { v } else { -v })
            .collect();
        let weights = rand_vec(&mut r, n, -1.0, 1.0);
        let slope = 0.01 + 0.05 * (trial as f64 / 6.0);

        let mut g = Graph::new();
        let xi = g.leaf(Tensor::new(vec![n], to_f32(&x)).unwrap(), true);
        let out = g.leaky_relu(xi, slope as f32).unwrap();
        let loss = weighted_loss(&mut g, out, &weights);
        g.backward(loss).unwrap();
        let analytic: Vec<f64> = g.grad(xi).unwrap().iter().map(|&v| v as f64).collect();

        let fd = fd_grad(&mut |v| weighted_sum_ref(&leaky_relu_ref(v, slope), &weights), &x, H_FD);
        let err = max_err_scaled(&analytic, &fd);
        assert!(err < TOL, "leaky_relu trial {trial} err {err}");
    }
}

#[test]
fn bilinear_resize_gradient_matches_finite_differences() {
    let mut r = rng(13);
    for (ih, iw, oh, ow) in [(4, 4, 7, 9), (5, 7, 3, 2), (3, 3, 3, 3), (2, 2, 4, 4), (6, 4, 2, 8)] {
        let (b, c) = (2, 2);
        let x = rand_vec(&mut r, b * c * ih * iw, -1.0, 1.0);
        let weights = rand_vec(&mut r, b * c * oh * ow, -1.0, 1.0);

        let mut g = Graph::new();
        let xi = g.leaf(Tensor::new(vec![b, c, ih, iw], to_f32(&x)).unwrap(), true);
        let out = g.bilinear_resize(xi, oh, ow).unwrap();
        let loss = weighted_loss(&mut g, out, &weights);
        g.backward(loss).unwrap();
        let analytic: Vec<f64> = g.grad(xi).unwrap().iter().map(|&v| v as f64).collect();

        let fd = fd_grad(
            &mut |v| weighted_sum_ref(&bilinear_ref(v, b * c, ih, iw, oh, ow), &weights),
            &x,
            H_FD,
        );
        let err = max_err_scaled(&analytic, &fd);
        assert!(err < 1e-2, "bilinear {ih}x{iw}->{oh}x{ow} err {err}");
    }
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut r = rng(14);
    for trial in 0..6 {
        let (b, c, h, w) = (1 + trial % 2, 2 + trial % 3, 2, 3);
        let logits = rand_vec(&mut r, b * c * h * w, -2.0, 2.0);
        let labels: Vec<u32> = (0..b * h * w).map(|_| r.gen_range(0..c as u32)).collect();

        let mut g = Graph::new();
        let li = g.leaf(Tensor::new(vec![b, c, h, w], to_f32(&logits)).unwrap(), true);
        let loss = g.cross_entropy(li, &labels).unwrap();
        g.backward(loss).unwrap();
        let analytic: Vec<f64> = g.grad(li).unwrap().iter().map(|&v| v as f64).collect();

        let fd = fd_grad(&mut |v| cross_entropy_ref(v, &labels, b, c, h, w), &logits, H_FD);
        let err = max_err_scaled(&analytic, &fd);
        assert!(err < TOL, "cross_entropy trial {trial} err {err}");
    }
}

#[test]
fn concat_and_slice_gradients_match_finite_differences() {
    let mut r = rng(15);
    let (b, ca, cb, h, w) = (2, 2, 3, 3, 2);
    let a = rand_vec(&mut r, b * ca * h * w, -1.0, 1.0);
    let bb = rand_vec(&mut r, b * cb * h * w, -1.0, 1.0);
    let weights = rand_vec(&mut r, b * (ca + cb) * h * w, -1.0, 1.0);

    let mut g = Graph::new();
    let ai = g.leaf(Tensor::new(vec![b, ca, h, w], to_f32(&a)).unwrap(), true);
    let bi = g.leaf(Tensor::new(vec![b, cb, h, w], to_f32(&bb)).unwrap(), true);
    let out = g.concat_channels(ai, bi).unwrap();
    let loss = weighted_loss(&mut g, out, &weights);
    g.backward(loss).unwrap();

    let run = |a: &[f64], bb: &[f64]| weighted_sum_ref(&concat_channels_ref(a, bb, b, ca, cb, h, w), &weights);
    let fd_a = fd_grad(&mut |v| run(v, &bb), &a, H_FD);
    let fd_b = fd_grad(&mut |v| run(&a, v), &bb, H_FD);
    let ga: Vec<f64> = g.grad(ai).unwrap().iter().map(|&v| v as f64).collect();
    let gb: Vec<f64> = g.grad(bi).unwrap().iter().map(|&v| v as f64).collect();
    assert!(max_err_scaled(&ga, &fd_a) < TOL);
    assert!(max_err_scaled(&gb, &fd_b) < TOL);

    // slice: loss reads a strict sub-range, gradient lands only there
    let theta = rand_vec(&mut r, 12, -1.0, 1.0);
    let wts = rand_vec(&mut r, 4, -1.0, 1.0);
    let mut g2 = Graph::new();
    let ti = g2.leaf(Tensor::new(vec![12], to_f32(&theta)).unwrap(), true);
    let sl = g2.view_slice(ti, 5, vec![4]).unwrap();
    let loss2 = weighted_loss(&mut g2, sl, &wts);
    g2.backward(loss2).unwrap();
    let gt: Vec<f64> = g2.grad(ti).unwrap().iter().map(|&v| v as f64).collect();
    let fd_t = fd_grad(&mut |v| weighted_sum_ref(&v[5..9], &wts), &theta, H_FD);
    assert!(max_err_scaled(&gt, &fd_t) < TOL);
}

use rand::Rng;

#[test]
fn gradients_are_bit_deterministic_across_runs() {
    // Parallel conv kernels must reduce in a fixed order: two identical
    // runs have to agree bit for bit, not just approximately.
    let mut r = rng(16);
    let input = rand_vec(&mut r, 2 * 3 * 16 * 16, -1.0, 1.0);
    let kernel = rand_vec(&mut r, 4 * 3 * 3 * 3, -1.0, 1.0);
    let bias = rand_vec(&mut r, 4, -1.0, 1.0);
    let run = || {
        let mut g = Graph::new();
        let xi = g.leaf(Tensor::new(vec![2, 3, 16, 16], to_f32(&input)).unwrap(), true);
        let ki = g.leaf(Tensor::new(vec![4, 3, 3, 3], to_f32(&kernel)).unwrap(), true);
        let bi = g.leaf(Tensor::new(vec![4], to_f32(&bias)).unwrap(), true);
        let out = g.conv2d(xi, ki, bi).unwrap();
        let loss = g.sum(out);
        g.backward(loss).unwrap();
        (
            g.value(out).data().to_vec(),
            g.grad(xi).unwrap().to_vec(),
            g.grad(ki).unwrap().to_vec(),
        )
    };
    let (o1, gx1, gk1) = run();
    let (o2, gx2, gk2) = run();
    assert_eq!(o1, o2);
    assert_eq!(gx1, gx2);
    assert_eq!(gk1, gk2);
}
