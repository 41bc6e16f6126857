//! Shared helpers: central finite differences over the autodiff tape and a
//! tiny model configuration that keeps whole-model checks fast.

#![allow(dead_code)]

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wavedino::model::{ModelConfig, ModelNetwork};
use wavedino::projector::ProjectorConfig;
use wavedino::tensor::{BoundParams, Graph, ParamStore, Real, Tensor, Var};
use wavedino::tfm::{morlet, MORLET_SUPPORT};
use wavedino::vit::ViTConfig;
use wavedino::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor<T: Real>(shape: &[usize], rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)))
}

/// `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)` between analytic and numeric gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-12)
}

/// Largest relative error over all inputs between the analytic gradient of
/// `f` in precision `T` and central differences of `f64_f` in 64-bit, both
/// contracted with the same random weights to form a scalar loss.
///
/// The inputs are rounded to `T` first, so both sides see the same point.
pub fn grad_check<T: Real>(
    inputs: &[Tensor<f64>],
    eps: f64,
    seed: u64,
    f: impl for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>>,
    f64_f: impl for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
) -> Result<f64> {
    let rounded: Vec<Tensor<T>> = inputs.iter().map(|t| t.cast()).collect();
    let at: Vec<Tensor<f64>> = rounded.iter().map(|t| t.cast()).collect();
    let probe_shape = {
        let g = Graph::new();
        let vars: Vec<_> = at.iter().map(|t| g.constant(t.clone())).collect();
        f64_f(&g, &vars)?.shape()
    };
    let weights: Tensor<f64> = rand_tensor(&probe_shape, &mut rng(seed), -1.0, 1.0);
    let loss = |values: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        g.set_check_finite(false);
        let vars: Vec<_> = values.iter().map(|t| g.constant(t.clone())).collect();
        let w = g.constant(weights.clone());
        f64_f(&g, &vars)?.mul(w)?.reduce_sum(None)?.value().item()
    };
    let g = Graph::new();
    let vars: Vec<_> = rounded.iter().map(|t| g.param(t.clone())).collect();
    let w = g.constant(weights.cast::<T>());
    let out = f(&g, &vars)?.mul(w)?.reduce_sum(None)?;
    let grads = g.backward(out)?;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*v) {
            Some(t) => t.data().iter().map(|x| x.to_f64().unwrap()).collect(),
            None => vec![0.0; at[i].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..at[i].numel() {
            let mut plus = at.clone();
            let mut minus = at.clone();
            plus[i].data_mut()[j] += eps;
            minus[i].data_mut()[j] -= eps;
            numeric.push((loss(&plus)? - loss(&minus)?) / (2.0 * eps));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

pub const OPS: [&str; 21] = [
    "add", "sub", "mul", "scale", "exp", "log", "gelu", "softmax", "log_softmax", "layer_norm",
    "l2_normalize", "matmul", "batched_matmul", "permute", "transpose", "reshape", "concat", "slice",
    "expand", "reduce_sum", "reduce_mean",
];

/// Dimensions drawn for one op check.
#[derive(Clone, Copy)]
struct Dims {
    n: usize,
    m: usize,
    k: usize,
}

fn op_inputs(name: &str, d: Dims, r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let Dims { n, m, k } = d;
    let mut t = |shape: &[usize]| rand_tensor::<f64>(shape, r, -2.0, 2.0);
    match name {
        "add" => vec![t(&[n, m]), t(&[m])],
        "sub" => vec![t(&[n, m]), t(&[n, m])],
        "mul" => vec![t(&[n, m, k]), t(&[m, k])],
        "log" => vec![t(&[n, m]).map(|x| x.abs() + 0.5)],
        "softmax" | "layer_norm" | "permute" | "reshape" | "slice" | "reduce_sum" | "reduce_mean" => {
            let x = t(&[n, m, k]);
            if name == "layer_norm" {
                vec![x, t(&[k]), t(&[k])]
            } else {
                vec![x]
            }
        }
        "matmul" => vec![t(&[n, m]), t(&[m, k])],
        "batched_matmul" => vec![t(&[2, n, m]), t(&[2, m, k])],
        "concat" => vec![t(&[n, m, k]), t(&[n, 2, k])],
        "expand" => vec![t(&[m, k])],
        _ => vec![t(&[n, m])],
    }
}

fn apply_op<'g, T: Real>(name: &str, d: Dims, v: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    match name {
        "add" => v[0].add(v[1]),
        "sub" => v[0].sub(v[1]),
        "mul" => v[0].mul(v[1]),
        "scale" => v[0].scale(T::lit(-2.5)),
        "exp" => v[0].exp(),
        "log" => v[0].log(),
        "gelu" => v[0].gelu(),
        "softmax" => v[0].softmax(1),
        "log_softmax" => v[0].log_softmax(1),
        "layer_norm" => v[0].layer_norm(v[1], v[2], T::lit(1e-5)),
        "l2_normalize" => v[0].l2_normalize(T::lit(1e-6)),
        "matmul" | "batched_matmul" => v[0].matmul(v[1]),
        "permute" => v[0].permute(&[2, 0, 1]),
        "transpose" => v[0].transpose(),
        "reshape" => v[0].reshape(&[d.n * d.m, d.k]),
        "concat" => Var::concat(&[v[0], v[1]], 1),
        "slice" => v[0].slice(2, 1, d.k),
        "expand" => v[0].expand(&[2, 3]),
        "reduce_sum" => v[0].reduce_sum(Some(1)),
        "reduce_mean" => v[0].reduce_mean(Some(2)),
        other => panic!("unknown op {other}"),
    }
}

/// Finite-difference check of one named op on random shapes and inputs in
/// [−2, 2] drawn from `seed`.
pub fn check_op<T: Real>(name: &str, seed: u64, eps: f64) -> Result<f64> {
    let mut r = rng(seed);
    let d = Dims {
        n: r.random_range(1..4),
        m: r.random_range(2..5),
        k: r.random_range(2..5),
    };
    let inputs = op_inputs(name, d, &mut r);
    grad_check::<T>(&inputs, eps, seed, |_, v| apply_op(name, d, v), |_, v| apply_op(name, d, v))
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        vit: ViTConfig {
            image_size: 8,
            channels: 3,
            patch_size: 4,
            embed_dim: 8,
            n_heads: 2,
            head_dim: 4,
            mlp_dim: 12,
            depth: 2,
        },
        projector: ProjectorConfig {
            dims: vec![10, 6],
            out_dim: 5,
        },
    }
}

fn model_output<'g, T: Real>(net: &ModelNetwork, params: &ParamStore<T>, vars: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let n = params.len();
    let bound = BoundParams::from_vars(params, vars[..n].to_vec())?;
    Ok(net.forward(&bound, vars[n])?.1)
}

/// Finite-difference check of the composed encoder and projector with respect
/// to every parameter and the input patches.
pub fn check_model<T: Real>(seed: u64, eps: f64) -> Result<f64> {
    let cfg = tiny_model();
    let (net, mut params) = ModelNetwork::init::<f64>(&cfg, seed)?;
    let mut r = rng(seed ^ 0xABCD);
    // perturb the zero-initialised biases and gains so every path carries signal
    for t in params.tensors_mut() {
        for x in t.data_mut() {
            *x += r.random_range(-0.2..0.2);
        }
    }
    let patches: Tensor<f64> = rand_tensor(&[2, cfg.vit.n_patches(), cfg.vit.patch_dim()], &mut r, 0.0, 1.0);
    let mut inputs = params.tensors().to_vec();
    inputs.push(patches);
    let low: ParamStore<T> = params.cast();
    grad_check::<T>(
        &inputs,
        eps,
        seed,
        |_, v| model_output(&net, &low, v),
        |_, v| model_output(&net, &params, v),
    )
}

/// Direct summation `Σ_n x[n]·ψ*((n−j)Δt/a)·Δt/√a` over the wavelet support.
pub fn cwt_direct(x: &[f64], fs: f64, a: f64, j: usize) -> Complex64 {
    let dt = 1.0 / fs;
    let reach = ((MORLET_SUPPORT * a / dt).floor() as usize).min(x.len() - 1) as isize;
    let mut acc = Complex64::new(0.0, 0.0);
    for (n, &v) in x.iter().enumerate() {
        let k = n as isize - j as isize;
        if k.abs() <= reach {
            acc += morlet(k as f64 * dt / a).conj() * v * (dt / a.sqrt());
        }
    }
    acc
}
