//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use ider::data::Batch;
use ider::losses::Projection;
use ider::nn::{empty_batch, Architecture, FrozenCheckpoint, Network};
use ider::tensor::{softmax_rows, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Randomly initialized net whose biases are also jittered, so no unit sits
/// exactly on a ReLU kink (zero-padded patches with zero bias otherwise do).
fn jittered(arch: Architecture, seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::init(arch, &mut rng).unwrap();
    net.params_mut()
        .iter_mut()
        .for_each(|p| *p += rng.random_range(-0.1..0.1));
    net
}

/// Conv net with a residual stage on each side of the label injection.
pub fn tiny_conv(seed: u64) -> Network {
    let net = jittered(Architecture::desk_resnet([1, 4, 4], 3, 2), seed);
    assert!(net.n_params() <= 500, "{} params", net.n_params());
    net
}

pub fn tiny_mlp(seed: u64) -> Network {
    let net = jittered(Architecture::mlp([1, 2, 3], 6, 3), seed);
    assert!(net.n_params() <= 500);
    net
}

pub fn random_batch(net: &Network, n: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = net.architecture().input_shape;
    let d: usize = shape.iter().product();
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c = net.n_classes();
    Batch {
        x: Tensor::from_vec(&[n, shape[0], shape[1], shape[2]], x).unwrap(),
        labels: (0..n).map(|_| rng.random_range(0..c)).collect(),
    }
}

pub fn with_params(net: &Network, params: &[f64]) -> Network {
    let mut out = net.clone();
    out.params_mut().copy_from_slice(params);
    out
}

/// Central finite differences of `f` at `theta`.
pub fn numeric_gradient(theta: &[f64], eps: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            probe[i] = theta[i] + eps;
            let up = f(&probe);
            probe[i] = theta[i] - eps;
            let down = f(&probe);
            probe[i] = theta[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest entrywise relative error; magnitudes below `floor` are compared
/// on an absolute scale of `floor`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Mean two-pass cross-entropy computed from scratch; `inner` overrides the
/// re-fed second input (for stop-gradient checks).
pub fn ice_oracle(net: &Network, batch: &Batch, ystar: &Tensor, inner: Option<&Tensor>) -> f64 {
    let z1 = net.forward(&batch.x, ystar).unwrap();
    let s1 = match inner {
        Some(s) => s.clone(),
        None => softmax_rows(&z1),
    };
    let z2 = net.forward(&batch.x, &s1).unwrap();
    ce_oracle(&z1, &batch.labels) + ce_oracle(&z2, &batch.labels)
}

/// Per-sample log-sum-exp cross-entropy.
pub fn ce_oracle(z: &Tensor, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = z.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

pub fn mse_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let mut s = 0.0;
    for i in 0..a.batch() {
        for (u, v) in a.row(i).iter().zip(b.row(i)) {
            s += (u - v) * (u - v);
        }
    }
    s / (a.batch() * a.item_len()) as f64
}

pub fn kl_oracle(live: &Tensor, target: &Tensor) -> f64 {
    let p = softmax_rows(live);
    let q = softmax_rows(target);
    let mut s = 0.0;
    for i in 0..p.batch() {
        for (a, b) in p.row(i).iter().zip(q.row(i)) {
            s += b * (b.ln() - a.ln());
        }
    }
    s / p.batch() as f64
}

pub fn empty_logits(net: &Network, x: &Tensor) -> Tensor {
    net.forward(x, &empty_batch(x.batch(), net.n_classes()).unwrap())
        .unwrap()
}

/// `mean ||A h - h'||_2` computed per sample.
pub fn bfp_oracle(a: &Projection, h: &Tensor, hp: &Tensor) -> f64 {
    let d = a.dim();
    let w = a.weights();
    let mut s = 0.0;
    for i in 0..h.batch() {
        let mut sq = 0.0;
        for o in 0..d {
            let mut v = -hp.row(i)[o];
            for k in 0..d {
                v += w[o * d + k] * h.row(i)[k];
            }
            sq += v * v;
        }
        s += sq.sqrt();
    }
    s / h.batch() as f64
}

pub fn frozen_features(ck: &FrozenCheckpoint, x: &Tensor) -> Tensor {
    ck.features(
        x,
        &empty_batch(x.batch(), ck.network().n_classes()).unwrap(),
    )
    .unwrap()
}
