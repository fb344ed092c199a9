//! Finite-difference comparisons for every objective, shared by the gradient
//! tests and the acceptance suite.

use super::*;
use ider::losses::{
    draw_second_inputs, l_bfp, l_bfp_network, l_ice_with_inputs, l_ide, l_ide_naive, l_rep_ice,
    Distance, LossConfig, TeacherGradient,
};
use ider::nn::snapshot;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const FLOOR: f64 = 1e-6;

/// Outcome of one analytic-vs-numeric comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub label: String,
    pub relative_error: f64,
    /// Largest analytic entry; guards against comparing two zero vectors.
    pub max_abs: f64,
}

impl GradCheck {
    fn new(label: &str, analytic: &[f64], numeric: &[f64]) -> Self {
        Self {
            label: label.to_string(),
            relative_error: max_relative_error(analytic, numeric, FLOOR),
            max_abs: analytic.iter().fold(0.0, |m, g| m.max(g.abs())),
        }
    }

    pub fn ok(&self) -> bool {
        self.relative_error < TOL && self.max_abs > 1e-6
    }
}

pub fn nets() -> Vec<Network> {
    vec![tiny_conv(11), tiny_mlp(12)]
}

fn perturbed(net: &Network, seed: u64, scale: f64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = net.clone();
    out.params_mut()
        .iter_mut()
        .for_each(|p| *p += scale * rng.random_range(-1.0..1.0));
    out
}

pub fn ice_stopped_inner() -> Vec<GradCheck> {
    nets()
        .iter()
        .map(|net| {
            let b = random_batch(net, 5, 1);
            let ystar =
                draw_second_inputs(&b.labels, 3, 0.5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            let inner = softmax_rows(&net.forward(&b.x, &ystar).unwrap());
            let mut g = vec![0.0; net.n_params()];
            l_ice_with_inputs(net, &b, &ystar, true, Some(&mut g), 1.0).unwrap();
            let num = numeric_gradient(net.params(), EPS, |p| {
                ice_oracle(&with_params(net, p), &b, &ystar, Some(&inner))
            });
            GradCheck::new("ice/stop", &g, &num)
        })
        .collect()
}

pub fn ice_through_inner() -> Vec<GradCheck> {
    nets()
        .iter()
        .map(|net| {
            let b = random_batch(net, 4, 3);
            let ystar =
                draw_second_inputs(&b.labels, 3, 0.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            let mut g = vec![0.0; net.n_params()];
            l_ice_with_inputs(net, &b, &ystar, false, Some(&mut g), 1.0).unwrap();
            let num = numeric_gradient(net.params(), EPS, |p| {
                ice_oracle(&with_params(net, p), &b, &ystar, None)
            });
            GradCheck::new("ice/through", &g, &num)
        })
        .collect()
}

pub fn rep_ice() -> Vec<GradCheck> {
    nets()
        .iter()
        .map(|net| {
            let b = random_batch(net, 6, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let ystar = draw_second_inputs(&b.labels, 3, 0.9, &mut rng.clone()).unwrap();
            let inner = softmax_rows(&net.forward(&b.x, &ystar).unwrap());
            let mut g = vec![0.0; net.n_params()];
            let v = l_rep_ice(net, &b, 0.9, true, &mut rng, Some(&mut g), 0.5).unwrap();
            assert!((v - ice_oracle(net, &b, &ystar, None)).abs() < 1e-12);
            let num = numeric_gradient(net.params(), EPS, |p| {
                0.5 * ice_oracle(&with_params(net, p), &b, &ystar, Some(&inner))
            });
            GradCheck::new("rep_ice", &g, &num)
        })
        .collect()
}

pub fn ide_constant_target() -> Vec<GradCheck> {
    let mut out = Vec::new();
    for net in nets() {
        let ck = snapshot(&perturbed(&net, 7, 0.3), 0);
        let b = random_batch(&net, 5, 8);
        for distance in [Distance::Mse, Distance::Kl] {
            let cfg = LossConfig {
                distance,
                ..Default::default()
            };
            let y0 = empty_logits(&net, &b.x);
            let target = ck.forward(&b.x, &softmax_rows(&y0)).unwrap();
            let mut g = vec![0.0; net.n_params()];
            let v = l_ide(&net, Some(&ck), &b.x, &cfg, Some(&mut g), 1.0)
                .unwrap()
                .unwrap();
            let dist = |a: &Tensor| match distance {
                Distance::Mse => mse_oracle(a, &target),
                Distance::Kl => kl_oracle(a, &target),
            };
            assert!((v - dist(&y0)).abs() < 1e-12);
            let num = numeric_gradient(net.params(), EPS, |p| {
                dist(&empty_logits(&with_params(&net, p), &b.x))
            });
            out.push(GradCheck::new(&format!("ide/{distance:?}"), &g, &num));
        }
    }
    out
}

pub fn ide_through_teacher_input() -> Vec<GradCheck> {
    let mut out = Vec::new();
    for net in nets() {
        let ck = snapshot(&perturbed(&net, 9, 0.3), 0);
        let b = random_batch(&net, 4, 10);
        for distance in [Distance::Mse, Distance::Kl] {
            let cfg = LossConfig {
                distance,
                teacher_gradient: TeacherGradient::ThroughInput,
                ..Default::default()
            };
            let mut g = vec![0.0; net.n_params()];
            l_ide(&net, Some(&ck), &b.x, &cfg, Some(&mut g), 1.0).unwrap();
            let num = numeric_gradient(net.params(), EPS, |p| {
                let y0 = empty_logits(&with_params(&net, p), &b.x);
                let y1 = ck.forward(&b.x, &softmax_rows(&y0)).unwrap();
                match distance {
                    Distance::Mse => mse_oracle(&y0, &y1),
                    Distance::Kl => kl_oracle(&y0, &y1),
                }
            });
            out.push(GradCheck::new(
                &format!("ide/through/{distance:?}"),
                &g,
                &num,
            ));
        }
    }
    out
}

pub fn ide_naive() -> Vec<GradCheck> {
    nets()
        .iter()
        .map(|net| {
            let b = random_batch(net, 5, 11);
            let y0 = empty_logits(net, &b.x);
            let target = net.forward(&b.x, &softmax_rows(&y0)).unwrap();
            let mut g = vec![0.0; net.n_params()];
            l_ide_naive(net, &b.x, Distance::Mse, Some(&mut g), 2.0).unwrap();
            let num = numeric_gradient(net.params(), EPS, |p| {
                2.0 * mse_oracle(&empty_logits(&with_params(net, p), &b.x), &target)
            });
            GradCheck::new("ide_naive", &g, &num)
        })
        .collect()
}

pub fn bfp() -> Vec<GradCheck> {
    let mut out = Vec::new();
    for net in nets() {
        let ck = snapshot(&perturbed(&net, 13, 0.3), 0);
        let b = random_batch(&net, 5, 14);
        let dim = net.feature_dim();
        let mut proj = Projection::identity(dim);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        proj.weights_mut()
            .iter_mut()
            .for_each(|w| *w += 0.2 * rng.random_range(-1.0..1.0));
        let hp = frozen_features(&ck, &b.x);
        let e = empty_batch(b.len(), 3).unwrap();
        let feats = |n: &Network| n.features_traced(&b.x, &e).unwrap().0;

        let mut g_net = vec![0.0; net.n_params()];
        let mut g_proj = vec![0.0; dim * dim];
        let v =
            l_bfp_network(&net, &ck, &proj, &b.x, Some((&mut g_net, &mut g_proj)), 1.0).unwrap();
        assert!((v - bfp_oracle(&proj, &feats(&net), &hp)).abs() < 1e-12);

        let num = numeric_gradient(net.params(), EPS, |p| {
            bfp_oracle(&proj, &feats(&with_params(&net, p)), &hp)
        });
        out.push(GradCheck::new("bfp/net", &g_net, &num));
        let h = feats(&net);
        let num = numeric_gradient(proj.weights(), EPS, |w| {
            let mut q = proj.clone();
            q.weights_mut().copy_from_slice(w);
            bfp_oracle(&q, &h, &hp)
        });
        out.push(GradCheck::new("bfp/projection", &g_proj, &num));
        let (_, d_feat) = l_bfp(&proj, &h, &hp, None, 1.0).unwrap();
        let num = numeric_gradient(h.data(), EPS, |hd| {
            bfp_oracle(
                &proj,
                &Tensor::from_vec(h.shape(), hd.to_vec()).unwrap(),
                &hp,
            )
        });
        out.push(GradCheck::new("bfp/features", d_feat.data(), &num));
    }
    out
}

/// Every comparison above.
pub fn all() -> Vec<GradCheck> {
    [
        ice_stopped_inner(),
        ice_through_inner(),
        rep_ice(),
        ide_constant_target(),
        ide_through_teacher_input(),
        ide_naive(),
        bfp(),
    ]
    .concat()
}
