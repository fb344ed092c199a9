//! SGD with momentum, global-norm clipping and a multistep schedule.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(n_params: usize, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: vec![0.0; n_params],
        }
    }

    /// `v ← μ v + g; θ ← θ − lr v`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

/// Rescales every gradient slice jointly so the global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(slices: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = slices
        .iter()
        .flat_map(|s| s.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for slice in slices.iter_mut() {
            slice.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Learning rate multiplied by `factor` at each milestone epoch (0-based:
/// epochs at or past a milestone use the decayed rate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiStep {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl MultiStep {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.factor.powi(k as i32)
    }

    /// Milestones at 60% and 90% of the epoch budget.
    pub fn default_milestones(epochs: usize) -> Vec<usize> {
        let mut m: Vec<usize> = [0.6, 0.9]
            .iter()
            .map(|f| (epochs as f64 * f) as usize)
            .filter(|&e| e > 0 && e < epochs)
            .collect();
        m.dedup();
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates() {
        let mut opt = Sgd::new(1, 0.9);
        let mut p = [1.0];
        opt.step(&mut p, &[1.0], 0.1);
        opt.step(&mut p, &[1.0], 0.1);
        assert!((p[0] - (1.0 - 0.1 - 0.19)).abs() < 1e-12);
    }

    #[test]
    fn clipping_preserves_direction() {
        let mut a = vec![3.0];
        let mut b = vec![4.0];
        let n = clip_global_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(n, 5.0);
        assert!((a[0] - 0.6).abs() < 1e-12 && (b[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn schedule_decays_at_milestones() {
        let s = MultiStep {
            base: 0.03,
            milestones: MultiStep::default_milestones(5),
            factor: 0.1,
        };
        assert_eq!(s.milestones, vec![3, 4]);
        assert_eq!(s.lr_at(2), 0.03);
        assert!((s.lr_at(3) - 0.003).abs() < 1e-15);
        assert!((s.lr_at(4) - 0.0003).abs() < 1e-15);
    }
}
