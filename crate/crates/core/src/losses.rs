//! Training objectives and their analytic gradients.
//!
//! Every loss returns its (unweighted) value and, when handed a gradient
//! sink, accumulates `weight * dL/dθ` into it. Reductions are means over the
//! batch; squared-error distances additionally average over classes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{config_err, shape_err, Result};
use crate::nn::{empty_signal, one_hot, FrozenCheckpoint, Network};
use crate::tensor::{log_softmax_rows, softmax_backward, softmax_rows, Tensor};

/// Distance between the live first-pass logits and the distillation target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// Squared error on raw logits, averaged over classes.
    #[default]
    Mse,
    /// `KL(softmax(target) || softmax(live))`.
    Kl,
}

/// Gradient path through the frozen teacher pass of the distillation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherGradient {
    /// The teacher output is a constant target.
    #[default]
    Stop,
    /// Gradient also flows through the teacher's second input back into the
    /// live logits (the teacher's parameters stay untouched).
    ThroughInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub p_empty: f64,
    pub distance: Distance,
    /// Stop the gradient through the softmaxed prediction re-fed as second
    /// input in the two-pass cross-entropy.
    pub stop_inner: bool,
    pub teacher_gradient: TeacherGradient,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            gamma: 1.0,
            p_empty: 0.9,
            distance: Distance::Mse,
            stop_inner: true,
            teacher_gradient: TeacherGradient::Stop,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err(format!(
                    "{name} must be a finite non-negative weight, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.p_empty) {
            return Err(config_err(format!(
                "p_empty must lie in [0, 1], got {}",
                self.p_empty
            )));
        }
        Ok(())
    }
}

/// Picks the empty signal with probability `p_empty`, otherwise the one-hot
/// label.
pub fn choose_second_input<R: Rng + ?Sized>(
    y: usize,
    n_classes: usize,
    p_empty: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let use_empty = rng.random::<f64>() < p_empty;
    if use_empty {
        empty_signal(n_classes)
    } else {
        one_hot(y, n_classes)
    }
}

/// Independent per-sample second-input draws for a whole batch.
pub fn draw_second_inputs<R: Rng + ?Sized>(
    labels: &[usize],
    n_classes: usize,
    p_empty: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(labels.len() * n_classes);
    for &y in labels {
        data.extend(choose_second_input(y, n_classes, p_empty, rng)?);
    }
    Tensor::from_vec(&[labels.len(), n_classes], data)
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let n = logits.batch();
    let c = logits.item_len();
    if labels.len() != n {
        return Err(shape_err(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(shape_err(format!("label {bad} outside a {c}-way head")));
    }
    if n == 0 {
        return Ok((0.0, Tensor::zeros(logits.shape())));
    }
    let logp = log_softmax_rows(logits);
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= logp.row(i)[y];
        grad.data_mut()[i * c + y] -= 1.0;
    }
    grad.scale(1.0 / n as f64);
    Ok((loss / n as f64, grad))
}

/// Single-pass cross-entropy with a fixed second input.
pub fn l_ce(
    net: &Network,
    batch: &Batch,
    y2: &Tensor,
    grads: Option<&mut [f64]>,
    weight: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let (z, trace) = net.forward_traced(&batch.x, y2)?;
    let (loss, mut dz) = cross_entropy(&z, &batch.labels)?;
    if let Some(g) = grads {
        dz.scale(weight);
        net.backward(&trace, Some(&dz), None, Some(g), false)?;
    }
    Ok(loss)
}

/// Two-pass cross-entropy with explicit first-pass second inputs `ystar`:
/// `CE(f(x, y*), y) + CE(f(x, softmax(f(x, y*))), y)`.
pub fn l_ice_with_inputs(
    net: &Network,
    batch: &Batch,
    ystar: &Tensor,
    stop_inner: bool,
    grads: Option<&mut [f64]>,
    weight: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(shape_err("two-pass cross-entropy needs a nonempty batch"));
    }
    let (z1, t1) = net.forward_traced(&batch.x, ystar)?;
    let s1 = softmax_rows(&z1);
    let (z2, t2) = net.forward_traced(&batch.x, &s1)?;
    let (ce1, mut dz1) = cross_entropy(&z1, &batch.labels)?;
    let (ce2, mut dz2) = cross_entropy(&z2, &batch.labels)?;
    if let Some(g) = grads {
        dz1.scale(weight);
        dz2.scale(weight);
        let ds1 = net.backward(&t2, Some(&dz2), None, Some(&mut *g), !stop_inner)?;
        if let Some(ds1) = ds1 {
            dz1.add_assign(&softmax_backward(&s1, &ds1));
        }
        net.backward(&t1, Some(&dz1), None, Some(g), false)?;
    }
    Ok(ce1 + ce2)
}

/// Two-pass cross-entropy with per-sample second inputs drawn from `rng`.
pub fn l_ice<R: Rng + ?Sized>(
    net: &Network,
    batch: &Batch,
    p_empty: f64,
    stop_inner: bool,
    rng: &mut R,
    grads: Option<&mut [f64]>,
    weight: f64,
) -> Result<f64> {
    let ystar = draw_second_inputs(&batch.labels, net.n_classes(), p_empty, rng)?;
    l_ice_with_inputs(net, batch, &ystar, stop_inner, grads, weight)
}

/// The two-pass cross-entropy over replayed samples; an empty batch (no
/// stored exemplars yet) contributes nothing and consumes no randomness.
pub fn l_rep_ice<R: Rng + ?Sized>(
    net: &Network,
    buffer_batch: &Batch,
    p_empty: f64,
    stop_inner: bool,
    rng: &mut R,
    grads: Option<&mut [f64]>,
    weight: f64,
) -> Result<f64> {
    if buffer_batch.is_empty() {
        return Ok(0.0);
    }
    l_ice(net, buffer_batch, p_empty, stop_inner, rng, grads, weight)
}

/// Per-row distance value and the gradients w.r.t. both arguments, already
/// divided by the batch size.
fn distance_terms(live: &Tensor, target: &Tensor, distance: Distance) -> (f64, Tensor, Tensor) {
    let n = live.batch().max(1) as f64;
    let c = live.item_len() as f64;
    match distance {
        Distance::Mse => {
            let mut d_live = Tensor::zeros(live.shape());
            let mut value = 0.0;
            for ((g, a), b) in d_live
                .data_mut()
                .iter_mut()
                .zip(live.data())
                .zip(target.data())
            {
                let diff = a - b;
                value += diff * diff;
                *g = 2.0 * diff / (n * c);
            }
            let mut d_target = d_live.clone();
            d_target.scale(-1.0);
            (value / (n * c), d_live, d_target)
        }
        Distance::Kl => {
            let lp = log_softmax_rows(live);
            let lq = log_softmax_rows(target);
            let p = softmax_rows(live);
            let q = softmax_rows(target);
            let k = live.item_len();
            let mut value = 0.0;
            let mut d_live = Tensor::zeros(live.shape());
            let mut g_target = Tensor::zeros(live.shape());
            for i in 0..live.batch() {
                for j in 0..k {
                    let at = i * k + j;
                    let qj = q.data()[at];
                    let gap = lq.data()[at] - lp.data()[at];
                    value += qj * gap;
                    d_live.data_mut()[at] = (p.data()[at] - qj) / n;
                    g_target.data_mut()[at] = gap / n;
                }
            }
            let d_target = softmax_backward(&q, &g_target);
            (value / n, d_live, d_target)
        }
    }
}

/// Which network re-processes the live prediction in the distillation term.
enum Teacher<'a> {
    Frozen(&'a FrozenCheckpoint),
    Live,
}

fn idempotence_term(
    net: &Network,
    teacher: Teacher<'_>,
    x: &Tensor,
    distance: Distance,
    through_input: bool,
    grads: Option<&mut [f64]>,
    weight: f64,
) -> Result<f64> {
    if x.batch() == 0 {
        return Ok(0.0);
    }
    let empty = crate::nn::empty_batch(x.batch(), net.n_classes())?;
    let (y0, t0) = net.forward_traced(x, &empty)?;
    let p0 = softmax_rows(&y0);
    let (y1, t1) = match teacher {
        Teacher::Frozen(ck) => ck.forward_traced(x, &p0)?,
        Teacher::Live => net.forward_traced(x, &p0)?,
    };
    let (value, mut d_live, d_target) = distance_terms(&y0, &y1, distance);
    if let Some(g) = grads {
        if through_input {
            let dp0 = match teacher {
                Teacher::Frozen(ck) => ck.input_gradient(&t1, &d_target)?,
                Teacher::Live => net
                    .backward(&t1, Some(&d_target), None, None, true)?
                    .expect("requested"),
            };
            d_live.add_assign(&softmax_backward(&p0, &dp0));
        }
        d_live.scale(weight);
        net.backward(&t0, Some(&d_live), None, Some(g), false)?;
    }
    Ok(value)
}

/// Distillation of the live first pass toward the frozen checkpoint's
/// re-processing of it. Returns `None` when there is no checkpoint yet, in
/// which case the term is disabled.
pub fn l_ide(
    net: &Network,
    checkpoint: Option<&FrozenCheckpoint>,
    x_union: &Tensor,
    config: &LossConfig,
    grads: Option<&mut [f64]>,
    weight: f64,
) -> Result<Option<f64>> {
    let Some(ck) = checkpoint else {
        return Ok(None);
    };
    let through = config.teacher_gradient == TeacherGradient::ThroughInput;
    idempotence_term(
        net,
        Teacher::Frozen(ck),
        x_union,
        config.distance,
        through,
        grads,
        weight,
    )
    .map(Some)
}

/// Self-distillation variant: both passes use the live network and the
/// second pass is a constant target.
pub fn l_ide_naive(
    net: &Network,
    x: &Tensor,
    distance: Distance,
    grads: Option<&mut [f64]>,
    weight: f64,
) -> Result<f64> {
    idempotence_term(net, Teacher::Live, x, distance, false, grads, weight)
}

/// Learnable square map applied to the current features before they are
/// compared with the checkpoint's features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    dim: usize,
    weights: Vec<f64>,
}

impl Projection {
    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        Self { dim, weights }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }
}

/// `mean_n ||A h_t - h_prev||_2` with gradients w.r.t. `A` and `h_t`.
pub fn l_bfp(
    projection: &Projection,
    feats_t: &Tensor,
    feats_prev: &Tensor,
    grad_projection: Option<&mut [f64]>,
    weight: f64,
) -> Result<(f64, Tensor)> {
    let d = projection.dim;
    if feats_t.item_len() != d
        || feats_prev.item_len() != d
        || feats_t.batch() != feats_prev.batch()
    {
        return Err(shape_err(format!(
            "feature shapes {:?} and {:?} do not match a {d}x{d} projection",
            feats_t.shape(),
            feats_prev.shape()
        )));
    }
    let n = feats_t.batch();
    let mut d_feat = Tensor::zeros(feats_t.shape());
    if n == 0 {
        return Ok((0.0, d_feat));
    }
    let a = &projection.weights;
    let mut value = 0.0;
    let mut dr_all = vec![0.0; n * d];
    for i in 0..n {
        let h = feats_t.row(i);
        let hp = feats_prev.row(i);
        let r: Vec<f64> = (0..d)
            .map(|o| {
                a[o * d..(o + 1) * d]
                    .iter()
                    .zip(h)
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
                    - hp[o]
            })
            .collect();
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        value += norm;
        if norm > 0.0 {
            let scale = weight / (norm * n as f64);
            for (dst, v) in dr_all[i * d..(i + 1) * d].iter_mut().zip(&r) {
                *dst = v * scale;
            }
        }
    }
    for i in 0..n {
        let dr = &dr_all[i * d..(i + 1) * d];
        let out = &mut d_feat.data_mut()[i * d..(i + 1) * d];
        for (o, &g) in dr.iter().enumerate() {
            if g != 0.0 {
                for (dst, w) in out.iter_mut().zip(&a[o * d..(o + 1) * d]) {
                    *dst += g * w;
                }
            }
        }
    }
    if let Some(ga) = grad_projection {
        for i in 0..n {
            let h = feats_t.row(i);
            for (o, &g) in dr_all[i * d..(i + 1) * d].iter().enumerate() {
                if g != 0.0 {
                    for (dst, v) in ga[o * d..(o + 1) * d].iter_mut().zip(h) {
                        *dst += g * v;
                    }
                }
            }
        }
    }
    Ok((value / n as f64, d_feat))
}

/// Feature-space term through the live network: runs the feature pass at the
/// empty signal, applies [`l_bfp`], and back-propagates into the network.
pub fn l_bfp_network(
    net: &Network,
    checkpoint: &FrozenCheckpoint,
    projection: &Projection,
    x: &Tensor,
    grads: Option<(&mut [f64], &mut [f64])>,
    weight: f64,
) -> Result<f64> {
    let empty = crate::nn::empty_batch(x.batch(), net.n_classes())?;
    let (h_t, trace) = net.features_traced(x, &empty)?;
    let h_prev = checkpoint.features(x, &empty)?;
    match grads {
        Some((g_net, g_proj)) => {
            let (value, d_feat) = l_bfp(projection, &h_t, &h_prev, Some(g_proj), weight)?;
            net.backward(&trace, None, Some(&d_feat), Some(g_net), false)?;
            Ok(value)
        }
        None => Ok(l_bfp(projection, &h_t, &h_prev, None, weight)?.0),
    }
}

/// Accumulated gradients of one objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub net: Vec<f64>,
    pub projection: Vec<f64>,
}

impl Gradients {
    pub fn zeros(n_params: usize, projection_dim: usize) -> Self {
        Self {
            net: vec![0.0; n_params],
            projection: vec![0.0; projection_dim * projection_dim],
        }
    }

    pub fn clear(&mut self) {
        self.net.iter_mut().for_each(|g| *g = 0.0);
        self.projection.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Per-term values of one objective evaluation. Disabled terms are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ice: f64,
    pub ide: Option<f64>,
    pub rep_ice: Option<f64>,
    pub bfp: Option<f64>,
    pub total: f64,
}

/// Inputs to one evaluation of the full objective.
pub struct ObjectiveInputs<'a> {
    pub net: &'a Network,
    pub checkpoint: Option<&'a FrozenCheckpoint>,
    pub current: &'a Batch,
    /// Buffer batch joined with the current batch for the distillation term.
    pub union_part: &'a Batch,
    /// Independent buffer batch for the replayed two-pass cross-entropy.
    pub replay: &'a Batch,
    pub projection: Option<&'a Projection>,
    /// Use the live network as its own teacher instead of the checkpoint.
    pub naive: bool,
}

/// `L_ice + α L_ide + β L_rep-ice (+ γ L_bfp)`. Terms whose weight is zero
/// or whose inputs are absent are skipped and reported as `None`.
pub fn l_ider<R: Rng + ?Sized>(
    inputs: &ObjectiveInputs<'_>,
    config: &LossConfig,
    rng: &mut R,
    mut grads: Option<&mut Gradients>,
) -> Result<LossBreakdown> {
    let net = inputs.net;
    let ice = l_ice(
        net,
        inputs.current,
        config.p_empty,
        config.stop_inner,
        rng,
        grads.as_deref_mut().map(|g| g.net.as_mut_slice()),
        1.0,
    )?;
    let mut out = LossBreakdown {
        ice,
        total: ice,
        ..Default::default()
    };
    let union_x = || -> Result<Tensor> {
        if inputs.union_part.is_empty() {
            Ok(inputs.current.x.clone())
        } else {
            Tensor::concat(&[&inputs.current.x, &inputs.union_part.x])
        }
    };
    let teacher_ready = inputs.naive || inputs.checkpoint.is_some();
    if config.alpha > 0.0 && teacher_ready {
        let x = union_x()?;
        let g = grads.as_deref_mut().map(|g| g.net.as_mut_slice());
        let v = if inputs.naive {
            Some(l_ide_naive(net, &x, config.distance, g, config.alpha)?)
        } else {
            l_ide(net, inputs.checkpoint, &x, config, g, config.alpha)?
        };
        if let Some(v) = v {
            out.ide = Some(v);
            out.total += config.alpha * v;
        }
    }
    if config.beta > 0.0 && !inputs.replay.is_empty() {
        let v = l_rep_ice(
            net,
            inputs.replay,
            config.p_empty,
            config.stop_inner,
            rng,
            grads.as_deref_mut().map(|g| g.net.as_mut_slice()),
            config.beta,
        )?;
        out.rep_ice = Some(v);
        out.total += config.beta * v;
    }
    if let (Some(proj), Some(ck)) = (inputs.projection, inputs.checkpoint) {
        if config.gamma > 0.0 {
            let x = union_x()?;
            let v = match grads {
                Some(g) => l_bfp_network(
                    net,
                    ck,
                    proj,
                    &x,
                    Some((g.net.as_mut_slice(), g.projection.as_mut_slice())),
                    config.gamma,
                )?,
                None => l_bfp_network(net, ck, proj, &x, None, config.gamma)?,
            };
            out.bfp = Some(v);
            out.total += config.gamma * v;
        }
    }
    Ok(out)
}
