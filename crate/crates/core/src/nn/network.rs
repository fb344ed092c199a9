//! The two-input label-conditioned network.
//!
//! `forward(x, y2) = head(extractor(x) + leaky_relu(W y2 + b))`, where the
//! embedding is broadcast over the spatial positions of the extractor's
//! output. All parameters live in one flat vector so that optimizers,
//! snapshots and finite-difference checks can treat the net as a point in
//! `R^d`.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::arch::{conv_out, Architecture, LayerSpec};
use super::conv::ConvGeom;
use crate::error::{shape_err, Result};
use crate::exec::{self, CHUNK};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Conv(ConvGeom),
    Relu,
    Residual {
        conv1: ConvGeom,
        conv2: ConvGeom,
        shortcut: Option<ConvGeom>,
    },
    Gap {
        channels: usize,
        positions: usize,
    },
    Linear {
        in_f: usize,
        out_f: usize,
        w: usize,
        b: usize,
    },
}

#[derive(Debug, Clone)]
struct Layer {
    op: Op,
    in_len: usize,
    out_len: usize,
}

#[derive(Debug, Clone, Copy)]
struct Embed {
    w: usize,
    b: usize,
    channels: usize,
    positions: usize,
}

/// One named parameter tensor inside the flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct Network {
    arch: Architecture,
    layers: Vec<Layer>,
    embed: Option<Embed>,
    slots: Vec<ParamSlot>,
    params: Vec<f64>,
}

/// How far a traced forward pass went.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Depth {
    Logits,
    Features,
}

#[derive(Debug, Clone)]
struct ChunkTrace {
    n: usize,
    /// `acts[i]` is the input of layer `i` (post-injection at the partition);
    /// the last entry is the output of the deepest layer that ran.
    acts: Vec<Vec<f64>>,
    /// Post-ReLU inner activation of residual blocks.
    inner: Vec<Option<Vec<f64>>>,
    /// Output of the partition layer before the label feature was added
    /// (empty without a label embedding).
    partition_out: Vec<f64>,
    embed_pre: Vec<f64>,
    y2: Vec<f64>,
}

/// Cached activations of a batched forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct Trace {
    chunks: Vec<ChunkTrace>,
    batch: usize,
    depth: Depth,
}

impl Trace {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

struct Builder {
    slots: Vec<ParamSlot>,
    len: usize,
}

impl Builder {
    fn alloc(&mut self, name: String, shape: Vec<usize>) -> usize {
        let n: usize = shape.iter().product();
        let start = self.len;
        self.slots.push(ParamSlot {
            name,
            shape,
            range: start..start + n,
        });
        self.len += n;
        start
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        prefix: &str,
        in_shape: [usize; 3],
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> ConvGeom {
        let [in_c, in_h, in_w] = in_shape;
        let w = self.alloc(format!("{prefix}.weight"), vec![out_c, in_c, k, k]);
        let b = self.alloc(format!("{prefix}.bias"), vec![out_c]);
        ConvGeom {
            in_c,
            out_c,
            k,
            stride,
            pad,
            in_h,
            in_w,
            out_h: conv_out(in_h, k, stride, pad),
            out_w: conv_out(in_w, k, stride, pad),
            w,
            b,
        }
    }
}

fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

impl Network {
    /// Builds the network with zeroed parameters.
    pub fn zeroed(arch: Architecture) -> Result<Self> {
        let shapes = arch.shapes()?;
        let mut b = Builder {
            slots: Vec::new(),
            len: 0,
        };
        let mut layers = Vec::with_capacity(arch.layers.len());
        let mut in_shape = arch.input_shape;
        for (i, (spec, &out_shape)) in arch.layers.iter().zip(&shapes).enumerate() {
            let prefix = format!("layers.{i}");
            let op = match *spec {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => Op::Conv(b.conv(&prefix, in_shape, out_channels, kernel, stride, padding)),
                LayerSpec::Relu => Op::Relu,
                LayerSpec::Residual {
                    in_channels,
                    out_channels,
                    stride,
                } => {
                    let conv1 = b.conv(
                        &format!("{prefix}.conv1"),
                        in_shape,
                        out_channels,
                        3,
                        stride,
                        1,
                    );
                    let mid = [out_channels, conv1.out_h, conv1.out_w];
                    let conv2 = b.conv(&format!("{prefix}.conv2"), mid, out_channels, 3, 1, 1);
                    let shortcut = (in_channels != out_channels || stride != 1).then(|| {
                        b.conv(
                            &format!("{prefix}.shortcut"),
                            in_shape,
                            out_channels,
                            1,
                            stride,
                            0,
                        )
                    });
                    Op::Residual {
                        conv1,
                        conv2,
                        shortcut,
                    }
                }
                LayerSpec::GlobalAvgPool => Op::Gap {
                    channels: in_shape[0],
                    positions: in_shape[1] * in_shape[2],
                },
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => {
                    let w = b.alloc(format!("{prefix}.weight"), vec![out_features, in_features]);
                    let bb = b.alloc(format!("{prefix}.bias"), vec![out_features]);
                    Op::Linear {
                        in_f: in_features,
                        out_f: out_features,
                        w,
                        b: bb,
                    }
                }
            };
            layers.push(Layer {
                op,
                in_len: in_shape.iter().product(),
                out_len: out_shape.iter().product(),
            });
            in_shape = out_shape;
        }
        let embed = if arch.label_embed {
            let [c, h, w] = shapes[arch.partition - 1];
            let wo = b.alloc("label_embed.weight".into(), vec![c, arch.n_classes]);
            let bo = b.alloc("label_embed.bias".into(), vec![c]);
            Some(Embed {
                w: wo,
                b: bo,
                channels: c,
                positions: h * w,
            })
        } else {
            None
        };
        Ok(Self {
            arch,
            layers,
            embed,
            params: vec![0.0; b.len],
            slots: b.slots,
        })
    }

    /// Builds the network with He-normal weights and zero biases.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeroed(arch)?;
        for slot in net.slots.clone() {
            if slot.name.ends_with(".bias") {
                continue;
            }
            let fan_in: usize = slot.shape[1..].iter().product();
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for p in &mut net.params[slot.range.clone()] {
                *p = normal.sample(rng);
            }
        }
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn n_classes(&self) -> usize {
        self.arch.n_classes
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn has_label_embed(&self) -> bool {
        self.embed.is_some()
    }

    /// Width of the pooled feature vector at the partition point.
    pub fn feature_dim(&self) -> usize {
        self.arch
            .shapes()
            .map(|s| s[self.arch.partition - 1][0])
            .unwrap_or(0)
    }

    /// Parameter range of the label embedding, if present.
    pub fn label_embed_range(&self) -> Option<Range<usize>> {
        self.embed.map(|e| e.w..e.b + e.channels)
    }

    /// Zeroes the label-embedding weights and bias so the second input has no
    /// effect on the output.
    pub fn zero_label_embed(&mut self) {
        if let Some(r) = self.label_embed_range() {
            self.params[r].iter_mut().for_each(|p| *p = 0.0);
        }
    }

    fn check_inputs(&self, x: &Tensor, y2: &Tensor) -> Result<usize> {
        let n = x.batch();
        let want: usize = self.arch.input_shape.iter().product();
        if x.item_len() != want {
            return Err(shape_err(format!(
                "input items have {} values, network expects {:?}",
                x.item_len(),
                self.arch.input_shape
            )));
        }
        if y2.batch() != n || y2.item_len() != self.arch.n_classes {
            return Err(shape_err(format!(
                "second input has shape {:?}, expected [{n}, {}]",
                y2.shape(),
                self.arch.n_classes
            )));
        }
        Ok(n)
    }

    /// Logits for a batch; no activations are kept.
    pub fn forward(&self, x: &Tensor, y2: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(x, y2)?.0)
    }

    pub fn forward_traced(&self, x: &Tensor, y2: &Tensor) -> Result<(Tensor, Trace)> {
        self.run(x, y2, Depth::Logits)
    }

    /// Spatially pooled extractor output (after label injection), `[n, C]`.
    pub fn features_traced(&self, x: &Tensor, y2: &Tensor) -> Result<(Tensor, Trace)> {
        self.run(x, y2, Depth::Features)
    }

    fn run(&self, x: &Tensor, y2: &Tensor, depth: Depth) -> Result<(Tensor, Trace)> {
        let n = self.check_inputs(x, y2)?;
        let chunks = exec::map_chunks(n, CHUNK, |r| {
            self.forward_chunk(x.rows(r.clone()), y2.rows(r.clone()), r.len(), depth)
        });
        let (out_w, mut out) = match depth {
            Depth::Logits => (
                self.arch.n_classes,
                Vec::with_capacity(n * self.arch.n_classes),
            ),
            Depth::Features => (
                self.feature_dim(),
                Vec::with_capacity(n * self.feature_dim()),
            ),
        };
        for c in &chunks {
            match depth {
                Depth::Logits => out.extend_from_slice(c.acts.last().expect("output")),
                Depth::Features => out.extend(self.pool_features(c)),
            }
        }
        let trace = Trace {
            chunks,
            batch: n,
            depth,
        };
        Ok((Tensor::from_vec(&[n, out_w], out)?, trace))
    }

    fn pool_features(&self, c: &ChunkTrace) -> Vec<f64> {
        let [ch, h, w] = self.arch.shapes().expect("validated")[self.arch.partition - 1];
        let pos = h * w;
        c.acts[self.arch.partition]
            .chunks(ch * pos)
            .flat_map(|s| s.chunks(pos).map(|p| p.iter().sum::<f64>() / pos as f64))
            .collect()
    }

    fn forward_chunk(&self, x: &[f64], y2: &[f64], n: usize, depth: Depth) -> ChunkTrace {
        let p = self.arch.partition;
        let stop = match depth {
            Depth::Logits => self.layers.len(),
            Depth::Features => p,
        };
        let mut acts = vec![x.to_vec()];
        let mut inner = Vec::with_capacity(stop);
        let mut embed_pre = Vec::new();
        let mut partition_out = Vec::new();
        let mut col = Vec::new();
        for i in 0..stop {
            if i == p {
                if self.embed.is_some() {
                    partition_out = acts[p].clone();
                }
                embed_pre = self.inject(acts.last_mut().expect("act"), y2, n);
            }
            let (out, hidden) = self.layer_forward(&self.layers[i], &acts[i], n, &mut col);
            acts.push(out);
            inner.push(hidden);
        }
        if stop == p {
            if self.embed.is_some() {
                partition_out = acts[p].clone();
            }
            embed_pre = self.inject(acts.last_mut().expect("act"), y2, n);
        }
        ChunkTrace {
            n,
            acts,
            inner,
            partition_out,
            embed_pre,
            y2: y2.to_vec(),
        }
    }

    /// Adds the label feature in place; returns its pre-activation.
    fn inject(&self, act: &mut [f64], y2: &[f64], n: usize) -> Vec<f64> {
        let Some(e) = self.embed else {
            return Vec::new();
        };
        let k = self.arch.n_classes;
        let mut pre = vec![0.0; n * e.channels];
        let w = &self.params[e.w..e.w + e.channels * k];
        gemm(n, k, e.channels, y2, false, w, true, 0.0, &mut pre);
        let bias = &self.params[e.b..e.b + e.channels];
        for (row, s) in pre
            .chunks_mut(e.channels)
            .zip(act.chunks_mut(e.channels * e.positions))
        {
            for c in 0..e.channels {
                row[c] += bias[c];
                let v = leaky(row[c], self.arch.leaky_slope);
                s[c * e.positions..(c + 1) * e.positions]
                    .iter_mut()
                    .for_each(|a| *a += v);
            }
        }
        pre
    }

    fn layer_forward(
        &self,
        layer: &Layer,
        input: &[f64],
        n: usize,
        col: &mut Vec<f64>,
    ) -> (Vec<f64>, Option<Vec<f64>>) {
        let params = &self.params;
        let mut out = vec![0.0; n * layer.out_len];
        match &layer.op {
            Op::Conv(g) => {
                for (xs, os) in input
                    .chunks(layer.in_len)
                    .zip(out.chunks_mut(layer.out_len))
                {
                    g.forward(params, xs, os, col);
                }
                (out, None)
            }
            Op::Relu => {
                for (o, v) in out.iter_mut().zip(input) {
                    *o = v.max(0.0);
                }
                (out, None)
            }
            Op::Residual {
                conv1,
                conv2,
                shortcut,
            } => {
                let mid_len = conv1.out_len();
                let mut hidden = vec![0.0; n * mid_len];
                for ((xs, hs), os) in input
                    .chunks(layer.in_len)
                    .zip(hidden.chunks_mut(mid_len))
                    .zip(out.chunks_mut(layer.out_len))
                {
                    conv1.forward(params, xs, hs, col);
                    hs.iter_mut().for_each(|v| *v = v.max(0.0));
                    conv2.forward(params, hs, os, col);
                    match shortcut {
                        Some(sc) => {
                            let mut tmp = vec![0.0; layer.out_len];
                            sc.forward(params, xs, &mut tmp, col);
                            os.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
                        }
                        None => os.iter_mut().zip(xs).for_each(|(o, t)| *o += t),
                    }
                    os.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                (out, Some(hidden))
            }
            Op::Gap {
                channels,
                positions,
            } => {
                for (xs, os) in input
                    .chunks(channels * positions)
                    .zip(out.chunks_mut(*channels))
                {
                    for (o, plane) in os.iter_mut().zip(xs.chunks(*positions)) {
                        *o = plane.iter().sum::<f64>() / *positions as f64;
                    }
                }
                (out, None)
            }
            Op::Linear { in_f, out_f, w, b } => {
                gemm(
                    n,
                    *in_f,
                    *out_f,
                    input,
                    false,
                    &params[*w..*w + in_f * out_f],
                    true,
                    0.0,
                    &mut out,
                );
                let bias = &params[*b..*b + out_f];
                for row in out.chunks_mut(*out_f) {
                    row.iter_mut().zip(bias).for_each(|(o, bb)| *o += bb);
                }
                (out, None)
            }
        }
    }

    /// Back-propagates through a traced pass.
    ///
    /// `dlogits` is the loss gradient w.r.t. the logits and `dfeat` the
    /// gradient w.r.t. the pooled features; either may be absent. Parameter
    /// gradients are accumulated into `grads` when given; with `grads = None`
    /// only the second-input gradient is computed (the extractor is skipped).
    /// Returns the gradient w.r.t. the second input when `want_dy2` is set.
    pub fn backward(
        &self,
        trace: &Trace,
        dlogits: Option<&Tensor>,
        dfeat: Option<&Tensor>,
        grads: Option<&mut [f64]>,
        want_dy2: bool,
    ) -> Result<Option<Tensor>> {
        let n = trace.batch;
        if let Some(d) = dlogits {
            if trace.depth != Depth::Logits {
                return Err(shape_err("logit gradient given for a feature-only trace"));
            }
            if d.batch() != n || d.item_len() != self.arch.n_classes {
                return Err(shape_err(format!("logit gradient shape {:?}", d.shape())));
            }
        }
        if let Some(d) = dfeat {
            if d.batch() != n || d.item_len() != self.feature_dim() {
                return Err(shape_err(format!("feature gradient shape {:?}", d.shape())));
            }
        }
        let want_params = grads.is_some();
        let mut starts = Vec::with_capacity(trace.chunks.len());
        let mut at = 0;
        for c in &trace.chunks {
            starts.push(at);
            at += c.n;
        }
        let idx: Vec<usize> = (0..trace.chunks.len()).collect();
        let partials = exec::map_items(&idx, |&ci| {
            let c = &trace.chunks[ci];
            let r = starts[ci]..starts[ci] + c.n;
            self.backward_chunk(
                c,
                dlogits.map(|d| d.rows(r.clone())),
                dfeat.map(|d| d.rows(r.clone())),
                want_params,
                want_dy2,
            )
        });
        let mut dy2 = want_dy2.then(|| Vec::with_capacity(n * self.arch.n_classes));
        if let Some(g) = grads {
            if g.len() != self.params.len() {
                return Err(shape_err(
                    "gradient buffer length differs from parameter count",
                ));
            }
            for (pg, _) in &partials {
                if let Some(pg) = pg {
                    g.iter_mut().zip(pg).for_each(|(a, b)| *a += b);
                }
            }
        }
        if let Some(out) = dy2.as_mut() {
            for (_, d) in &partials {
                out.extend_from_slice(d.as_deref().expect("dy2 requested"));
            }
        }
        dy2.map(|d| Tensor::from_vec(&[n, self.arch.n_classes], d))
            .transpose()
    }

    fn backward_chunk(
        &self,
        c: &ChunkTrace,
        dlogits: Option<&[f64]>,
        dfeat: Option<&[f64]>,
        want_params: bool,
        want_dy2: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let n = c.n;
        let p = self.arch.partition;
        let mut grads = want_params.then(|| vec![0.0; self.params.len()]);
        let mut col = Vec::new();
        let feat_len = self.layers[p - 1].out_len;
        let mut d = match dlogits {
            Some(dl) => {
                let mut d = dl.to_vec();
                for i in (p..self.layers.len()).rev() {
                    d = self
                        .layer_backward(i, c, &d, grads.as_deref_mut(), true, &mut col)
                        .expect("input gradient");
                }
                d
            }
            None => vec![0.0; n * feat_len],
        };
        if let Some(df) = dfeat {
            let ch = self.feature_dim();
            let pos = feat_len / ch;
            for (ds, fs) in d.chunks_mut(feat_len).zip(df.chunks(ch)) {
                for (plane, f) in ds.chunks_mut(pos).zip(fs) {
                    plane.iter_mut().for_each(|v| *v += f / pos as f64);
                }
            }
        }
        let mut dy2 = None;
        if let Some(e) = self.embed {
            let k = self.arch.n_classes;
            let mut dpre = vec![0.0; n * e.channels];
            for ((dp, pre), ds) in dpre
                .chunks_mut(e.channels)
                .zip(c.embed_pre.chunks(e.channels))
                .zip(d.chunks(feat_len))
            {
                for ch in 0..e.channels {
                    let s: f64 = ds[ch * e.positions..(ch + 1) * e.positions].iter().sum();
                    dp[ch] = if pre[ch] > 0.0 {
                        s
                    } else {
                        self.arch.leaky_slope * s
                    };
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                gemm(
                    e.channels,
                    n,
                    k,
                    &dpre,
                    true,
                    &c.y2,
                    false,
                    1.0,
                    &mut g[e.w..e.w + e.channels * k],
                );
                for row in dpre.chunks(e.channels) {
                    g[e.b..e.b + e.channels]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(a, b)| *a += b);
                }
            }
            if want_dy2 {
                let mut out = vec![0.0; n * k];
                gemm(
                    n,
                    e.channels,
                    k,
                    &dpre,
                    false,
                    &self.params[e.w..e.w + e.channels * k],
                    false,
                    0.0,
                    &mut out,
                );
                dy2 = Some(out);
            }
        } else if want_dy2 {
            dy2 = Some(vec![0.0; n * self.arch.n_classes]);
        }
        if grads.is_some() {
            for i in (0..p).rev() {
                match self.layer_backward(i, c, &d, grads.as_deref_mut(), i > 0, &mut col) {
                    Some(next) => d = next,
                    None => break,
                }
            }
        }
        (grads, dy2)
    }

    fn layer_backward(
        &self,
        i: usize,
        c: &ChunkTrace,
        dout: &[f64],
        mut grads: Option<&mut [f64]>,
        want_dx: bool,
        col: &mut Vec<f64>,
    ) -> Option<Vec<f64>> {
        let layer = &self.layers[i];
        let input = &c.acts[i];
        let output = if i + 1 == self.arch.partition && self.embed.is_some() {
            &c.partition_out
        } else {
            &c.acts[i + 1]
        };
        let params = &self.params;
        let n = c.n;
        let mut dx = want_dx.then(|| vec![0.0; n * layer.in_len]);
        match &layer.op {
            Op::Conv(g) => {
                for s in 0..n {
                    let xs = &input[s * layer.in_len..(s + 1) * layer.in_len];
                    let ds = &dout[s * layer.out_len..(s + 1) * layer.out_len];
                    let dxs = dx
                        .as_mut()
                        .map(|d| &mut d[s * layer.in_len..(s + 1) * layer.in_len]);
                    g.backward(params, xs, ds, grads.as_deref_mut(), dxs, col);
                }
            }
            Op::Relu => {
                if let Some(dx) = dx.as_mut() {
                    for ((o, d), y) in dx.iter_mut().zip(dout).zip(output) {
                        *o = if *y > 0.0 { *d } else { 0.0 };
                    }
                }
            }
            Op::Residual {
                conv1,
                conv2,
                shortcut,
            } => {
                let hidden = c.inner[i].as_ref().expect("residual cache");
                let mid = conv1.out_len();
                let mut ds = vec![0.0; layer.out_len];
                let mut dh = vec![0.0; mid];
                for s in 0..n {
                    let xs = &input[s * layer.in_len..(s + 1) * layer.in_len];
                    let hs = &hidden[s * mid..(s + 1) * mid];
                    let ys = &output[s * layer.out_len..(s + 1) * layer.out_len];
                    let dos = &dout[s * layer.out_len..(s + 1) * layer.out_len];
                    for ((a, d), y) in ds.iter_mut().zip(dos).zip(ys) {
                        *a = if *y > 0.0 { *d } else { 0.0 };
                    }
                    let mut dxs = dx
                        .as_mut()
                        .map(|d| &mut d[s * layer.in_len..(s + 1) * layer.in_len]);
                    match shortcut {
                        Some(sc) => sc.backward(
                            params,
                            xs,
                            &ds,
                            grads.as_deref_mut(),
                            dxs.as_deref_mut(),
                            col,
                        ),
                        None => {
                            if let Some(d) = dxs.as_deref_mut() {
                                d.iter_mut().zip(&ds).for_each(|(a, b)| *a += b);
                            }
                        }
                    }
                    dh.iter_mut().for_each(|v| *v = 0.0);
                    conv2.backward(params, hs, &ds, grads.as_deref_mut(), Some(&mut dh), col);
                    for (d, h) in dh.iter_mut().zip(hs) {
                        if *h <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    conv1.backward(params, xs, &dh, grads.as_deref_mut(), dxs, col);
                }
            }
            Op::Gap {
                channels,
                positions,
            } => {
                if let Some(dx) = dx.as_mut() {
                    for (dxs, ds) in dx
                        .chunks_mut(channels * positions)
                        .zip(dout.chunks(*channels))
                    {
                        for (plane, d) in dxs.chunks_mut(*positions).zip(ds) {
                            plane.iter_mut().for_each(|v| *v = d / *positions as f64);
                        }
                    }
                }
            }
            Op::Linear { in_f, out_f, w, b } => {
                if let Some(g) = grads {
                    gemm(
                        *out_f,
                        n,
                        *in_f,
                        dout,
                        true,
                        input,
                        false,
                        1.0,
                        &mut g[*w..*w + in_f * out_f],
                    );
                    for row in dout.chunks(*out_f) {
                        g[*b..*b + out_f]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, v)| *a += v);
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(
                        n,
                        *out_f,
                        *in_f,
                        dout,
                        false,
                        &params[*w..*w + in_f * out_f],
                        false,
                        0.0,
                        dx,
                    );
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Network {
        let arch = Architecture::desk_resnet([1, 6, 6], 4, 3);
        Network::init(arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn batch(n: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * 36).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n * 4).map(|_| rng.random_range(0.0..1.0)).collect();
        (
            Tensor::from_vec(&[n, 1, 6, 6], x).unwrap(),
            Tensor::from_vec(&[n, 4], y).unwrap(),
        )
    }

    #[test]
    fn parameter_slots_tile_the_vector() {
        let net = tiny();
        let mut at = 0;
        for s in net.slots() {
            assert_eq!(s.range.start, at);
            at = s.range.end;
        }
        assert_eq!(at, net.n_params());
    }

    #[test]
    fn batched_forward_equals_per_sample() {
        let net = tiny();
        let (x, y) = batch(19, 1);
        let all = net.forward(&x, &y).unwrap();
        for i in 0..19 {
            let xi = Tensor::from_vec(&[1, 1, 6, 6], x.row(i).to_vec()).unwrap();
            let yi = Tensor::from_vec(&[1, 4], y.row(i).to_vec()).unwrap();
            let one = net.forward(&xi, &yi).unwrap();
            for (a, b) in one.data().iter().zip(all.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let net = tiny();
        let (x, _) = batch(2, 1);
        assert!(net.forward(&x, &Tensor::zeros(&[2, 5])).is_err());
        assert!(net
            .forward(&Tensor::zeros(&[2, 35]), &Tensor::zeros(&[2, 4]))
            .is_err());
    }

    #[test]
    fn zero_label_embed_ignores_second_input() {
        let mut net = tiny();
        net.zero_label_embed();
        let (x, y) = batch(5, 2);
        let a = net.forward(&x, &y).unwrap();
        let b = net.forward(&x, &Tensor::zeros(&[5, 4])).unwrap();
        assert_eq!(a, b);
    }
}
