//! Small convolutional networks with explicit backward passes.
//!
//! Networks run one image at a time on flat `C*H*W` buffers. Batches are
//! handled by callers, which keeps the per-image path allocation-light and
//! trivially parallel.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    /// Stride-1 convolution with zero "same" padding.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    /// 2x2 max pooling, stride 2.
    MaxPool,
    /// 2x2 average pooling, stride 2.
    AvgPool,
    GlobalAvgPool,
    Flatten,
    Linear {
        inputs: usize,
        outputs: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Layer {
    fn output_shape(&self, s: Shape) -> Result<Shape> {
        let bad = |m: String| Err(Error::Shape(m));
        match *self {
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
            } => {
                if in_channels != s.c {
                    return bad(format!("conv expects {in_channels} channels, got {}", s.c));
                }
                if kernel % 2 == 0 {
                    return bad("conv kernel must be odd".into());
                }
                Ok(Shape::new(out_channels, s.h, s.w))
            }
            Layer::Relu => Ok(s),
            Layer::MaxPool | Layer::AvgPool => {
                if s.h < 2 || s.w < 2 {
                    return bad(format!("cannot pool a {}x{} map", s.h, s.w));
                }
                Ok(Shape::new(s.c, s.h / 2, s.w / 2))
            }
            Layer::GlobalAvgPool => Ok(Shape::new(s.c, 1, 1)),
            Layer::Flatten => Ok(Shape::new(s.len(), 1, 1)),
            Layer::Linear { inputs, outputs } => {
                if s.h != 1 || s.w != 1 || s.c != inputs {
                    return bad(format!("linear expects {inputs} flat inputs, got {s:?}"));
                }
                Ok(Shape::new(outputs, 1, 1))
            }
        }
    }

    fn num_params(&self) -> usize {
        match *self {
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
            } => out_channels * in_channels * kernel * kernel + out_channels,
            Layer::Linear { inputs, outputs } => inputs * outputs + outputs,
            _ => 0,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Conv {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            Layer::Linear { inputs, .. } => inputs,
            _ => 0,
        }
    }

    fn bias_len(&self) -> usize {
        match *self {
            Layer::Conv { out_channels, .. } => out_channels,
            Layer::Linear { outputs, .. } => outputs,
            _ => 0,
        }
    }
}

/// Architecture description stored alongside weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: Shape,
    pub layers: Vec<Layer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: Architecture,
    shapes: Vec<Shape>,
    params: Vec<Vec<f64>>,
}

/// Activations recorded by a forward pass; `acts[0]` is the input and
/// `acts[i + 1]` the output of layer `i`.
pub struct Trace {
    acts: Vec<Vec<f64>>,
    argmax: Vec<Vec<u32>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace holds the input at least")
    }

    /// Output of layer `layer`.
    pub fn activation(&self, layer: usize) -> &[f64] {
        &self.acts[layer + 1]
    }
}

const WEIGHTS_MAGIC: &str = "ADVCOMP-WEIGHTS v1";

impl Network {
    /// Build a network with He-normal weights and zero biases.
    pub fn new(input: Shape, layers: Vec<Layer>, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(Architecture { input, layers })?;
        for (i, layer) in net.arch.layers.iter().enumerate() {
            let n = layer.num_params();
            if n == 0 {
                continue;
            }
            let std = (2.0 / layer.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let mut rng = rng_from(seed_of!(seed, "init", i));
            let weights = n - layer.bias_len();
            for p in net.params[i][..weights].iter_mut() {
                *p = normal.sample(&mut rng);
            }
        }
        Ok(net)
    }

    pub fn zeroed(arch: Architecture) -> Result<Self> {
        let mut shapes = Vec::with_capacity(arch.layers.len());
        let mut s = arch.input;
        for layer in &arch.layers {
            s = layer.output_shape(s)?;
            shapes.push(s);
        }
        let params = arch
            .layers
            .iter()
            .map(|l| vec![0.0; l.num_params()])
            .collect();
        Ok(Self {
            arch,
            shapes,
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.arch.layers
    }

    pub fn input_shape(&self) -> Shape {
        self.arch.input
    }

    /// Output shape of layer `layer`.
    pub fn shape_after(&self, layer: usize) -> Shape {
        self.shapes[layer]
    }

    pub fn output_len(&self) -> usize {
        self.shapes.last().map_or(self.arch.input.len(), Shape::len)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    fn check_input(&self, image: &[f64]) {
        assert_eq!(
            image.len(),
            self.arch.input.len(),
            "input of length {} does not match network input {:?}",
            image.len(),
            self.arch.input
        );
    }

    pub fn forward(&self, image: &[f64]) -> Vec<f64> {
        self.trace(image).acts.pop().expect("non-empty trace")
    }

    pub fn trace(&self, image: &[f64]) -> Trace {
        self.check_input(image);
        let mut acts = Vec::with_capacity(self.arch.layers.len() + 1);
        let mut argmax = vec![Vec::new(); self.arch.layers.len()];
        acts.push(image.to_vec());
        let mut shape = self.arch.input;
        for (i, layer) in self.arch.layers.iter().enumerate() {
            let input = acts.last().expect("non-empty");
            let out_shape = self.shapes[i];
            let out = match *layer {
                Layer::Conv {
                    out_channels,
                    kernel,
                    ..
                } => conv_forward(input, shape, &self.params[i], out_channels, kernel),
                Layer::Relu => input.iter().map(|&v| v.max(0.0)).collect(),
                Layer::MaxPool => {
                    let (out, idx) = max_pool_forward(input, shape);
                    argmax[i] = idx;
                    out
                }
                Layer::AvgPool => avg_pool_forward(input, shape),
                Layer::GlobalAvgPool => {
                    let hw = shape.h * shape.w;
                    input
                        .chunks(hw)
                        .map(|ch| ch.iter().sum::<f64>() / hw as f64)
                        .collect()
                }
                Layer::Flatten => input.clone(),
                Layer::Linear { inputs, outputs } => {
                    let (w, b) = self.params[i].split_at(inputs * outputs);
                    (0..outputs)
                        .map(|j| b[j] + dot(&w[j * inputs..(j + 1) * inputs], input))
                        .collect()
                }
            };
            acts.push(out);
            shape = out_shape;
        }
        Trace { acts, argmax }
    }

    /// Backpropagate `grad_out` (gradient w.r.t. the final output) plus any
    /// extra gradients injected at intermediate layer outputs (`taps`).
    ///
    /// Returns the gradient w.r.t. the input. When `param_grads` is given the
    /// parameter gradients are accumulated into it.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_out: Option<&[f64]>,
        taps: &[(usize, &[f64])],
        mut param_grads: Option<&mut [Vec<f64>]>,
    ) -> Vec<f64> {
        let n = self.arch.layers.len();
        let mut grad = match grad_out {
            Some(g) => {
                assert_eq!(g.len(), self.output_len());
                g.to_vec()
            }
            None => vec![0.0; self.output_len()],
        };
        for i in (0..n).rev() {
            for (layer, g) in taps {
                if *layer == i {
                    assert_eq!(g.len(), grad.len(), "tap gradient shape for layer {i}");
                    for (a, b) in grad.iter_mut().zip(g.iter()) {
                        *a += b;
                    }
                }
            }
            let input = &trace.acts[i];
            let in_shape = if i == 0 {
                self.arch.input
            } else {
                self.shapes[i - 1]
            };
            grad = match self.arch.layers[i] {
                Layer::Conv {
                    out_channels,
                    kernel,
                    ..
                } => {
                    if let Some(pg) = param_grads.as_deref_mut() {
                        conv_param_grad(input, in_shape, &grad, out_channels, kernel, &mut pg[i]);
                    }
                    conv_backward_input(&grad, in_shape, &self.params[i], out_channels, kernel)
                }
                Layer::Relu => {
                    let out = &trace.acts[i + 1];
                    grad.iter()
                        .zip(out)
                        .map(|(g, o)| if *o > 0.0 { *g } else { 0.0 })
                        .collect()
                }
                Layer::MaxPool => {
                    let mut gin = vec![0.0; in_shape.len()];
                    for (g, &idx) in grad.iter().zip(&trace.argmax[i]) {
                        gin[idx as usize] += g;
                    }
                    gin
                }
                Layer::AvgPool => avg_pool_backward(&grad, in_shape),
                Layer::GlobalAvgPool => {
                    let hw = in_shape.h * in_shape.w;
                    let mut gin = vec![0.0; in_shape.len()];
                    for (c, g) in grad.iter().enumerate() {
                        gin[c * hw..(c + 1) * hw].fill(g / hw as f64);
                    }
                    gin
                }
                Layer::Flatten => grad,
                Layer::Linear { inputs, outputs } => {
                    let (w, _) = self.params[i].split_at(inputs * outputs);
                    if let Some(pg) = param_grads.as_deref_mut() {
                        let (gw, gb) = pg[i].split_at_mut(inputs * outputs);
                        for j in 0..outputs {
                            axpy(grad[j], input, &mut gw[j * inputs..(j + 1) * inputs]);
                            gb[j] += grad[j];
                        }
                    }
                    let mut gin = vec![0.0; inputs];
                    for j in 0..outputs {
                        axpy(grad[j], &w[j * inputs..(j + 1) * inputs], &mut gin);
                    }
                    gin
                }
            };
        }
        grad
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_string(&self.arch).expect("architecture serializes");
        let mut bytes = Vec::with_capacity(64 + header.len() + 8 * self.num_params());
        writeln!(bytes, "{WEIGHTS_MAGIC}").expect("vec write");
        writeln!(bytes, "{header}").expect("vec write");
        for v in self.params.iter().flatten() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|message| Error::Weights {
            path: path.to_path_buf(),
            message,
        })
    }

    fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut lines = bytes.splitn(3, |&b| b == b'\n');
        let magic = lines.next().unwrap_or_default();
        if magic != WEIGHTS_MAGIC.as_bytes() {
            return Err("bad magic".into());
        }
        let header = lines.next().ok_or("missing header")?;
        let body = lines.next().ok_or("missing body")?;
        let arch: Architecture = serde_json::from_slice(header).map_err(|e| e.to_string())?;
        let mut net = Self::zeroed(arch).map_err(|e| e.to_string())?;
        if body.len() != 8 * net.num_params() {
            return Err(format!(
                "expected {} parameters, found {} bytes",
                net.num_params(),
                body.len()
            ));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        for p in net.params.iter_mut().flatten() {
            *p = values.next().expect("length checked");
        }
        Ok(net)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Valid output range `lo..hi` for a kernel offset `d` on an axis of length `n`.
#[inline]
fn valid_range(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo, hi.max(lo))
}

fn conv_forward(input: &[f64], s: Shape, params: &[f64], co: usize, k: usize) -> Vec<f64> {
    let (h, w, ci) = (s.h, s.w, s.c);
    let hw = h * w;
    let pad = (k / 2) as isize;
    let (weights, bias) = params.split_at(co * ci * k * k);
    let mut out = vec![0.0; co * hw];
    for o in 0..co {
        let out_o = &mut out[o * hw..(o + 1) * hw];
        out_o.fill(bias[o]);
        for i in 0..ci {
            let in_i = &input[i * hw..(i + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, w);
                    let wv = weights[((o * ci + i) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        axpy(
                            wv,
                            &in_i[sy * w + sx0..sy * w + sx0 + (x1 - x0)],
                            &mut out_o[y * w + x0..y * w + x1],
                        );
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_input(grad: &[f64], s: Shape, params: &[f64], co: usize, k: usize) -> Vec<f64> {
    let (h, w, ci) = (s.h, s.w, s.c);
    let hw = h * w;
    let pad = (k / 2) as isize;
    let weights = &params[..co * ci * k * k];
    let mut gin = vec![0.0; ci * hw];
    for i in 0..ci {
        let gin_i = &mut gin[i * hw..(i + 1) * hw];
        for o in 0..co {
            let g_o = &grad[o * hw..(o + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, w);
                    let wv = weights[((o * ci + i) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        axpy(
                            wv,
                            &g_o[y * w + x0..y * w + x1],
                            &mut gin_i[sy * w + sx0..sy * w + sx0 + (x1 - x0)],
                        );
                    }
                }
            }
        }
    }
    gin
}

fn conv_param_grad(input: &[f64], s: Shape, grad: &[f64], co: usize, k: usize, pg: &mut [f64]) {
    let (h, w, ci) = (s.h, s.w, s.c);
    let hw = h * w;
    let pad = (k / 2) as isize;
    let (gw, gb) = pg.split_at_mut(co * ci * k * k);
    for o in 0..co {
        let g_o = &grad[o * hw..(o + 1) * hw];
        gb[o] += g_o.iter().sum::<f64>();
        for i in 0..ci {
            let in_i = &input[i * hw..(i + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        acc += dot(
                            &g_o[y * w + x0..y * w + x1],
                            &in_i[sy * w + sx0..sy * w + sx0 + (x1 - x0)],
                        );
                    }
                    gw[((o * ci + i) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

fn max_pool_forward(input: &[f64], s: Shape) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(s.c * oh * ow);
    let mut idx = Vec::with_capacity(s.c * oh * ow);
    for c in 0..s.c {
        let base = c * s.h * s.w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * s.w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * y + dy) * s.w + 2 * x + dx;
                    if input[j] > input[best] {
                        best = j;
                    }
                }
                out.push(input[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

fn avg_pool_forward(input: &[f64], s: Shape) -> Vec<f64> {
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(s.c * oh * ow);
    for c in 0..s.c {
        let base = c * s.h * s.w;
        for y in 0..oh {
            for x in 0..ow {
                let j = base + 2 * y * s.w + 2 * x;
                out.push(0.25 * (input[j] + input[j + 1] + input[j + s.w] + input[j + s.w + 1]));
            }
        }
    }
    out
}

fn avg_pool_backward(grad: &[f64], s: Shape) -> Vec<f64> {
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut gin = vec![0.0; s.len()];
    for c in 0..s.c {
        let base = c * s.h * s.w;
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * grad[(c * oh + y) * ow + x];
                let j = base + 2 * y * s.w + 2 * x;
                gin[j] += g;
                gin[j + 1] += g;
                gin[j + s.w] += g;
                gin[j + s.w + 1] += g;
            }
        }
    }
    gin
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of `logits` against `label` and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut p = softmax(logits);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[label];
    p[label] -= 1.0;
    (loss, p)
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 32,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Adam with decoupled weight decay.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &[Vec<f64>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>], lr: f64, decay: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for j in 0..p.len() {
                m[j] = Self::BETA1 * m[j] + (1.0 - Self::BETA1) * g[j];
                v[j] = Self::BETA2 * v[j] + (1.0 - Self::BETA2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + Self::EPS);
                p[j] -= lr * (update + decay * p[j]);
            }
        }
    }
}

/// Mean training loss per epoch.
pub type TrainHistory = Vec<f64>;

/// Minibatch cross-entropy training. Deterministic for a fixed seed: per-image
/// gradients are reduced in index order regardless of thread count.
pub fn train(net: &mut Network, data: &ImageBatch, opts: &TrainOptions) -> TrainHistory {
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut adam = Adam::new(net.params());
    let mut history = Vec::with_capacity(opts.epochs);
    let pixels = data.pixels();
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng_from(seed_of!(opts.seed, "shuffle", epoch)));
        // cosine decay over epochs
        let lr = opts.learning_rate
            * 0.5
            * (1.0 + (std::f64::consts::PI * epoch as f64 / opts.epochs as f64).cos());
        let mut total = 0.0;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let per_image: Vec<(f64, Vec<Vec<f64>>)> = chunk
                .par_iter()
                .map(|&idx| {
                    let image = pixels.index_axis(ndarray::Axis(0), idx);
                    let flat = image.as_standard_layout();
                    let trace = net.trace(flat.as_slice().expect("contiguous"));
                    let (loss, dlogits) = cross_entropy(trace.output(), data.labels()[idx]);
                    let mut grads: Vec<Vec<f64>> =
                        net.params().iter().map(|p| vec![0.0; p.len()]).collect();
                    net.backward(&trace, Some(&dlogits), &[], Some(&mut grads));
                    (loss, grads)
                })
                .collect();
            let mut grads: Vec<Vec<f64>> =
                net.params().iter().map(|p| vec![0.0; p.len()]).collect();
            let scale = 1.0 / chunk.len() as f64;
            for (loss, g) in &per_image {
                total += loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    axpy(scale, gi, acc);
                }
            }
            adam.step(net.params_mut(), &grads, lr, opts.weight_decay);
        }
        history.push(total / n.max(1) as f64);
    }
    history
}
