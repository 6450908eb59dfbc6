//! A small differentiable engine: conv2d, max-pool, dense and GRU layers
//! with hand-written backward passes, four losses, SGD and a triangular
//! cyclic learning-rate schedule.
//!
//! Everything runs on single samples in `f64`; batching is done by the
//! caller accumulating gradients. All reductions run in a fixed order, so
//! results are bit-reproducible for a given seed.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use libm::{exp, fabs, log, sqrt, tanh};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidInput(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => tanh(z),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + exp(-z))
    } else {
        let e = exp(z);
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "type", rename_all = "snake_case"))]
pub enum LayerSpec {
    /// Zero-padded ("same" for stride 1) 2D convolution.
    Conv2d { out_channels: usize, kernel: usize, stride: usize, activation: Activation },
    /// Non-overlapping `size x size` max pooling.
    MaxPool { size: usize },
    Flatten,
    Dense { out_dim: usize, activation: Activation },
    /// Stacked unidirectional GRU over the frame sequence.
    Gru { hidden_dim: usize, layers: usize },
    /// Final linear layer.
    Output { dim: usize },
}

/// Layered architecture. `input` is `[channels, height, width]` or `[features]`.
/// `side_inputs` extra features are concatenated to every frame embedding
/// right before a GRU layer.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NetworkSpec {
    pub input: Vec<usize>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub side_inputs: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Image { c: usize, h: usize, w: usize },
    Vector(usize),
}

impl Shape {
    fn size(self) -> usize {
        match self {
            Shape::Image { c, h, w } => c * h * w,
            Shape::Vector(n) => n,
        }
    }
}

/// Resolved shapes and parameter slots of one layer.
#[derive(Debug, Clone)]
struct Plan {
    input: Shape,
    output: Shape,
    /// First parameter tensor index.
    first_param: usize,
}

fn shape_err(layer: usize, detail: String) -> Error {
    Error::Shape { layer, detail }
}

fn conv_out(n: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (n + 2 * pad - kernel) / stride + 1
}

impl NetworkSpec {
    fn plan(&self) -> Result<Vec<Plan>> {
        let mut shape = match self.input.as_slice() {
            [c, h, w] if *c > 0 && *h > 0 && *w > 0 => Shape::Image { c: *c, h: *h, w: *w },
            [n] if *n > 0 => Shape::Vector(*n),
            other => return Err(shape_err(0, format!("unsupported input shape {other:?}"))),
        };
        let outputs = self.layers.iter().filter(|l| matches!(l, LayerSpec::Output { .. })).count();
        if outputs != 1 || !matches!(self.layers.last(), Some(LayerSpec::Output { .. })) {
            return Err(shape_err(self.layers.len(), "exactly one Output layer, placed last, is required".into()));
        }
        let grus = self.layers.iter().filter(|l| matches!(l, LayerSpec::Gru { .. })).count();
        if grus > 1 {
            return Err(shape_err(0, "at most one GRU block is supported".into()));
        }
        if grus == 0 && self.side_inputs > 0 {
            return Err(shape_err(0, "side inputs require a GRU layer".into()));
        }
        let mut plans = Vec::with_capacity(self.layers.len());
        let mut params = 0;
        let mut seen_gru = false;
        for (i, layer) in self.layers.iter().enumerate() {
            let input = shape;
            let first_param = params;
            shape = match (*layer, input) {
                (LayerSpec::Conv2d { out_channels, kernel, stride, .. }, Shape::Image { h, w, .. }) => {
                    if out_channels == 0 || kernel == 0 || kernel % 2 == 0 || stride == 0 {
                        return Err(shape_err(i, "conv needs odd kernel, non-zero channels and stride".into()));
                    }
                    params += 2;
                    Shape::Image { c: out_channels, h: conv_out(h, kernel, stride), w: conv_out(w, kernel, stride) }
                }
                (LayerSpec::MaxPool { size }, Shape::Image { c, h, w }) => {
                    if size == 0 || h < size || w < size {
                        return Err(shape_err(i, format!("cannot pool {h}x{w} with size {size}")));
                    }
                    Shape::Image { c, h: h / size, w: w / size }
                }
                (LayerSpec::Flatten, s) => Shape::Vector(s.size()),
                (LayerSpec::Dense { out_dim, .. }, Shape::Vector(_)) | (LayerSpec::Output { dim: out_dim }, Shape::Vector(_)) => {
                    if out_dim == 0 {
                        return Err(shape_err(i, "zero-width layer".into()));
                    }
                    params += 2;
                    Shape::Vector(out_dim)
                }
                (LayerSpec::Gru { hidden_dim, layers }, Shape::Vector(_)) => {
                    if hidden_dim == 0 || layers == 0 {
                        return Err(shape_err(i, "GRU needs hidden units and layers".into()));
                    }
                    seen_gru = true;
                    params += 4 * layers;
                    Shape::Vector(hidden_dim)
                }
                (l, s) => return Err(shape_err(i, format!("{l:?} cannot take input {s:?}"))),
            };
            if seen_gru && matches!(layer, LayerSpec::Conv2d { .. } | LayerSpec::MaxPool { .. }) {
                return Err(shape_err(i, "image layers cannot follow the GRU".into()));
            }
            plans.push(Plan { input, output: shape, first_param });
        }
        Ok(plans)
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }

    pub fn gru_index(&self) -> Option<usize> {
        self.layers.iter().position(|l| matches!(l, LayerSpec::Gru { .. }))
    }

    pub fn is_recurrent(&self) -> bool {
        self.gru_index().is_some()
    }

    pub fn output_dim(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Output { dim }) => *dim,
            _ => 0,
        }
    }

    /// Width of the per-frame embedding fed to the GRU (without side inputs).
    pub fn embedding_dim(&self) -> Result<usize> {
        let plans = self.plan()?;
        let g = self.gru_index().ok_or_else(|| Error::Config("network has no GRU layer".into()))?;
        Ok(plans[g].input.size())
    }

    /// Shapes of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let plans = self.plan()?;
        let mut shapes = Vec::new();
        for (layer, plan) in self.layers.iter().zip(&plans) {
            match (*layer, plan.input) {
                (LayerSpec::Conv2d { out_channels, kernel, .. }, Shape::Image { c, .. }) => {
                    shapes.push(vec![out_channels, c, kernel, kernel]);
                    shapes.push(vec![out_channels]);
                }
                (LayerSpec::Dense { out_dim, .. }, s) | (LayerSpec::Output { dim: out_dim }, s) => {
                    shapes.push(vec![out_dim, s.size()]);
                    shapes.push(vec![out_dim]);
                }
                (LayerSpec::Gru { hidden_dim, layers }, s) => {
                    for l in 0..layers {
                        let input = if l == 0 { s.size() + self.side_inputs } else { hidden_dim };
                        shapes.push(vec![3 * hidden_dim, input]);
                        shapes.push(vec![3 * hidden_dim, hidden_dim]);
                        shapes.push(vec![3 * hidden_dim]);
                        shapes.push(vec![3 * hidden_dim]);
                    }
                }
                _ => {}
            }
        }
        Ok(shapes)
    }
}

/// Parameter (or gradient) tensors in storage order.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Params {
    pub tensors: Vec<Tensor>,
}

impl Params {
    /// Uniform initialization in `+-1/sqrt(fan_in)`.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = spec.param_shapes()?;
        let mut tensors = Vec::with_capacity(shapes.len());
        let mut bound = 1.0;
        for shape in shapes {
            if shape.len() > 1 {
                bound = 1.0 / sqrt(shape[1..].iter().product::<usize>() as f64);
            }
            // 1D tensors are biases and reuse the bound of the preceding weight.
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            tensors.push(Tensor { shape, data });
        }
        Ok(Self { tensors })
    }

    pub fn zeros_like(&self) -> Self {
        Self { tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape.clone())).collect() }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn scale(&mut self, k: f64) {
        self.tensors.iter_mut().flat_map(|t| t.data.iter_mut()).for_each(|v| *v *= k);
    }

    pub fn add_scaled(&mut self, other: &Params, k: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += k * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Flat view of scalar `i` across all tensors.
    pub fn get(&self, mut i: usize) -> f64 {
        for t in &self.tensors {
            if i < t.len() {
                return t.data[i];
            }
            i -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set(&mut self, mut i: usize, v: f64) {
        for t in &mut self.tensors {
            if i < t.len() {
                t.data[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let shapes = spec.param_shapes()?;
        if shapes.len() != self.tensors.len() {
            return Err(shape_err(0, format!("expected {} parameter tensors, got {}", shapes.len(), self.tensors.len())));
        }
        for (i, (s, t)) in shapes.iter().zip(&self.tensors).enumerate() {
            if *s != t.shape || t.data.len() != s.iter().product::<usize>() {
                return Err(shape_err(i, format!("parameter tensor {i} has shape {:?}, expected {s:?}", t.shape)));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Layer kernels

fn conv_forward(
    x: &[f64],
    (c_in, h, w): (usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    (c_out, kernel, stride): (usize, usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<f64> {
    let pad = kernel as i64 / 2;
    let mut out = vec![0.0; c_out * ho * wo];
    for co in 0..c_out {
        let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..c_in {
            let input = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let wv = weight[((co * c_in + ci) * kernel + ky) * kernel + kx];
                    for oy in 0..ho {
                        let iy = (oy * stride) as i64 + ky as i64 - pad;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        let row = &input[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride) as i64 + kx as i64 - pad;
                            if ix >= 0 && ix < w as i64 {
                                *o += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    (c_in, h, w): (usize, usize, usize),
    weight: &[f64],
    (c_out, kernel, stride): (usize, usize, usize),
    (ho, wo): (usize, usize),
    grad_z: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> Vec<f64> {
    let pad = kernel as i64 / 2;
    let mut grad_x = vec![0.0; c_in * h * w];
    for co in 0..c_out {
        let gplane = &grad_z[co * ho * wo..(co + 1) * ho * wo];
        grad_b[co] += gplane.iter().sum::<f64>();
        for ci in 0..c_in {
            let input = &x[ci * h * w..(ci + 1) * h * w];
            let ginput = &mut grad_x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let wi = ((co * c_in + ci) * kernel + ky) * kernel + kx;
                    let wv = weight[wi];
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * stride) as i64 + ky as i64 - pad;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        let base = iy as usize * w;
                        for ox in 0..wo {
                            let ix = (ox * stride) as i64 + kx as i64 - pad;
                            if ix >= 0 && ix < w as i64 {
                                let g = gplane[oy * wo + ox];
                                acc += g * input[base + ix as usize];
                                ginput[base + ix as usize] += wv * g;
                            }
                        }
                    }
                    grad_w[wi] += acc;
                }
            }
        }
    }
    grad_x
}

fn dense_forward(x: &[f64], weight: &[f64], bias: &[f64], out_dim: usize) -> Vec<f64> {
    let n = x.len();
    (0..out_dim)
        .map(|o| {
            let row = &weight[o * n..(o + 1) * n];
            bias[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

/// Accumulates weight/bias gradients and returns the input gradient.
fn dense_backward(x: &[f64], weight: &[f64], grad_z: &[f64], grad_w: &mut [f64], grad_b: &mut [f64]) -> Vec<f64> {
    let n = x.len();
    let mut grad_x = vec![0.0; n];
    for (o, &g) in grad_z.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grad_b[o] += g;
        let row = &weight[o * n..(o + 1) * n];
        let grow = &mut grad_w[o * n..(o + 1) * n];
        for k in 0..n {
            grow[k] += g * x[k];
            grad_x[k] += g * row[k];
        }
    }
    grad_x
}

// ---------------------------------------------------------------------------
// Feed-forward layers

#[derive(Debug, Clone)]
enum LayerCache {
    Conv { input: Vec<f64>, z: Vec<f64>, a: Vec<f64> },
    Pool { argmax: Vec<usize>, input_len: usize },
    Flatten,
    Dense { input: Vec<f64>, z: Vec<f64>, a: Vec<f64> },
}

fn forward_layers(
    spec: &NetworkSpec,
    plans: &[Plan],
    params: &Params,
    range: Range<usize>,
    input: Vec<f64>,
) -> Result<(Vec<f64>, Vec<LayerCache>)> {
    let mut x = input;
    let mut caches = Vec::with_capacity(range.len());
    for i in range {
        let plan = &plans[i];
        if x.len() != plan.input.size() {
            return Err(shape_err(i, format!("expected {} inputs, got {}", plan.input.size(), x.len())));
        }
        let p = plan.first_param;
        match (spec.layers[i], plan.input, plan.output) {
            (
                LayerSpec::Conv2d { out_channels, kernel, stride, activation },
                Shape::Image { c, h, w },
                Shape::Image { h: ho, w: wo, .. },
            ) => {
                let z = conv_forward(
                    &x,
                    (c, h, w),
                    &params.tensors[p].data,
                    &params.tensors[p + 1].data,
                    (out_channels, kernel, stride),
                    (ho, wo),
                );
                let a: Vec<f64> = z.iter().map(|&v| activation.apply(v)).collect();
                let out = a.clone();
                caches.push(LayerCache::Conv { input: x, z, a });
                x = out;
            }
            (LayerSpec::MaxPool { size }, Shape::Image { c, h, w }, Shape::Image { h: ho, w: wo, .. }) => {
                let mut out = vec![0.0; c * ho * wo];
                let mut argmax = vec![0; c * ho * wo];
                for ch in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_i = 0;
                            for dy in 0..size {
                                for dx in 0..size {
                                    let idx = (ch * h + oy * size + dy) * w + ox * size + dx;
                                    if x[idx] > best {
                                        best = x[idx];
                                        best_i = idx;
                                    }
                                }
                            }
                            let o = (ch * ho + oy) * wo + ox;
                            out[o] = best;
                            argmax[o] = best_i;
                        }
                    }
                }
                caches.push(LayerCache::Pool { argmax, input_len: x.len() });
                x = out;
            }
            (LayerSpec::Flatten, _, _) => caches.push(LayerCache::Flatten),
            (LayerSpec::Dense { out_dim, activation }, _, _) => {
                let z = dense_forward(&x, &params.tensors[p].data, &params.tensors[p + 1].data, out_dim);
                let a: Vec<f64> = z.iter().map(|&v| activation.apply(v)).collect();
                let out = a.clone();
                caches.push(LayerCache::Dense { input: x, z, a });
                x = out;
            }
            (LayerSpec::Output { dim }, _, _) => {
                let z = dense_forward(&x, &params.tensors[p].data, &params.tensors[p + 1].data, dim);
                caches.push(LayerCache::Dense { input: x, z: Vec::new(), a: Vec::new() });
                x = z;
            }
            (l, _, _) => return Err(shape_err(i, format!("{l:?} is not a feed-forward layer"))),
        }
    }
    Ok((x, caches))
}

fn backward_layers(
    spec: &NetworkSpec,
    plans: &[Plan],
    params: &Params,
    range: Range<usize>,
    caches: &[LayerCache],
    grad_out: Vec<f64>,
    grads: &mut Params,
) -> Vec<f64> {
    let mut g = grad_out;
    for (i, cache) in range.clone().rev().zip(caches.iter().rev()) {
        let plan = &plans[i];
        let p = plan.first_param;
        match (spec.layers[i], cache) {
            (LayerSpec::Conv2d { out_channels, kernel, stride, activation }, LayerCache::Conv { input, z, a }) => {
                let (Shape::Image { c, h, w }, Shape::Image { h: ho, w: wo, .. }) = (plan.input, plan.output) else {
                    unreachable!("validated conv shapes")
                };
                let grad_z: Vec<f64> =
                    g.iter().zip(z.iter().zip(a)).map(|(g, (&z, &a))| g * activation.derivative(z, a)).collect();
                let (left, right) = grads.tensors.split_at_mut(p + 1);
                g = conv_backward(
                    input,
                    (c, h, w),
                    &params.tensors[p].data,
                    (out_channels, kernel, stride),
                    (ho, wo),
                    &grad_z,
                    &mut left[p].data,
                    &mut right[0].data,
                );
            }
            (LayerSpec::MaxPool { .. }, LayerCache::Pool { argmax, input_len }) => {
                let mut gx = vec![0.0; *input_len];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g[o];
                }
                g = gx;
            }
            (LayerSpec::Flatten, _) => {}
            (LayerSpec::Dense { activation, .. }, LayerCache::Dense { input, z, a }) => {
                let grad_z: Vec<f64> =
                    g.iter().zip(z.iter().zip(a)).map(|(g, (&z, &a))| g * activation.derivative(z, a)).collect();
                let (left, right) = grads.tensors.split_at_mut(p + 1);
                g = dense_backward(input, &params.tensors[p].data, &grad_z, &mut left[p].data, &mut right[0].data);
            }
            (LayerSpec::Output { .. }, LayerCache::Dense { input, .. }) => {
                let (left, right) = grads.tensors.split_at_mut(p + 1);
                g = dense_backward(input, &params.tensors[p].data, &g, &mut left[p].data, &mut right[0].data);
            }
            _ => unreachable!("cache does not match layer"),
        }
    }
    g
}

/// Activations recorded by [`forward`].
#[derive(Debug, Clone)]
pub struct Cache {
    layers: Vec<LayerCache>,
}

fn check_input(spec: &NetworkSpec, input: &Tensor) -> Result<()> {
    if input.shape != spec.input {
        return Err(shape_err(0, format!("input shape {:?} does not match {:?}", input.shape, spec.input)));
    }
    Ok(())
}

/// Forward pass of a feed-forward network on a single sample.
pub fn forward(spec: &NetworkSpec, params: &Params, input: &Tensor) -> Result<(Tensor, Cache)> {
    if spec.is_recurrent() {
        return Err(Error::Config("use forward_sequence for recurrent networks".into()));
    }
    let plans = spec.plan()?;
    check_input(spec, input)?;
    let (out, layers) = forward_layers(spec, &plans, params, 0..spec.layers.len(), input.data.clone())?;
    let dim = out.len();
    Ok((Tensor { shape: vec![dim], data: out }, Cache { layers }))
}

/// Parameter gradients for the loss gradient `grad_out` at the network output.
pub fn backward(spec: &NetworkSpec, params: &Params, cache: &Cache, grad_out: &Tensor) -> Result<Params> {
    let mut grads = params.zeros_like();
    backward_into(spec, params, cache, grad_out, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but accumulates into `grads`; returns the input gradient.
pub fn backward_into(
    spec: &NetworkSpec,
    params: &Params,
    cache: &Cache,
    grad_out: &Tensor,
    grads: &mut Params,
) -> Result<Tensor> {
    let plans = spec.plan()?;
    if grad_out.len() != spec.output_dim() {
        return Err(shape_err(spec.layers.len() - 1, "output gradient has the wrong width".into()));
    }
    let gx = backward_layers(spec, &plans, params, 0..spec.layers.len(), &cache.layers, grad_out.data.clone(), grads);
    Ok(Tensor { shape: spec.input.clone(), data: gx })
}

// ---------------------------------------------------------------------------
// Recurrent networks: trunk (per frame) -> GRU over frames -> head (per step)

/// Cached trunk activations for one frame.
#[derive(Debug, Clone)]
pub struct TrunkCache {
    layers: Vec<LayerCache>,
}

/// Runs the layers before the GRU on one frame, returning its embedding.
pub fn trunk_forward(spec: &NetworkSpec, params: &Params, frame: &Tensor) -> Result<(Vec<f64>, TrunkCache)> {
    let plans = spec.plan()?;
    let g = spec.gru_index().ok_or_else(|| Error::Config("network has no GRU layer".into()))?;
    check_input(spec, frame)?;
    let (emb, layers) = forward_layers(spec, &plans, params, 0..g, frame.data.clone())?;
    Ok((emb, TrunkCache { layers }))
}

pub fn trunk_backward(
    spec: &NetworkSpec,
    params: &Params,
    cache: &TrunkCache,
    grad_embedding: &[f64],
    grads: &mut Params,
) -> Result<()> {
    let plans = spec.plan()?;
    let g = spec.gru_index().ok_or_else(|| Error::Config("network has no GRU layer".into()))?;
    backward_layers(spec, &plans, params, 0..g, &cache.layers, grad_embedding.to_vec(), grads);
    Ok(())
}

#[derive(Debug, Clone)]
struct GruStep {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
}

/// Cached GRU and head activations for one sequence.
#[derive(Debug, Clone)]
pub struct HeadCache {
    /// `steps[layer][t]`
    steps: Vec<Vec<GruStep>>,
    post: Vec<Vec<LayerCache>>,
}

fn gru_params(spec: &NetworkSpec, plans: &[Plan]) -> (usize, usize, usize, usize) {
    let g = spec.gru_index().expect("recurrent spec");
    let LayerSpec::Gru { hidden_dim, layers } = spec.layers[g] else { unreachable!() };
    (g, plans[g].first_param, hidden_dim, layers)
}

/// GRU block plus the layers after it, over a sequence of per-step inputs
/// (frame embedding concatenated with side inputs). The hidden state starts at zero.
pub fn head_forward(spec: &NetworkSpec, params: &Params, inputs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, HeadCache)> {
    let plans = spec.plan()?;
    let (g, p0, hd, layers) = gru_params(spec, &plans);
    let width = plans[g].input.size() + spec.side_inputs;
    if let Some(bad) = inputs.iter().position(|x| x.len() != width) {
        return Err(shape_err(g, format!("step {bad}: expected {width} GRU inputs, got {}", inputs[bad].len())));
    }
    let mut seq: Vec<Vec<f64>> = inputs.to_vec();
    let mut steps = Vec::with_capacity(layers);
    for l in 0..layers {
        let w_ih = &params.tensors[p0 + 4 * l].data;
        let w_hh = &params.tensors[p0 + 4 * l + 1].data;
        let b_ih = &params.tensors[p0 + 4 * l + 2].data;
        let b_hh = &params.tensors[p0 + 4 * l + 3].data;
        let mut h = vec![0.0; hd];
        let mut layer_steps = Vec::with_capacity(seq.len());
        let mut out = Vec::with_capacity(seq.len());
        for x in seq {
            let gi = dense_forward(&x, w_ih, b_ih, 3 * hd);
            let gh = dense_forward(&h, w_hh, b_hh, 3 * hd);
            let r: Vec<f64> = (0..hd).map(|k| sigmoid(gi[k] + gh[k])).collect();
            let z: Vec<f64> = (0..hd).map(|k| sigmoid(gi[hd + k] + gh[hd + k])).collect();
            let hn: Vec<f64> = gh[2 * hd..].to_vec();
            let n: Vec<f64> = (0..hd).map(|k| tanh(gi[2 * hd + k] + r[k] * hn[k])).collect();
            let h_new: Vec<f64> = (0..hd).map(|k| (1.0 - z[k]) * n[k] + z[k] * h[k]).collect();
            layer_steps.push(GruStep { x, h_prev: h, r, z, n, hn });
            out.push(h_new.clone());
            h = h_new;
        }
        steps.push(layer_steps);
        seq = out;
    }
    let mut outputs = Vec::with_capacity(seq.len());
    let mut post = Vec::with_capacity(seq.len());
    for h in seq {
        let (y, c) = forward_layers(spec, &plans, params, (g + 1)..spec.layers.len(), h)?;
        outputs.push(y);
        post.push(c);
    }
    Ok((outputs, HeadCache { steps, post }))
}

/// Backpropagation through time. Accumulates parameter gradients and returns
/// the gradient with respect to every step input.
pub fn head_backward(
    spec: &NetworkSpec,
    params: &Params,
    cache: &HeadCache,
    grad_outputs: &[Vec<f64>],
    grads: &mut Params,
) -> Result<Vec<Vec<f64>>> {
    let plans = spec.plan()?;
    let (g, p0, hd, layers) = gru_params(spec, &plans);
    if grad_outputs.len() != cache.post.len() {
        return Err(shape_err(g, "one output gradient per step is required".into()));
    }
    let t_len = grad_outputs.len();
    let mut grad_seq: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    for (go, c) in grad_outputs.iter().zip(&cache.post) {
        if go.iter().all(|&v| v == 0.0) {
            grad_seq.push(vec![0.0; hd]);
        } else {
            grad_seq.push(backward_layers(spec, &plans, params, (g + 1)..spec.layers.len(), c, go.clone(), grads));
        }
    }
    for l in (0..layers).rev() {
        let w_ih = &params.tensors[p0 + 4 * l].data;
        let w_hh = &params.tensors[p0 + 4 * l + 1].data;
        let in_dim = cache.steps[l][0].x.len();
        let mut grad_in = vec![vec![0.0; in_dim]; t_len];
        let mut dh_next = vec![0.0; hd];
        for t in (0..t_len).rev() {
            let s = &cache.steps[l][t];
            let dh: Vec<f64> = (0..hd).map(|k| grad_seq[t][k] + dh_next[k]).collect();
            let mut d_gi = vec![0.0; 3 * hd];
            let mut d_gh = vec![0.0; 3 * hd];
            let mut dh_prev = vec![0.0; hd];
            for k in 0..hd {
                let dn = dh[k] * (1.0 - s.z[k]);
                let dz = dh[k] * (s.h_prev[k] - s.n[k]);
                dh_prev[k] = dh[k] * s.z[k];
                let da_n = dn * (1.0 - s.n[k] * s.n[k]);
                let dr = da_n * s.hn[k];
                let da_r = dr * s.r[k] * (1.0 - s.r[k]);
                let da_z = dz * s.z[k] * (1.0 - s.z[k]);
                d_gi[k] = da_r;
                d_gi[hd + k] = da_z;
                d_gi[2 * hd + k] = da_n;
                d_gh[k] = da_r;
                d_gh[hd + k] = da_z;
                d_gh[2 * hd + k] = da_n * s.r[k];
            }
            {
                let (left, right) = grads.tensors.split_at_mut(p0 + 4 * l + 2);
                let (gw_ih, gw_hh) = left[p0 + 4 * l..].split_at_mut(1);
                let (gb_ih, gb_hh) = right.split_at_mut(1);
                grad_in[t] = dense_backward(&s.x, w_ih, &d_gi, &mut gw_ih[0].data, &mut gb_ih[0].data);
                let dh_rec = dense_backward(&s.h_prev, w_hh, &d_gh, &mut gw_hh[0].data, &mut gb_hh[0].data);
                for k in 0..hd {
                    dh_prev[k] += dh_rec[k];
                }
            }
            dh_next = dh_prev;
        }
        grad_seq = grad_in;
    }
    Ok(grad_seq)
}

/// Cached activations of a full sequence pass.
#[derive(Debug, Clone)]
pub struct SequenceCache {
    trunks: Vec<TrunkCache>,
    head: HeadCache,
    embedding_dim: usize,
}

/// Runs trunk, GRU and head over `frames`, with `side[t]` appended to each embedding.
/// Returns one output row per step, shape `[T, out]`.
pub fn forward_sequence(
    spec: &NetworkSpec,
    params: &Params,
    frames: &[Tensor],
    side: &[Vec<f64>],
) -> Result<(Tensor, SequenceCache)> {
    if frames.len() != side.len() {
        return Err(Error::InvalidInput("one side-input row per frame is required".into()));
    }
    let mut trunks = Vec::with_capacity(frames.len());
    let mut inputs = Vec::with_capacity(frames.len());
    let mut embedding_dim = 0;
    for (f, s) in frames.iter().zip(side) {
        let (mut e, c) = trunk_forward(spec, params, f)?;
        embedding_dim = e.len();
        e.extend_from_slice(s);
        inputs.push(e);
        trunks.push(c);
    }
    let (outputs, head) = head_forward(spec, params, &inputs)?;
    let dim = spec.output_dim();
    let data = outputs.into_iter().flatten().collect();
    Ok((Tensor { shape: vec![frames.len(), dim], data }, SequenceCache { trunks, head, embedding_dim }))
}

pub fn backward_sequence(spec: &NetworkSpec, params: &Params, cache: &SequenceCache, grad_out: &Tensor) -> Result<Params> {
    let dim = spec.output_dim();
    let t = cache.trunks.len();
    if grad_out.len() != t * dim {
        return Err(shape_err(spec.layers.len() - 1, "output gradient has the wrong shape".into()));
    }
    let mut grads = params.zeros_like();
    let rows: Vec<Vec<f64>> = grad_out.data.chunks(dim).map(|c| c.to_vec()).collect();
    let grad_in = head_backward(spec, params, &cache.head, &rows, &mut grads)?;
    for (c, gi) in cache.trunks.iter().zip(&grad_in) {
        trunk_backward(spec, params, c, &gi[..cache.embedding_dim], &mut grads)?;
    }
    Ok(grads)
}

// ---------------------------------------------------------------------------
// Losses

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum LossKind {
    CrossEntropy,
    Mse,
    Mae,
    Huber { delta: f64 },
}

pub const DEFAULT_HUBER_DELTA: f64 = 1.0;

impl LossKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "cross_entropy" | "ce" => LossKind::CrossEntropy,
            "mse" => LossKind::Mse,
            "mae" => LossKind::Mae,
            "huber" => LossKind::Huber { delta: DEFAULT_HUBER_DELTA },
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Class(usize),
    Values(&'a [f64]),
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| exp(v - max)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Loss value and its gradient with respect to `pred`. Regression losses
/// average over coordinates; cross entropy takes raw logits.
pub fn loss(kind: LossKind, pred: &[f64], target: Target<'_>) -> Result<(f64, Vec<f64>)> {
    match (kind, target) {
        (LossKind::CrossEntropy, Target::Class(c)) => {
            if c >= pred.len() {
                return Err(Error::ClassIndex { index: c, classes: pred.len() });
            }
            let max = pred.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + log(pred.iter().map(|&v| exp(v - max)).sum::<f64>());
            let mut grad = softmax(pred);
            grad[c] -= 1.0;
            Ok((lse - pred[c], grad))
        }
        (LossKind::CrossEntropy, Target::Values(_)) => {
            Err(Error::Config("cross entropy needs a class index target".into()))
        }
        (_, Target::Class(_)) => Err(Error::Config("regression losses need value targets".into())),
        (kind, Target::Values(t)) => {
            if t.len() != pred.len() {
                return Err(Error::InvalidInput(format!("prediction has {} values, target {}", pred.len(), t.len())));
            }
            let n = pred.len() as f64;
            let mut total = 0.0;
            let mut grad = Vec::with_capacity(pred.len());
            for (&p, &y) in pred.iter().zip(t) {
                let e = p - y;
                let (l, g) = match kind {
                    LossKind::Mse => (e * e, 2.0 * e),
                    LossKind::Mae => (fabs(e), if e > 0.0 { 1.0 } else if e < 0.0 { -1.0 } else { 0.0 }),
                    LossKind::Huber { delta } => {
                        if fabs(e) <= delta {
                            (0.5 * e * e, e)
                        } else {
                            (delta * (fabs(e) - 0.5 * delta), if e > 0.0 { delta } else { -delta })
                        }
                    }
                    LossKind::CrossEntropy => unreachable!(),
                };
                total += l;
                grad.push(g / n);
            }
            Ok((total / n, grad))
        }
    }
}

// ---------------------------------------------------------------------------
// Optimization

/// Triangular cyclic learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CyclicLr {
    pub base_lr: f64,
    pub max_lr: f64,
    /// Half-period in optimizer steps.
    pub step_size: usize,
}

impl CyclicLr {
    pub fn new(base_lr: f64, max_lr: f64, step_size: usize) -> Result<Self> {
        if !(base_lr >= 0.0 && base_lr <= max_lr && max_lr.is_finite()) || step_size == 0 {
            return Err(Error::Config(format!(
                "cyclic schedule needs 0 <= base_lr <= max_lr and step_size >= 1 (got {base_lr}, {max_lr}, {step_size})"
            )));
        }
        Ok(Self { base_lr, max_lr, step_size })
    }

    pub fn constant(lr: f64) -> Self {
        Self { base_lr: lr, max_lr: lr, step_size: 1 }
    }

    pub fn lr(&self, step: u64) -> f64 {
        let period = 2 * self.step_size as u64;
        let phase = step % period;
        let half = self.step_size as u64;
        let frac = if phase <= half { phase as f64 / half as f64 } else { (period - phase) as f64 / half as f64 };
        self.base_lr + (self.max_lr - self.base_lr) * frac
    }
}

pub fn cyclic_lr(state: &OptimizerState, step: u64) -> f64 {
    state.schedule.lr(step)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub schedule: CyclicLr,
    pub momentum: f64,
    pub step: u64,
    velocity: Option<Params>,
}

impl OptimizerState {
    pub fn new(schedule: CyclicLr, momentum: f64) -> Self {
        Self { schedule, momentum, step: 0, velocity: None }
    }
}

/// `p <- p - lr(step) * v` with `v = momentum * v + g`; plain SGD when momentum is 0.
pub fn sgd_step(params: &mut Params, grads: &Params, state: &mut OptimizerState) {
    let lr = state.schedule.lr(state.step);
    if state.momentum == 0.0 {
        params.add_scaled(grads, -lr);
    } else {
        let v = state.velocity.get_or_insert_with(|| grads.zeros_like());
        v.scale(state.momentum);
        v.add_scaled(grads, 1.0);
        params.add_scaled(v, -lr);
    }
    state.step += 1;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_spec(input: usize, out: usize) -> NetworkSpec {
        NetworkSpec { input: vec![input], side_inputs: 0, layers: vec![LayerSpec::Output { dim: out }] }
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let spec = dense_spec(3, 3);
        let mut params = Params::init(&spec, 0).unwrap();
        params.tensors[0].data = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        params.tensors[1].data = vec![0.0; 3];
        let x = Tensor::new(vec![3], vec![0.5, -2.0, 7.0]).unwrap();
        let (y, _) = forward(&spec, &params, &x).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn unit_pointwise_conv_is_identity() {
        let spec = NetworkSpec {
            input: vec![1, 4, 4],
            side_inputs: 0,
            layers: vec![
                LayerSpec::Conv2d { out_channels: 1, kernel: 1, stride: 1, activation: Activation::Linear },
                LayerSpec::Flatten,
                LayerSpec::Output { dim: 1 },
            ],
        };
        let mut params = Params::init(&spec, 1).unwrap();
        params.tensors[0].data = vec![1.0];
        params.tensors[1].data = vec![0.0];
        let x = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let plans = spec.plan().unwrap();
        let (y, _) = forward_layers(&spec, &plans, &params, 0..1, x.data.clone()).unwrap();
        assert_eq!(y, x.data);
    }

    #[test]
    fn saturated_update_gate_keeps_state() {
        let spec = NetworkSpec {
            input: vec![2],
            side_inputs: 0,
            layers: vec![LayerSpec::Gru { hidden_dim: 2, layers: 1 }, LayerSpec::Output { dim: 2 }],
        };
        let mut params = Params::init(&spec, 3).unwrap();
        // b_ih update-gate slice -> large positive: z ~ 1
        params.tensors[2].data[2] = 40.0;
        params.tensors[2].data[3] = 40.0;
        let seq: Vec<Vec<f64>> = vec![vec![0.3, -0.2], vec![5.0, 1.0], vec![-3.0, 2.0]];
        let (_, cache) = head_forward(&spec, &params, &seq).unwrap();
        // h starts at 0 and stays there because z ~ 1
        for step in &cache.steps[0] {
            for k in 0..2 {
                assert!(step.z[k] > 1.0 - 1e-15);
                assert!(step.h_prev[k].abs() < 1e-15);
            }
        }
    }

    #[test]
    fn loss_cases() {
        let (l, _) = loss(LossKind::Mse, &[1.0, 2.0], Target::Values(&[1.0, 2.0])).unwrap();
        assert_eq!(l, 0.0);
        let (l, _) = loss(LossKind::Mae, &[1.0, 2.0], Target::Values(&[1.0, 2.0])).unwrap();
        assert_eq!(l, 0.0);
        let delta = 0.7;
        let (l, _) = loss(LossKind::Huber { delta }, &[2.0 * delta, -2.0 * delta], Target::Values(&[0.0, 0.0])).unwrap();
        assert!((l - delta * (2.0 * delta - delta / 2.0)).abs() < 1e-15);
        let (l, _) = loss(LossKind::CrossEntropy, &[0.3; 5], Target::Class(2)).unwrap();
        assert!((l - log(5.0)).abs() < 1e-14);
        assert!(matches!(
            loss(LossKind::CrossEntropy, &[0.0; 3], Target::Class(3)),
            Err(Error::ClassIndex { index: 3, classes: 3 })
        ));
        let (h, _) = loss(LossKind::Huber { delta: 1e9 }, &[0.1, -0.3], Target::Values(&[0.0, 0.0])).unwrap();
        let (m, _) = loss(LossKind::Mse, &[0.1, -0.3], Target::Values(&[0.0, 0.0])).unwrap();
        assert!((h - m / 2.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, -3.0, 2.5, 0.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fc_mse_gradient_closed_form() {
        let spec = dense_spec(3, 2);
        let params = Params::init(&spec, 9).unwrap();
        let x = [0.4, -1.2, 2.0];
        let target = [0.5, -0.5];
        let (y, cache) = forward(&spec, &params, &Tensor::new(vec![3], x.to_vec()).unwrap()).unwrap();
        let (_, g) = loss(LossKind::Mse, &y.data, Target::Values(&target)).unwrap();
        let grads = backward(&spec, &params, &cache, &Tensor::new(vec![2], g).unwrap()).unwrap();
        for o in 0..2 {
            let err = y.data[o] - target[o];
            for k in 0..3 {
                let expected = 2.0 * err * x[k] / 2.0;
                assert!((grads.tensors[0].data[o * 3 + k] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_loss_gradient_gives_zero_grads() {
        let spec = dense_spec(4, 3);
        let params = Params::init(&spec, 2).unwrap();
        let (_, cache) = forward(&spec, &params, &Tensor::new(vec![4], vec![1.0; 4]).unwrap()).unwrap();
        let grads = backward(&spec, &params, &cache, &Tensor::zeros(vec![3])).unwrap();
        assert!(grads.tensors.iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn cyclic_schedule_points() {
        let s = CyclicLr::new(1e-4, 1e-3, 100).unwrap();
        assert_eq!(s.lr(0), 1e-4);
        assert!((s.lr(100) - 1e-3).abs() < 1e-18);
        assert_eq!(s.lr(200), 1e-4);
        assert!((s.lr(50) - 5.5e-4).abs() < 1e-18);
        assert!((s.lr(150) - 5.5e-4).abs() < 1e-18);
        assert!(CyclicLr::new(1e-3, 1e-4, 100).is_err());
        assert!(CyclicLr::new(1e-4, 1e-3, 0).is_err());
    }

    #[test]
    fn sgd_cases() {
        let spec = dense_spec(1, 1);
        let mut params = Params::init(&spec, 0).unwrap();
        params.tensors[0].data = vec![1.0];
        params.tensors[1].data = vec![0.0];
        let mut grads = params.zeros_like();
        let mut state = OptimizerState::new(CyclicLr::constant(0.1), 0.0);
        sgd_step(&mut params, &grads, &mut state);
        assert_eq!(params.tensors[0].data, vec![1.0]);
        grads.tensors[0].data = vec![1.0];
        sgd_step(&mut params, &grads, &mut state);
        assert!((params.tensors[0].data[0] - 0.9).abs() < 1e-15);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn spec_validation() {
        let bad = NetworkSpec { input: vec![3], side_inputs: 0, layers: vec![LayerSpec::Dense { out_dim: 2, activation: Activation::Relu }] };
        assert!(bad.validate().is_err());
        let conv_after_flatten = NetworkSpec {
            input: vec![1, 8, 8],
            side_inputs: 0,
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Conv2d { out_channels: 2, kernel: 3, stride: 1, activation: Activation::Relu },
                LayerSpec::Output { dim: 1 },
            ],
        };
        assert!(matches!(conv_after_flatten.validate(), Err(Error::Shape { layer: 1, .. })));
        let spec = dense_spec(3, 2);
        let params = Params::init(&spec, 0).unwrap();
        let wrong = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        assert!(matches!(forward(&spec, &params, &wrong), Err(Error::Shape { .. })));
    }
}
