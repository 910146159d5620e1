//! Layer kinds with analytic backward passes.
//!
//! Spatial tensors are `[batch, channels, height, width]`; flat tensors are
//! `[batch, features]`. Every layer caches what its backward pass needs during
//! `forward` and accumulates parameter gradients into its `Param`s.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// "Same" padding: output size is `ceil(input / stride)`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    /// Adjoint of a same-padded `Conv2d` producing `output_hw`.
    Conv2dTranspose {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        output_hw: [usize; 2],
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    BatchNorm {
        channels: usize,
        momentum: f64,
        epsilon: f64,
    },
    Relu,
    Softmax,
    GlobalAvgPool,
    Flatten,
    Reshape {
        channels: usize,
        height: usize,
        width: usize,
    },
    /// `o = H_alpha(y) * z + H_beta(y)` with dense maps from the conditioning
    /// vector `y` to the latent width.
    Film {
        conditioning: usize,
        width: usize,
    },
}

/// Trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    fn new(shape: Vec<usize>, value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { shape, value, grad }
    }

    fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    /// Uniform in `±sqrt(6 / fan_in)`.
    fn fan_in_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        Self::new(shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

pub(crate) trait Layer: Send + Sync {
    fn spec(&self) -> LayerSpec;

    /// Output shape for a per-example input shape (batch dimension excluded).
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>>;

    fn forward(&mut self, x: &Tensor, cond: Option<&Tensor>, train: bool) -> Result<Tensor>;

    /// Inference-mode forward without caching.
    fn infer(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor>;

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor>;

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    /// Non-trainable state saved with checkpoints.
    fn buffers(&self) -> Vec<&Vec<f64>> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        Vec::new()
    }

    fn clear_cache(&mut self);

    fn clone_box(&self) -> Box<dyn Layer>;

    fn uses_conditioning(&self) -> bool {
        false
    }
}

pub(crate) fn build_layer(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> Result<Box<dyn Layer>> {
    let positive = |v: usize, what: &str| {
        if v == 0 {
            Err(Error::Shape(format!("{what} must be positive")))
        } else {
            Ok(())
        }
    };
    Ok(match *spec {
        LayerSpec::Conv2d { in_channels, out_channels, kernel, stride } => {
            positive(in_channels, "conv input channels")?;
            positive(out_channels, "conv output channels")?;
            positive(kernel, "kernel")?;
            positive(stride, "stride")?;
            Box::new(Conv2d::new(in_channels, out_channels, kernel, stride, rng))
        }
        LayerSpec::Conv2dTranspose { in_channels, out_channels, kernel, stride, output_hw } => {
            positive(in_channels, "transposed conv input channels")?;
            positive(out_channels, "transposed conv output channels")?;
            positive(kernel, "kernel")?;
            positive(stride, "stride")?;
            positive(output_hw[0].min(output_hw[1]), "transposed conv output size")?;
            Box::new(Conv2dTranspose::new(in_channels, out_channels, kernel, stride, output_hw, rng))
        }
        LayerSpec::Dense { inputs, outputs } => {
            positive(inputs, "dense inputs")?;
            positive(outputs, "dense outputs")?;
            Box::new(Dense::new(inputs, outputs, rng))
        }
        LayerSpec::BatchNorm { channels, momentum, epsilon } => {
            positive(channels, "batch norm channels")?;
            if !(0.0..1.0).contains(&momentum) || !(epsilon > 0.0) {
                return Err(Error::InvalidParameter(
                    "batch norm momentum must be in [0, 1) and epsilon positive".into(),
                ));
            }
            Box::new(BatchNorm::new(channels, momentum, epsilon))
        }
        LayerSpec::Relu => Box::new(Relu { cache: None }),
        LayerSpec::Softmax => Box::new(Softmax { cache: None }),
        LayerSpec::GlobalAvgPool => Box::new(GlobalAvgPool { cache: None }),
        LayerSpec::Flatten => Box::new(Flatten { cache: None }),
        LayerSpec::Reshape { channels, height, width } => Box::new(Reshape { channels, height, width }),
        LayerSpec::Film { conditioning, width } => {
            positive(conditioning, "FiLM conditioning width")?;
            positive(width, "FiLM latent width")?;
            Box::new(Film::new(conditioning, width, rng))
        }
    })
}

fn expect_rank(x: &Tensor, rank: usize, what: &str) -> Result<()> {
    if x.shape().len() != rank {
        return Err(Error::Shape(format!("{what} expects a rank-{rank} tensor, got shape {:?}", x.shape())));
    }
    Ok(())
}

fn expect_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("gradient shape {:?} does not match {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Convolution geometry

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Geometry {
    /// Same padding over an `h x w` input.
    fn same(channels: usize, h: usize, w: usize, k: usize, s: usize) -> Self {
        let oh = h.div_ceil(s);
        let ow = w.div_ceil(s);
        let pad_h = ((oh - 1) * s + k).saturating_sub(h);
        let pad_w = ((ow - 1) * s + k).saturating_sub(w);
        Self { channels, h, w, k, s, oh, ow, pad_top: pad_h / 2, pad_left: pad_w / 2 }
    }

    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn input_len(&self) -> usize {
        self.channels * self.h * self.w
    }

    /// Source index for output position (oy, ox) and kernel tap (ky, kx).
    #[inline]
    fn source(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.s + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.s + kx).checked_sub(self.pad_left)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }
}

fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        dst[oy * g.ow + ox] = match g.source(oy, ky, ox, kx) {
                            Some((iy, ix)) => plane[iy * g.w + ix],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geometry, x: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some((iy, ix)) = g.source(oy, ky, ox, kx) {
                            plane[iy * g.w + ix] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone)]
pub(crate) struct Conv2d {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    weight: Param,
    bias: Param,
    cache: Option<Tensor>,
}

impl Conv2d {
    fn new(ci: usize, co: usize, k: usize, s: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = ci * k * k;
        Self {
            in_channels: ci,
            out_channels: co,
            kernel: k,
            stride: s,
            weight: Param::fan_in_uniform(vec![co, ci, k, k], fan_in, rng),
            bias: Param::zeros(vec![co]),
            cache: None,
        }
    }

    fn geometry(&self, x: &Tensor) -> Result<Geometry> {
        expect_rank(x, 4, "conv2d")?;
        if x.shape()[1] != self.in_channels {
            return Err(Error::Shape(format!("conv2d expects {} channels, got {}", self.in_channels, x.shape()[1])));
        }
        Ok(Geometry::same(self.in_channels, x.shape()[2], x.shape()[3], self.kernel, self.stride))
    }

    fn compute(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.geometry(x)?;
        let (n, co, p, q) = (x.batch(), self.out_channels, g.positions(), g.rows());
        let mut out = vec![0.0; n * co * p];
        let mut cols = vec![0.0; q * p];
        for (i, y) in out.chunks_exact_mut(co * p).enumerate() {
            im2col(x.example(i), &g, &mut cols);
            for (c, row) in y.chunks_exact_mut(p).enumerate() {
                row.fill(self.bias.value[c]);
            }
            gemm(co, q, p, &self.weight.value, false, &cols, false, 1.0, y);
        }
        Tensor::new(vec![n, co, g.oh, g.ow], out)
    }
}

impl Layer for Conv2d {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Conv2d {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            [c, h, w] if *c == self.in_channels && *h > 0 && *w > 0 => {
                Ok(vec![self.out_channels, h.div_ceil(self.stride), w.div_ceil(self.stride)])
            }
            _ => Err(Error::Shape(format!("conv2d with {} input channels cannot take {input:?}", self.in_channels))),
        }
    }

    fn forward(&mut self, x: &Tensor, _cond: Option<&Tensor>, _train: bool) -> Result<Tensor> {
        let y = self.compute(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor, _cond: Option<&Tensor>) -> Result<Tensor> {
        self.compute(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or(Error::NoCache)?;
        let g = self.geometry(x)?;
        let (n, co, p, q) = (x.batch(), self.out_channels, g.positions(), g.rows());
        if grad.shape() != [n, co, g.oh, g.ow] {
            return Err(Error::Shape(format!("conv2d gradient has shape {:?}", grad.shape())));
        }
        let mut dx = vec![0.0; n * g.input_len()];
        let mut cols = vec![0.0; q * p];
        let mut dcols = vec![0.0; q * p];
        for i in 0..n {
            let dy = grad.example(i);
            im2col(x.example(i), &g, &mut cols);
            gemm(co, p, q, dy, false, &cols, true, 1.0, &mut self.weight.grad);
            for (c, row) in dy.chunks_exact(p).enumerate() {
                self.bias.grad[c] += row.iter().sum::<f64>();
            }
            gemm(q, co, p, &self.weight.value, true, dy, false, 0.0, &mut dcols);
            col2im(&dcols, &g, &mut dx[i * g.input_len()..(i + 1) * g.input_len()]);
        }
        Tensor::new(x.shape().to_vec(), dx)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone)]
pub(crate) struct Conv2dTranspose {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    output_hw: [usize; 2],
    /// `[in_channels, out_channels, k, k]`
    weight: Param,
    bias: Param,
    cache: Option<Tensor>,
}

impl Conv2dTranspose {
    fn new(ci: usize, co: usize, k: usize, s: usize, output_hw: [usize; 2], rng: &mut ChaCha8Rng) -> Self {
        // Each output pixel receives about ci * (k / s)^2 contributions.
        let fan_in = (ci * k * k / (s * s)).max(1);
        Self {
            in_channels: ci,
            out_channels: co,
            kernel: k,
            stride: s,
            output_hw,
            weight: Param::fan_in_uniform(vec![ci, co, k, k], fan_in, rng),
            bias: Param::zeros(vec![co]),
            cache: None,
        }
    }

    /// Geometry of the adjoint convolution (output space -> input space).
    fn geometry(&self) -> Geometry {
        Geometry::same(self.out_channels, self.output_hw[0], self.output_hw[1], self.kernel, self.stride)
    }

    fn check_input(&self, x: &Tensor) -> Result<Geometry> {
        expect_rank(x, 4, "conv2d_transpose")?;
        let g = self.geometry();
        if x.shape()[1..] != [self.in_channels, g.oh, g.ow] {
            return Err(Error::Shape(format!(
                "conv2d_transpose to {:?} expects input [{}, {}, {}], got {:?}",
                self.output_hw,
                self.in_channels,
                g.oh,
                g.ow,
                &x.shape()[1..]
            )));
        }
        Ok(g)
    }

    fn compute(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.check_input(x)?;
        let (n, ci, p, q) = (x.batch(), self.in_channels, g.positions(), g.rows());
        let out_len = g.input_len();
        let mut out = vec![0.0; n * out_len];
        let mut cols = vec![0.0; q * p];
        for (i, y) in out.chunks_exact_mut(out_len).enumerate() {
            gemm(q, ci, p, &self.weight.value, true, x.example(i), false, 0.0, &mut cols);
            let plane = g.h * g.w;
            for (c, chunk) in y.chunks_exact_mut(plane).enumerate() {
                chunk.fill(self.bias.value[c]);
            }
            col2im(&cols, &g, y);
        }
        Tensor::new(vec![n, self.out_channels, g.h, g.w], out)
    }
}

impl Layer for Conv2dTranspose {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Conv2dTranspose {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            output_hw: self.output_hw,
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let g = self.geometry();
        if input != [self.in_channels, g.oh, g.ow] {
            return Err(Error::Shape(format!("conv2d_transpose to {:?} cannot take {input:?}", self.output_hw)));
        }
        Ok(vec![self.out_channels, self.output_hw[0], self.output_hw[1]])
    }

    fn forward(&mut self, x: &Tensor, _cond: Option<&Tensor>, _train: bool) -> Result<Tensor> {
        let y = self.compute(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor, _cond: Option<&Tensor>) -> Result<Tensor> {
        self.compute(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or(Error::NoCache)?;
        let g = self.geometry();
        let (n, ci, p, q) = (x.batch(), self.in_channels, g.positions(), g.rows());
        if grad.shape() != [n, self.out_channels, g.h, g.w] {
            return Err(Error::Shape(format!("conv2d_transpose gradient has shape {:?}", grad.shape())));
        }
        let mut dx = vec![0.0; n * ci * p];
        let mut dcols = vec![0.0; q * p];
        let plane = g.h * g.w;
        for i in 0..n {
            let dy = grad.example(i);
            for (c, chunk) in dy.chunks_exact(plane).enumerate() {
                self.bias.grad[c] += chunk.iter().sum::<f64>();
            }
            im2col(dy, &g, &mut dcols);
            gemm(ci, q, p, &self.weight.value, false, &dcols, false, 0.0, &mut dx[i * ci * p..(i + 1) * ci * p]);
            gemm(ci, p, q, x.example(i), false, &dcols, true, 1.0, &mut self.weight.grad);
        }
        Tensor::new(x.shape().to_vec(), dx)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone)]
pub(crate) struct Dense {
    inputs: usize,
    outputs: usize,
    /// `[outputs, inputs]`
    weight: Param,
    bias: Param,
    cache: Option<Tensor>,
}

impl Dense {
    fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::fan_in_uniform(vec![outputs, inputs], inputs, rng),
            bias: Param::zeros(vec![outputs]),
            cache: None,
        }
    }

    fn compute(&self, x: &Tensor) -> Result<Tensor> {
        expect_rank(x, 2, "dense")?;
        if x.shape()[1] != self.inputs {
            return Err(Error::Shape(format!("dense expects {} inputs, got {}", self.inputs, x.shape()[1])));
        }
        let n = x.batch();
        let mut out: Vec<f64> = (0..n).flat_map(|_| self.bias.value.iter().copied()).collect();
        gemm(n, self.inputs, self.outputs, x.data(), false, &self.weight.value, true, 1.0, &mut out);
        Tensor::new(vec![n, self.outputs], out)
    }
}

impl Layer for Dense {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Dense { inputs: self.inputs, outputs: self.outputs }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input != [self.inputs] {
            return Err(Error::Shape(format!("dense with {} inputs cannot take {input:?}", self.inputs)));
        }
        Ok(vec![self.outputs])
    }

    fn forward(&mut self, x: &Tensor, _cond: Option<&Tensor>, _train: bool) -> Result<Tensor> {
        let y = self.compute(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor, _cond: Option<&Tensor>) -> Result<Tensor> {
        self.compute(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or(Error::NoCache)?;
        let n = x.batch();
        if grad.shape() != [n, self.outputs] {
            return Err(Error::Shape(format!("dense gradient has shape {:?}", grad.shape())));
        }
        gemm(self.outputs, n, self.inputs, grad.data(), true, x.data(), false, 1.0, &mut self.weight.grad);
        for row in grad.data().chunks_exact(self.outputs) {
            self.bias.grad.iter_mut().zip(row).for_each(|(b, g)| *b += g);
        }
        let mut dx = vec![0.0; n * self.inputs];
        gemm(n, self.outputs, self.inputs, grad.data(), false, &self.weight.value, false, 0.0, &mut dx);
        Tensor::new(vec![n, self.inputs], dx)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone)]
struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
    batch_stats: bool,
}

/// Per-channel normalization. Training mode normalizes with the biased batch
/// statistics and updates running averages as
/// `running = momentum * running + (1 - momentum) * batch`.
#[derive(Clone)]
pub(crate) struct BatchNorm {
    channels: usize,
    momentum: f64,
    epsilon: f64,
    gamma: Param,
    beta: Param,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    cache: Option<BnCache>,
}

impl BatchNorm {
    fn new(channels: usize, momentum: f64, epsilon: f64) -> Self {
        Self {
            channels,
            momentum,
            epsilon,
            gamma: Param::new(vec![channels], vec![1.0; channels]),
            beta: Param::zeros(vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            cache: None,
        }
    }

    /// (batch, spatial extent per channel)
    fn layout(&self, x: &Tensor) -> Result<(usize, usize)> {
        if x.shape().len() < 2 || x.shape()[1] != self.channels {
            return Err(Error::Shape(format!(
                "batch norm over {} channels cannot take {:?}",
                self.channels,
                x.shape()
            )));
        }
        Ok((x.batch(), x.shape()[2..].iter().product()))
    }

    fn normalize(&self, x: &Tensor, mean: &[f64], inv_std: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n, sp) = self.layout(x)?;
        let mut xhat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for b in 0..n {
            for c in 0..self.channels {
                let off = (b * self.channels + c) * sp;
                for i in off..off + sp {
                    let h = (x.data()[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    y[i] = self.gamma.value[c] * h + self.beta.value[c];
                }
            }
        }
        Ok((xhat, y))
    }

    fn running_inv_std(&self) -> Vec<f64> {
        self.running_var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect()
    }

    /// Biased per-channel mean and variance of a batch.
    pub(crate) fn batch_statistics(x: &Tensor, channels: usize) -> (Vec<f64>, Vec<f64>) {
        let n = x.batch();
        let sp: usize = x.shape()[2..].iter().product();
        let count = (n * sp) as f64;
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for b in 0..n {
            for (c, m) in mean.iter_mut().enumerate() {
                let off = (b * channels + c) * sp;
                *m += x.data()[off..off + sp].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for b in 0..n {
            for (c, v) in var.iter_mut().enumerate() {
                let off = (b * channels + c) * sp;
                *v += x.data()[off..off + sp].iter().map(|x| (x - mean[c]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        (mean, var)
    }
}

impl Layer for BatchNorm {
    fn spec(&self) -> LayerSpec {
        LayerSpec::BatchNorm { channels: self.channels, momentum: self.momentum, epsilon: self.epsilon }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.first() != Some(&self.channels) {
            return Err(Error::Shape(format!("batch norm over {} channels cannot take {input:?}", self.channels)));
        }
        Ok(input.to_vec())
    }

    fn forward(&mut self, x: &Tensor, _cond: Option<&Tensor>, train: bool) -> Result<Tensor> {
        self.layout(x)?;
        let (mean, inv_std) = if train {
            let (mean, var) = Self::batch_statistics(x, self.channels);
            let m = self.momentum;
            for c in 0..self.channels {
                self.running_mean[c] = m * self.running_mean[c] + (1.0 - m) * mean[c];
                self.running_var[c] = m * self.running_var[c] + (1.0 - m) * var[c];
            }
            let inv = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
            (mean, inv)
        } else {
            (self.running_mean.clone(), self.running_inv_std())
        };
        let (xhat, y) = self.normalize(x, &mean, &inv_std)?;
        self.cache = Some(BnCache { xhat, inv_std, shape: x.shape().to_vec(), batch_stats: train });
        Tensor::new(x.shape().to_vec(), y)
    }

    fn infer(&self, x: &Tensor, _cond: Option<&Tensor>) -> Result<Tensor> {
        let (_, y) = self.normalize(x, &self.running_mean, &self.running_inv_std())?;
        Tensor::new(x.shape().to_vec(), y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or(Error::NoCache)?;
        if grad.shape() != cache.shape.as_slice() {
            return Err(Error::Shape(format!("batch norm gradient has shape {:?}", grad.shape())));
        }
        let n = cache.shape[0];
        let sp: usize = cache.shape[2..].iter().product();
        let count = (n * sp) as f64;
        let dy = grad.data();
        let mut dx = vec![0.0; dy.len()];
        for c in 0..self.channels {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for b in 0..n {
                let off = (b * self.channels + c) * sp;
                for (g, xh) in dy[off..off + sp].iter().zip(&cache.xhat[off..off + sp]) {
                    sum_dy += g;
                    sum_dy_xhat += g * xh;
                }
            }
            self.gamma.grad[c] += sum_dy_xhat;
            self.beta.grad[c] += sum_dy;
            let gamma = self.gamma.value[c];
            let inv = cache.inv_std[c];
            for b in 0..n {
                let off = (b * self.channels + c) * sp;
                for i in off..off + sp {
                    dx[i] = if cache.batch_stats {
                        gamma * inv / count * (count * dy[i] - sum_dy - cache.xhat[i] * sum_dy_xhat)
                    } else {
                        gamma * inv * dy[i]
                    };
                }
            }
        }
        Tensor::new(cache.shape.clone(), dx)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<&Vec<f64>> {
        vec![&self.running_mean, &self.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone)]
pub(crate) struct Relu {
    cache: Option<Tensor>,
}

impl Layer for Relu {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Relu
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }

    fn forward(&mut self, x: &Tensor, _cond: Option<&Tensor>, _train: bool) -> Result<Tensor> {
        self.cache = Some(x.clone());
        Ok(x.map(|v| v.max(0.0)))
    }

    fn infer(&self, x: &Tensor, _cond: Option<&Tensor>) -> Result<Tensor> {
        Ok(x.map(|v| v.max(0.0)))
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or(Error::NoCache)?;
        expect_same_shape(grad, x)?;
        let dx = grad.data().iter().zip(x.data()).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
        Tensor::new(x.shape().to_vec(), dx)
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

#[derive(Clone)]
pub(crate) struct Softmax {
    cache: Option<Tensor>,
}

impl Softmax {
    fn compute(x: &Tensor) -> Result<Tensor> {
        expect_rank(x, 2, "softmax")?;
        let width = x.shape()[1];
        let data = x.data().chunks_exact(width).flat_map(softmax).collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

impl Layer for Softmax {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Softmax
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 1 {
            return Err(Error::Shape(format!("softmax expects a flat input, got {input:?}")));
        }
        Ok(input.to_vec())
    }

    fn forward(&mut self, x: &Tensor, _cond: Option<&Tensor>, _train: bool) -> Result<Tensor> {
        let y = Self::compute(x)?;
        self.cache = Some(y.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor, _cond: Option<&Tensor>) -> Result<Tensor> {
        Self::compute(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let y = self.cache.as_ref().ok_or(Error::NoCache)?;
        expect_same_shape(grad, y)?;
        let width = y.shape()[1];
        let mut dx = Vec::with_capacity(y.len());
        for (yr, gr) in y.data().chunks_exact(width).zip(grad.data().chunks_exact(width)) {
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            dx.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
        }
        Tensor::new(y.shape().to_vec(), dx)
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone)]
pub(crate) struct GlobalAvgPool {
    cache: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    fn compute(x: &Tensor) -> Result<Tensor> {
        expect_rank(x, 4, "global average pool")?;
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let sp = x.shape()[2] * x.shape()[3];
        let data = x.data().chunks_exact(sp).map(|p| p.iter().sum::<f64>() / sp as f64).collect();
        Tensor::new(vec![n, c], data)
    }
}

impl Layer for GlobalAvgPool {
    fn spec(&self) -> LayerSpec {
        LayerSpec::GlobalAvgPool
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            [c, _, _] => Ok(vec![*c]),
            _ => Err(Error::Shape(format!("global average pool cannot take {input:?}"))),
        }
    }

    fn forward(&mut self, x: &Tensor, _cond: Option<&Tensor>, _train: bool) -> Result<Tensor> {
        let y = Self::compute(x)?;
        self.cache = Some(x.shape().to_vec());
        Ok(y)
    }

    fn infer(&self, x: &Tensor, _cond: Option<&Tensor>) -> Result<Tensor> {
        Self::compute(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = self.cache.as_ref().ok_or(Error::NoCache)?;
        if grad.shape() != &shape[..2] {
            return Err(Error::Shape(format!("pool gradient has shape {:?}", grad.shape())));
        }
        let sp = shape[2] * shape[3];
        let dx = grad.data().iter().flat_map(|g| std::iter::repeat_n(g / sp as f64, sp)).collect();
        Tensor::new(shape.clone(), dx)
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone)]
pub(crate) struct Flatten {
    cache: Option<Vec<usize>>,
}

impl Layer for Flatten {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Flatten
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(vec![input.iter().product()])
    }

    fn forward(&mut self, x: &Tensor, cond: Option<&Tensor>, _train: bool) -> Result<Tensor> {
        self.cache = Some(x.shape().to_vec());
        self.infer(x, cond)
    }

    fn infer(&self, x: &Tensor, _cond: Option<&Tensor>) -> Result<Tensor> {
        x.clone().reshape(vec![x.batch(), x.example_len()])
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = self.cache.as_ref().ok_or(Error::NoCache)?;
        grad.clone().reshape(shape.clone())
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

#[derive(Clone)]
pub(crate) struct Reshape {
    channels: usize,
    height: usize,
    width: usize,
}

impl Layer for Reshape {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Reshape { channels: self.channels, height: self.height, width: self.width }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input != [self.channels * self.height * self.width] {
            return Err(Error::Shape(format!("reshape cannot take {input:?}")));
        }
        Ok(vec![self.channels, self.height, self.width])
    }

    fn forward(&mut self, x: &Tensor, cond: Option<&Tensor>, _train: bool) -> Result<Tensor> {
        self.infer(x, cond)
    }

    fn infer(&self, x: &Tensor, _cond: Option<&Tensor>) -> Result<Tensor> {
        expect_rank(x, 2, "reshape")?;
        x.clone().reshape(vec![x.batch(), self.channels, self.height, self.width])
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        grad.clone().reshape(vec![grad.batch(), self.channels * self.height * self.width])
    }

    fn clear_cache(&mut self) {}

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone)]
struct FilmCache {
    z: Tensor,
    cond: Tensor,
    alpha: Vec<f64>,
}

#[derive(Clone)]
pub(crate) struct Film {
    conditioning: usize,
    width: usize,
    alpha_weight: Param,
    alpha_bias: Param,
    beta_weight: Param,
    beta_bias: Param,
    cache: Option<FilmCache>,
}

impl Film {
    fn new(conditioning: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conditioning,
            width,
            alpha_weight: Param::fan_in_uniform(vec![width, conditioning], conditioning, rng),
            alpha_bias: Param::zeros(vec![width]),
            beta_weight: Param::fan_in_uniform(vec![width, conditioning], conditioning, rng),
            beta_bias: Param::zeros(vec![width]),
            cache: None,
        }
    }

    /// `(alpha, beta)` for every row of `cond`, each `[n, width]`.
    fn modulation(&self, cond: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let n = cond.batch();
        let mut alpha: Vec<f64> = (0..n).flat_map(|_| self.alpha_bias.value.iter().copied()).collect();
        let mut beta: Vec<f64> = (0..n).flat_map(|_| self.beta_bias.value.iter().copied()).collect();
        gemm(n, self.conditioning, self.width, cond.data(), false, &self.alpha_weight.value, true, 1.0, &mut alpha);
        gemm(n, self.conditioning, self.width, cond.data(), false, &self.beta_weight.value, true, 1.0, &mut beta);
        (alpha, beta)
    }

    fn check<'a>(&self, z: &Tensor, cond: Option<&'a Tensor>) -> Result<&'a Tensor> {
        let cond = cond.ok_or(Error::MissingConditioning)?;
        expect_rank(z, 2, "FiLM latent")?;
        if z.shape()[1] != self.width {
            return Err(Error::Shape(format!("FiLM expects latent width {}, got {}", self.width, z.shape()[1])));
        }
        if cond.shape() != [z.batch(), self.conditioning] {
            return Err(Error::Shape(format!(
                "FiLM conditioning must be [{}, {}], got {:?}",
                z.batch(),
                self.conditioning,
                cond.shape()
            )));
        }
        Ok(cond)
    }

    fn compute(&self, z: &Tensor, cond: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let (alpha, beta) = self.modulation(cond);
        let out = z.data().iter().zip(&alpha).zip(&beta).map(|((z, a), b)| a * z + b).collect();
        Ok((Tensor::new(z.shape().to_vec(), out)?, alpha))
    }

    pub(crate) fn parameters(&self) -> [&Param; 4] {
        [&self.alpha_weight, &self.alpha_bias, &self.beta_weight, &self.beta_bias]
    }
}

impl Layer for Film {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Film { conditioning: self.conditioning, width: self.width }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input != [self.width] {
            return Err(Error::Shape(format!("FiLM of width {} cannot take {input:?}", self.width)));
        }
        Ok(input.to_vec())
    }

    fn forward(&mut self, x: &Tensor, cond: Option<&Tensor>, _train: bool) -> Result<Tensor> {
        let cond = self.check(x, cond)?;
        let (y, alpha) = self.compute(x, cond)?;
        self.cache = Some(FilmCache { z: x.clone(), cond: cond.clone(), alpha });
        Ok(y)
    }

    fn infer(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let cond = self.check(x, cond)?;
        Ok(self.compute(x, cond)?.0)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or(Error::NoCache)?;
        expect_same_shape(grad, &cache.z)?;
        let n = grad.batch();
        let dy = grad.data();
        let dz: Vec<f64> = dy.iter().zip(&cache.alpha).map(|(g, a)| g * a).collect();
        let dalpha: Vec<f64> = dy.iter().zip(cache.z.data()).map(|(g, z)| g * z).collect();
        let (w, k) = (self.width, self.conditioning);
        gemm(w, n, k, &dalpha, true, cache.cond.data(), false, 1.0, &mut self.alpha_weight.grad);
        gemm(w, n, k, dy, true, cache.cond.data(), false, 1.0, &mut self.beta_weight.grad);
        for (da, db) in dalpha.chunks_exact(w).zip(dy.chunks_exact(w)) {
            self.alpha_bias.grad.iter_mut().zip(da).for_each(|(b, g)| *b += g);
            self.beta_bias.grad.iter_mut().zip(db).for_each(|(b, g)| *b += g);
        }
        Tensor::new(grad.shape().to_vec(), dz)
    }

    fn params(&self) -> Vec<&Param> {
        self.parameters().to_vec()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.alpha_weight, &mut self.alpha_bias, &mut self.beta_weight, &mut self.beta_bias]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }

    fn uses_conditioning(&self) -> bool {
        true
    }
}
