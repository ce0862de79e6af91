//! Network layers: convolution, activation + pooling, dropout, flatten.
//!
//! Layers are immutable during the forward pass: `forward` takes `&self` and
//! returns the output together with a cache holding exactly what `backward`
//! needs (pre-activation signs, pooling argmaxes, dropout masks). The caller
//! keeps each layer's input tensor and hands it back to `backward`, so caches
//! stay small.
//!
//! Convolutions absorb their bias as an extra constant-one input channel:
//! a layer mapping `C` channels to `O` channels stores weights of shape
//! `[O, C + 1, kh, kw]`, and the virtual channel `C` reads 1 at every tap,
//! including taps that fall into padding. The bias contribution per filter is
//! therefore the plain sum of its bias-channel taps, independent of position,
//! and the gradient of every bias tap is the same scalar.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::derive_stream;
use crate::tensor::Tensor;

/// Whether a forward pass is part of training or evaluation. Dropout is the
/// only layer that behaves differently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-call context for the forward pass. `step` feeds the dropout mask
/// derivation, so replaying a step re-creates its masks exactly.
#[derive(Debug, Clone, Copy)]
pub struct ForwardCtx {
    pub mode: Mode,
    pub step: u64,
}

impl ForwardCtx {
    pub fn eval() -> ForwardCtx {
        ForwardCtx {
            mode: Mode::Eval,
            step: 0,
        }
    }

    pub fn train(step: u64) -> ForwardCtx {
        ForwardCtx {
            mode: Mode::Train,
            step,
        }
    }
}

/// Convolution with stride, zero padding, and the absorbed bias channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    weights: Tensor,
    stride: usize,
    padding: usize,
}

impl ConvLayer {
    /// Zero-weight convolution; call [`init_gaussian`](Self::init_gaussian)
    /// before training.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<ConvLayer> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 {
            return Err(Error::InvalidConfig {
                detail: "convolution needs non-zero channels and kernel".into(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidConfig {
                detail: "convolution stride must be at least 1".into(),
            });
        }
        Ok(ConvLayer {
            weights: Tensor::zeros(&[out_channels, in_channels + 1, kernel, kernel])?,
            stride,
            padding,
        })
    }

    /// 1x1 convolution computing the identity map. Only square channel maps
    /// have one; `in_channels != out_channels` is rejected.
    pub fn identity(in_channels: usize, out_channels: usize) -> Result<ConvLayer> {
        if in_channels != out_channels {
            return Err(Error::IdentityInsertionImpossible {
                detail: format!(
                    "no identity map from {in_channels} to {out_channels} channels"
                ),
            });
        }
        let mut layer = ConvLayer::new(in_channels, out_channels, 1, 1, 0)?;
        let row = (in_channels + 1) as usize;
        for o in 0..out_channels {
            layer.weights.data_mut()[o * row + o] = 1.0;
        }
        Ok(layer)
    }

    /// He initialization: data taps from a Gaussian with standard deviation
    /// `sqrt(2 / fan_in)` where `fan_in = in_channels * kernel^2`; bias taps
    /// start at zero.
    pub fn init_gaussian<R: Rng>(&mut self, rng: &mut R) {
        let (out_c, in_c_plus, kh, kw) = self.dims();
        let in_c = in_c_plus - 1;
        let std = math::sqrt(2.0 / (in_c * kh * kw) as f64);
        let row = in_c_plus * kh * kw;
        let data_len = in_c * kh * kw;
        for o in 0..out_c {
            for r in 0..row {
                let v = &mut self.weights.data_mut()[o * row + r];
                *v = if r < data_len {
                    let g: f64 = rng.sample(StandardNormal);
                    g * std
                } else {
                    0.0
                };
            }
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1] - 1
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.weights.shape();
        (s[0], s[1], s[2], s[3])
    }

    fn spatial_out(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if k > ph || k > pw {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "kernel {k} exceeds padded input extent {ph}x{pw}"
                ),
            });
        }
        Ok(((ph - k) / self.stride + 1, (pw - k) / self.stride + 1))
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = rank4(input, "convolution input")?;
        if c != self.in_channels() {
            return Err(Error::ShapeMismatch {
                context: "convolution input",
                detail: format!("layer expects {} channels, got {c}", self.in_channels()),
            });
        }
        let (oh, ow) = self.spatial_out(h, w)?;
        let (out_c, _, kh, kw) = self.dims();
        let rows = c * kh * kw;
        let cols = oh * ow;
        let row_stride = (c + 1) * kh * kw;
        let mut out = Tensor::zeros(&[n, out_c, oh, ow])?;
        let mut patch = vec![0.0; rows * cols];
        // Bias per filter: the sum of its bias-channel taps (each reads 1).
        let bias: Vec<f64> = (0..out_c)
            .map(|o| {
                self.weights.data()[o * row_stride + rows..(o + 1) * row_stride]
                    .iter()
                    .sum()
            })
            .collect();
        for i in 0..n {
            let sample = &input.data()[i * c * h * w..(i + 1) * c * h * w];
            im2col(
                sample,
                c,
                h,
                w,
                kh,
                kw,
                self.stride,
                self.padding,
                oh,
                ow,
                &mut patch,
            );
            let out_sample = &mut out.data_mut()[i * out_c * cols..(i + 1) * out_c * cols];
            for o in 0..out_c {
                let w_row = &self.weights.data()[o * row_stride..o * row_stride + rows];
                let o_row = &mut out_sample[o * cols..(o + 1) * cols];
                o_row.fill(bias[o]);
                for (r, &wv) in w_row.iter().enumerate() {
                    let p_row = &patch[r * cols..(r + 1) * cols];
                    for (acc, &pv) in o_row.iter_mut().zip(p_row) {
                        *acc += wv * pv;
                    }
                }
            }
        }
        Ok(out)
    }

    fn backward(&self, input: &Tensor, d_out: &Tensor) -> Result<(Tensor, Tensor)> {
        let [n, c, h, w] = rank4(input, "convolution backward input")?;
        let (oh, ow) = self.spatial_out(h, w)?;
        let (out_c, _, kh, kw) = self.dims();
        if d_out.shape() != [n, out_c, oh, ow] {
            return Err(Error::CacheMismatch {
                detail: format!(
                    "convolution upstream gradient has shape {:?}, expected {:?}",
                    d_out.shape(),
                    [n, out_c, oh, ow]
                ),
            });
        }
        let rows = c * kh * kw;
        let cols = oh * ow;
        let row_stride = (c + 1) * kh * kw;
        let mut d_weights = Tensor::zeros(self.weights.shape())?;
        let mut d_input = Tensor::zeros(&[n, c, h, w])?;
        let mut patch = vec![0.0; rows * cols];
        let mut d_patch = vec![0.0; rows * cols];
        for i in 0..n {
            let sample = &input.data()[i * c * h * w..(i + 1) * c * h * w];
            im2col(
                sample,
                c,
                h,
                w,
                kh,
                kw,
                self.stride,
                self.padding,
                oh,
                ow,
                &mut patch,
            );
            let dq = &d_out.data()[i * out_c * cols..(i + 1) * out_c * cols];
            d_patch.fill(0.0);
            for o in 0..out_c {
                let dq_row = &dq[o * cols..(o + 1) * cols];
                // Data-tap weight gradients: dW[o, r] += <dq_o, patch_r>.
                let dw_row = &mut d_weights.data_mut()[o * row_stride..o * row_stride + rows];
                for (r, dwv) in dw_row.iter_mut().enumerate() {
                    let p_row = &patch[r * cols..(r + 1) * cols];
                    let mut acc = 0.0;
                    for (a, b) in dq_row.iter().zip(p_row) {
                        acc += a * b;
                    }
                    *dwv += acc;
                }
                // Every bias tap sees the same gradient: the sum over
                // positions of the upstream gradient for this filter.
                let dbias: f64 = dq_row.iter().sum();
                let bias_taps = &mut d_weights.data_mut()
                    [o * row_stride + rows..(o + 1) * row_stride];
                for t in bias_taps {
                    *t += dbias;
                }
                // Input gradients in patch space.
                let w_row = &self.weights.data()[o * row_stride..o * row_stride + rows];
                for (r, &wv) in w_row.iter().enumerate() {
                    let dp_row = &mut d_patch[r * cols..(r + 1) * cols];
                    for (acc, &g) in dp_row.iter_mut().zip(dq_row) {
                        *acc += wv * g;
                    }
                }
            }
            let d_sample = &mut d_input.data_mut()[i * c * h * w..(i + 1) * c * h * w];
            col2im(
                &d_patch,
                c,
                h,
                w,
                kh,
                kw,
                self.stride,
                self.padding,
                oh,
                ow,
                d_sample,
            );
        }
        Ok((d_input, d_weights))
    }
}

/// Unpacks a rank-4 shape or reports whose input was malformed.
fn rank4(t: &Tensor, context: &'static str) -> Result<[usize; 4]> {
    match t.shape() {
        [n, c, h, w] => Ok([*n, *c, *h, *w]),
        other => Err(Error::ShapeMismatch {
            context: "layer input",
            detail: format!("{context}: expected rank-4 tensor, got shape {other:?}"),
        }),
    }
}

/// Gathers sliding-window patches into a `[c*kh*kw, oh*ow]` matrix.
/// Out-of-bounds taps (padding) read zero.
#[allow(clippy::too_many_arguments)]
fn im2col(
    sample: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    let cols = oh * ow;
    for cc in 0..c {
        let plane = &sample[cc * h * w..(cc + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut out[((cc * kh + i) * kw + j) * cols..][..cols];
                for oy in 0..oh {
                    let iy = (oy * stride + i) as isize - padding as isize;
                    let r_off = oy * ow;
                    if iy < 0 || iy >= h as isize {
                        row[r_off..r_off + ow].fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + j) as isize - padding as isize;
                        row[r_off + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch-space gradient back to image space; the exact
/// adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im(
    d_patch: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    d_sample: &mut [f64],
) {
    let cols = oh * ow;
    for cc in 0..c {
        let plane = &mut d_sample[cc * h * w..(cc + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &d_patch[((cc * kh + i) * kw + j) * cols..][..cols];
                for oy in 0..oh {
                    let iy = (oy * stride + i) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + j) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Pointwise activation applied before pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    /// `max(0, x)`; the subgradient at exactly zero is taken as zero.
    Relu,
}

/// Spatial pooling applied after the activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    None,
    /// Windowed maximum; ties go to the first element in row-major window
    /// order, and the backward pass routes the gradient to that element.
    Max { window: usize, stride: usize },
    /// Windowed mean.
    Average { window: usize, stride: usize },
    /// Mean over the full spatial extent, producing `[n, c, 1, 1]`.
    GlobalAverage,
}

/// Activation followed by pooling, fused because the composition is what
/// every backbone uses between convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationPoolLayer {
    pub activation: Activation,
    pub pooling: Pooling,
}

impl ActivationPoolLayer {
    pub fn new(activation: Activation, pooling: Pooling) -> Result<ActivationPoolLayer> {
        if let Pooling::Max { window, stride } | Pooling::Average { window, stride } = pooling {
            if window == 0 || stride == 0 {
                return Err(Error::InvalidConfig {
                    detail: "pooling window and stride must be at least 1".into(),
                });
            }
        }
        Ok(ActivationPoolLayer {
            activation,
            pooling,
        })
    }

    fn pooled_shape(&self, n: usize, c: usize, h: usize, w: usize) -> Result<[usize; 4]> {
        match self.pooling {
            Pooling::None => Ok([n, c, h, w]),
            Pooling::GlobalAverage => Ok([n, c, 1, 1]),
            Pooling::Max { window, stride } | Pooling::Average { window, stride } => {
                if window > h || window > w {
                    return Err(Error::InvalidConfig {
                        detail: format!(
                            "pooling window {window} exceeds feature map extent {h}x{w}"
                        ),
                    });
                }
                Ok([n, c, (h - window) / stride + 1, (w - window) / stride + 1])
            }
        }
    }

    fn forward(&self, input: &Tensor) -> Result<(Tensor, Option<Vec<usize>>)> {
        let [n, c, h, w] = rank4(input, "activation input")?;
        let act = |v: f64| match self.activation {
            Activation::Identity => v,
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
        };
        let out_shape = self.pooled_shape(n, c, h, w)?;
        let mut out = Tensor::zeros(&out_shape)?;
        match self.pooling {
            Pooling::None => {
                for (o, &v) in out.data_mut().iter_mut().zip(input.data()) {
                    *o = act(v);
                }
                Ok((out, None))
            }
            Pooling::GlobalAverage => {
                let hw = (h * w) as f64;
                for i in 0..n {
                    for cc in 0..c {
                        let plane = &input.data()[(i * c + cc) * h * w..][..h * w];
                        let sum: f64 = plane.iter().map(|&v| act(v)).sum();
                        out.data_mut()[i * c + cc] = sum / hw;
                    }
                }
                Ok((out, None))
            }
            Pooling::Max { window, stride } => {
                let [_, _, ph, pw] = out_shape;
                let mut argmax = vec![0usize; n * c * ph * pw];
                for i in 0..n {
                    for cc in 0..c {
                        let plane = &input.data()[(i * c + cc) * h * w..][..h * w];
                        for py in 0..ph {
                            for px in 0..pw {
                                let mut best = f64::NEG_INFINITY;
                                let mut best_idx = 0usize;
                                for dy in 0..window {
                                    for dx in 0..window {
                                        let idx =
                                            (py * stride + dy) * w + px * stride + dx;
                                        let v = act(plane[idx]);
                                        if v > best {
                                            best = v;
                                            best_idx = idx;
                                        }
                                    }
                                }
                                let o_idx = ((i * c + cc) * ph + py) * pw + px;
                                out.data_mut()[o_idx] = best;
                                argmax[o_idx] = best_idx;
                            }
                        }
                    }
                }
                Ok((out, Some(argmax)))
            }
            Pooling::Average { window, stride } => {
                let [_, _, ph, pw] = out_shape;
                let win2 = (window * window) as f64;
                for i in 0..n {
                    for cc in 0..c {
                        let plane = &input.data()[(i * c + cc) * h * w..][..h * w];
                        for py in 0..ph {
                            for px in 0..pw {
                                let mut sum = 0.0;
                                for dy in 0..window {
                                    for dx in 0..window {
                                        sum += act(
                                            plane[(py * stride + dy) * w
                                                + px * stride
                                                + dx],
                                        );
                                    }
                                }
                                out.data_mut()[((i * c + cc) * ph + py) * pw + px] =
                                    sum / win2;
                            }
                        }
                    }
                }
                Ok((out, None))
            }
        }
    }

    fn backward(
        &self,
        input: &Tensor,
        argmax: Option<&Vec<usize>>,
        d_out: &Tensor,
    ) -> Result<Tensor> {
        let [n, c, h, w] = rank4(input, "activation backward input")?;
        let out_shape = self.pooled_shape(n, c, h, w)?;
        if d_out.shape() != out_shape {
            return Err(Error::CacheMismatch {
                detail: format!(
                    "pooling upstream gradient has shape {:?}, expected {:?}",
                    d_out.shape(),
                    out_shape
                ),
            });
        }
        // First route the gradient through the pooling, into activation space.
        let mut d_act = Tensor::zeros(&[n, c, h, w])?;
        match self.pooling {
            Pooling::None => {
                d_act.data_mut().copy_from_slice(d_out.data());
            }
            Pooling::GlobalAverage => {
                let hw = (h * w) as f64;
                for i in 0..n {
                    for cc in 0..c {
                        let g = d_out.data()[i * c + cc] / hw;
                        for v in &mut d_act.data_mut()[(i * c + cc) * h * w..][..h * w] {
                            *v += g;
                        }
                    }
                }
            }
            Pooling::Max { .. } => {
                let argmax = argmax.ok_or(Error::CacheMismatch {
                    detail: "max pooling backward needs the argmax cache".into(),
                })?;
                let [_, _, ph, pw] = out_shape;
                if argmax.len() != n * c * ph * pw {
                    return Err(Error::CacheMismatch {
                        detail: "argmax cache length does not match output shape".into(),
                    });
                }
                for (o_idx, &src_idx) in argmax.iter().enumerate() {
                    let plane = o_idx / (ph * pw);
                    d_act.data_mut()[plane * h * w + src_idx] += d_out.data()[o_idx];
                }
            }
            Pooling::Average { window, stride } => {
                let [_, _, ph, pw] = out_shape;
                let win2 = (window * window) as f64;
                for i in 0..n {
                    for cc in 0..c {
                        let plane =
                            &mut d_act.data_mut()[(i * c + cc) * h * w..][..h * w];
                        for py in 0..ph {
                            for px in 0..pw {
                                let g = d_out.data()
                                    [((i * c + cc) * ph + py) * pw + px]
                                    / win2;
                                for dy in 0..window {
                                    for dx in 0..window {
                                        plane[(py * stride + dy) * w
                                            + px * stride
                                            + dx] += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        // Then through the activation.
        if self.activation == Activation::Relu {
            for (g, &x) in d_act.data_mut().iter_mut().zip(input.data()) {
                if x <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        Ok(d_act)
    }
}

/// Inverted dropout: training scales surviving units by `1 / (1 - rate)` so
/// evaluation is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutLayer {
    rate: f64,
    seed: u64,
}

impl DropoutLayer {
    /// `rate` is the drop probability, in `[0, 1)`. The seed names this
    /// layer's mask stream; masks then depend only on `(seed, step)`.
    pub fn new(rate: f64, seed: u64) -> Result<DropoutLayer> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidConfig {
                detail: format!("dropout rate must be in [0, 1), got {rate}"),
            });
        }
        Ok(DropoutLayer { rate, seed })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Re-keys the mask stream; used when a network assigns per-layer seeds.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
    }

    fn forward(&self, input: &Tensor, ctx: &ForwardCtx) -> (Tensor, Option<Vec<f64>>) {
        if ctx.mode == Mode::Eval || self.rate == 0.0 {
            return (input.clone(), None);
        }
        let keep_scale = 1.0 / (1.0 - self.rate);
        let mut rng = derive_stream(self.seed, &[0x6472_6f70, ctx.step]);
        let mask: Vec<f64> = (0..input.len())
            .map(|_| {
                if rng.gen::<f64>() < self.rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let mut out = input.clone();
        for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        (out, Some(mask))
    }

    fn backward(&self, mask: Option<&Vec<f64>>, d_out: &Tensor) -> Result<Tensor> {
        match mask {
            None => Ok(d_out.clone()),
            Some(mask) => {
                if mask.len() != d_out.len() {
                    return Err(Error::CacheMismatch {
                        detail: "dropout mask length does not match gradient".into(),
                    });
                }
                let mut d_in = d_out.clone();
                for (g, &m) in d_in.data_mut().iter_mut().zip(mask) {
                    *g *= m;
                }
                Ok(d_in)
            }
        }
    }
}

/// Reshapes `[n, c, h, w]` to `[n, c*h*w]` for a classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlattenLayer;

/// A backbone layer. Only convolutions carry parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    ActPool(ActivationPoolLayer),
    Dropout(DropoutLayer),
    Flatten(FlattenLayer),
}

/// Opaque per-layer forward state consumed by the matching backward call.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv,
    ActPool { argmax: Option<Vec<usize>> },
    Dropout { mask: Option<Vec<f64>> },
    Flatten { input_shape: Vec<usize> },
}

impl Layer {
    /// Output shape for a given input shape, without running the layer.
    pub fn output_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv(conv) => {
                let [n, c, h, w] = shape4(input_shape)?;
                if c != conv.in_channels() {
                    return Err(Error::ShapeMismatch {
                        context: "convolution input",
                        detail: format!(
                            "layer expects {} channels, got {c}",
                            conv.in_channels()
                        ),
                    });
                }
                let (oh, ow) = conv.spatial_out(h, w)?;
                Ok(vec![n, conv.out_channels(), oh, ow])
            }
            Layer::ActPool(ap) => {
                let [n, c, h, w] = shape4(input_shape)?;
                Ok(ap.pooled_shape(n, c, h, w)?.to_vec())
            }
            Layer::Dropout(_) => Ok(input_shape.to_vec()),
            Layer::Flatten(_) => {
                let [n, c, h, w] = shape4(input_shape)?;
                Ok(vec![n, c * h * w])
            }
        }
    }

    /// Runs the layer, returning its output and the backward cache.
    pub fn forward(&self, input: &Tensor, ctx: &ForwardCtx) -> Result<(Tensor, LayerCache)> {
        match self {
            Layer::Conv(conv) => Ok((conv.forward(input)?, LayerCache::Conv)),
            Layer::ActPool(ap) => {
                let (out, argmax) = ap.forward(input)?;
                Ok((out, LayerCache::ActPool { argmax }))
            }
            Layer::Dropout(d) => {
                let (out, mask) = d.forward(input, ctx);
                Ok((out, LayerCache::Dropout { mask }))
            }
            Layer::Flatten(_) => {
                let [n, c, h, w] = rank4(input, "flatten input")?;
                let out = input.clone().reshaped(&[n, c * h * w])?;
                Ok((
                    out,
                    LayerCache::Flatten {
                        input_shape: vec![n, c, h, w],
                    },
                ))
            }
        }
    }

    /// Propagates `d_out` back through the layer. Returns the gradient with
    /// respect to the input and, for convolutions, the weight gradient.
    pub fn backward(
        &self,
        input: &Tensor,
        cache: &LayerCache,
        d_out: &Tensor,
    ) -> Result<(Tensor, Option<Tensor>)> {
        match (self, cache) {
            (Layer::Conv(conv), LayerCache::Conv) => {
                let (d_in, d_w) = conv.backward(input, d_out)?;
                Ok((d_in, Some(d_w)))
            }
            (Layer::ActPool(ap), LayerCache::ActPool { argmax }) => {
                Ok((ap.backward(input, argmax.as_ref(), d_out)?, None))
            }
            (Layer::Dropout(d), LayerCache::Dropout { mask }) => {
                Ok((d.backward(mask.as_ref(), d_out)?, None))
            }
            (Layer::Flatten(_), LayerCache::Flatten { input_shape }) => {
                if d_out.len() != input.len() {
                    return Err(Error::CacheMismatch {
                        detail: "flatten gradient length does not match input".into(),
                    });
                }
                Ok((d_out.clone().reshaped(input_shape)?, None))
            }
            _ => Err(Error::CacheMismatch {
                detail: "cache variant does not match layer type".into(),
            }),
        }
    }

    /// The layer's trainable weights, if any.
    pub fn weights(&self) -> Option<&Tensor> {
        match self {
            Layer::Conv(conv) => Some(conv.weights()),
            _ => None,
        }
    }

    pub fn weights_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Layer::Conv(conv) => Some(conv.weights_mut()),
            _ => None,
        }
    }
}

fn shape4(shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        [n, c, h, w] => Ok([*n, *c, *h, *w]),
        other => Err(Error::ShapeMismatch {
            context: "layer input",
            detail: format!("expected rank-4 shape, got {other:?}"),
        }),
    }
}

/// Inserts a function-preserving identity convolution at position `at` in a
/// layer stack (0 inserts before the first layer). The feature map at the
/// insertion point must be rank-4; flattened positions have no identity
/// convolution and are rejected.
pub fn insert_identity_layer(
    layers: &[Layer],
    input_shape: &[usize],
    at: usize,
) -> Result<Vec<Layer>> {
    if at > layers.len() {
        return Err(Error::InvalidConfig {
            detail: format!(
                "insertion index {at} out of range for {} layers",
                layers.len()
            ),
        });
    }
    let mut shape = input_shape.to_vec();
    for layer in &layers[..at] {
        shape = layer.output_shape(&shape)?;
    }
    let channels = match shape.as_slice() {
        [_, c, _, _] => *c,
        other => {
            return Err(Error::IdentityInsertionImpossible {
                detail: format!(
                    "feature map at position {at} has shape {other:?}; identity \
                     convolutions need a rank-4 map"
                ),
            })
        }
    };
    let mut out = layers.to_vec();
    out.insert(at, Layer::Conv(ConvLayer::identity(channels, channels)?));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;
    use rand::Rng;

    fn tensor4(shape: [usize; 4], values: Vec<f64>) -> Tensor {
        Tensor::from_values(&shape, values).unwrap()
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = derive_stream(seed, &[0xfeed]);
        let mut t = Tensor::zeros(shape).unwrap();
        for v in t.data_mut() {
            *v = rng.gen::<f64>() * 2.0 - 1.0;
        }
        t
    }

    #[test]
    fn conv_shape_formula() {
        // (28 + 2*2 - 5) / 2 + 1 = 14 in both extents.
        let conv = ConvLayer::new(1, 3, 5, 2, 2).unwrap();
        let shape = Layer::Conv(conv)
            .output_shape(&[7, 1, 28, 28])
            .unwrap();
        assert_eq!(shape, vec![7, 3, 14, 14]);
    }

    #[test]
    fn conv_rejects_kernel_larger_than_padded_input() {
        let conv = ConvLayer::new(1, 1, 5, 1, 0).unwrap();
        assert!(Layer::Conv(conv).output_shape(&[1, 1, 4, 4]).is_err());
    }

    #[test]
    fn conv_hand_computed_two_by_two() {
        // 3x3 ascending input, all-ones 2x2 kernel, zero bias taps:
        // windows sum to 12, 16, 24, 28.
        let mut conv = ConvLayer::new(1, 1, 2, 1, 0).unwrap();
        for (r, v) in conv.weights_mut().data_mut().iter_mut().enumerate() {
            *v = if r < 4 { 1.0 } else { 0.0 };
        }
        let input = tensor4(
            [1, 1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        );
        let (out, _) = Layer::Conv(conv)
            .forward(&input, &ForwardCtx::eval())
            .unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv_bias_channel_adds_constant_everywhere() {
        // Zero data taps, one bias tap set to 0.75: every output reads 0.75,
        // including positions whose data taps fall entirely in padding.
        let mut conv = ConvLayer::new(1, 1, 3, 1, 1).unwrap();
        conv.weights_mut().data_mut()[9] = 0.75; // first bias-channel tap
        let input = tensor4([1, 1, 3, 3], vec![5.0; 9]);
        let (out, _) = Layer::Conv(conv)
            .forward(&input, &ForwardCtx::eval())
            .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn identity_conv_is_bitwise_passthrough() {
        let conv = ConvLayer::identity(3, 3).unwrap();
        let input = random_tensor(&[2, 3, 5, 4], 71);
        let (out, _) = Layer::Conv(conv)
            .forward(&input, &ForwardCtx::eval())
            .unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn identity_conv_needs_square_channel_map() {
        assert!(matches!(
            ConvLayer::identity(2, 3),
            Err(Error::IdentityInsertionImpossible { .. })
        ));
    }

    #[test]
    fn relu_zeroes_negatives_and_their_gradients() {
        let layer = Layer::ActPool(
            ActivationPoolLayer::new(Activation::Relu, Pooling::None).unwrap(),
        );
        let input = tensor4([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]);
        let (out, cache) = layer.forward(&input, &ForwardCtx::eval()).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
        let d_out = tensor4([1, 1, 1, 3], vec![1.0, 1.0, 1.0]);
        let (d_in, _) = layer.backward(&input, &cache, &d_out).unwrap();
        assert_eq!(d_in.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn max_pool_picks_maximum_and_routes_gradient_to_it() {
        let layer = Layer::ActPool(
            ActivationPoolLayer::new(
                Activation::Identity,
                Pooling::Max {
                    window: 2,
                    stride: 2,
                },
            )
            .unwrap(),
        );
        let input = tensor4([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let (out, cache) = layer.forward(&input, &ForwardCtx::eval()).unwrap();
        assert_eq!(out.data(), &[4.0]);
        let d_out = tensor4([1, 1, 1, 1], vec![5.0]);
        let (d_in, _) = layer.backward(&input, &cache, &d_out).unwrap();
        assert_eq!(d_in.data(), &[0.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn max_pool_tie_goes_to_first_in_scan_order() {
        let layer = Layer::ActPool(
            ActivationPoolLayer::new(
                Activation::Identity,
                Pooling::Max {
                    window: 2,
                    stride: 2,
                },
            )
            .unwrap(),
        );
        let input = tensor4([1, 1, 2, 2], vec![7.0, 7.0, 7.0, 7.0]);
        let (_, cache) = layer.forward(&input, &ForwardCtx::eval()).unwrap();
        let d_out = tensor4([1, 1, 1, 1], vec![1.0]);
        let (d_in, _) = layer.backward(&input, &cache, &d_out).unwrap();
        assert_eq!(d_in.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_rejects_window_larger_than_input() {
        let layer = Layer::ActPool(
            ActivationPoolLayer::new(
                Activation::Identity,
                Pooling::Max {
                    window: 3,
                    stride: 1,
                },
            )
            .unwrap(),
        );
        assert!(layer.output_shape(&[1, 1, 2, 2]).is_err());
    }

    #[test]
    fn average_pool_forward_and_backward() {
        let layer = Layer::ActPool(
            ActivationPoolLayer::new(
                Activation::Identity,
                Pooling::Average {
                    window: 2,
                    stride: 2,
                },
            )
            .unwrap(),
        );
        let input = tensor4([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let (out, cache) = layer.forward(&input, &ForwardCtx::eval()).unwrap();
        assert_eq!(out.data(), &[2.5]);
        let d_out = tensor4([1, 1, 1, 1], vec![4.0]);
        let (d_in, _) = layer.backward(&input, &cache, &d_out).unwrap();
        assert_eq!(d_in.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn global_average_pool_collapses_spatial_extent() {
        let layer = Layer::ActPool(
            ActivationPoolLayer::new(Activation::Identity, Pooling::GlobalAverage).unwrap(),
        );
        let input = tensor4([1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0]);
        let (out, cache) = layer.forward(&input, &ForwardCtx::eval()).unwrap();
        assert_eq!(out.shape(), &[1, 2, 1, 1]);
        assert_eq!(out.data(), &[2.5, 10.0]);
        let d_out = Tensor::from_values(&[1, 2, 1, 1], vec![4.0, 8.0]).unwrap();
        let (d_in, _) = layer.backward(&input, &cache, &d_out).unwrap();
        assert_eq!(
            d_in.data(),
            &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]
        );
    }

    #[test]
    fn dropout_is_identity_in_eval_mode_and_at_rate_zero() {
        let input = random_tensor(&[2, 1, 3, 3], 5);
        let eval_layer = Layer::Dropout(DropoutLayer::new(0.5, 1).unwrap());
        let (out, _) = eval_layer.forward(&input, &ForwardCtx::eval()).unwrap();
        assert_eq!(out.data(), input.data());
        let zero_rate = Layer::Dropout(DropoutLayer::new(0.0, 1).unwrap());
        let (out, _) = zero_rate.forward(&input, &ForwardCtx::train(3)).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn dropout_rejects_rate_one() {
        assert!(DropoutLayer::new(1.0, 0).is_err());
        assert!(DropoutLayer::new(-0.1, 0).is_err());
    }

    #[test]
    fn dropout_mask_is_a_function_of_seed_and_step() {
        let layer = DropoutLayer::new(0.5, 42).unwrap();
        let input = tensor4([1, 1, 1, 8], vec![1.0; 8]);
        let (a, _) = layer.forward(&input, &ForwardCtx::train(7));
        let (b, _) = layer.forward(&input, &ForwardCtx::train(7));
        assert_eq!(a.data(), b.data(), "same step must reuse the same mask");
        let (c, _) = layer.forward(&input, &ForwardCtx::train(8));
        assert_ne!(a.data(), c.data(), "a new step draws a new mask");
    }

    #[test]
    fn dropout_training_output_is_unbiased() {
        let layer = DropoutLayer::new(0.3, 9).unwrap();
        let input = tensor4([1, 1, 1, 4], vec![1.0, -2.0, 0.5, 3.0]);
        let mut sums = [0.0f64; 4];
        let trials = 10_000u64;
        for step in 0..trials {
            let (out, _) = layer.forward(&input, &ForwardCtx::train(step));
            for (s, &v) in sums.iter_mut().zip(out.data()) {
                *s += v;
            }
        }
        for (s, &x) in sums.iter().zip(input.data()) {
            let mean = s / trials as f64;
            assert!(
                (mean - x).abs() <= 0.02 * x.abs().max(1.0),
                "empirical mean {mean} strays from {x}"
            );
        }
    }

    #[test]
    fn flatten_round_trips_through_backward() {
        let layer = Layer::Flatten(FlattenLayer);
        let input = random_tensor(&[2, 3, 2, 2], 13);
        let (out, cache) = layer.forward(&input, &ForwardCtx::eval()).unwrap();
        assert_eq!(out.shape(), &[2, 12]);
        let (d_in, _) = layer.backward(&input, &cache, &out).unwrap();
        assert_eq!(d_in.shape(), input.shape());
        assert_eq!(d_in.data(), input.data());
    }

    #[test]
    fn insert_identity_preserves_stack_output() {
        let mut conv = ConvLayer::new(2, 3, 3, 1, 1).unwrap();
        let mut rng = derive_stream(17, &[1]);
        conv.init_gaussian(&mut rng);
        let layers = vec![
            Layer::Conv(conv),
            Layer::ActPool(
                ActivationPoolLayer::new(
                    Activation::Relu,
                    Pooling::Max {
                        window: 2,
                        stride: 2,
                    },
                )
                .unwrap(),
            ),
        ];
        let input = random_tensor(&[2, 2, 6, 6], 23);
        let run = |stack: &[Layer]| {
            let mut z = input.clone();
            for layer in stack {
                let (out, _) = layer.forward(&z, &ForwardCtx::eval()).unwrap();
                z = out;
            }
            z
        };
        let base = run(&layers);
        for at in 0..=layers.len() {
            let extended = insert_identity_layer(&layers, &[2, 2, 6, 6], at).unwrap();
            assert_eq!(extended.len(), layers.len() + 1);
            let out = run(&extended);
            assert_eq!(
                out.data(),
                base.data(),
                "identity insertion at {at} changed the output"
            );
        }
    }

    #[test]
    fn insert_identity_rejects_flattened_positions() {
        let layers = vec![Layer::Flatten(FlattenLayer)];
        let err = insert_identity_layer(&layers, &[1, 2, 3, 3], 1).unwrap_err();
        assert!(matches!(err, Error::IdentityInsertionImpossible { .. }));
    }

    // Finite-difference oracle: a random linear functional of the layer
    // output, differentiated centrally with respect to each input element
    // and each weight.
    fn fd_check_layer(layer: &Layer, input: &Tensor, step: u64, tol: f64) {
        let ctx = ForwardCtx::train(step);
        let (out, cache) = layer.forward(input, &ctx).unwrap();
        let cotangent = random_tensor(out.shape(), 777);
        let (d_in, d_w) = layer.backward(input, &cache, &cotangent).unwrap();
        let objective = |probe_layer: &Layer, probe_in: &Tensor| -> f64 {
            let (o, _) = probe_layer.forward(probe_in, &ctx).unwrap();
            o.dot(&cotangent).unwrap()
        };
        let h = 1e-5;
        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[i] += h;
            let mut minus = input.clone();
            minus.data_mut()[i] -= h;
            let fd = (objective(layer, &plus) - objective(layer, &minus)) / (2.0 * h);
            let an = d_in.data()[i];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!(
                (an - fd).abs() / denom <= tol,
                "input grad [{i}]: analytic {an} vs FD {fd}"
            );
        }
        if let Some(d_w) = d_w {
            let w = layer.weights().unwrap().clone();
            for i in 0..w.len() {
                let perturb = |delta: f64| {
                    let mut probe = layer.clone();
                    probe.weights_mut().unwrap().data_mut()[i] = w.data()[i] + delta;
                    objective(&probe, input)
                };
                let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                let an = d_w.data()[i];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (an - fd).abs() / denom <= tol,
                    "weight grad [{i}]: analytic {an} vs FD {fd}"
                );
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut conv = ConvLayer::new(2, 3, 3, 2, 1).unwrap();
        let mut rng = derive_stream(31, &[2]);
        conv.init_gaussian(&mut rng);
        // Give the bias taps non-zero values so their gradient is exercised
        // from a generic point.
        for (i, v) in conv.weights_mut().data_mut().iter_mut().enumerate() {
            if *v == 0.0 {
                *v = 0.01 * ((i % 7) as f64 - 3.0);
            }
        }
        let input = random_tensor(&[2, 2, 5, 5], 37);
        fd_check_layer(&Layer::Conv(conv), &input, 0, 1e-6);
    }

    #[test]
    fn act_pool_backward_matches_finite_differences() {
        for pooling in [
            Pooling::None,
            Pooling::Max {
                window: 2,
                stride: 2,
            },
            Pooling::Average {
                window: 2,
                stride: 1,
            },
            Pooling::GlobalAverage,
        ] {
            let layer = Layer::ActPool(
                ActivationPoolLayer::new(Activation::Relu, pooling).unwrap(),
            );
            // Offset away from zero so no sample sits on the ReLU kink.
            let mut input = random_tensor(&[2, 2, 4, 4], 41);
            for v in input.data_mut() {
                *v += if *v >= 0.0 { 0.05 } else { -0.05 };
            }
            fd_check_layer(&layer, &input, 0, 1e-6);
        }
    }

    #[test]
    fn dropout_backward_matches_finite_differences() {
        let layer = Layer::Dropout(DropoutLayer::new(0.4, 3).unwrap());
        let input = random_tensor(&[1, 2, 3, 3], 43);
        // Mask depends only on (seed, step), so the FD probes see the same
        // dropped units as the analytic pass.
        fd_check_layer(&layer, &input, 11, 1e-6);
    }

    #[test]
    fn flatten_backward_matches_finite_differences() {
        fd_check_layer(
            &Layer::Flatten(FlattenLayer),
            &random_tensor(&[2, 2, 3, 2], 47),
            0,
            1e-6,
        );
    }
}
