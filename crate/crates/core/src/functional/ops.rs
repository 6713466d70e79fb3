//! Layer operations in real and fixed-point arithmetic.
//!
//! Real sums run input-channel-major, then kernel row, then kernel column.
//! Fixed-point sums are exact modulo 2^48, so their order is irrelevant.

use crate::error::{Error, Result};
use crate::fixedpoint::{activate_fixed, average_fixed, residual_add_fixed, Accumulator, OpStats, QEpilogue};
use crate::network::{Activation, LayerKind};
use crate::tensor::{Kernel, QKernel, QTensor, Tensor, TensorShape};

/// Output geometry of a padded, strided sliding window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub input: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output: usize,
}

impl Window {
    pub fn new(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if !(1..=2).contains(&stride) {
            return Err(Error::Shape(format!("stride {stride} not in {{1, 2}}")));
        }
        if kernel == 0 || input + 2 * padding < kernel {
            return Err(Error::Shape(format!(
                "kernel {kernel} does not fit input {input} with padding {padding}"
            )));
        }
        let output = (input + 2 * padding - kernel) / stride + 1;
        Ok(Window {
            input,
            kernel,
            stride,
            padding,
            output,
        })
    }

    /// Input coordinate of tap `k` for output `o`, if inside the image.
    #[inline]
    pub fn source(&self, o: usize, k: usize) -> Option<usize> {
        (o * self.stride + k)
            .checked_sub(self.padding)
            .filter(|&i| i < self.input)
    }
}

fn check_bias(len: Option<usize>, channels: usize) -> Result<()> {
    match len {
        Some(l) if l != channels => Err(Error::Shape(format!(
            "bias has {l} entries for {channels} output channels"
        ))),
        _ => Ok(()),
    }
}

fn check_epilogue(ep: &QEpilogue, channels: usize) -> Result<()> {
    check_bias(ep.bias.map(|b| b.data.len()), channels)?;
    if let Some(n) = ep.norm {
        if n.scale.data.len() != channels || n.shift.data.len() != channels {
            return Err(Error::Shape(format!("norm vectors do not cover {channels} channels")));
        }
    }
    Ok(())
}

fn check_kernel<T: Copy>(k: &Kernel<T>, out: usize, inp: usize, what: &str) -> Result<()> {
    if k.out_channels != out || k.in_channels != inp {
        return Err(Error::Shape(format!(
            "{what} kernel is {}x{}x{}x{}, expected {out} outputs over {inp} inputs",
            k.out_channels, k.in_channels, k.size, k.size
        )));
    }
    Ok(())
}

fn out_shape(side: usize, channels: usize) -> TensorShape {
    TensorShape {
        height: side,
        width: side,
        channels,
    }
}

/// Standard convolution: every output channel sums over every input channel.
pub fn conv_standard(
    input: &Tensor,
    weights: &Kernel<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
    stats: &mut OpStats,
) -> Result<Tensor> {
    let n = input.shape.channels;
    let p = weights.out_channels;
    check_kernel(weights, p, n, "standard")?;
    check_bias(bias.map(<[f64]>::len), p)?;
    let win = Window::new(input.shape.side(), weights.size, stride, padding)?;
    let k = win.kernel;
    let shape = out_shape(win.output, p);
    let mut out = Tensor::zeros(shape);
    for o in 0..p {
        for y in 0..win.output {
            for x in 0..win.output {
                let mut acc = 0.0;
                for c in 0..n {
                    for kh in 0..k {
                        let Some(iy) = win.source(y, kh) else { continue };
                        for kw in 0..k {
                            if let Some(ix) = win.source(x, kw) {
                                acc += input.at(c, iy, ix) * weights.at(o, c, kh, kw);
                            }
                        }
                    }
                }
                out.data[shape.index(o, y, x)] = acc + bias.map_or(0.0, |b| b[o]);
            }
        }
    }
    stats.macs += (shape.len() * n * k * k) as u64;
    Ok(out)
}

/// Depthwise convolution: output channel `c` sees only input channel `c`.
pub fn conv_depthwise(
    input: &Tensor,
    weights: &Kernel<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
    stats: &mut OpStats,
) -> Result<Tensor> {
    let n = input.shape.channels;
    check_kernel(weights, n, 1, "depthwise")?;
    check_bias(bias.map(<[f64]>::len), n)?;
    let win = Window::new(input.shape.side(), weights.size, stride, padding)?;
    let k = win.kernel;
    let shape = out_shape(win.output, n);
    let mut out = Tensor::zeros(shape);
    for c in 0..n {
        for y in 0..win.output {
            for x in 0..win.output {
                let mut acc = 0.0;
                for kh in 0..k {
                    let Some(iy) = win.source(y, kh) else { continue };
                    for kw in 0..k {
                        if let Some(ix) = win.source(x, kw) {
                            acc += input.at(c, iy, ix) * weights.at(c, 0, kh, kw);
                        }
                    }
                }
                out.data[shape.index(c, y, x)] = acc + bias.map_or(0.0, |b| b[c]);
            }
        }
    }
    stats.macs += (shape.len() * k * k) as u64;
    Ok(out)
}

/// 1x1 convolution.
pub fn conv_pointwise_direct(
    input: &Tensor,
    weights: &Kernel<f64>,
    bias: Option<&[f64]>,
    stats: &mut OpStats,
) -> Result<Tensor> {
    let n = input.shape.channels;
    let p = weights.out_channels;
    check_kernel(weights, p, n, "pointwise")?;
    if weights.size != 1 {
        return Err(Error::Shape("pointwise kernel must be 1x1".into()));
    }
    check_bias(bias.map(<[f64]>::len), p)?;
    let pixels = input.shape.pixels();
    let shape = out_shape(input.shape.side(), p);
    let mut out = Tensor::zeros(shape);
    for o in 0..p {
        let dst = &mut out.data[o * pixels..(o + 1) * pixels];
        for c in 0..n {
            let w = weights.data[o * n + c];
            let src = &input.data[c * pixels..(c + 1) * pixels];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s * w;
            }
        }
        if let Some(b) = bias {
            dst.iter_mut().for_each(|d| *d += b[o]);
        }
    }
    stats.macs += (pixels * n * p) as u64;
    Ok(out)
}

/// Fixed-point standard convolution; one requantization per output element.
pub fn conv_standard_q(
    input: &QTensor,
    weights: &QKernel,
    ep: &QEpilogue,
    stride: usize,
    padding: usize,
    stats: &mut OpStats,
) -> Result<QTensor> {
    let n = input.shape.channels;
    let w = &weights.kernel;
    let p = w.out_channels;
    check_kernel(w, p, n, "standard")?;
    check_epilogue(ep, p)?;
    let win = Window::new(input.shape.side(), w.size, stride, padding)?;
    let k = win.kernel;
    let acc_frac = input.params.frac_bits() + weights.params.frac_bits();
    let shape = out_shape(win.output, p);
    let mut out = QTensor::zeros(shape, ep.out);
    for o in 0..p {
        for y in 0..win.output {
            for x in 0..win.output {
                let mut sum = 0i64;
                for c in 0..n {
                    for kh in 0..k {
                        let Some(iy) = win.source(y, kh) else { continue };
                        for kw in 0..k {
                            if let Some(ix) = win.source(x, kw) {
                                sum += input.at(c, iy, ix) as i64 * w.at(o, c, kh, kw) as i64;
                            }
                        }
                    }
                }
                let acc = Accumulator::wrap(sum as i128);
                out.data[shape.index(o, y, x)] = ep.apply(acc, o, acc_frac, stats);
            }
        }
    }
    stats.macs += (shape.len() * n * k * k) as u64;
    Ok(out)
}

pub fn conv_depthwise_q(
    input: &QTensor,
    weights: &QKernel,
    ep: &QEpilogue,
    stride: usize,
    padding: usize,
    stats: &mut OpStats,
) -> Result<QTensor> {
    let n = input.shape.channels;
    let w = &weights.kernel;
    check_kernel(w, n, 1, "depthwise")?;
    check_epilogue(ep, n)?;
    let win = Window::new(input.shape.side(), w.size, stride, padding)?;
    let k = win.kernel;
    let acc_frac = input.params.frac_bits() + weights.params.frac_bits();
    let shape = out_shape(win.output, n);
    let mut out = QTensor::zeros(shape, ep.out);
    for c in 0..n {
        for y in 0..win.output {
            for x in 0..win.output {
                let mut sum = 0i64;
                for kh in 0..k {
                    let Some(iy) = win.source(y, kh) else { continue };
                    for kw in 0..k {
                        if let Some(ix) = win.source(x, kw) {
                            sum += input.at(c, iy, ix) as i64 * w.at(c, 0, kh, kw) as i64;
                        }
                    }
                }
                let acc = Accumulator::wrap(sum as i128);
                out.data[shape.index(c, y, x)] = ep.apply(acc, c, acc_frac, stats);
            }
        }
    }
    stats.macs += (shape.len() * k * k) as u64;
    Ok(out)
}

/// Raw pointwise sums for output channels `outs` over input channels `ins`,
/// laid out `[out - outs.start][pixel]`.
pub(crate) fn pointwise_sums(
    input: &QTensor,
    w: &Kernel<i16>,
    ins: std::ops::Range<usize>,
    outs: std::ops::Range<usize>,
) -> Vec<i64> {
    let pixels = input.shape.pixels();
    let n = w.in_channels;
    let mut sums = vec![0i64; outs.len() * pixels];
    for (row, o) in outs.enumerate() {
        let dst = &mut sums[row * pixels..(row + 1) * pixels];
        for c in ins.clone() {
            let wv = w.data[o * n + c] as i64;
            let src = &input.data[c * pixels..(c + 1) * pixels];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s as i64 * wv;
            }
        }
    }
    sums
}

pub(crate) fn check_pointwise_q(input: &QTensor, weights: &QKernel, ep: &QEpilogue) -> Result<()> {
    let w = &weights.kernel;
    check_kernel(w, w.out_channels, input.shape.channels, "pointwise")?;
    if w.size != 1 {
        return Err(Error::Shape("pointwise kernel must be 1x1".into()));
    }
    check_epilogue(ep, w.out_channels)
}

pub fn conv_pointwise_direct_q(
    input: &QTensor,
    weights: &QKernel,
    ep: &QEpilogue,
    stats: &mut OpStats,
) -> Result<QTensor> {
    check_pointwise_q(input, weights, ep)?;
    let w = &weights.kernel;
    let (n, p) = (w.in_channels, w.out_channels);
    let pixels = input.shape.pixels();
    let acc_frac = input.params.frac_bits() + weights.params.frac_bits();
    let sums = pointwise_sums(input, w, 0..n, 0..p);
    let data = sums
        .iter()
        .enumerate()
        .map(|(i, &s)| ep.apply(Accumulator::wrap(s as i128), i / pixels, acc_frac, stats))
        .collect();
    stats.macs += (pixels * n * p) as u64;
    QTensor::from_vec(out_shape(input.shape.side(), p), data, ep.out)
}

pub fn relu(input: &Tensor, act: Activation) -> Tensor {
    let f = |x: f64| match act {
        Activation::None => x,
        Activation::Relu => x.max(0.0),
        Activation::Relu6 => x.clamp(0.0, 6.0),
    };
    Tensor {
        shape: input.shape,
        data: input.data.iter().map(|&x| f(x)).collect(),
    }
}

pub fn relu_q(input: &QTensor, act: Activation) -> QTensor {
    QTensor {
        shape: input.shape,
        data: input
            .data
            .iter()
            .map(|&q| activate_fixed(q, act, input.params))
            .collect(),
        params: input.params,
    }
}

/// Pool windows start at `o * stride` with no padding; a window hanging over
/// the bottom or right edge is clipped to the image.
fn pool_geometry(shape: TensorShape, kind: LayerKind, window: usize, stride: usize) -> Result<usize> {
    if !kind.is_pool() {
        return Err(Error::invalid(format!("{kind} is not a pooling kind")));
    }
    if window == 0 || stride == 0 || stride > window {
        return Err(Error::Shape(format!("pool window {window} with stride {stride}")));
    }
    if window > shape.side() {
        return Err(Error::Shape(format!("pool window {window} larger than input {shape}")));
    }
    Ok(shape.side().div_ceil(stride))
}

fn pool_span(o: usize, stride: usize, window: usize, side: usize) -> std::ops::Range<usize> {
    let start = o * stride;
    start..(start + window).min(side)
}

pub fn pool(input: &Tensor, kind: LayerKind, window: usize, stride: usize, stats: &mut OpStats) -> Result<Tensor> {
    let side = input.shape.side();
    let out_side = pool_geometry(input.shape, kind, window, stride)?;
    let shape = out_shape(out_side, input.shape.channels);
    let mut out = Tensor::zeros(shape);
    for c in 0..shape.channels {
        for y in 0..out_side {
            for x in 0..out_side {
                let (ys, xs) = (pool_span(y, stride, window, side), pool_span(x, stride, window, side));
                let count = ys.len() * xs.len();
                let mut acc = if kind == LayerKind::MaxPool {
                    f64::NEG_INFINITY
                } else {
                    0.0
                };
                for iy in ys {
                    for ix in xs.clone() {
                        let v = input.at(c, iy, ix);
                        acc = if kind == LayerKind::MaxPool {
                            acc.max(v)
                        } else {
                            acc + v
                        };
                    }
                }
                if kind == LayerKind::AvgPool {
                    acc /= count as f64;
                    stats.macs += count as u64;
                }
                out.data[shape.index(c, y, x)] = acc;
            }
        }
    }
    Ok(out)
}

/// Fixed-point pooling at the input scale; averages use the quantized reciprocal.
pub fn pool_q(input: &QTensor, kind: LayerKind, window: usize, stride: usize, stats: &mut OpStats) -> Result<QTensor> {
    let side = input.shape.side();
    let out_side = pool_geometry(input.shape, kind, window, stride)?;
    let shape = out_shape(out_side, input.shape.channels);
    let mut out = QTensor::zeros(shape, input.params);
    for c in 0..shape.channels {
        for y in 0..out_side {
            for x in 0..out_side {
                let (ys, xs) = (pool_span(y, stride, window, side), pool_span(x, stride, window, side));
                let count = ys.len() * xs.len();
                let mut sum = 0i64;
                let mut max = i16::MIN;
                for iy in ys {
                    for ix in xs.clone() {
                        let v = input.at(c, iy, ix);
                        sum += v as i64;
                        max = max.max(v);
                    }
                }
                out.data[shape.index(c, y, x)] = if kind == LayerKind::MaxPool {
                    max
                } else {
                    stats.macs += count as u64;
                    average_fixed(sum, count, stats)
                };
            }
        }
    }
    Ok(out)
}

pub fn residual_add(main: &Tensor, shortcut: &Tensor) -> Result<Tensor> {
    if main.shape != shortcut.shape {
        return Err(Error::Shape(format!(
            "residual add of {} and {}",
            main.shape, shortcut.shape
        )));
    }
    Ok(Tensor {
        shape: main.shape,
        data: main.data.iter().zip(&shortcut.data).map(|(a, b)| a + b).collect(),
    })
}

pub fn residual_add_q(main: &QTensor, shortcut: &QTensor, stats: &mut OpStats) -> Result<QTensor> {
    residual_add_fixed(main, shortcut, stats)
}
