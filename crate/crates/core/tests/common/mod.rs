//! Naive reference arithmetic written without the library's fixed-point
//! helpers, plus seeded generators for random layers.

#![allow(dead_code)]

use std::cmp::Ordering;

use dscsim_core::fixedpoint::{QKernel, QNorm, QParams, QTensor, QVector};
use dscsim_core::network::{Activation, LayerKind, NetworkSpec};
use dscsim_core::tensor::{Kernel, TensorShape};
use dscsim_core::weights::{QLayerWeights, QNetworkWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Two's-complement wrap into 48 bits via Euclidean remainder.
pub fn wrap48(v: i128) -> i128 {
    let m = 1i128 << 48;
    let r = v.rem_euclid(m);
    if r >= m / 2 {
        r - m
    } else {
        r
    }
}

/// `v / 2^s`, ties to even; `s < 0` multiplies.
pub fn div_pow2(v: i128, s: i32) -> i128 {
    if s <= 0 {
        return v * 2i128.pow((-s) as u32);
    }
    let d = 2i128.pow(s as u32);
    let q = v.div_euclid(d);
    let r = v.rem_euclid(d);
    match (2 * r).cmp(&d) {
        Ordering::Less => q,
        Ordering::Greater => q + 1,
        Ordering::Equal if q % 2 == 0 => q,
        Ordering::Equal => q + 1,
    }
}

pub fn clamp16(v: i128) -> i16 {
    v.clamp(i16::MIN as i128, i16::MAX as i128) as i16
}

pub fn quantize_real(x: f64, e: i32) -> i16 {
    let r = (x * 2f64.powi(e)).round_ties_even();
    r.clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Everything after the raw sum: bias, norm, requantize, activation.
#[derive(Clone, Copy)]
pub struct Post<'a> {
    pub bias: Option<&'a QVector>,
    pub norm: Option<&'a QNorm>,
    pub act: Activation,
    pub out: QParams,
}

impl Post<'_> {
    pub fn of(w: &QLayerWeights, act: Activation) -> Post<'_> {
        Post {
            bias: w.bias.as_ref(),
            norm: w.norm.as_ref(),
            act,
            out: w.out,
        }
    }

    pub fn apply(&self, raw: i128, ch: usize, frac: i32) -> i16 {
        let mut acc = wrap48(raw);
        if let Some(b) = self.bias {
            acc = wrap48(acc + div_pow2(b.data[ch] as i128, b.params.frac_bits() - frac));
        }
        let (mut v, mut f) = (acc, frac);
        if let Some(n) = self.norm {
            f = frac + n.scale.params.frac_bits();
            v = acc * n.scale.data[ch] as i128 + div_pow2(n.shift.data[ch] as i128, n.shift.params.frac_bits() - f);
        }
        let q = clamp16(div_pow2(v, f - self.out.frac_bits()));
        match self.act {
            Activation::None => q,
            Activation::Relu => q.max(0),
            Activation::Relu6 => q.clamp(0, quantize_real(6.0, self.out.frac_bits())),
        }
    }
}

fn pixel(x: &QTensor, c: usize, y: isize, xx: isize) -> i128 {
    let m = x.shape.side() as isize;
    if y < 0 || xx < 0 || y >= m || xx >= m {
        0
    } else {
        x.data[(c * m as usize + y as usize) * m as usize + xx as usize] as i128
    }
}

/// SAME-padded convolution; a depthwise kernel pairs output `o` with input `o`.
pub fn conv(x: &QTensor, w: &QKernel, stride: usize, depthwise: bool, post: &Post) -> QTensor {
    let m = x.shape.side();
    let k = w.kernel.size;
    let pad = ((k - 1) / 2) as isize;
    let mo = m.div_ceil(stride);
    let p = w.kernel.out_channels;
    let frac = x.params.frac_bits() + w.params.frac_bits();
    let mut data = Vec::with_capacity(p * mo * mo);
    for o in 0..p {
        let ins: Vec<usize> = if depthwise {
            vec![o]
        } else {
            (0..x.shape.channels).collect()
        };
        for oy in 0..mo {
            for ox in 0..mo {
                let mut sum = 0i128;
                for (ci, &c) in ins.iter().enumerate() {
                    let wi = if depthwise { 0 } else { ci };
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad;
                            let ix = (ox * stride + kx) as isize - pad;
                            let wv = w.kernel.data[((o * w.kernel.in_channels + wi) * k + ky) * k + kx] as i128;
                            sum += pixel(x, c, iy, ix) * wv;
                        }
                    }
                }
                data.push(post.apply(sum, o, frac));
            }
        }
    }
    QTensor {
        shape: TensorShape {
            height: mo,
            width: mo,
            channels: p,
        },
        data,
        params: post.out,
    }
}

pub fn residual(main: &QTensor, sc: &QTensor) -> QTensor {
    let shift = sc.params.frac_bits() - main.params.frac_bits();
    let data = main
        .data
        .iter()
        .zip(&sc.data)
        .map(|(&a, &b)| clamp16(a as i128 + clamp16(div_pow2(b as i128, shift)) as i128))
        .collect();
    QTensor { data, ..main.clone() }
}

/// Pooling windows start at `o * stride` and are clipped at the far edges.
pub fn pool(x: &QTensor, kind: LayerKind, window: usize, stride: usize) -> QTensor {
    let m = x.shape.side();
    let mo = m.div_ceil(stride);
    let mut data = Vec::new();
    for c in 0..x.shape.channels {
        for oy in 0..mo {
            for ox in 0..mo {
                let mut vals = Vec::new();
                for y in oy * stride..(oy * stride + window).min(m) {
                    for xx in ox * stride..(ox * stride + window).min(m) {
                        vals.push(x.data[(c * m + y) * m + xx] as i128);
                    }
                }
                data.push(if kind == LayerKind::MaxPool {
                    *vals.iter().max().unwrap() as i16
                } else {
                    let n = vals.len() as i128;
                    let recip = ((1i128 << 33) / n + 1) / 2;
                    clamp16(div_pow2(vals.iter().sum::<i128>() * recip, 32))
                });
            }
        }
    }
    QTensor {
        shape: TensorShape {
            height: mo,
            width: mo,
            channels: x.shape.channels,
        },
        data,
        params: x.params,
    }
}

/// Whole-network fixed-point inference from the naive layer oracles.
pub fn run_network(net: &NetworkSpec, w: &QNetworkWeights, input: &QTensor) -> QTensor {
    let mut acts: Vec<QTensor> = Vec::new();
    let mut x = input.clone();
    for (i, layer) in net.layers.iter().enumerate() {
        // The shortcut source is the input of layer `i - back`.
        let sc = net
            .shortcut_source(i)
            .map(|s| if s == 0 { input.clone() } else { acts[s - 1].clone() });
        let y = if layer.kind.is_pool() {
            pool(&x, layer.kind, layer.kernel, layer.stride)
        } else {
            let lw = w.layers[i].as_ref().expect("conv layer weights");
            let post = Post::of(lw, layer.activation);
            conv(
                &x,
                &lw.kernel,
                layer.stride,
                layer.kind == LayerKind::DepthwiseConv,
                &post,
            )
        };
        x = match sc {
            Some(s) => residual(&y, &s),
            None => y,
        };
        acts.push(x.clone());
    }
    x
}

/// Outputs that are neither zero nor saturated; guards against vacuous cases.
pub fn interior(q: &QTensor) -> usize {
    q.data
        .iter()
        .filter(|&&v| v != 0 && v != i16::MIN && v != i16::MAX)
        .count()
}

pub fn params(r: &mut impl Rng, lo: i32, hi: i32) -> QParams {
    QParams::new(r.random_range(lo..=hi)).unwrap()
}

/// Mostly small values with occasional full-range ones, so saturation and
/// wrap paths are exercised without dominating.
pub fn value(r: &mut impl Rng) -> i16 {
    if r.random_bool(0.05) {
        r.random()
    } else {
        r.random_range(-2048..=2048)
    }
}

pub fn qtensor(r: &mut impl Rng, side: usize, channels: usize) -> QTensor {
    let shape = TensorShape::square(side, channels).unwrap();
    QTensor {
        shape,
        data: (0..shape.len()).map(|_| value(r)).collect(),
        params: params(r, 6, 14),
    }
}

pub fn qkernel(r: &mut impl Rng, out: usize, inp: usize, k: usize) -> QKernel {
    let data = (0..out * inp * k * k).map(|_| value(r)).collect();
    QKernel {
        kernel: Kernel::new(out, inp, k, data).unwrap(),
        params: params(r, 8, 15),
    }
}

pub fn qvector(r: &mut impl Rng, n: usize) -> QVector {
    QVector {
        data: (0..n).map(|_| value(r)).collect(),
        params: params(r, -2, 15),
    }
}

pub fn activation(r: &mut impl Rng) -> Activation {
    [Activation::None, Activation::Relu, Activation::Relu6][r.random_range(0..3)]
}

/// Random kernel, bias, norm and output scale for `channels` outputs.
pub fn layer_weights(r: &mut impl Rng, channels: usize, inp: usize, k: usize) -> QLayerWeights {
    let kernel = qkernel(r, channels, inp, k);
    let bias = r.random_bool(0.5).then(|| qvector(r, channels));
    let norm = r.random_bool(0.5).then(|| QNorm {
        scale: qvector(r, channels),
        shift: qvector(r, channels),
    });
    QLayerWeights {
        kernel,
        bias,
        norm,
        out: params(r, -4, 15),
    }
}
