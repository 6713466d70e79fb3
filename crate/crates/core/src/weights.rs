//! Per-layer parameters: seeded generation, quantization and the bundle file.
//!
//! Bundle layout (little-endian): `b"DSCB"`, version `u16`, layer count `u32`,
//! input frac bits `i8`, then per layer its index `u32` and a kind byte
//! (`0` no parameters, `1` convolution). Convolution layers continue with a
//! flags byte (bit 0 bias, bit 1 norm), output frac bits `i8`, the kernel
//! record, the optional bias record and the optional norm scale and shift records.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fixedpoint::format::{read_exact, read_kernel, read_u32, read_vector, write_kernel, write_vector};
use crate::fixedpoint::{
    choose_scale, dequantize_kernel, dequantize_vector, fold_batchnorm, quantize_kernel, quantize_vector, BatchNorm,
    FoldedBn, OpStats, QEpilogue, QNorm,
};
use crate::functional::execute_layer;
use crate::network::{Activation, LayerKind, LayerSpec, NetworkSpec};
use crate::tensor::{Kernel, QKernel, QParams, QVector, Tensor, TensorShape};

pub const BUNDLE_MAGIC: [u8; 4] = *b"DSCB";
pub const BUNDLE_VERSION: u16 = 1;

/// Batch-norm epsilon used by generated weights.
pub const GENERATED_BN_EPS: f64 = 1e-3;

/// Real parameters of one convolution; batch norm is already folded.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub kernel: Kernel<f64>,
    pub bias: Option<Vec<f64>>,
    pub norm: Option<FoldedBn>,
}

/// One entry per layer; pooling layers have `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub layers: Vec<Option<LayerWeights>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QLayerWeights {
    pub kernel: QKernel,
    pub bias: Option<QVector>,
    pub norm: Option<QNorm>,
    /// Scale of the layer output (after any residual add).
    pub out: QParams,
}

impl QLayerWeights {
    pub fn epilogue(&self, activation: Activation) -> QEpilogue<'_> {
        QEpilogue {
            bias: self.bias.as_ref(),
            norm: self.norm.as_ref(),
            activation,
            out: self.out,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetworkWeights {
    /// Scale the network input is quantized to.
    pub input: QParams,
    pub layers: Vec<Option<QLayerWeights>>,
}

/// `(out, in, size)` of the kernel a layer expects, or `None` for pooling.
pub fn kernel_dims(layer: &LayerSpec) -> Option<(usize, usize, usize)> {
    let n = layer.input.channels;
    match layer.kind {
        LayerKind::StandardConv => Some((layer.output_channels(), n, layer.kernel)),
        LayerKind::DepthwiseConv => Some((n, 1, layer.kernel)),
        LayerKind::PointwiseConv => Some((layer.output_channels(), n, 1)),
        LayerKind::AvgPool | LayerKind::MaxPool => None,
    }
}

fn check_layer(
    index: usize,
    layer: &LayerSpec,
    present: bool,
    dims: Option<(usize, usize, usize)>,
    vectors: &[(&str, usize)],
) -> Result<()> {
    let mismatch = |reason: String| Error::WeightMismatch { index, reason };
    match (kernel_dims(layer), dims) {
        (None, None) if !present => Ok(()),
        (None, _) => Err(mismatch(format!("{} layers take no parameters", layer.kind))),
        (Some(_), None) => Err(Error::MissingWeights(index)),
        (Some(want), Some(got)) => {
            if want != got {
                return Err(mismatch(format!("kernel {got:?} but the layer needs {want:?}")));
            }
            for &(name, len) in vectors {
                if len != want.0 {
                    return Err(mismatch(format!("{name} has {len} entries, expected {}", want.0)));
                }
            }
            Ok(())
        }
    }
}

impl NetworkWeights {
    pub fn check(&self, net: &NetworkSpec) -> Result<()> {
        if self.layers.len() < net.layers.len() {
            return Err(Error::MissingWeights(self.layers.len()));
        }
        if self.layers.len() > net.layers.len() {
            return Err(Error::WeightMismatch {
                index: net.layers.len(),
                reason: "more parameter sets than layers".into(),
            });
        }
        for (i, (layer, w)) in net.layers.iter().zip(&self.layers).enumerate() {
            let dims = w
                .as_ref()
                .map(|w| (w.kernel.out_channels, w.kernel.in_channels, w.kernel.size));
            let mut vectors = Vec::new();
            if let Some(w) = w {
                if let Some(b) = &w.bias {
                    vectors.push(("bias", b.len()));
                }
                if let Some(n) = &w.norm {
                    vectors.push(("norm scale", n.scale.len()));
                    vectors.push(("norm shift", n.shift.len()));
                }
            }
            check_layer(i, layer, w.is_some(), dims, &vectors)?;
        }
        Ok(())
    }
}

impl QNetworkWeights {
    pub fn check(&self, net: &NetworkSpec) -> Result<()> {
        if self.layers.len() < net.layers.len() {
            return Err(Error::MissingWeights(self.layers.len()));
        }
        if self.layers.len() > net.layers.len() {
            return Err(Error::WeightMismatch {
                index: net.layers.len(),
                reason: "more parameter sets than layers".into(),
            });
        }
        for (i, (layer, w)) in net.layers.iter().zip(&self.layers).enumerate() {
            let dims = w.as_ref().map(|w| {
                let k = &w.kernel.kernel;
                (k.out_channels, k.in_channels, k.size)
            });
            let mut vectors = Vec::new();
            if let Some(w) = w {
                if let Some(b) = &w.bias {
                    vectors.push(("bias", b.data.len()));
                }
                if let Some(n) = &w.norm {
                    vectors.push(("norm scale", n.scale.data.len()));
                    vectors.push(("norm shift", n.shift.data.len()));
                }
            }
            check_layer(i, layer, w.is_some(), dims, &vectors)?;
        }
        Ok(())
    }

    /// Real weights holding exactly the quantized values.
    pub fn dequantize(&self) -> NetworkWeights {
        NetworkWeights {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|q| LayerWeights {
                        kernel: dequantize_kernel(&q.kernel),
                        bias: q.bias.as_ref().map(dequantize_vector),
                        norm: q.norm.as_ref().map(QNorm::dequantize),
                    })
                })
                .collect(),
        }
    }
}

/// Uniform `[-1, 1)` tensor from `seed`.
pub fn random_input(shape: TensorShape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor { shape, data }
}

fn channel_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let pixels = t.shape.pixels() as f64;
    t.data
        .chunks(t.shape.pixels())
        .map(|ch| {
            let mean = ch.iter().sum::<f64>() / pixels;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / pixels;
            (mean, var)
        })
        .unzip()
}

/// Seeded He-normal kernels. Batch-norm statistics come from a forward pass
/// over a seeded calibration image, so every normalized layer sees roughly
/// unit-variance pre-activations. Layers without batch norm get a small bias.
pub fn generate_weights(net: &NetworkSpec, seed: u64) -> Result<NetworkWeights> {
    net.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = random_input(net.input_shape, seed ^ 0x5eed_ca1b);
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut saved: Vec<Option<Tensor>> = vec![None; net.layers.len()];
    let mut stats = OpStats::default();
    for (i, layer) in net.layers.iter().enumerate() {
        if (i + 1..net.layers.len()).any(|j| net.shortcut_source(j) == Some(i)) {
            saved[i] = Some(x.clone());
        }
        let shortcut = net.shortcut_source(i).and_then(|s| saved[s].clone());
        let Some((out, inp, k)) = kernel_dims(layer) else {
            layers.push(None);
            x = execute_layer(layer, None, &x, None, &mut stats)?;
            continue;
        };
        let fan_in = (inp * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
        let data = (0..out * inp * k * k).map(|_| normal.sample(&mut rng)).collect();
        let kernel = Kernel::new(out, inp, k, data)?;
        let mut lw = LayerWeights {
            kernel,
            bias: None,
            norm: None,
        };
        if layer.batchnorm {
            let raw = execute_layer(
                &LayerSpec {
                    activation: Activation::None,
                    shortcut: None,
                    ..layer.clone()
                },
                Some(&lw),
                &x,
                None,
                &mut stats,
            )?;
            let (mean, var) = channel_stats(&raw);
            let bn = BatchNorm {
                gamma: (0..out).map(|_| rng.random_range(0.5..1.5)).collect(),
                beta: (0..out).map(|_| rng.random_range(-0.25..0.25)).collect(),
                mean,
                var,
                eps: GENERATED_BN_EPS,
            };
            lw.norm = Some(fold_batchnorm(&bn, None)?);
        } else {
            lw.bias = Some((0..out).map(|_| rng.random_range(-0.1..0.1)).collect());
        }
        x = execute_layer(layer, Some(&lw), &x, shortcut.as_ref(), &mut stats)?;
        layers.push(Some(lw));
    }
    Ok(NetworkWeights { layers })
}

/// Scale with one bit of headroom over the calibration data.
fn activation_scale(values: &[f64]) -> Result<QParams> {
    let e = choose_scale(values)?.frac_bits();
    QParams::new((e - 1).max(QParams::MIN_FRAC_BITS as i32))
}

/// Quantizes kernels and vectors with `choose_scale` and picks activation
/// scales from a real forward pass over `calibration`.
pub fn quantize_weights(net: &NetworkSpec, weights: &NetworkWeights, calibration: &Tensor) -> Result<QNetworkWeights> {
    net.validate()?;
    weights.check(net)?;
    if calibration.shape != net.input_shape {
        return Err(Error::Shape(format!(
            "calibration input {} but the network takes {}",
            calibration.shape, net.input_shape
        )));
    }
    let mut stats = OpStats::default();
    let input = activation_scale(&calibration.data)?;
    let mut x = calibration.clone();
    let mut saved: Vec<Option<Tensor>> = vec![None; net.layers.len()];
    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, (layer, w)) in net.layers.iter().zip(&weights.layers).enumerate() {
        if (i + 1..net.layers.len()).any(|j| net.shortcut_source(j) == Some(i)) {
            saved[i] = Some(x.clone());
        }
        let shortcut = net.shortcut_source(i).and_then(|s| saved[s].clone());
        let y = execute_layer(layer, w.as_ref(), &x, shortcut.as_ref(), &mut stats)?;
        layers.push(match w {
            None => None,
            Some(w) => {
                let mut calib = y.data.clone();
                if shortcut.is_some() {
                    let pre = execute_layer(
                        &LayerSpec {
                            shortcut: None,
                            ..layer.clone()
                        },
                        Some(w),
                        &x,
                        None,
                        &mut stats,
                    )?;
                    calib.extend(pre.data);
                }
                Some(QLayerWeights {
                    kernel: quantize_kernel(&w.kernel, &mut stats)?,
                    bias: w.bias.as_deref().map(|b| quantize_vector(b, &mut stats)).transpose()?,
                    norm: w.norm.as_ref().map(|n| QNorm::quantize(n, &mut stats)).transpose()?,
                    out: activation_scale(&calib)?,
                })
            }
        });
        x = y;
    }
    Ok(QNetworkWeights { input, layers })
}

pub fn write_bundle(w: &mut impl Write, weights: &QNetworkWeights) -> Result<()> {
    w.write_all(&BUNDLE_MAGIC)?;
    w.write_all(&BUNDLE_VERSION.to_le_bytes())?;
    w.write_all(&(weights.layers.len() as u32).to_le_bytes())?;
    w.write_all(&(weights.input.frac_bits() as i8).to_le_bytes())?;
    for (i, layer) in weights.layers.iter().enumerate() {
        w.write_all(&(i as u32).to_le_bytes())?;
        let Some(l) = layer else {
            w.write_all(&[0])?;
            continue;
        };
        let flags = l.bias.is_some() as u8 | (l.norm.is_some() as u8) << 1;
        w.write_all(&[1, flags, l.out.frac_bits() as i8 as u8])?;
        write_kernel(w, &l.kernel)?;
        if let Some(b) = &l.bias {
            write_vector(w, b)?;
        }
        if let Some(n) = &l.norm {
            write_vector(w, &n.scale)?;
            write_vector(w, &n.shift)?;
        }
    }
    Ok(())
}

fn frac(byte: u8) -> Result<QParams> {
    QParams::new(byte as i8 as i32).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_bundle(r: &mut impl Read) -> Result<QNetworkWeights> {
    if read_exact::<4>(r)? != BUNDLE_MAGIC {
        return Err(Error::Format("not a weight bundle".into()));
    }
    let version = u16::from_le_bytes(read_exact(r)?);
    if version != BUNDLE_VERSION {
        return Err(Error::Format(format!("unsupported bundle version {version}")));
    }
    let count = read_u32(r)? as usize;
    let [input] = read_exact::<1>(r)?;
    let input = frac(input)?;
    let mut layers = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let index = read_u32(r)? as usize;
        if index != i {
            return Err(Error::Format(format!(
                "layer record {index} found where {i} was expected"
            )));
        }
        match read_exact::<1>(r)? {
            [0] => layers.push(None),
            [1] => {
                let [flags, out] = read_exact::<2>(r)?;
                if flags & !3 != 0 {
                    return Err(Error::Format(format!("layer {i}: unknown flags {flags:#x}")));
                }
                let kernel = read_kernel(r)?;
                let bias = if flags & 1 != 0 { Some(read_vector(r)?) } else { None };
                let norm = if flags & 2 != 0 {
                    Some(QNorm {
                        scale: read_vector(r)?,
                        shift: read_vector(r)?,
                    })
                } else {
                    None
                };
                layers.push(Some(QLayerWeights {
                    kernel,
                    bias,
                    norm,
                    out: frac(out)?,
                }));
            }
            [k] => return Err(Error::Format(format!("layer {i}: unknown kind {k}"))),
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after the last layer".into()));
    }
    Ok(QNetworkWeights { input, layers })
}
