//! Reference execution of every layer type in real and fixed-point arithmetic.
//!
//! The fixed-point runner is the golden model the cycle simulator must match.

pub mod io;
mod ops;
mod tiling;

pub use ops::{
    conv_depthwise, conv_depthwise_q, conv_pointwise_direct, conv_pointwise_direct_q, conv_standard, conv_standard_q,
    pool, pool_q, relu, relu_q, residual_add, residual_add_q, Window,
};
pub use tiling::{conv_pointwise_tiled, conv_pointwise_tiled_q, TilePartial, TilePlan, INPUT_TILE, OUTPUT_TILE};

use crate::error::{Error, Result};
use crate::fixedpoint::OpStats;
use crate::network::{LayerKind, LayerSpec, NetworkSpec};
use crate::tensor::{QTensor, Tensor};
use crate::weights::{LayerWeights, NetworkWeights, QLayerWeights, QNetworkWeights};

/// Network output, optional per-layer outputs and work counters.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult<T> {
    pub output: T,
    /// Output of every layer in order when dumping was requested, else empty.
    pub activations: Vec<T>,
    pub stats: OpStats,
}

fn missing(layer: &LayerSpec) -> Error {
    Error::invalid(format!("{} layer needs parameters", layer.kind))
}

/// One layer in reals: convolution (+ bias), folded norm, activation, residual add.
pub fn execute_layer(
    layer: &LayerSpec,
    weights: Option<&LayerWeights>,
    input: &Tensor,
    shortcut: Option<&Tensor>,
    stats: &mut OpStats,
) -> Result<Tensor> {
    if layer.kind.is_pool() {
        return pool(input, layer.kind, layer.kernel, layer.stride, stats);
    }
    let w = weights.ok_or_else(|| missing(layer))?;
    let bias = w.bias.as_deref();
    let (stride, pad) = (layer.stride, layer.padding());
    let mut y = match layer.kind {
        LayerKind::StandardConv => conv_standard(input, &w.kernel, bias, stride, pad, stats)?,
        LayerKind::DepthwiseConv => conv_depthwise(input, &w.kernel, bias, stride, pad, stats)?,
        _ => conv_pointwise_direct(input, &w.kernel, bias, stats)?,
    };
    if let Some(norm) = &w.norm {
        if norm.channels() != y.shape.channels {
            return Err(Error::Shape("norm does not cover every output channel".into()));
        }
        let pixels = y.shape.pixels();
        for (c, chunk) in y.data.chunks_mut(pixels).enumerate() {
            chunk.iter_mut().for_each(|v| *v = norm.apply(c, *v));
        }
    }
    let y = relu(&y, layer.activation);
    match shortcut {
        Some(s) => residual_add(&y, s),
        None => Ok(y),
    }
}

/// One layer in fixed point; the residual add happens at the layer's output scale.
pub fn execute_layer_q(
    layer: &LayerSpec,
    weights: Option<&QLayerWeights>,
    input: &QTensor,
    shortcut: Option<&QTensor>,
    stats: &mut OpStats,
) -> Result<QTensor> {
    if layer.kind.is_pool() {
        return pool_q(input, layer.kind, layer.kernel, layer.stride, stats);
    }
    let w = weights.ok_or_else(|| missing(layer))?;
    let ep = w.epilogue(layer.activation);
    let (stride, pad) = (layer.stride, layer.padding());
    let y = match layer.kind {
        LayerKind::StandardConv => conv_standard_q(input, &w.kernel, &ep, stride, pad, stats)?,
        LayerKind::DepthwiseConv => conv_depthwise_q(input, &w.kernel, &ep, stride, pad, stats)?,
        _ => conv_pointwise_direct_q(input, &w.kernel, &ep, stats)?,
    };
    match shortcut {
        Some(s) => residual_add_q(&y, s, stats),
        None => Ok(y),
    }
}

/// Walks the layers, keeping each shortcut source alive until its consumer runs.
fn walk<T: Clone>(
    net: &NetworkSpec,
    input: &T,
    dump: bool,
    mut step: impl FnMut(usize, &T, Option<&T>) -> Result<T>,
) -> Result<(T, Vec<T>)> {
    let mut saved: Vec<Option<T>> = vec![None; net.layers.len()];
    let mut activations = Vec::new();
    let mut x = input.clone();
    for i in 0..net.layers.len() {
        if (i + 1..net.layers.len()).any(|j| net.shortcut_source(j) == Some(i)) {
            saved[i] = Some(x.clone());
        }
        let shortcut = net.shortcut_source(i).and_then(|s| saved[s].take());
        x = step(i, &x, shortcut.as_ref())?;
        if dump {
            activations.push(x.clone());
        }
    }
    Ok((x, activations))
}

pub fn run_network(
    net: &NetworkSpec,
    weights: &NetworkWeights,
    input: &Tensor,
    dump: bool,
) -> Result<RunResult<Tensor>> {
    net.validate()?;
    weights.check(net)?;
    if input.shape != net.input_shape {
        return Err(Error::Shape(format!(
            "input {} but the network takes {}",
            input.shape, net.input_shape
        )));
    }
    let mut stats = OpStats::default();
    let (output, activations) = walk(net, input, dump, |i, x, s| {
        execute_layer(&net.layers[i], weights.layers[i].as_ref(), x, s, &mut stats)
    })?;
    Ok(RunResult {
        output,
        activations,
        stats,
    })
}

pub fn run_network_q(
    net: &NetworkSpec,
    weights: &QNetworkWeights,
    input: &QTensor,
    dump: bool,
) -> Result<RunResult<QTensor>> {
    net.validate()?;
    weights.check(net)?;
    if input.shape != net.input_shape {
        return Err(Error::Shape(format!(
            "input {} but the network takes {}",
            input.shape, net.input_shape
        )));
    }
    let mut stats = OpStats::default();
    let (output, activations) = walk(net, input, dump, |i, x, s| {
        execute_layer_q(&net.layers[i], weights.layers[i].as_ref(), x, s, &mut stats)
    })?;
    Ok(RunResult {
        output,
        activations,
        stats,
    })
}
