//! Depthwise-separable network descriptions and their analytic costs.

mod cost;
mod format;
mod mobilenet;

pub use cost::{
    network_cost, ops_dsc, ops_standard, reduction_factors, weights_dsc, weights_standard, CostReport, DscPairCost,
    LayerCost,
};
pub use format::{parse_network, write_network};
pub use mobilenet::{build_mobilenet_v2, MOBILENET_V2_ROWS};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::tensor::TensorShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    StandardConv,
    DepthwiseConv,
    PointwiseConv,
    AvgPool,
    MaxPool,
}

impl LayerKind {
    pub fn is_conv(self) -> bool {
        matches!(
            self,
            LayerKind::StandardConv | LayerKind::DepthwiseConv | LayerKind::PointwiseConv
        )
    }

    pub fn is_pool(self) -> bool {
        matches!(self, LayerKind::AvgPool | LayerKind::MaxPool)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            LayerKind::StandardConv => "sc",
            LayerKind::DepthwiseConv => "dwc",
            LayerKind::PointwiseConv => "pwc",
            LayerKind::AvgPool => "avgpool",
            LayerKind::MaxPool => "maxpool",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// Activation applied after normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    None,
    Relu,
    Relu6,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::None => "none",
            Activation::Relu => "relu",
            Activation::Relu6 => "relu6",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Activation::None),
            "relu" => Some(Activation::Relu),
            "relu6" => Some(Activation::Relu6),
            _ => None,
        }
    }
}

/// One layer with its input shape.
///
/// `shortcut = Some(n)` adds the input of the layer `n` positions earlier to
/// this layer's output (the bottleneck residual).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub input: TensorShape,
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: Option<usize>,
    pub batchnorm: bool,
    pub activation: Activation,
    pub shortcut: Option<usize>,
}

impl LayerSpec {
    fn conv(kind: LayerKind, input: TensorShape, kernel: usize, stride: usize, out_channels: usize) -> Self {
        LayerSpec {
            kind,
            input,
            kernel,
            stride,
            out_channels: Some(out_channels),
            batchnorm: true,
            activation: Activation::Relu6,
            shortcut: None,
        }
    }

    pub fn standard(input: TensorShape, kernel: usize, stride: usize, out: usize) -> Self {
        Self::conv(LayerKind::StandardConv, input, kernel, stride, out)
    }

    pub fn depthwise(input: TensorShape, kernel: usize, stride: usize) -> Self {
        Self::conv(LayerKind::DepthwiseConv, input, kernel, stride, input.channels)
    }

    pub fn pointwise(input: TensorShape, out: usize) -> Self {
        Self::conv(LayerKind::PointwiseConv, input, 1, 1, out)
    }

    /// Non-overlapping pooling window (`stride == window`).
    pub fn pool(kind: LayerKind, input: TensorShape, window: usize) -> Self {
        LayerSpec {
            kind,
            input,
            kernel: window,
            stride: window,
            out_channels: None,
            batchnorm: false,
            activation: Activation::None,
            shortcut: None,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_batchnorm(mut self, batchnorm: bool) -> Self {
        self.batchnorm = batchnorm;
        self
    }

    pub fn with_shortcut(mut self, back: Option<usize>) -> Self {
        self.shortcut = back;
        self
    }

    /// Output channel count (pooling preserves channels).
    pub fn output_channels(&self) -> usize {
        match self.kind {
            LayerKind::DepthwiseConv | LayerKind::AvgPool | LayerKind::MaxPool => self.input.channels,
            _ => self.out_channels.unwrap_or(0),
        }
    }

    /// Output side under SAME padding: `ceil(input / stride)`.
    pub fn output_side(&self) -> usize {
        self.input.side().div_ceil(self.stride.max(1))
    }

    pub fn output(&self) -> TensorShape {
        let side = self.output_side();
        TensorShape {
            height: side,
            width: side,
            channels: self.output_channels(),
        }
    }

    /// Leading zero padding for convolutions: `(K - 1) / 2` rows and columns.
    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// Checks the per-layer invariants; `index` is only used in diagnostics.
    pub fn validate(&self, index: usize) -> Result<()> {
        self.input.validate().map_err(|e| Error::layer(index, e.to_string()))?;
        if self.kernel == 0 {
            return Err(Error::layer(index, "kernel size 0"));
        }
        match self.kind {
            LayerKind::StandardConv | LayerKind::DepthwiseConv | LayerKind::PointwiseConv => {
                if !(1..=2).contains(&self.stride) {
                    return Err(Error::layer(index, format!("stride {} not in {{1, 2}}", self.stride)));
                }
                if self.kernel.is_multiple_of(2) {
                    return Err(Error::layer(index, "even kernels are not supported"));
                }
                match self.out_channels {
                    Some(p) if p > 0 => {}
                    _ => return Err(Error::layer(index, "convolution needs out_channels >= 1")),
                }
            }
            LayerKind::AvgPool | LayerKind::MaxPool => {
                if self.out_channels.is_some_and(|p| p != self.input.channels) {
                    return Err(Error::layer(index, "pooling cannot change the channel count"));
                }
                if self.kernel > self.input.side() {
                    return Err(Error::layer(
                        index,
                        format!("pool window {} larger than input {}", self.kernel, self.input),
                    ));
                }
                if self.stride == 0 || self.stride > self.kernel {
                    return Err(Error::layer(index, "pool stride must be in 1..=window"));
                }
                if self.batchnorm || self.activation != Activation::None {
                    return Err(Error::layer(index, "pooling takes no normalization or activation"));
                }
            }
        }
        if self.kind == LayerKind::PointwiseConv && self.kernel != 1 {
            return Err(Error::layer(index, "pointwise convolution needs K == 1"));
        }
        if self.kind == LayerKind::DepthwiseConv && self.out_channels.is_some_and(|p| p != self.input.channels) {
            return Err(Error::layer(index, "depthwise convolution must preserve channels"));
        }
        Ok(())
    }

    pub fn weight_count(&self) -> u64 {
        let k2 = (self.kernel * self.kernel) as u64;
        let n = self.input.channels as u64;
        match self.kind {
            LayerKind::StandardConv => k2 * n * self.output_channels() as u64,
            LayerKind::DepthwiseConv => k2 * n,
            LayerKind::PointwiseConv => n * self.output_channels() as u64,
            LayerKind::AvgPool | LayerKind::MaxPool => 0,
        }
    }
}

/// MobileNetV2 bottleneck row: expansion `t`, output channels `c`, repeats `n`, first stride `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottleneckSpec {
    pub expand_factor: usize,
    pub out_channels: usize,
    pub repeat: usize,
    pub first_stride: usize,
}

/// Expands a bottleneck row into PWC(expand) -> DWC 3x3 -> PWC(project) per repeat.
///
/// Only the first repeat uses `first_stride`. A repeat carries a residual add
/// exactly when its stride is 1 and its input and output channel counts match.
pub fn expand_bottleneck(input: TensorShape, spec: BottleneckSpec) -> Result<Vec<LayerSpec>> {
    input.validate()?;
    if spec.expand_factor == 0 {
        return Err(Error::invalid("bottleneck expand factor must be >= 1"));
    }
    if spec.out_channels == 0 || spec.repeat == 0 {
        return Err(Error::invalid("bottleneck needs out_channels >= 1 and repeat >= 1"));
    }
    if !(1..=2).contains(&spec.first_stride) {
        return Err(Error::invalid("bottleneck stride must be 1 or 2"));
    }
    let mut layers = Vec::with_capacity(3 * spec.repeat);
    let mut shape = input;
    for r in 0..spec.repeat {
        let stride = if r == 0 { spec.first_stride } else { 1 };
        let hidden = shape.channels * spec.expand_factor;
        let expand = LayerSpec::pointwise(shape, hidden);
        let dw = LayerSpec::depthwise(expand.output(), 3, stride);
        let residual = stride == 1 && shape.channels == spec.out_channels;
        let project = LayerSpec::pointwise(dw.output(), spec.out_channels)
            .with_activation(Activation::None)
            .with_shortcut(residual.then_some(2));
        shape = project.output();
        layers.extend([expand, dw, project]);
    }
    Ok(layers)
}

/// Ordered, shape-chained list of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input_shape: TensorShape,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(name: impl Into<String>, input_shape: TensorShape, layers: Vec<LayerSpec>) -> Result<Self> {
        let net = NetworkSpec {
            name: name.into(),
            input_shape,
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    /// Verifies every layer and the shape chain, including shortcut shapes.
    pub fn validate(&self) -> Result<()> {
        self.input_shape.validate()?;
        let mut expected = self.input_shape;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate(i)?;
            if layer.input != expected {
                return Err(Error::ShapeChain {
                    index: i,
                    expected,
                    found: layer.input,
                });
            }
            if let Some(back) = layer.shortcut {
                if back > i {
                    return Err(Error::layer(i, format!("shortcut reaches {back} layers back")));
                }
                let source = self.layers[i - back].input;
                if source != layer.output() {
                    return Err(Error::layer(
                        i,
                        format!("shortcut shape {source} does not match output {}", layer.output()),
                    ));
                }
            }
            expected = layer.output();
        }
        Ok(())
    }

    pub fn output_shape(&self) -> TensorShape {
        self.layers.last().map_or(self.input_shape, |l| l.output())
    }

    /// Index of the layer whose input feeds layer `i`'s shortcut.
    pub fn shortcut_source(&self, i: usize) -> Option<usize> {
        self.layers[i].shortcut.map(|back| i - back)
    }
}
