//! Line-oriented network description files.
//!
//! ```text
//! name mobilenet_v2
//! input 224x224x3
//! # input      operator    t  c     n  s  [key=value ...]
//! 224x224x3    conv        -  32    1  2
//! 112x112x32   bottleneck  1  16    1  1
//! -            avgpool     -  -     1  -  k=global
//! ```
//!
//! The input column may be `-`; when present it must equal the running shape.

use std::fmt::Write as _;

use super::{expand_bottleneck, Activation, BottleneckSpec, LayerKind, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::TensorShape;

fn err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_shape(line: usize, s: &str) -> Result<TensorShape> {
    let dims: Vec<_> = s.split('x').collect();
    if dims.len() != 3 {
        return Err(err(line, format!("shape `{s}` is not HxWxC")));
    }
    let mut v = [0usize; 3];
    for (slot, d) in v.iter_mut().zip(&dims) {
        *slot = d
            .parse()
            .map_err(|_| err(line, format!("bad dimension `{d}` in `{s}`")))?;
    }
    TensorShape::new(v[0], v[1], v[2]).map_err(|e| err(line, e.to_string()))
}

fn parse_opt(line: usize, col: &str, s: &str) -> Result<Option<usize>> {
    if s == "-" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| err(line, format!("column {col}: expected a number or `-`, got `{s}`")))
}

fn required(line: usize, col: &str, v: Option<usize>) -> Result<usize> {
    v.ok_or_else(|| err(line, format!("column {col} is required for this operator")))
}

#[derive(Default)]
struct Attrs {
    kernel: Option<usize>,
    global: bool,
    batchnorm: Option<bool>,
    activation: Option<Activation>,
    shortcut: Option<usize>,
}

fn parse_attrs(line: usize, tokens: &[&str]) -> Result<Attrs> {
    let mut attrs = Attrs::default();
    for tok in tokens {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected key=value, got `{tok}`")))?;
        match key {
            "k" if value == "global" => attrs.global = true,
            "k" => attrs.kernel = Some(value.parse().map_err(|_| err(line, format!("bad kernel `{value}`")))?),
            "bn" => {
                attrs.batchnorm = Some(match value {
                    "on" => true,
                    "off" => false,
                    _ => return Err(err(line, format!("bn must be on|off, got `{value}`"))),
                })
            }
            "relu" => {
                attrs.activation =
                    Some(Activation::parse(value).ok_or_else(|| err(line, format!("unknown activation `{value}`")))?)
            }
            "shortcut" => {
                attrs.shortcut = Some(
                    value
                        .parse()
                        .map_err(|_| err(line, format!("bad shortcut `{value}`")))?,
                )
            }
            _ => return Err(err(line, format!("unknown attribute `{key}`"))),
        }
    }
    Ok(attrs)
}

/// Parses a network file, expanding bottleneck rows. Errors carry 1-based line numbers.
pub fn parse_network(text: &str) -> Result<NetworkSpec> {
    let mut name = String::from("network");
    let mut input: Option<TensorShape> = None;
    let mut shape: Option<TensorShape> = None;
    let mut layers: Vec<LayerSpec> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = content.split_whitespace().collect();
        match tokens[0] {
            "name" => {
                name = tokens[1..].join(" ");
                if name.is_empty() {
                    return Err(err(line, "empty network name"));
                }
                continue;
            }
            "input" => {
                if input.is_some() {
                    return Err(err(line, "duplicate input directive"));
                }
                let s = tokens.get(1).ok_or_else(|| err(line, "input needs a shape"))?;
                let parsed = parse_shape(line, s)?;
                input = Some(parsed);
                shape = Some(parsed);
                continue;
            }
            _ => {}
        }

        if tokens.len() < 6 {
            return Err(err(
                line,
                format!("expected `input operator t c n s`, got {} columns", tokens.len()),
            ));
        }
        let current = shape.ok_or_else(|| err(line, "layer before the input directive"))?;
        if tokens[0] != "-" {
            let declared = parse_shape(line, tokens[0])?;
            if declared != current {
                return Err(err(
                    line,
                    format!("declared input {declared} does not match previous output {current}"),
                ));
            }
        }
        let op = tokens[1];
        let t = parse_opt(line, "t", tokens[2])?;
        let c = parse_opt(line, "c", tokens[3])?;
        let n = parse_opt(line, "n", tokens[4])?.unwrap_or(1);
        let s = parse_opt(line, "s", tokens[5])?;
        let attrs = parse_attrs(line, &tokens[6..])?;
        if n == 0 {
            return Err(err(line, "repeat count must be >= 1"));
        }

        let mut row: Vec<LayerSpec> = Vec::new();
        let mut running = current;
        match op {
            "bottleneck" => {
                let spec = BottleneckSpec {
                    expand_factor: required(line, "t", t)?,
                    out_channels: required(line, "c", c)?,
                    repeat: n,
                    first_stride: required(line, "s", s)?,
                };
                row = expand_bottleneck(current, spec).map_err(|e| err(line, e.to_string()))?;
            }
            "conv" | "dwconv" | "pwconv" => {
                for r in 0..n {
                    let stride = if r == 0 { s.unwrap_or(1) } else { 1 };
                    let mut layer = match op {
                        "conv" => {
                            LayerSpec::standard(running, attrs.kernel.unwrap_or(3), stride, required(line, "c", c)?)
                        }
                        "dwconv" => {
                            if c.is_some_and(|c| c != running.channels) {
                                return Err(err(line, "dwconv must keep the channel count"));
                            }
                            LayerSpec::depthwise(running, attrs.kernel.unwrap_or(3), stride)
                        }
                        _ => {
                            if attrs.kernel.is_some_and(|k| k != 1) || stride != 1 {
                                return Err(err(line, "pwconv has K = 1 and stride 1"));
                            }
                            LayerSpec::pointwise(running, required(line, "c", c)?)
                        }
                    };
                    if let Some(bn) = attrs.batchnorm {
                        layer.batchnorm = bn;
                    }
                    if let Some(act) = attrs.activation {
                        layer.activation = act;
                    }
                    layer.shortcut = attrs.shortcut;
                    running = layer.output();
                    row.push(layer);
                }
            }
            "avgpool" | "maxpool" => {
                let kind = if op == "avgpool" {
                    LayerKind::AvgPool
                } else {
                    LayerKind::MaxPool
                };
                let window = if attrs.global || attrs.kernel.is_none() {
                    running.side()
                } else {
                    attrs.kernel.unwrap_or(1)
                };
                for _ in 0..n {
                    let mut layer = LayerSpec::pool(kind, running, window);
                    if let Some(stride) = s {
                        layer.stride = stride;
                    }
                    running = layer.output();
                    row.push(layer);
                }
            }
            other => return Err(err(line, format!("unknown operator `{other}`"))),
        }

        for layer in &row {
            layer.validate(layers.len()).map_err(|e| err(line, e.to_string()))?;
            if let Some(back) = layer.shortcut {
                let idx = layers.len();
                if back > idx {
                    return Err(err(line, format!("shortcut={back} reaches before the first layer")));
                }
            }
            layers.push(layer.clone());
        }
        shape = row.last().map(|l| l.output()).or(shape);
    }

    let input = input.ok_or_else(|| err(text.lines().count().max(1), "missing input directive"))?;
    let net = NetworkSpec {
        name,
        input_shape: input,
        layers,
    };
    net.validate().map_err(|e| err(0, e.to_string()))?;
    Ok(net)
}

/// Writes one fully attributed row per layer; `parse_network` reads it back unchanged.
pub fn write_network(net: &NetworkSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "name {}", net.name);
    let _ = writeln!(out, "input {}", net.input_shape);
    let _ = writeln!(out, "# input  operator  t  c  n  s  attributes");
    for layer in &net.layers {
        let op = match layer.kind {
            LayerKind::StandardConv => "conv",
            LayerKind::DepthwiseConv => "dwconv",
            LayerKind::PointwiseConv => "pwconv",
            LayerKind::AvgPool => "avgpool",
            LayerKind::MaxPool => "maxpool",
        };
        if layer.kind.is_pool() {
            let _ = writeln!(out, "{} {op} - - 1 {} k={}", layer.input, layer.stride, layer.kernel);
            continue;
        }
        let c = match layer.kind {
            LayerKind::DepthwiseConv => "-".to_string(),
            _ => layer.output_channels().to_string(),
        };
        let _ = write!(
            out,
            "{} {op} - {c} 1 {} k={} bn={} relu={}",
            layer.input,
            layer.stride,
            layer.kernel,
            if layer.batchnorm { "on" } else { "off" },
            layer.activation.name()
        );
        if let Some(back) = layer.shortcut {
            let _ = write!(out, " shortcut={back}");
        }
        out.push('\n');
    }
    out
}
