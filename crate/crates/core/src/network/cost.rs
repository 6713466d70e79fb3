//! Weight and multiply-accumulate counts for standard and depthwise-separable convolution.

use num_rational::Ratio;

use super::{LayerKind, NetworkSpec};
use crate::error::{Error, Result};

fn positive(name: &str, v: u64) -> Result<u64> {
    if v == 0 {
        Err(Error::invalid(format!("{name} must be >= 1")))
    } else {
        Ok(v)
    }
}

/// `K*K*N*P`
pub fn weights_standard(k: u64, n: u64, p: u64) -> Result<u64> {
    Ok(positive("K", k)? * k * positive("N", n)? * positive("P", p)?)
}

/// `M*M*K*K*N*P` multiply-accumulates for a stride-1 layer with `M x M` output.
pub fn ops_standard(m: u64, k: u64, n: u64, p: u64) -> Result<u64> {
    Ok(positive("M", m)? * m * weights_standard(k, n, p)?)
}

/// `K*K*N + N*P`
pub fn weights_dsc(k: u64, n: u64, p: u64) -> Result<u64> {
    positive("K", k)?;
    positive("N", n)?;
    positive("P", p)?;
    Ok(k * k * n + n * p)
}

/// `M*M*K*K*N + M*M*N*P`
pub fn ops_dsc(m: u64, k: u64, n: u64, p: u64) -> Result<u64> {
    Ok(positive("M", m)? * m * weights_dsc(k, n, p)?)
}

/// Weight and operation reduction of DSC over standard convolution, both `1/P + 1/K^2`.
pub fn reduction_factors(k: u64, p: u64) -> Result<(Ratio<u64>, Ratio<u64>)> {
    positive("K", k)?;
    positive("P", p)?;
    let f = Ratio::new(1, p) + Ratio::new(1, k * k);
    Ok((f, f))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCost {
    pub index: usize,
    pub kind: LayerKind,
    pub weights: u64,
    pub macs: u64,
    /// Elementwise additions of the residual shortcut.
    pub residual_adds: u64,
}

/// A depthwise layer immediately followed by a pointwise layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DscPairCost {
    pub depthwise: usize,
    pub pointwise: usize,
    pub weights_dsc: u64,
    pub weights_standard: u64,
    pub ops_dsc: u64,
    pub ops_standard: u64,
    pub weight_factor: Ratio<u64>,
    pub ops_factor: Ratio<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub dsc_pairs: Vec<DscPairCost>,
    pub total_weights: u64,
    /// Convolution MACs only.
    pub conv_macs: u64,
    /// Average-pool window accumulations.
    pub pool_macs: u64,
    /// `conv_macs + pool_macs`.
    pub total_macs: u64,
    pub residual_adds: u64,
}

impl CostReport {
    /// Operations counted as multiply plus accumulate.
    pub fn total_ops(&self) -> u64 {
        2 * self.total_macs
    }
}

/// Sums per-layer weights and MACs, using each layer's output resolution.
pub fn network_cost(net: &NetworkSpec) -> Result<CostReport> {
    net.validate()?;
    let mut layers = Vec::with_capacity(net.layers.len());
    for (index, layer) in net.layers.iter().enumerate() {
        let out = layer.output();
        let m2 = out.pixels() as u64;
        let k2 = (layer.kernel * layer.kernel) as u64;
        let n = layer.input.channels as u64;
        let p = out.channels as u64;
        let macs = match layer.kind {
            LayerKind::StandardConv => m2 * k2 * n * p,
            LayerKind::DepthwiseConv => m2 * k2 * n,
            LayerKind::PointwiseConv => m2 * n * p,
            LayerKind::AvgPool => p * m2 * k2,
            LayerKind::MaxPool => 0,
        };
        let residual_adds = if layer.shortcut.is_some() { out.len() as u64 } else { 0 };
        layers.push(LayerCost {
            index,
            kind: layer.kind,
            weights: layer.weight_count(),
            macs,
            residual_adds,
        });
    }

    let mut dsc_pairs = Vec::new();
    for (i, pair) in net.layers.windows(2).enumerate() {
        let (dw, pw) = (&pair[0], &pair[1]);
        if dw.kind != LayerKind::DepthwiseConv || pw.kind != LayerKind::PointwiseConv {
            continue;
        }
        let m = dw.output_side() as u64;
        let k = dw.kernel as u64;
        let n = dw.input.channels as u64;
        let p = pw.output_channels() as u64;
        let (weight_factor, ops_factor) = reduction_factors(k, p)?;
        dsc_pairs.push(DscPairCost {
            depthwise: i,
            pointwise: i + 1,
            weights_dsc: weights_dsc(k, n, p)?,
            weights_standard: weights_standard(k, n, p)?,
            ops_dsc: ops_dsc(m, k, n, p)?,
            ops_standard: ops_standard(m, k, n, p)?,
            weight_factor,
            ops_factor,
        });
    }

    let sum = |f: fn(&LayerCost) -> u64| layers.iter().map(f).sum::<u64>();
    let conv_macs = layers.iter().filter(|l| l.kind.is_conv()).map(|l| l.macs).sum();
    let pool_macs = layers.iter().filter(|l| l.kind.is_pool()).map(|l| l.macs).sum();
    Ok(CostReport {
        total_weights: sum(|l| l.weights),
        total_macs: sum(|l| l.macs),
        residual_adds: sum(|l| l.residual_adds),
        conv_macs,
        pool_macs,
        layers,
        dsc_pairs,
    })
}
