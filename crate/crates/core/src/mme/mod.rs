//! Matrix Multiplication Engine: configuration, closed-form cycle counts and
//! a cycle-stepped engine that produces bit-exact outputs.
//!
//! One MME streams one pixel per cycle into per-slice line buffers. In
//! depthwise mode each slice convolves its own channel; in pointwise mode the
//! adder tree sums across slices; in standard mode slices are grouped in
//! threes, one group per output channel.

mod engine;

pub(crate) use engine::{finish_pointwise, pool_stage};
pub use engine::{simulate_layer, LineBuffer, Mme, MmeStats, PassCycles};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LayerKind, LayerSpec};

/// Fixed latencies of the post-processing stages, in cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostPipeline {
    pub norm: u64,
    pub relu: u64,
    pub pool: u64,
    pub residual: u64,
}

impl Default for PostPipeline {
    fn default() -> Self {
        PostPipeline {
            norm: 2,
            relu: 1,
            pool: 2,
            residual: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmeConfig {
    pub slices: usize,
    /// Side of each slice's multiplier array.
    pub kernel_side: usize,
    /// Largest feature-map side the line buffers are built for.
    pub max_side: usize,
    pub post: PostPipeline,
}

impl Default for MmeConfig {
    fn default() -> Self {
        MmeConfig {
            slices: 32,
            kernel_side: 3,
            max_side: 224,
            post: PostPipeline::default(),
        }
    }
}

/// Input channels of the only supported standard convolution.
pub const STANDARD_INPUT_CHANNELS: usize = 3;

impl MmeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slices < STANDARD_INPUT_CHANNELS || self.kernel_side == 0 || self.max_side == 0 {
            return Err(Error::invalid(format!(
                "MME needs >= {STANDARD_INPUT_CHANNELS} slices, kernel_side >= 1 and max_side >= 1"
            )));
        }
        Ok(())
    }

    /// `slices * kernel_side^2`
    pub fn multipliers(&self) -> usize {
        self.slices * self.kernel_side * self.kernel_side
    }

    /// Channels per depthwise group and per pointwise input tile.
    pub fn channel_tile(&self) -> usize {
        self.slices
    }

    /// Output channels per pointwise pass.
    pub fn pointwise_outputs(&self) -> usize {
        self.kernel_side * self.kernel_side
    }

    /// Output channels per standard-convolution pass (leftover slices idle).
    pub fn standard_outputs(&self) -> usize {
        self.slices / STANDARD_INPUT_CHANNELS
    }

    /// Pipeline depth of the adder tree: one level per halving plus the bias add.
    pub fn adder_tree_latency(&self) -> u64 {
        let m = self.multipliers() as u64;
        (64 - (m.max(1) - 1).leading_zeros()) as u64 + 1
    }

    /// Cycles from the last streamed pixel to the last output leaving the MME.
    pub fn drain_cycles(&self, layer: &LayerSpec) -> u64 {
        let p = &self.post;
        if layer.kind.is_pool() {
            return p.pool;
        }
        self.adder_tree_latency()
            + if layer.batchnorm { p.norm } else { 0 }
            + if layer.activation != crate::network::Activation::None {
                p.relu
            } else {
                0
            }
            + if layer.shortcut.is_some() { p.residual } else { 0 }
    }

    pub fn line_buffer(&self) -> LineBufferModel {
        LineBufferModel::new(self.kernel_side, self.max_side)
    }
}

/// Line buffer sized for the largest supported feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineBufferModel {
    pub max_side: usize,
    pub kernel: usize,
    pub implemented_length: usize,
}

impl LineBufferModel {
    pub fn new(kernel: usize, max_side: usize) -> Self {
        LineBufferModel {
            max_side,
            kernel,
            implemented_length: line_buffer_length(kernel, max_side),
        }
    }

    /// Length used by a layer of side `m`.
    pub fn working_length(&self, kernel: usize, m: usize) -> Result<usize> {
        if m > self.max_side || kernel > self.kernel {
            return Err(Error::Unsupported(format!(
                "K={kernel}, M={m} exceeds the line buffer built for K={}, M={}",
                self.kernel, self.max_side
            )));
        }
        Ok(line_buffer_length(kernel, m))
    }
}

/// `(K - 1) * M + K`
pub fn line_buffer_length(k: usize, m: usize) -> usize {
    (k.max(1) - 1) * m + k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdderTreeMode {
    /// One sum per slice.
    DepthwiseSum,
    /// One sum per multiplier position across all slices.
    PointwiseSum,
    /// One sum per group of three slices.
    StandardSum,
}

impl AdderTreeMode {
    pub fn for_kind(kind: LayerKind) -> Option<Self> {
        match kind {
            LayerKind::DepthwiseConv => Some(AdderTreeMode::DepthwiseSum),
            LayerKind::PointwiseConv => Some(AdderTreeMode::PointwiseSum),
            LayerKind::StandardConv => Some(AdderTreeMode::StandardSum),
            LayerKind::AvgPool | LayerKind::MaxPool => None,
        }
    }

    pub fn outputs_per_cycle(self, cfg: &MmeConfig) -> usize {
        match self {
            AdderTreeMode::DepthwiseSum => cfg.slices,
            AdderTreeMode::PointwiseSum => cfg.pointwise_outputs(),
            AdderTreeMode::StandardSum => cfg.standard_outputs(),
        }
    }
}

/// Cycles of one layer on the MMEs; stalls come from the memory model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CycleReport {
    pub compute: u64,
    /// Line-buffer warm-up.
    pub fill: u64,
    pub stall: u64,
    /// Streamed passes on the critical MME.
    pub passes: u64,
}

impl CycleReport {
    pub fn total(&self) -> u64 {
        self.compute + self.fill + self.stall
    }
}

fn nonzero(name: &str, v: usize) -> Result<u64> {
    if v == 0 {
        Err(Error::invalid(format!("{name} must be >= 1")))
    } else {
        Ok(v as u64)
    }
}

fn check_kernel(k: usize, cfg: &MmeConfig) -> Result<u64> {
    if k == 0 || k > cfg.kernel_side || k.is_multiple_of(2) {
        return Err(Error::Unsupported(format!(
            "kernel {k} on {0}x{0} multiplier slices",
            cfg.kernel_side
        )));
    }
    Ok(k as u64)
}

/// One MME, all channel groups in sequence. Cycles are charged at input
/// resolution: every pixel enters the line buffer.
pub fn cycles_depthwise(m_in: usize, k: usize, channels: usize, cfg: &MmeConfig) -> Result<CycleReport> {
    let m = nonzero("M", m_in)?;
    let c = nonzero("channels", channels)?;
    let k = check_kernel(k, cfg)?;
    let groups = c.div_ceil(cfg.slices as u64);
    let l = cfg.line_buffer().working_length(k as usize, m_in)? as u64;
    Ok(CycleReport {
        compute: groups * m * m,
        fill: groups * (l - 1),
        stall: 0,
        passes: groups,
    })
}

/// One MME: `ceil(N/slices) * ceil(P/K^2)` passes of `M^2` cycles.
pub fn cycles_pointwise(m: usize, n: usize, p: usize, cfg: &MmeConfig) -> Result<CycleReport> {
    let m = nonzero("M", m)?;
    let n = nonzero("N", n)?;
    let p = nonzero("P", p)?;
    let passes = n.div_ceil(cfg.channel_tile() as u64) * p.div_ceil(cfg.pointwise_outputs() as u64);
    Ok(CycleReport {
        compute: passes * m * m,
        fill: 0,
        stall: 0,
        passes,
    })
}

/// One MME, three-channel input only: `ceil(P / floor(slices/3))` passes at input resolution.
pub fn cycles_standard_first_layer(
    m_in: usize,
    k: usize,
    n_in: usize,
    p: usize,
    cfg: &MmeConfig,
) -> Result<CycleReport> {
    if n_in != STANDARD_INPUT_CHANNELS {
        return Err(Error::Unsupported(format!(
            "standard convolution with {n_in} input channels (only {STANDARD_INPUT_CHANNELS})"
        )));
    }
    let m = nonzero("M", m_in)?;
    let p = nonzero("P", p)?;
    let k = check_kernel(k, cfg)?;
    let passes = p.div_ceil(cfg.standard_outputs() as u64);
    let l = cfg.line_buffer().working_length(k as usize, m_in)? as u64;
    Ok(CycleReport {
        compute: passes * m * m,
        fill: passes * (l - 1),
        stall: 0,
        passes,
    })
}

/// Single-MME closed form for any convolution layer.
pub fn cycles_for_layer(layer: &LayerSpec, cfg: &MmeConfig) -> Result<CycleReport> {
    let m = layer.input.side();
    match layer.kind {
        LayerKind::DepthwiseConv => cycles_depthwise(m, layer.kernel, layer.input.channels, cfg),
        LayerKind::PointwiseConv => cycles_pointwise(m, layer.input.channels, layer.output_channels(), cfg),
        LayerKind::StandardConv => {
            cycles_standard_first_layer(m, layer.kernel, layer.input.channels, layer.output_channels(), cfg)
        }
        LayerKind::AvgPool | LayerKind::MaxPool => Ok(CycleReport::default()),
    }
}
