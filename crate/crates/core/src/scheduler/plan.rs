use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::config::{AcceleratorConfig, DwcPolicy, PwcPolicy};
use crate::error::{Error, Infeasibility, Result};
use crate::mme::{AdderTreeMode, MmeConfig, STANDARD_INPUT_CHANNELS};
use crate::network::{LayerKind, LayerSpec};
use crate::tensor::ELEMENT_BITS;

/// Work one MME performs in one round.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Work {
    /// Depthwise channels (at most one slice each) over a band of centre rows.
    Depthwise { channels: Range<usize>, rows: Range<usize> },
    /// Standard-convolution output channels, three slices each.
    Standard { outputs: Range<usize> },
    /// One input tile against one output group.
    Pointwise {
        inputs: Range<usize>,
        outputs: Range<usize>,
    },
    /// Merges the partial sums other MMEs hold for an output group.
    Reduce { outputs: Range<usize> },
}

impl Work {
    /// `(fill, compute)` cycles of this work on an MME.
    pub fn cycles(&self, layer: &LayerSpec, cfg: &MmeConfig) -> Result<(u64, u64)> {
        let m = layer.input.side();
        let fill = cfg.line_buffer().working_length(layer.kernel, m)? as u64 - 1;
        let m = m as u64;
        Ok(match self {
            Work::Depthwise { rows, .. } => (fill, rows.len() as u64 * m),
            Work::Standard { .. } => (fill, m * m),
            Work::Pointwise { .. } | Work::Reduce { .. } => (0, m * m),
        })
    }

    pub fn macs(&self, layer: &LayerSpec) -> u64 {
        let k2 = (layer.kernel * layer.kernel) as u64;
        let s = layer.stride;
        let out = layer.output();
        let m_out = out.side() as u64;
        match self {
            Work::Depthwise { channels, rows } => {
                let out_rows = (rows.end.div_ceil(s) - rows.start.div_ceil(s)) as u64;
                channels.len() as u64 * k2 * out_rows * m_out
            }
            Work::Standard { outputs } => outputs.len() as u64 * STANDARD_INPUT_CHANNELS as u64 * k2 * m_out * m_out,
            Work::Pointwise { inputs, outputs } => (inputs.len() * outputs.len()) as u64 * m_out * m_out,
            Work::Reduce { .. } => 0,
        }
    }

    pub fn weight_bits(&self, layer: &LayerSpec) -> u64 {
        let k2 = (layer.kernel * layer.kernel) as u64;
        ELEMENT_BITS
            * match self {
                Work::Depthwise { channels, .. } => channels.len() as u64 * k2,
                Work::Standard { outputs } => outputs.len() as u64 * STANDARD_INPUT_CHANNELS as u64 * k2,
                Work::Pointwise { inputs, outputs } => (inputs.len() * outputs.len()) as u64,
                Work::Reduce { .. } => 0,
            }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub mme: usize,
    pub work: Work,
}

/// Work the MMEs run together between two weight swaps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Round {
    pub assignments: Vec<Assignment>,
    /// Weights loaded for this round; shared weights count once.
    pub weight_bits: u64,
    /// Fill and compute of the slowest MME.
    pub fill: u64,
    pub compute: u64,
}

impl Round {
    pub fn duration(&self) -> u64 {
        self.fill + self.compute
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSchedule {
    pub mode: Option<AdderTreeMode>,
    pub rounds: Vec<Round>,
}

impl LayerSchedule {
    pub fn compute(&self) -> u64 {
        self.rounds.iter().map(|r| r.compute).sum()
    }

    pub fn fill(&self) -> u64 {
        self.rounds.iter().map(|r| r.fill).sum()
    }

    pub fn macs(&self, layer: &LayerSpec) -> u64 {
        self.rounds
            .iter()
            .flat_map(|r| &r.assignments)
            .map(|a| a.work.macs(layer))
            .sum()
    }

    pub fn max_weight_bits(&self) -> u64 {
        self.rounds.iter().map(|r| r.weight_bits).max().unwrap_or(0)
    }
}

pub(crate) fn chunks(total: usize, width: usize) -> Vec<Range<usize>> {
    (0..total.div_ceil(width))
        .map(|i| i * width..((i + 1) * width).min(total))
        .collect()
}

fn round(layer: &LayerSpec, cfg: &MmeConfig, works: Vec<Work>, shared_weights: bool) -> Result<Round> {
    let mut fill = 0;
    let mut compute = 0;
    for w in &works {
        let (f, c) = w.cycles(layer, cfg)?;
        if f + c > fill + compute {
            (fill, compute) = (f, c);
        }
    }
    let weight_bits = if shared_weights {
        works.first().map_or(0, |w| w.weight_bits(layer))
    } else {
        works.iter().map(|w| w.weight_bits(layer)).sum()
    };
    Ok(Round {
        assignments: works
            .into_iter()
            .enumerate()
            .map(|(mme, work)| Assignment { mme, work })
            .collect(),
        weight_bits,
        fill,
        compute,
    })
}

/// Divides a layer's work over `cfg.num_mmes` engines. Pooling layers run in
/// the post pipeline and get an empty schedule.
pub fn schedule_layer(layer: &LayerSpec, cfg: &AcceleratorConfig) -> Result<LayerSchedule> {
    cfg.validate()?;
    let mme = &cfg.mme;
    let mode = AdderTreeMode::for_kind(layer.kind);
    let Some(mode) = mode else {
        return Ok(LayerSchedule {
            mode,
            rounds: Vec::new(),
        });
    };
    if layer.kernel > mme.kernel_side || layer.kernel.is_multiple_of(2) {
        return Err(Error::Unsupported(format!(
            "{0}x{0} kernel on {1}x{1} multiplier slices",
            layer.kernel, mme.kernel_side
        )));
    }
    mme.line_buffer().working_length(layer.kernel, layer.input.side())?;
    if layer.kind == LayerKind::PointwiseConv && layer.stride != 1 {
        return Err(Error::Unsupported("strided pointwise convolution".into()));
    }
    let n = cfg.num_mmes;
    let m = layer.input.side();
    let mut rounds = Vec::new();
    match layer.kind {
        LayerKind::DepthwiseConv => {
            let groups = chunks(layer.input.channels, mme.slices);
            match cfg.policy.depthwise {
                DwcPolicy::ChannelSplit => {
                    for batch in groups.chunks(n) {
                        let works = batch
                            .iter()
                            .map(|g| Work::Depthwise {
                                channels: g.clone(),
                                rows: 0..m,
                            })
                            .collect();
                        rounds.push(round(layer, mme, works, false)?);
                    }
                }
                DwcPolicy::TimeMultiplex => {
                    let bands = chunks(m, m.div_ceil(n));
                    for g in &groups {
                        let works = bands
                            .iter()
                            .map(|b| Work::Depthwise {
                                channels: g.clone(),
                                rows: b.clone(),
                            })
                            .collect();
                        rounds.push(round(layer, mme, works, true)?);
                    }
                }
            }
        }
        LayerKind::StandardConv => {
            if layer.input.channels != STANDARD_INPUT_CHANNELS {
                return Err(Error::Unsupported(format!(
                    "standard convolution over {} input channels",
                    layer.input.channels
                )));
            }
            let passes = chunks(layer.output_channels(), mme.standard_outputs());
            for batch in passes.chunks(n) {
                let works = batch.iter().map(|o| Work::Standard { outputs: o.clone() }).collect();
                rounds.push(round(layer, mme, works, false)?);
            }
        }
        _ => {
            let tiles = chunks(layer.input.channels, mme.channel_tile());
            let groups = chunks(layer.output_channels(), mme.pointwise_outputs());
            match cfg.policy.pointwise {
                PwcPolicy::OutputSplit => {
                    for batch in groups.chunks(n) {
                        for t in &tiles {
                            let works = batch
                                .iter()
                                .map(|g| Work::Pointwise {
                                    inputs: t.clone(),
                                    outputs: g.clone(),
                                })
                                .collect();
                            rounds.push(round(layer, mme, works, false)?);
                        }
                    }
                }
                PwcPolicy::InputSplit => {
                    let width = n.min(tiles.len());
                    for g in &groups {
                        for batch in tiles.chunks(width) {
                            let works = batch
                                .iter()
                                .map(|t| Work::Pointwise {
                                    inputs: t.clone(),
                                    outputs: g.clone(),
                                })
                                .collect();
                            rounds.push(round(layer, mme, works, false)?);
                        }
                        if width > 1 {
                            rounds.push(round(layer, mme, vec![Work::Reduce { outputs: g.clone() }], false)?);
                        }
                    }
                }
            }
        }
    }
    let schedule = LayerSchedule {
        mode: Some(mode),
        rounds,
    };
    let bits = schedule.max_weight_bits();
    cfg.weight_buffer.check_tile(None, bits)?;
    Ok(schedule)
}

/// Attaches a layer index to a tile-overflow error.
pub(crate) fn at_layer(e: Error, index: usize) -> Error {
    match e {
        Error::Infeasible(Infeasibility::TileOverflow {
            tile_bits, bank_bits, ..
        }) => Error::Infeasible(Infeasibility::TileOverflow {
            layer: Some(index),
            tile_bits,
            bank_bits,
        }),
        other => other,
    }
}
