//! Divide-and-conquer pointwise convolution over channel tiles.

use std::ops::Range;

use super::ops::{check_pointwise_q, pointwise_sums};
use crate::error::{Error, Result};
use crate::fixedpoint::{Accumulator, OpStats, QEpilogue};
use crate::tensor::{Kernel, QKernel, QTensor, Tensor, TensorShape};

/// Input-channel tile width (one line-buffer slice per channel).
pub const INPUT_TILE: usize = 32;
/// Output-channel tile width (one 3x3 multiplier position per channel).
pub const OUTPUT_TILE: usize = 9;

/// Input and output channel tiles plus the order in which `(input, output)`
/// tile pairs are visited.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub input_tiles: Vec<Range<usize>>,
    pub output_tiles: Vec<Range<usize>>,
    /// `(input tile index, output tile index)` pairs.
    pub order: Vec<(usize, usize)>,
}

fn split(total: usize, width: usize) -> Vec<Range<usize>> {
    (0..total.div_ceil(width))
        .map(|i| i * width..((i + 1) * width).min(total))
        .collect()
}

impl TilePlan {
    /// Uniform tiles; for each output tile every input tile is streamed in turn.
    pub fn uniform(n: usize, p: usize, input_width: usize, output_width: usize) -> Result<Self> {
        if n == 0 || p == 0 || input_width == 0 || output_width == 0 {
            return Err(Error::TilePlan("tile plan needs positive sizes".into()));
        }
        let input_tiles = split(n, input_width);
        let output_tiles = split(p, output_width);
        let order = (0..output_tiles.len())
            .flat_map(|o| (0..input_tiles.len()).map(move |i| (i, o)))
            .collect();
        Ok(TilePlan {
            input_tiles,
            output_tiles,
            order,
        })
    }

    /// The hardware decomposition: 32-wide input tiles, 9-wide output tiles.
    pub fn hardware(n: usize, p: usize) -> Result<Self> {
        Self::uniform(n, p, INPUT_TILE, OUTPUT_TILE)
    }

    /// `(input tiles, output tiles)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.input_tiles.len(), self.output_tiles.len())
    }

    /// Checks that the tiles partition `0..n` and `0..p` within the width limits
    /// and that every tile pair is visited exactly once.
    pub fn validate(&self, n: usize, p: usize) -> Result<()> {
        self.validate_widths(n, p, INPUT_TILE, OUTPUT_TILE)
    }

    /// `validate` with explicit tile width limits.
    pub fn validate_widths(&self, n: usize, p: usize, input_max: usize, output_max: usize) -> Result<()> {
        fn partition(tiles: &[Range<usize>], total: usize, max: usize, what: &str) -> Result<()> {
            let mut next = 0;
            for t in tiles {
                if t.start != next || t.is_empty() || t.len() > max {
                    return Err(Error::TilePlan(format!(
                        "{what} tile {t:?} breaks the partition of 0..{total} into tiles of at most {max}"
                    )));
                }
                next = t.end;
            }
            if next != total {
                return Err(Error::TilePlan(format!("{what} tiles cover 0..{next}, not 0..{total}")));
            }
            Ok(())
        }
        partition(&self.input_tiles, n, input_max, "input")?;
        partition(&self.output_tiles, p, output_max, "output")?;
        let (ni, no) = self.grid();
        let mut seen = vec![false; ni * no];
        for &(i, o) in &self.order {
            if i >= ni || o >= no || std::mem::replace(&mut seen[o * ni + i], true) {
                return Err(Error::TilePlan(format!(
                    "tile pair ({i}, {o}) is out of range or repeated"
                )));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::TilePlan("tile plan skips a tile pair".into()));
        }
        Ok(())
    }
}

/// Contribution of one `(input, output)` tile pair, `[out - output.start][pixel]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePartial {
    pub input: Range<usize>,
    pub output: Range<usize>,
    pub sums: Vec<Accumulator>,
}

/// Tiled pointwise convolution in fixed point. Partial sums stay at
/// accumulator precision across input tiles; requantization happens once.
pub fn conv_pointwise_tiled_q(
    input: &QTensor,
    weights: &QKernel,
    ep: &QEpilogue,
    plan: &TilePlan,
    stats: &mut OpStats,
) -> Result<(QTensor, Vec<TilePartial>)> {
    check_pointwise_q(input, weights, ep)?;
    let w = &weights.kernel;
    let (n, p) = (w.in_channels, w.out_channels);
    plan.validate(n, p)?;
    let pixels = input.shape.pixels();
    let acc_frac = input.params.frac_bits() + weights.params.frac_bits();
    let mut acc = vec![Accumulator::default(); p * pixels];
    let mut partials = Vec::with_capacity(plan.order.len());
    for &(i, o) in &plan.order {
        let (ins, outs) = (plan.input_tiles[i].clone(), plan.output_tiles[o].clone());
        let sums: Vec<Accumulator> = pointwise_sums(input, w, ins.clone(), outs.clone())
            .into_iter()
            .map(|s| Accumulator::wrap(s as i128))
            .collect();
        let base = outs.start * pixels;
        for (a, s) in acc[base..base + sums.len()].iter_mut().zip(&sums) {
            *a = a.add(s.value());
        }
        stats.macs += (ins.len() * outs.len() * pixels) as u64;
        partials.push(TilePartial {
            input: ins,
            output: outs,
            sums,
        });
    }
    let data = acc
        .iter()
        .enumerate()
        .map(|(j, &a)| ep.apply(a, j / pixels, acc_frac, stats))
        .collect();
    let shape = TensorShape {
        channels: p,
        ..input.shape
    };
    Ok((QTensor::from_vec(shape, data, ep.out)?, partials))
}

/// Tiled pointwise convolution in reals. Each output element sums its input
/// tiles in plan order.
pub fn conv_pointwise_tiled(
    input: &Tensor,
    weights: &Kernel<f64>,
    bias: Option<&[f64]>,
    plan: &TilePlan,
    stats: &mut OpStats,
) -> Result<Tensor> {
    let (n, p) = (weights.in_channels, weights.out_channels);
    if n != input.shape.channels || weights.size != 1 {
        return Err(Error::Shape(format!(
            "pointwise kernel {p}x{n} does not match input {}",
            input.shape
        )));
    }
    if bias.is_some_and(|b| b.len() != p) {
        return Err(Error::Shape("bias length differs from output channels".into()));
    }
    plan.validate(n, p)?;
    let pixels = input.shape.pixels();
    let mut out = vec![0.0; p * pixels];
    for &(i, o) in &plan.order {
        for oc in plan.output_tiles[o].clone() {
            let dst = &mut out[oc * pixels..(oc + 1) * pixels];
            for c in plan.input_tiles[i].clone() {
                let w = weights.data[oc * n + c];
                for (d, s) in dst.iter_mut().zip(&input.data[c * pixels..(c + 1) * pixels]) {
                    *d += s * w;
                }
            }
        }
        stats.macs += (plan.input_tiles[i].len() * plan.output_tiles[o].len() * pixels) as u64;
    }
    if let Some(b) = bias {
        for (oc, chunk) in out.chunks_mut(pixels).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[oc]);
        }
    }
    Tensor::from_vec(
        TensorShape {
            channels: p,
            ..input.shape
        },
        out,
    )
}
