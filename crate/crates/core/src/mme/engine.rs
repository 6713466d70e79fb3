use std::ops::Range;

use super::{AdderTreeMode, CycleReport, MmeConfig, STANDARD_INPUT_CHANNELS};
use crate::error::{Error, Result};
use crate::fixedpoint::{average_fixed, rescale, saturate, Accumulator, OpStats, QEpilogue};
use crate::network::{LayerKind, LayerSpec};
use crate::tensor::{QKernel, QParams, QTensor, TensorShape};
use crate::weights::QLayerWeights;

/// Shift register of the most recent `len` streamed values.
#[derive(Debug, Clone, Default)]
pub struct LineBuffer {
    data: Vec<i16>,
    head: usize,
}

impl LineBuffer {
    pub fn new(len: usize) -> Self {
        LineBuffer {
            data: vec![0; len.max(1)],
            head: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reset(&mut self, len: usize) {
        self.data.clear();
        self.data.resize(len.max(1), 0);
        self.head = 0;
    }

    #[inline]
    pub fn push(&mut self, v: i16) {
        self.head += 1;
        if self.head == self.data.len() {
            self.head = 0;
        }
        self.data[self.head] = v;
    }

    /// Value pushed `offset` cycles ago (`0` is the newest).
    #[inline]
    pub fn tap(&self, offset: usize) -> i16 {
        let n = self.data.len();
        debug_assert!(offset < n);
        self.data[if offset <= self.head {
            self.head - offset
        } else {
            self.head + n - offset
        }]
    }
}

/// Warm-up and streaming cycles of one pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PassCycles {
    pub fill: u64,
    pub compute: u64,
}

impl PassCycles {
    pub fn total(&self) -> u64 {
        self.fill + self.compute
    }
}

/// Instrumentation of one engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MmeStats {
    pub cycles: u64,
    pub macs: u64,
    pub passes: u64,
    pub peak_macs_per_cycle: u64,
    /// Largest number of adder-tree outputs in one cycle, per mode
    /// (depthwise, pointwise, standard).
    pub peak_outputs_per_cycle: [u64; 3],
}

fn mode_index(mode: AdderTreeMode) -> usize {
    match mode {
        AdderTreeMode::DepthwiseSum => 0,
        AdderTreeMode::PointwiseSum => 1,
        AdderTreeMode::StandardSum => 2,
    }
}

/// Geometry of one streamed pass.
#[derive(Debug, Clone, Copy)]
struct Stream {
    m: usize,
    k: usize,
    pad: usize,
}

impl Stream {
    /// Window tap `(dy, dx)` around `(y, x)`, zero outside the image.
    #[inline]
    fn tap(&self, line: &LineBuffer, y: usize, x: usize, dy: usize, dx: usize) -> i16 {
        let (iy, ix) = ((y + dy).wrapping_sub(self.pad), (x + dx).wrapping_sub(self.pad));
        if iy >= self.m || ix >= self.m {
            return 0;
        }
        line.tap((self.k - 1 - dy) * self.m + (self.k - 1 - dx))
    }
}

/// Post-pipeline residual stage: shortcut rescaled to the output scale, saturating add.
#[inline]
fn residual(v: i16, shortcut: Option<&QTensor>, idx: usize, out: QParams, stats: &mut OpStats) -> i16 {
    match shortcut {
        Some(s) => {
            let b = rescale(s.data[idx], s.params, out, stats);
            let (r, sat) = saturate(v as i128 + b as i128);
            stats.saturations += sat as u64;
            r
        }
        None => v,
    }
}

/// One cycle-stepped MME.
#[derive(Debug, Clone)]
pub struct Mme {
    pub cfg: MmeConfig,
    lines: Vec<LineBuffer>,
    pub stats: MmeStats,
}

impl Mme {
    pub fn new(cfg: MmeConfig) -> Self {
        Mme {
            cfg,
            lines: vec![LineBuffer::default(); cfg.slices],
            stats: MmeStats::default(),
        }
    }

    fn check_kernel(&self, k: usize) -> Result<()> {
        if k == 0 || k.is_multiple_of(2) || k > self.cfg.kernel_side {
            return Err(Error::Unsupported(format!(
                "kernel {k} on {0}x{0} multiplier slices",
                self.cfg.kernel_side
            )));
        }
        Ok(())
    }

    /// Streams rows `rows` (plus halo) of the channels in `sources`, one channel
    /// per slice. `eval` runs for every stride-aligned window centre and returns
    /// the multiplier count and adder-tree outputs it used.
    #[allow(clippy::too_many_arguments)]
    fn stream<F>(
        &mut self,
        input: &QTensor,
        sources: &[usize],
        rows: Range<usize>,
        k: usize,
        stride: usize,
        mode: AdderTreeMode,
        mut eval: F,
    ) -> Result<PassCycles>
    where
        F: FnMut(&[LineBuffer], &Stream, usize, usize) -> (u64, u64),
    {
        let m = input.shape.side();
        if sources.len() > self.cfg.slices {
            return Err(Error::invalid(format!(
                "{} channels streamed into {} slices",
                sources.len(),
                self.cfg.slices
            )));
        }
        if rows.end > m || rows.is_empty() {
            return Err(Error::invalid(format!("row band {rows:?} outside a {m}-row map")));
        }
        let l = self.cfg.line_buffer().working_length(k, m)?;
        let geo = Stream { m, k, pad: (k - 1) / 2 };
        let lead = geo.pad * m + geo.pad;
        for line in &mut self.lines[..sources.len()] {
            line.reset(l);
        }
        let pixels = (m * m) as isize;
        let first = (rows.start * m) as isize - lead as isize;
        let last = (rows.end * m + lead) as isize;
        let mut pushes = 0usize;
        let mi = mode_index(mode);
        for r in first..last {
            for (line, &c) in self.lines.iter_mut().zip(sources) {
                let v = if (0..pixels).contains(&r) {
                    input.data[c * m * m + r as usize]
                } else {
                    0
                };
                line.push(v);
            }
            pushes += 1;
            if pushes >= l {
                let centre = rows.start * m + (pushes - l);
                let (y, x) = (centre / m, centre % m);
                if y % stride == 0 && x % stride == 0 {
                    let (macs, outputs) = eval(&self.lines[..sources.len()], &geo, y, x);
                    self.stats.macs += macs;
                    self.stats.peak_macs_per_cycle = self.stats.peak_macs_per_cycle.max(macs);
                    let peak = &mut self.stats.peak_outputs_per_cycle[mi];
                    *peak = (*peak).max(outputs);
                }
            }
        }
        let cycles = PassCycles {
            fill: (l - 1) as u64,
            compute: (pushes + 1 - l) as u64,
        };
        self.stats.cycles += cycles.total();
        self.stats.passes += 1;
        Ok(cycles)
    }

    /// Depthwise pass over one channel group and a band of centre rows.
    #[allow(clippy::too_many_arguments)]
    pub fn depthwise_pass(
        &mut self,
        input: &QTensor,
        channels: Range<usize>,
        rows: Range<usize>,
        kernel: &QKernel,
        stride: usize,
        ep: &QEpilogue,
        shortcut: Option<&QTensor>,
        out: &mut QTensor,
        stats: &mut OpStats,
    ) -> Result<PassCycles> {
        let w = &kernel.kernel;
        self.check_kernel(w.size)?;
        let k = w.size;
        let acc_frac = input.params.frac_bits() + kernel.params.frac_bits();
        let sources: Vec<usize> = channels.clone().collect();
        let oshape = out.shape;
        self.stream(
            input,
            &sources,
            rows,
            k,
            stride,
            AdderTreeMode::DepthwiseSum,
            |lines, geo, y, x| {
                for (s, line) in lines.iter().enumerate() {
                    let ch = channels.start + s;
                    let mut sum = 0i64;
                    for dy in 0..k {
                        for dx in 0..k {
                            let v = geo.tap(line, y, x, dy, dx);
                            sum += v as i64 * w.at(ch, 0, dy, dx) as i64;
                        }
                    }
                    let idx = oshape.index(ch, y / stride, x / stride);
                    let v = ep.apply(Accumulator::wrap(sum as i128), ch, acc_frac, stats);
                    out.data[idx] = residual(v, shortcut, idx, out.params, stats);
                }
                ((lines.len() * k * k) as u64, lines.len() as u64)
            },
        )
    }

    /// Standard-convolution pass: three slices per output channel in `outputs`.
    #[allow(clippy::too_many_arguments)]
    pub fn standard_pass(
        &mut self,
        input: &QTensor,
        outputs: Range<usize>,
        kernel: &QKernel,
        stride: usize,
        ep: &QEpilogue,
        shortcut: Option<&QTensor>,
        out: &mut QTensor,
        stats: &mut OpStats,
    ) -> Result<PassCycles> {
        let w = &kernel.kernel;
        self.check_kernel(w.size)?;
        if input.shape.channels != STANDARD_INPUT_CHANNELS || w.in_channels != STANDARD_INPUT_CHANNELS {
            return Err(Error::Unsupported(format!(
                "standard convolution over {} input channels",
                input.shape.channels
            )));
        }
        if outputs.len() > self.cfg.standard_outputs() {
            return Err(Error::invalid("more output channels than slice groups"));
        }
        let k = w.size;
        let acc_frac = input.params.frac_bits() + kernel.params.frac_bits();
        let sources: Vec<usize> = outputs.clone().flat_map(|_| 0..STANDARD_INPUT_CHANNELS).collect();
        let oshape = out.shape;
        let m = input.shape.side();
        self.stream(
            input,
            &sources,
            0..m,
            k,
            stride,
            AdderTreeMode::StandardSum,
            |lines, geo, y, x| {
                for (g, group) in lines.chunks(STANDARD_INPUT_CHANNELS).enumerate() {
                    let o = outputs.start + g;
                    let mut sum = 0i64;
                    for (n, line) in group.iter().enumerate() {
                        for dy in 0..k {
                            for dx in 0..k {
                                sum += geo.tap(line, y, x, dy, dx) as i64 * w.at(o, n, dy, dx) as i64;
                            }
                        }
                    }
                    let idx = oshape.index(o, y / stride, x / stride);
                    let v = ep.apply(Accumulator::wrap(sum as i128), o, acc_frac, stats);
                    out.data[idx] = residual(v, shortcut, idx, out.params, stats);
                }
                ((lines.len() * k * k) as u64, outputs.len() as u64)
            },
        )
    }

    /// Pointwise pass: one input tile against one output group, accumulating
    /// into `acc` laid out `[output - outputs.start][pixel]`.
    pub fn pointwise_pass(
        &mut self,
        input: &QTensor,
        inputs: Range<usize>,
        outputs: Range<usize>,
        kernel: &QKernel,
        acc: &mut [Accumulator],
    ) -> Result<PassCycles> {
        let w = &kernel.kernel;
        if w.size != 1 {
            return Err(Error::invalid("pointwise pass needs a 1x1 kernel"));
        }
        if outputs.len() > self.cfg.pointwise_outputs() {
            return Err(Error::invalid("more output channels than multiplier positions"));
        }
        let m = input.shape.side();
        let pixels = m * m;
        if acc.len() != outputs.len() * pixels {
            return Err(Error::invalid("accumulator block does not match the output group"));
        }
        let n = w.in_channels;
        let sources: Vec<usize> = inputs.clone().collect();
        self.stream(
            input,
            &sources,
            0..m,
            1,
            1,
            AdderTreeMode::PointwiseSum,
            |lines, _, y, x| {
                let px = y * m + x;
                for (j, o) in outputs.clone().enumerate() {
                    let row = &w.data[o * n + inputs.start..o * n + inputs.end];
                    let sum: i64 = lines
                        .iter()
                        .zip(row)
                        .map(|(line, &wv)| line.tap(0) as i64 * wv as i64)
                        .sum();
                    let a = &mut acc[j * pixels + px];
                    *a = a.add(sum);
                }
                ((lines.len() * outputs.len()) as u64, outputs.len() as u64)
            },
        )
    }

    /// Adds `parts` (partial sums from other engines) into `acc`, one pixel per cycle.
    pub fn reduce_pass(
        &mut self,
        parts: &[&[Accumulator]],
        acc: &mut [Accumulator],
        pixels: usize,
    ) -> Result<PassCycles> {
        if parts.iter().any(|p| p.len() != acc.len()) || pixels == 0 || !acc.len().is_multiple_of(pixels) {
            return Err(Error::invalid("reduction blocks differ in size"));
        }
        let outputs = acc.len() / pixels;
        for px in 0..pixels {
            for j in 0..outputs {
                let i = j * pixels + px;
                acc[i] = parts.iter().fold(acc[i], |a, p| a.add(p[i].value()));
            }
        }
        let cycles = PassCycles {
            fill: 0,
            compute: pixels as u64,
        };
        self.stats.cycles += cycles.total();
        self.stats.passes += 1;
        Ok(cycles)
    }
}

/// Post pipeline after the last input tile: bias, norm, requantize, activate, residual.
pub(crate) fn finish_pointwise(
    acc: &[Accumulator],
    outputs: Range<usize>,
    acc_frac: i32,
    ep: &QEpilogue,
    shortcut: Option<&QTensor>,
    out: &mut QTensor,
    stats: &mut OpStats,
) {
    let pixels = out.shape.pixels();
    for (j, o) in outputs.enumerate() {
        for px in 0..pixels {
            let idx = o * pixels + px;
            let v = ep.apply(acc[j * pixels + px], o, acc_frac, stats);
            out.data[idx] = residual(v, shortcut, idx, out.params, stats);
        }
    }
}

/// Pooling stage of the post pipeline: window accumulator, then the
/// reciprocal multiply (average) or a running comparator (max).
pub(crate) fn pool_stage(layer: &LayerSpec, input: &QTensor, stats: &mut OpStats) -> Result<QTensor> {
    let (k, s) = (layer.kernel, layer.stride);
    let side = input.shape.side();
    if k == 0 || s == 0 || s > k || k > side {
        return Err(Error::Shape(format!("pool window {k} stride {s} on {}", input.shape)));
    }
    let shape = layer.output();
    let mut out = QTensor::zeros(shape, input.params);
    for c in 0..shape.channels {
        for oy in 0..shape.side() {
            for ox in 0..shape.side() {
                let (y0, x0) = (oy * s, ox * s);
                let (y1, x1) = ((y0 + k).min(side), (x0 + k).min(side));
                let mut sum = Accumulator::default();
                let mut max = i16::MIN;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let v = input.at(c, y, x);
                        sum = sum.add(v as i64);
                        max = max.max(v);
                    }
                }
                out.data[shape.index(c, oy, ox)] = match layer.kind {
                    LayerKind::MaxPool => max,
                    _ => {
                        let count = (y1 - y0) * (x1 - x0);
                        stats.macs += count as u64;
                        average_fixed(sum.value(), count, stats)
                    }
                };
            }
        }
    }
    Ok(out)
}

fn chunks(total: usize, width: usize) -> impl Iterator<Item = Range<usize>> {
    (0..total.div_ceil(width)).map(move |i| i * width..((i + 1) * width).min(total))
}

/// Runs a whole convolution layer on one MME and reports its cycles.
pub fn simulate_layer(
    layer: &LayerSpec,
    weights: &QLayerWeights,
    input: &QTensor,
    shortcut: Option<&QTensor>,
    mode: AdderTreeMode,
    cfg: &MmeConfig,
    stats: &mut OpStats,
) -> Result<(QTensor, CycleReport)> {
    if AdderTreeMode::for_kind(layer.kind) != Some(mode) {
        return Err(Error::invalid(format!("{} layer cannot run in {mode:?}", layer.kind)));
    }
    if input.shape != layer.input {
        return Err(Error::Shape(format!(
            "input {} but the layer takes {}",
            input.shape, layer.input
        )));
    }
    let mut mme = Mme::new(*cfg);
    let ep = weights.epilogue(layer.activation);
    let kernel = &weights.kernel;
    let oshape: TensorShape = layer.output();
    let mut out = QTensor::zeros(oshape, weights.out);
    let mut report = CycleReport::default();
    let mut add = |c: PassCycles| {
        report.compute += c.compute;
        report.fill += c.fill;
        report.passes += 1;
    };
    let m = layer.input.side();
    match layer.kind {
        LayerKind::DepthwiseConv => {
            for group in chunks(layer.input.channels, cfg.slices) {
                add(mme.depthwise_pass(input, group, 0..m, kernel, layer.stride, &ep, shortcut, &mut out, stats)?);
            }
        }
        LayerKind::StandardConv => {
            for outs in chunks(oshape.channels, cfg.standard_outputs()) {
                add(mme.standard_pass(input, outs, kernel, layer.stride, &ep, shortcut, &mut out, stats)?);
            }
        }
        _ => {
            let pixels = oshape.pixels();
            let acc_frac = input.params.frac_bits() + kernel.params.frac_bits();
            for outs in chunks(oshape.channels, cfg.pointwise_outputs()) {
                let mut acc = vec![Accumulator::default(); outs.len() * pixels];
                for ins in chunks(layer.input.channels, cfg.slices) {
                    add(mme.pointwise_pass(input, ins, outs.clone(), kernel, &mut acc)?);
                }
                finish_pointwise(&acc, outs, acc_frac, &ep, shortcut, &mut out, stats);
            }
        }
    }
    stats.macs += mme.stats.macs;
    Ok((out, report))
}
