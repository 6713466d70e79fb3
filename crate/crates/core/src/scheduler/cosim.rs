use crate::error::{Error, Result};
use crate::fixedpoint::{Accumulator, OpStats};
use crate::memory::{BankEvent, BankState, PingPongBuffer};
use crate::mme::{finish_pointwise, pool_stage, Mme, PassCycles};
use crate::network::{LayerKind, LayerSpec, NetworkSpec};
use crate::tensor::QTensor;
use crate::weights::{QLayerWeights, QNetworkWeights};

use super::{assemble, check_feasible, AcceleratorConfig, LayerSchedule, LayerTiming, PerformanceReport, Work};

/// Output, timing and weight-buffer trace of one co-simulated inference.
#[derive(Debug, Clone, PartialEq)]
pub struct CoSimulation {
    pub output: QTensor,
    pub report: PerformanceReport,
    /// Bank transitions in time order; replayable with `PingPongBuffer::verify_trace`.
    pub trace: Vec<BankEvent>,
    pub stats: OpStats,
}

/// Order of simultaneous events: a bank frees before the other starts
/// draining, and a load completes before the next one is issued.
fn priority(state: BankState) -> u8 {
    match state {
        BankState::Idle => 0,
        BankState::Ready => 1,
        BankState::Draining => 2,
        BankState::Loading => 3,
    }
}

/// Timestamps of the weight buffer and the MME array.
struct Timeline<'a> {
    cfg: &'a AcceleratorConfig,
    /// When the array may start its next round.
    now: u64,
    /// Start of the previous round, when the next load is issued.
    prev_start: Option<u64>,
    last_bank: Option<usize>,
    first_round_bits: Option<u64>,
    events: Vec<BankEvent>,
}

impl Timeline<'_> {
    /// Brings a round's weights in and returns its start cycle.
    fn begin(&mut self, bits: u64) -> (u64, Option<usize>) {
        let first = self.first_round_bits.is_none();
        if first {
            self.first_round_bits = Some(bits);
        }
        if bits == 0 {
            return (self.now, None);
        }
        let bank = self.last_bank.map_or(0, |b| 1 - b);
        let ready = match self.prev_start {
            Some(issue) if !first => {
                let x = self
                    .cfg
                    .external_memory
                    .transfer_cycles(bits.div_ceil(8), self.cfg.clock_hz);
                self.events.push(BankEvent {
                    time: issue,
                    bank,
                    state: BankState::Loading,
                });
                self.events.push(BankEvent {
                    time: issue + x,
                    bank,
                    state: BankState::Ready,
                });
                issue + x
            }
            _ => {
                self.events.push(BankEvent {
                    time: 0,
                    bank,
                    state: BankState::Ready,
                });
                0
            }
        };
        self.last_bank = Some(bank);
        (self.now.max(ready), Some(bank))
    }

    fn end(&mut self, start: u64, duration: u64, bank: Option<usize>) {
        if let Some(bank) = bank {
            self.events.push(BankEvent {
                time: start,
                bank,
                state: BankState::Draining,
            });
            self.events.push(BankEvent {
                time: start + duration,
                bank,
                state: BankState::Idle,
            });
        }
        self.prev_start = Some(start);
        self.now = start + duration;
    }
}

/// Partial sums per MME and output group.
type Partials = Vec<Vec<Option<Vec<Accumulator>>>>;

#[allow(clippy::too_many_arguments)]
fn run_work(
    mme: &mut Mme,
    k: usize,
    work: &Work,
    layer: &LayerSpec,
    w: &QLayerWeights,
    input: &QTensor,
    shortcut: Option<&QTensor>,
    out: &mut QTensor,
    partials: &mut Partials,
    stats: &mut OpStats,
) -> Result<PassCycles> {
    let ep = w.epilogue(layer.activation);
    let pixels = input.shape.pixels();
    let group = |outs: &std::ops::Range<usize>| outs.start / mme.cfg.pointwise_outputs();
    match work {
        Work::Depthwise { channels, rows } => mme.depthwise_pass(
            input,
            channels.clone(),
            rows.clone(),
            &w.kernel,
            layer.stride,
            &ep,
            shortcut,
            out,
            stats,
        ),
        Work::Standard { outputs } => mme.standard_pass(
            input,
            outputs.clone(),
            &w.kernel,
            layer.stride,
            &ep,
            shortcut,
            out,
            stats,
        ),
        Work::Pointwise { inputs, outputs } => {
            let acc =
                partials[k][group(outputs)].get_or_insert_with(|| vec![Accumulator::default(); outputs.len() * pixels]);
            mme.pointwise_pass(input, inputs.clone(), outputs.clone(), &w.kernel, acc)
        }
        Work::Reduce { outputs } => {
            let g = group(outputs);
            let parts: Vec<Vec<Accumulator>> = (0..partials.len())
                .filter(|&j| j != k)
                .filter_map(|j| partials[j][g].take())
                .collect();
            let refs: Vec<&[Accumulator]> = parts.iter().map(Vec::as_slice).collect();
            let acc = partials[k][g].get_or_insert_with(|| vec![Accumulator::default(); outputs.len() * pixels]);
            mme.reduce_pass(&refs, acc, pixels)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_layer(
    index: usize,
    layer: &LayerSpec,
    schedule: &LayerSchedule,
    weights: Option<&QLayerWeights>,
    input: &QTensor,
    shortcut: Option<&QTensor>,
    mmes: &mut [Mme],
    timeline: &mut Timeline,
    stats: &mut OpStats,
) -> Result<(QTensor, LayerTiming)> {
    let mut timing = LayerTiming {
        index,
        kind: layer.kind,
        input: layer.input,
        output: layer.output(),
        rounds: schedule.rounds.len() as u64,
        compute: 0,
        fill: 0,
        stall: 0,
        drain: timeline.cfg.mme.drain_cycles(layer),
        macs: 0,
        weight_bits: 0,
    };
    if layer.kind.is_pool() {
        let out = pool_stage(layer, input, stats)?;
        timeline.now += timing.drain;
        return Ok((out, timing));
    }
    let w = weights.ok_or(Error::MissingWeights(index))?;
    let mut out = QTensor::zeros(layer.output(), w.out);
    let groups = layer.output_channels().div_ceil(timeline.cfg.mme.pointwise_outputs());
    let mut partials: Partials = vec![vec![None; groups]; mmes.len()];
    let macs_before: u64 = mmes.iter().map(|m| m.stats.macs).sum();
    for round in &schedule.rounds {
        let ready_for = timeline.now;
        let (start, bank) = timeline.begin(round.weight_bits);
        timing.stall += start - ready_for;
        let mut critical = PassCycles::default();
        for a in &round.assignments {
            let c = run_work(
                &mut mmes[a.mme],
                a.mme,
                &a.work,
                layer,
                w,
                input,
                shortcut,
                &mut out,
                &mut partials,
                stats,
            )?;
            if c.total() > critical.total() {
                critical = c;
            }
        }
        timing.compute += critical.compute;
        timing.fill += critical.fill;
        timing.weight_bits += round.weight_bits;
        timeline.end(start, critical.total(), bank);
    }
    if layer.kind == LayerKind::PointwiseConv {
        let acc_frac = input.params.frac_bits() + w.kernel.params.frac_bits();
        let ep = w.epilogue(layer.activation);
        let width = timeline.cfg.mme.pointwise_outputs();
        for g in 0..groups {
            let mut holders = partials.iter_mut().filter_map(|p| p[g].take());
            let (Some(acc), None) = (holders.next(), holders.next()) else {
                return Err(Error::invalid(format!(
                    "layer {index}: output group {g} is not reduced to one MME"
                )));
            };
            let outs = g * width..((g + 1) * width).min(layer.output_channels());
            finish_pointwise(&acc, outs, acc_frac, &ep, shortcut, &mut out, stats);
        }
    }
    timing.macs = mmes.iter().map(|m| m.stats.macs).sum::<u64>() - macs_before;
    stats.macs += timing.macs;
    timeline.now += timing.drain;
    Ok((out, timing))
}

/// Runs the network through the cycle-stepped MMEs under the same schedule
/// as `estimate_network`, timing every round against the weight buffer.
pub fn simulate_network(
    net: &NetworkSpec,
    weights: &QNetworkWeights,
    input: &QTensor,
    cfg: &AcceleratorConfig,
) -> Result<CoSimulation> {
    let schedules = check_feasible(net, cfg)?;
    weights.check(net)?;
    if input.shape != net.input_shape {
        return Err(Error::Shape(format!(
            "input {} but the network takes {}",
            input.shape, net.input_shape
        )));
    }
    let mut mmes: Vec<Mme> = (0..cfg.num_mmes).map(|_| Mme::new(cfg.mme)).collect();
    let mut timeline = Timeline {
        cfg,
        now: 0,
        prev_start: None,
        last_bank: None,
        first_round_bits: None,
        events: Vec::new(),
    };
    let mut stats = OpStats::default();
    let mut saved: Vec<Option<QTensor>> = vec![None; net.layers.len()];
    let mut timings = Vec::with_capacity(net.layers.len());
    let mut x = input.clone();
    for (i, (layer, schedule)) in net.layers.iter().zip(&schedules).enumerate() {
        if (i + 1..net.layers.len()).any(|j| net.shortcut_source(j) == Some(i)) {
            saved[i] = Some(x.clone());
        }
        let shortcut = net.shortcut_source(i).and_then(|s| saved[s].take());
        let (y, timing) = run_layer(
            i,
            layer,
            schedule,
            weights.layers[i].as_ref(),
            &x,
            shortcut.as_ref(),
            &mut mmes,
            &mut timeline,
            &mut stats,
        )?;
        timings.push(timing);
        x = y;
    }
    let mut trace = std::mem::take(&mut timeline.events);
    trace.sort_by_key(|e| (e.time, priority(e.state)));
    PingPongBuffer::verify_trace(cfg.weight_buffer, &trace)?;
    let report = assemble(net, cfg, timings, timeline.first_round_bits.unwrap_or(0))?;
    if report.total_cycles != timeline.now {
        return Err(Error::invalid("layer timings do not add up to the simulated clock"));
    }
    Ok(CoSimulation {
        output: x,
        report,
        trace,
        stats,
    })
}
