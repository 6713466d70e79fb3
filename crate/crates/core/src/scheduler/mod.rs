//! Maps a network onto the MME array and reports end-to-end performance.
//!
//! Layers run one after another. Within a layer the work is cut into rounds;
//! each round's weights occupy one ping-pong bank. The load for round `j` is
//! issued when round `j - 1` starts computing, so round `j` stalls for
//! `max(0, transfer_j - duration_{j-1} - gap_j)` cycles, where `gap_j` is the
//! post-pipeline drain between layers. The network's first round is preloaded.

mod config;
mod cosim;
mod plan;

pub use config::{AcceleratorConfig, DwcPolicy, PolicyConfig, PwcPolicy};
pub use cosim::{simulate_network, CoSimulation};
pub use plan::{schedule_layer, Assignment, LayerSchedule, Round, Work};

use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::memory::{feature_map_residency, stall_cycles};
use crate::network::{network_cost, LayerKind, NetworkSpec, TensorShape};

/// Cycles of one layer. `cycles()` excludes the drain, which is charged as
/// inter-layer overhead.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTiming {
    pub index: usize,
    pub kind: LayerKind,
    pub input: TensorShape,
    pub output: TensorShape,
    pub rounds: u64,
    pub compute: u64,
    pub fill: u64,
    pub stall: u64,
    pub drain: u64,
    pub macs: u64,
    pub weight_bits: u64,
}

impl LayerTiming {
    pub fn cycles(&self) -> u64 {
        self.compute + self.fill + self.stall
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub network: String,
    pub num_mmes: usize,
    pub clock_hz: u64,
    pub layers: Vec<LayerTiming>,
    pub total_cycles: u64,
    pub compute_cycles: u64,
    pub fill_cycles: u64,
    pub stall_cycles: u64,
    /// Post-pipeline drains between layers.
    pub overhead_cycles: u64,
    /// Input image and first weight round, loaded before cycle 0.
    pub preload_cycles: u64,
    /// Convolution MACs executed on the array.
    pub macs: u64,
    /// Operations counted toward achieved GOPS.
    pub ops: u64,
    /// `num_mmes * multipliers * 2 * clock`.
    pub peak_ops_per_second: u128,
}

impl PerformanceReport {
    /// Seconds per frame.
    pub fn latency_ratio(&self) -> Ratio<u128> {
        Ratio::new(self.total_cycles as u128, self.clock_hz as u128)
    }

    /// Frames per second.
    pub fn fps_ratio(&self) -> Ratio<u128> {
        Ratio::new(self.clock_hz as u128, self.total_cycles.max(1) as u128)
    }

    /// Operations per second.
    pub fn achieved_ratio(&self) -> Ratio<u128> {
        self.fps_ratio() * self.ops as u128
    }

    pub fn utilization_ratio(&self) -> Ratio<u128> {
        self.achieved_ratio() / self.peak_ops_per_second
    }

    pub fn latency_s(&self) -> f64 {
        self.total_cycles as f64 / self.clock_hz as f64
    }

    pub fn fps(&self) -> f64 {
        self.clock_hz as f64 / self.total_cycles as f64
    }

    pub fn achieved_gops(&self) -> f64 {
        self.ops as f64 * self.fps() / 1e9
    }

    pub fn peak_gops(&self) -> f64 {
        self.peak_ops_per_second as f64 / 1e9
    }

    pub fn utilization(&self) -> f64 {
        ratio_f64(self.utilization_ratio())
    }

    /// Key/value summary followed by a per-layer table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kv: [(&str, String); 17] = [
            ("network", self.network.clone()),
            ("num_mmes", self.num_mmes.to_string()),
            ("clock_hz", self.clock_hz.to_string()),
            ("total_cycles", self.total_cycles.to_string()),
            ("compute_cycles", self.compute_cycles.to_string()),
            ("fill_cycles", self.fill_cycles.to_string()),
            ("stall_cycles", self.stall_cycles.to_string()),
            ("overhead_cycles", self.overhead_cycles.to_string()),
            ("preload_cycles", self.preload_cycles.to_string()),
            ("latency_ms", format!("{:.6}", self.latency_s() * 1e3)),
            ("fps", format!("{:.3}", self.fps())),
            ("macs", self.macs.to_string()),
            ("ops", self.ops.to_string()),
            ("achieved_gops", format!("{:.3}", self.achieved_gops())),
            ("peak_gops", format!("{:.3}", self.peak_gops())),
            ("utilization", format!("{:.6}", self.utilization())),
            ("layers", self.layers.len().to_string()),
        ];
        for (k, v) in kv {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(
            s,
            "\n{:>5} {:<7} {:>12} {:>12} {:>6} {:>9} {:>6} {:>6} {:>5} {:>9}",
            "layer", "kind", "input", "output", "rounds", "compute", "fill", "stall", "drain", "cycles"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:>5} {:<7} {:>12} {:>12} {:>6} {:>9} {:>6} {:>6} {:>5} {:>9}",
                l.index,
                l.kind.to_string(),
                l.input.to_string(),
                l.output.to_string(),
                l.rounds,
                l.compute,
                l.fill,
                l.stall,
                l.drain,
                l.cycles()
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,kind,input,output,rounds,compute,fill,stall,drain,cycles,macs,weight_bits\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                l.index,
                l.kind,
                l.input,
                l.output,
                l.rounds,
                l.compute,
                l.fill,
                l.stall,
                l.drain,
                l.cycles(),
                l.macs,
                l.weight_bits
            );
        }
        s
    }
}

pub(crate) fn ratio_f64(r: Ratio<u128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Totals and identities shared by the estimator and the co-simulator.
pub(crate) fn assemble(
    net: &NetworkSpec,
    cfg: &AcceleratorConfig,
    layers: Vec<LayerTiming>,
    first_round_bits: u64,
) -> Result<PerformanceReport> {
    let cost = network_cost(net)?;
    let macs: u64 = layers.iter().map(|l| l.macs).sum();
    let mut ops = 2 * macs;
    if cfg.policy.count_elementwise_ops {
        ops += 2 * cost.pool_macs + cost.residual_adds;
    }
    let transfer = |bits: u64| cfg.external_memory.transfer_cycles(bits.div_ceil(8), cfg.clock_hz);
    let sum = |f: fn(&LayerTiming) -> u64| layers.iter().map(f).sum::<u64>();
    let (compute, fill, stall, drain) = (sum(|l| l.compute), sum(|l| l.fill), sum(|l| l.stall), sum(|l| l.drain));
    Ok(PerformanceReport {
        network: net.name.clone(),
        num_mmes: cfg.num_mmes,
        clock_hz: cfg.clock_hz,
        total_cycles: compute + fill + stall + drain,
        compute_cycles: compute,
        fill_cycles: fill,
        stall_cycles: stall,
        overhead_cycles: drain,
        preload_cycles: transfer(net.input_shape.bits()) + transfer(first_round_bits),
        macs,
        ops,
        peak_ops_per_second: cfg.peak_ops_per_second(),
        layers,
    })
}

pub(crate) fn check_feasible(net: &NetworkSpec, cfg: &AcceleratorConfig) -> Result<Vec<LayerSchedule>> {
    cfg.validate()?;
    net.validate()?;
    feature_map_residency(net, &cfg.feature_map).check()?;
    net.layers
        .iter()
        .enumerate()
        .map(|(i, l)| schedule_layer(l, cfg).map_err(|e| plan::at_layer(e, i)))
        .collect()
}

/// Closed-form performance of `net` on `cfg`.
pub fn estimate_network(net: &NetworkSpec, cfg: &AcceleratorConfig) -> Result<PerformanceReport> {
    let schedules = check_feasible(net, cfg)?;
    let transfer = |bits: u64| cfg.external_memory.transfer_cycles(bits.div_ceil(8), cfg.clock_hz);
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut first_round_bits = None;
    // Duration of the previous round and the drain since it ended.
    let mut prev = 0;
    let mut gap = 0;
    for (i, (layer, s)) in net.layers.iter().zip(&schedules).enumerate() {
        let mut stall = 0;
        for r in &s.rounds {
            if first_round_bits.is_none() {
                first_round_bits = Some(r.weight_bits);
            } else {
                stall += stall_cycles(transfer(r.weight_bits), prev + gap);
            }
            prev = r.duration();
            gap = 0;
        }
        let drain = cfg.mme.drain_cycles(layer);
        gap += drain;
        layers.push(LayerTiming {
            index: i,
            kind: layer.kind,
            input: layer.input,
            output: layer.output(),
            rounds: s.rounds.len() as u64,
            compute: s.compute(),
            fill: s.fill(),
            stall,
            drain,
            macs: s.macs(layer),
            weight_bits: s.rounds.iter().map(|r| r.weight_bits).sum(),
        });
    }
    assemble(net, cfg, layers, first_round_bits.unwrap_or(0))
}
