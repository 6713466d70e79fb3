//! Weight ping-pong buffer, on-chip feature-map buffer and external memory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Infeasibility, Result};
use crate::network::NetworkSpec;

/// Bandwidth-limited external port with a fixed per-descriptor setup cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExternalMemoryModel {
    pub bandwidth_bytes_per_s: u64,
    pub dma_setup_cycles: u64,
}

impl Default for ExternalMemoryModel {
    fn default() -> Self {
        ExternalMemoryModel {
            bandwidth_bytes_per_s: 8_500_000_000,
            dma_setup_cycles: 8,
        }
    }
}

impl ExternalMemoryModel {
    pub fn validate(&self) -> Result<()> {
        if self.bandwidth_bytes_per_s == 0 {
            return Err(Error::invalid("external memory bandwidth must be > 0"));
        }
        Ok(())
    }

    /// `ceil(bytes * clock / bandwidth)`, exact.
    pub fn data_cycles(&self, bytes: u64, clock_hz: u64) -> u64 {
        let num = bytes as u128 * clock_hz as u128;
        num.div_ceil(self.bandwidth_bytes_per_s.max(1) as u128) as u64
    }

    /// One contiguous descriptor: setup plus data cycles; zero bytes cost nothing.
    pub fn transfer_cycles(&self, bytes: u64, clock_hz: u64) -> u64 {
        if bytes == 0 {
            return 0;
        }
        self.dma_setup_cycles + self.data_cycles(bytes, clock_hz)
    }
}

/// Weight buffer of two equal banks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PingPongConfig {
    pub bank_bits: u64,
}

impl Default for PingPongConfig {
    fn default() -> Self {
        PingPongConfig { bank_bits: 18_432 }
    }
}

impl PingPongConfig {
    pub const BANKS: u64 = 2;

    pub fn total_bits(&self) -> u64 {
        Self::BANKS * self.bank_bits
    }

    pub fn check_tile(&self, layer: Option<usize>, tile_bits: u64) -> Result<()> {
        if tile_bits > self.bank_bits {
            return Err(Error::Infeasible(Infeasibility::TileOverflow {
                layer,
                tile_bits,
                bank_bits: self.bank_bits,
            }));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BankState {
    Idle,
    Loading,
    Ready,
    Draining,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankEvent {
    pub time: u64,
    pub bank: usize,
    pub state: BankState,
}

/// Two-bank state machine with an event trace.
///
/// Each bank cycles `Idle -> Loading -> Ready -> Draining -> Idle`. At most
/// one bank loads and at most one drains at any time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PingPongBuffer {
    pub config: PingPongConfig,
    states: [BankState; 2],
    trace: Vec<BankEvent>,
}

fn legal(from: BankState, to: BankState) -> bool {
    use BankState::*;
    matches!(
        (from, to),
        (Idle, Loading) | (Loading, Ready) | (Ready, Draining) | (Draining, Idle) | (Idle, Ready)
    )
}

impl PingPongBuffer {
    pub fn new(config: PingPongConfig) -> Self {
        PingPongBuffer {
            config,
            states: [BankState::Idle; 2],
            trace: Vec::new(),
        }
    }

    pub fn state(&self, bank: usize) -> BankState {
        self.states[bank]
    }

    pub fn trace(&self) -> &[BankEvent] {
        &self.trace
    }

    /// Moves `bank` to `state` at `time`; events must be recorded in time order.
    pub fn set(&mut self, time: u64, bank: usize, state: BankState) -> Result<()> {
        if bank >= 2 {
            return Err(Error::invalid(format!("bank {bank} does not exist")));
        }
        if self.trace.last().is_some_and(|e| e.time > time) {
            return Err(Error::invalid("bank events out of time order"));
        }
        if !legal(self.states[bank], state) {
            return Err(Error::invalid(format!(
                "bank {bank}: {:?} -> {state:?} at cycle {time}",
                self.states[bank]
            )));
        }
        let other = self.states[1 - bank];
        if (state == BankState::Loading || state == BankState::Draining) && other == state {
            return Err(Error::invalid(format!("both banks {state:?} at cycle {time}")));
        }
        self.states[bank] = state;
        self.trace.push(BankEvent { time, bank, state });
        Ok(())
    }

    /// Replays a trace and checks the transition and exclusivity rules.
    pub fn verify_trace(config: PingPongConfig, trace: &[BankEvent]) -> Result<()> {
        let mut replay = PingPongBuffer::new(config);
        for e in trace {
            replay.set(e.time, e.bank, e.state)?;
        }
        Ok(())
    }
}

/// On-chip storage for every intermediate feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureMapBuffer {
    pub capacity_bits: u64,
}

impl Default for FeatureMapBuffer {
    fn default() -> Self {
        // 24.5 Mb
        FeatureMapBuffer {
            capacity_bits: 25_690_112,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidencyReport {
    /// Largest sum of live tensors at any layer boundary.
    pub peak_bits: u64,
    /// Layer at which the peak occurs; `None` when the network has no layers.
    pub peak_layer: Option<usize>,
    /// Largest single feature map, network input included.
    pub largest_tensor_bits: u64,
    pub capacity_bits: u64,
    pub fits: bool,
}

impl ResidencyReport {
    pub fn check(&self) -> Result<()> {
        if !self.fits {
            return Err(Error::Infeasible(Infeasibility::Residency {
                peak_bits: self.peak_bits,
                capacity_bits: self.capacity_bits,
            }));
        }
        Ok(())
    }
}

/// While layer `i` runs, its input, its output and every saved shortcut whose
/// consumer is `i` or later are live.
pub fn feature_map_residency(net: &NetworkSpec, fm: &FeatureMapBuffer) -> ResidencyReport {
    let mut peak_bits = net.input_shape.bits();
    let mut peak_layer = None;
    let mut largest = net.input_shape.bits();
    for (i, layer) in net.layers.iter().enumerate() {
        let mut live = layer.input.bits() + layer.output().bits();
        for j in i..net.layers.len() {
            if let Some(src) = net.shortcut_source(j) {
                if src < i {
                    live += net.layers[src].input.bits();
                }
            }
        }
        largest = largest.max(layer.output().bits());
        if peak_layer.is_none() || live > peak_bits {
            peak_bits = peak_bits.max(live);
            peak_layer = Some(i);
        }
    }
    ResidencyReport {
        peak_bits,
        peak_layer,
        largest_tensor_bits: largest,
        capacity_bits: fm.capacity_bits,
        fits: peak_bits <= fm.capacity_bits,
    }
}

/// Byte range of one scatter-gather descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddressRange {
    pub start: u64,
    pub len: u64,
}

/// Scatter-gather transfer: one setup per range, data cycles over the total size.
pub fn dma_transfer(ranges: &[AddressRange], clock_hz: u64, mem: &ExternalMemoryModel) -> Result<u64> {
    mem.validate()?;
    if ranges.iter().any(|r| r.len == 0) {
        return Err(Error::invalid("zero-length DMA range"));
    }
    let mut sorted = ranges.to_vec();
    sorted.sort_by_key(|r| r.start);
    for w in sorted.windows(2) {
        if w[0].start + w[0].len > w[1].start {
            return Err(Error::invalid(format!(
                "DMA ranges at {:#x} and {:#x} overlap",
                w[0].start, w[1].start
            )));
        }
    }
    let bytes: u64 = ranges.iter().map(|r| r.len).sum();
    Ok(ranges.len() as u64 * mem.dma_setup_cycles + mem.data_cycles(bytes, clock_hz))
}

/// Cycles the compute side waits for a transfer that overlaps `window` cycles of work.
pub fn stall_cycles(transfer: u64, window: u64) -> u64 {
    transfer.saturating_sub(window)
}

/// Stall of fetching the next tile (one descriptor) while the current tile computes.
pub fn prefetch_schedule(
    tile_bits: u64,
    compute_cycles: u64,
    clock_hz: u64,
    mem: &ExternalMemoryModel,
    buffer: &PingPongConfig,
) -> Result<u64> {
    mem.validate()?;
    buffer.check_tile(None, tile_bits)?;
    let transfer = mem.transfer_cycles(tile_bits.div_ceil(8), clock_hz);
    Ok(stall_cycles(transfer, compute_cycles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_mobilenet_v2, LayerSpec, TensorShape};

    const CLOCK: u64 = 133_000_000;

    fn no_setup() -> ExternalMemoryModel {
        ExternalMemoryModel {
            dma_setup_cycles: 0,
            ..Default::default()
        }
    }

    #[test]
    fn prefetch_examples() {
        let bank = PingPongConfig::default();
        let tile = 4 * 32 * 9 * 16;
        assert_eq!(tile, 18_432);
        assert_eq!(no_setup().transfer_cycles(2304, CLOCK), 37);
        assert_eq!(prefetch_schedule(tile, 49, CLOCK, &no_setup(), &bank).unwrap(), 0);
        assert_eq!(prefetch_schedule(tile, 37, CLOCK, &no_setup(), &bank).unwrap(), 0);
        let slow = ExternalMemoryModel {
            bandwidth_bytes_per_s: 850_000_000,
            dma_setup_cycles: 0,
        };
        assert_eq!(slow.transfer_cycles(2304, CLOCK), 361);
        assert_eq!(prefetch_schedule(tile, 49, CLOCK, &slow, &bank).unwrap(), 312);
        assert!(matches!(
            prefetch_schedule(tile + 16, 49, CLOCK, &no_setup(), &bank),
            Err(Error::Infeasible(Infeasibility::TileOverflow { .. }))
        ));
    }

    #[test]
    fn dma_examples() {
        let mem = ExternalMemoryModel::default();
        assert_eq!(
            dma_transfer(&[AddressRange { start: 0, len: 2304 }], CLOCK, &no_setup()).unwrap(),
            37
        );
        let two = [
            AddressRange { start: 0, len: 1152 },
            AddressRange { start: 4096, len: 1152 },
        ];
        assert_eq!(dma_transfer(&two, CLOCK, &mem).unwrap(), 2 * 8 + 37);
        assert_eq!(dma_transfer(&[], CLOCK, &mem).unwrap(), 0);
        assert!(dma_transfer(&[AddressRange { start: 0, len: 0 }], CLOCK, &mem).is_err());
        let overlap = [
            AddressRange { start: 0, len: 100 },
            AddressRange { start: 50, len: 100 },
        ];
        assert!(dma_transfer(&overlap, CLOCK, &mem).is_err());
    }

    #[test]
    fn ping_pong_rejects_unsafe_traces() {
        let mut b = PingPongBuffer::new(PingPongConfig::default());
        b.set(0, 0, BankState::Loading).unwrap();
        assert!(b.set(1, 1, BankState::Loading).is_err());
        b.set(5, 0, BankState::Ready).unwrap();
        b.set(5, 0, BankState::Draining).unwrap();
        b.set(6, 1, BankState::Loading).unwrap();
        assert!(b.set(7, 0, BankState::Loading).is_err());
        assert!(b.set(3, 1, BankState::Ready).is_err());
        PingPongBuffer::verify_trace(b.config, b.trace()).unwrap();
    }

    #[test]
    fn mobilenet_residency() {
        let r = feature_map_residency(&build_mobilenet_v2(), &FeatureMapBuffer::default());
        assert_eq!(r.largest_tensor_bits, 19_267_584);
        assert!(r.fits);
        assert!(r.peak_bits >= r.largest_tensor_bits);
    }

    #[test]
    fn empty_net_peak_is_input() {
        let input = TensorShape::square(8, 4).unwrap();
        let net = NetworkSpec::new("empty", input, vec![]).unwrap();
        let r = feature_map_residency(&net, &FeatureMapBuffer::default());
        assert_eq!(r.peak_bits, input.bits());
        assert_eq!(r.peak_layer, None);
    }

    #[test]
    fn oversize_net_is_infeasible() {
        // 30 Mb of live data: 128x128x64 in and 128x128x64 out at 16 bits is 33.5 Mb.
        let input = TensorShape::square(128, 64).unwrap();
        let net = NetworkSpec::new("big", input, vec![LayerSpec::pointwise(input, 64)]).unwrap();
        let r = feature_map_residency(&net, &FeatureMapBuffer::default());
        assert!(!r.fits);
        assert!(matches!(
            r.check(),
            Err(Error::Infeasible(Infeasibility::Residency { .. }))
        ));
    }
}
