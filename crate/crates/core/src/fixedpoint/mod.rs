//! 16-bit fixed point with per-tensor power-of-two scales.
//!
//! Products accumulate in a 48-bit two's-complement accumulator. Bias is added
//! at accumulator precision, the folded batch-norm multiply-add runs at full
//! width, and the result is requantized to 16 bits exactly once per output
//! element with round-half-to-even.

mod batchnorm;
pub mod format;

pub use batchnorm::{fold_batchnorm, BatchNorm, FoldedBn};

use crate::error::{Error, Result};
use crate::network::Activation;
use crate::tensor::{Kernel, Tensor};
pub use crate::tensor::{QKernel, QParams, QTensor, QVector};

pub const Q_MIN: i16 = i16::MIN;
pub const Q_MAX: i16 = i16::MAX;

/// Accumulator width in bits.
pub const ACC_BITS: u32 = 48;

/// Products per output of one MME adder tree (32 slices x 3x3).
pub const ADDER_TREE_PRODUCTS: u64 = 288;

/// Fractional bits of the average-pool reciprocal.
pub const POOL_RECIP_BITS: i32 = 32;

/// 48-bit two's-complement accumulator carried in an `i64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct Accumulator(i64);

impl Accumulator {
    pub const MAX: i64 = (1 << (ACC_BITS - 1)) - 1;
    pub const MIN: i64 = -(1 << (ACC_BITS - 1));

    /// Wraps `v` into 48 bits, as the hardware register would.
    pub fn wrap(v: i128) -> Self {
        let shift = 128 - ACC_BITS;
        Accumulator(((v << shift) >> shift) as i64)
    }

    pub fn value(self) -> i64 {
        self.0
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, v: i64) -> Self {
        Self::wrap(self.0 as i128 + v as i128)
    }
}

/// `acc + a * b` at accumulator width.
#[inline]
pub fn mac_fixed(a: i16, b: i16, acc: Accumulator) -> Accumulator {
    acc.add(a as i64 * b as i64)
}

/// Minimum accumulator width for `products` worst-case 16x16-bit products.
pub fn required_accumulator_bits(products: u64) -> u32 {
    let guard = 64 - (products.max(1) - 1).leading_zeros();
    16 + 16 + guard
}

/// Divides by `2^shift` with round-half-to-even; a negative shift multiplies.
pub fn round_shift(v: i128, shift: i32) -> i128 {
    if shift <= 0 {
        return v << (-shift) as u32;
    }
    let shift = shift as u32;
    let floor = v >> shift;
    let rem = v - (floor << shift);
    let half = 1i128 << (shift - 1);
    match rem.cmp(&half) {
        std::cmp::Ordering::Greater => floor + 1,
        std::cmp::Ordering::Less => floor,
        std::cmp::Ordering::Equal => floor + (floor & 1),
    }
}

/// Clamps to the 16-bit range; the flag reports saturation.
#[inline]
pub fn saturate(v: i128) -> (i16, bool) {
    if v > Q_MAX as i128 {
        (Q_MAX, true)
    } else if v < Q_MIN as i128 {
        (Q_MIN, true)
    } else {
        (v as i16, false)
    }
}

/// Moves a value from `from` fractional bits to `to` fractional bits.
pub fn align(v: i128, from: i32, to: i32) -> i128 {
    round_shift(v, from - to)
}

/// Saturation and work counters collected while executing layers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpStats {
    pub macs: u64,
    pub saturations: u64,
}

/// `round_half_even(x * 2^e)` saturated to 16 bits.
pub fn quantize_value(x: f64, params: QParams) -> (i16, bool) {
    let scaled = x * (params.frac_bits() as f64).exp2();
    let rounded = scaled.round_ties_even();
    if rounded >= Q_MAX as f64 {
        (Q_MAX, rounded > Q_MAX as f64)
    } else if rounded <= Q_MIN as f64 {
        (Q_MIN, rounded < Q_MIN as f64)
    } else {
        (rounded as i16, false)
    }
}

pub fn dequantize_value(q: i16, params: QParams) -> f64 {
    q as f64 * params.ulp()
}

/// Quantizes every element; saturations are counted in `stats`.
pub fn quantize(t: &Tensor, params: QParams, stats: &mut OpStats) -> QTensor {
    let data = quantize_slice(&t.data, params, stats);
    QTensor {
        shape: t.shape,
        data,
        params,
    }
}

pub fn quantize_slice(values: &[f64], params: QParams, stats: &mut OpStats) -> Vec<i16> {
    values
        .iter()
        .map(|&x| {
            let (q, sat) = quantize_value(x, params);
            stats.saturations += sat as u64;
            q
        })
        .collect()
}

pub fn dequantize(q: &QTensor) -> Tensor {
    Tensor {
        shape: q.shape,
        data: q.data.iter().map(|&v| dequantize_value(v, q.params)).collect(),
    }
}

/// Largest scale in range that leaves the calibration data unsaturated.
///
/// An all-zero input gets the finest scale; data too large for the coarsest
/// scale gets the coarsest one and will saturate.
pub fn choose_scale(values: &[f64]) -> Result<QParams> {
    if values.is_empty() {
        return Err(Error::invalid("cannot choose a scale for an empty tensor"));
    }
    let mut max = 0.0f64;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite);
        }
        max = max.max(v.abs());
    }
    let mut e = QParams::MAX_FRAC_BITS as i32;
    while e > QParams::MIN_FRAC_BITS as i32 && max * (e as f64).exp2() > Q_MAX as f64 {
        e -= 1;
    }
    QParams::new(e)
}

pub fn quantize_kernel(k: &Kernel<f64>, stats: &mut OpStats) -> Result<QKernel> {
    let params = choose_scale(&k.data)?;
    Ok(QKernel {
        kernel: Kernel {
            out_channels: k.out_channels,
            in_channels: k.in_channels,
            size: k.size,
            data: quantize_slice(&k.data, params, stats),
        },
        params,
    })
}

pub fn quantize_vector(v: &[f64], stats: &mut OpStats) -> Result<QVector> {
    let params = choose_scale(v)?;
    Ok(QVector {
        data: quantize_slice(v, params, stats),
        params,
    })
}

pub fn dequantize_kernel(k: &QKernel) -> Kernel<f64> {
    Kernel {
        out_channels: k.kernel.out_channels,
        in_channels: k.kernel.in_channels,
        size: k.kernel.size,
        data: k.kernel.data.iter().map(|&v| dequantize_value(v, k.params)).collect(),
    }
}

pub fn dequantize_vector(v: &QVector) -> Vec<f64> {
    v.data.iter().map(|&q| dequantize_value(q, v.params)).collect()
}

/// Folded batch norm in fixed point: `y = x * scale + shift` per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QNorm {
    pub scale: QVector,
    pub shift: QVector,
}

impl QNorm {
    pub fn quantize(bn: &FoldedBn, stats: &mut OpStats) -> Result<Self> {
        Ok(QNorm {
            scale: quantize_vector(&bn.scale, stats)?,
            shift: quantize_vector(&bn.shift, stats)?,
        })
    }

    pub fn dequantize(&self) -> FoldedBn {
        FoldedBn {
            scale: dequantize_vector(&self.scale),
            shift: dequantize_vector(&self.shift),
        }
    }
}

/// `min(max(x, 0), 6)` at scale `params`, with 6 itself quantized (and saturated).
pub fn activate_fixed(q: i16, act: Activation, params: QParams) -> i16 {
    match act {
        Activation::None => q,
        Activation::Relu => q.max(0),
        Activation::Relu6 => {
            let (six, _) = quantize_value(6.0, params);
            q.clamp(0, six)
        }
    }
}

/// Everything that happens to an accumulator after the multiplier array:
/// bias in the adder tree, then Norm, requantization and ReLU.
#[derive(Debug, Clone, Copy)]
pub struct QEpilogue<'a> {
    pub bias: Option<&'a QVector>,
    pub norm: Option<&'a QNorm>,
    pub activation: Activation,
    pub out: QParams,
}

impl<'a> QEpilogue<'a> {
    /// Plain requantization with no bias, norm or activation.
    pub fn identity(out: QParams) -> Self {
        QEpilogue {
            bias: None,
            norm: None,
            activation: Activation::None,
            out,
        }
    }

    /// Adds the channel bias at accumulator precision.
    pub fn add_bias(&self, acc: Accumulator, channel: usize, acc_frac: i32) -> Accumulator {
        match self.bias {
            Some(b) => {
                let aligned = align(b.data[channel] as i128, b.params.frac_bits(), acc_frac);
                Accumulator::wrap(acc.value() as i128 + aligned)
            }
            None => acc,
        }
    }

    /// Norm, requantize and activate an accumulator that already includes the bias.
    pub fn finish(&self, acc: Accumulator, channel: usize, acc_frac: i32, stats: &mut OpStats) -> i16 {
        let (value, frac) = match self.norm {
            Some(n) => {
                let s = &n.scale;
                let frac = acc_frac + s.params.frac_bits();
                let mut v = acc.value() as i128 * s.data[channel] as i128;
                v += align(n.shift.data[channel] as i128, n.shift.params.frac_bits(), frac);
                (v, frac)
            }
            None => (acc.value() as i128, acc_frac),
        };
        let (q, sat) = saturate(round_shift(value, frac - self.out.frac_bits()));
        stats.saturations += sat as u64;
        activate_fixed(q, self.activation, self.out)
    }

    /// Bias then `finish`.
    pub fn apply(&self, acc: Accumulator, channel: usize, acc_frac: i32, stats: &mut OpStats) -> i16 {
        self.finish(self.add_bias(acc, channel, acc_frac), channel, acc_frac, stats)
    }
}

/// Rescales `q` from `from` to `to` (shift only), saturating.
pub fn rescale(q: i16, from: QParams, to: QParams, stats: &mut OpStats) -> i16 {
    let (v, sat) = saturate(align(q as i128, from.frac_bits(), to.frac_bits()));
    stats.saturations += sat as u64;
    v
}

/// Saturating residual add at the scale of `main`.
pub fn residual_add_fixed(main: &QTensor, shortcut: &QTensor, stats: &mut OpStats) -> Result<QTensor> {
    if main.shape != shortcut.shape {
        return Err(Error::Shape(format!(
            "residual add of {} and {}",
            main.shape, shortcut.shape
        )));
    }
    let data = main
        .data
        .iter()
        .zip(&shortcut.data)
        .map(|(&a, &b)| {
            let b = rescale(b, shortcut.params, main.params, stats);
            let (v, sat) = saturate(a as i128 + b as i128);
            stats.saturations += sat as u64;
            v
        })
        .collect();
    Ok(QTensor {
        shape: main.shape,
        data,
        params: main.params,
    })
}

/// Reciprocal of the pool window element count at `POOL_RECIP_BITS` fractional bits.
pub fn pool_reciprocal(count: usize) -> i64 {
    let one = 1i128 << POOL_RECIP_BITS;
    let c = count as i128;
    ((2 * one + c) / (2 * c)) as i64
}

/// Average of a window sum at the input scale: `round(sum * recip / 2^32)`.
pub fn average_fixed(sum: i64, count: usize, stats: &mut OpStats) -> i16 {
    let v = sum as i128 * pool_reciprocal(count) as i128;
    let (q, sat) = saturate(round_shift(v, POOL_RECIP_BITS));
    stats.saturations += sat as u64;
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(e: i32) -> QParams {
        QParams::new(e).unwrap()
    }

    #[test]
    fn quantize_examples() {
        for e in -8..=15 {
            assert_eq!(quantize_value(0.0, p(e)).0, 0);
        }
        assert_eq!(quantize_value(1.0, p(8)), (256, false));
        assert_eq!(quantize_value(200.0, p(8)), (32767, true));
        assert_eq!(quantize_value(-200.0, p(8)), (-32768, true));
        // Ties go to even.
        assert_eq!(quantize_value(2.5 / 256.0, p(8)).0, 2);
        assert_eq!(quantize_value(3.5 / 256.0, p(8)).0, 4);
    }

    #[test]
    fn choose_scale_examples() {
        assert_eq!(choose_scale(&[0.5, -1.0]).unwrap().frac_bits(), 14);
        assert_eq!(choose_scale(&[0.0; 4]).unwrap().frac_bits(), 15);
        assert_eq!(choose_scale(&[6.0]).unwrap().frac_bits(), 12);
        assert_eq!(choose_scale(&[1e9]).unwrap().frac_bits(), -8);
        assert!(choose_scale(&[f64::NAN]).is_err());
        assert!(choose_scale(&[]).is_err());
    }

    #[test]
    fn choose_scale_matches_brute_force() {
        for &m in &[1e-6, 0.01, 0.3, 1.0, 1.5, 6.0, 100.0, 4095.9, 32767.0, 8e6] {
            let brute = (-8..=15)
                .rev()
                .find(|&e| m * (e as f64).exp2() <= 32767.0)
                .unwrap_or(-8);
            assert_eq!(choose_scale(&[m]).unwrap().frac_bits(), brute, "max {m}");
        }
    }

    #[test]
    fn mac_examples() {
        let acc = Accumulator::default().add(12345);
        assert_eq!(mac_fixed(0, 777, acc), acc);
        let worst = mac_fixed(-32768, -32768, Accumulator::default());
        assert_eq!(worst.value(), 1_073_741_824);
        let mut acc = Accumulator::default();
        for _ in 0..ADDER_TREE_PRODUCTS {
            acc = mac_fixed(-32768, -32768, acc);
        }
        assert_eq!(acc.value(), 309_237_645_312);
        assert!(acc.value() < 1 << 47);
        assert_eq!(required_accumulator_bits(ADDER_TREE_PRODUCTS), 41);
        assert!(required_accumulator_bits(ADDER_TREE_PRODUCTS) <= ACC_BITS);
    }

    #[test]
    fn accumulator_wraps_at_48_bits() {
        let top = Accumulator::wrap(Accumulator::MAX as i128);
        assert_eq!(top.add(1).value(), Accumulator::MIN);
    }

    #[test]
    fn round_shift_ties_even() {
        assert_eq!(round_shift(5, 1), 2);
        assert_eq!(round_shift(7, 1), 4);
        assert_eq!(round_shift(-5, 1), -2);
        assert_eq!(round_shift(-7, 1), -4);
        assert_eq!(round_shift(-6, 2), -2);
        assert_eq!(round_shift(3, -2), 12);
    }

    #[test]
    fn relu6_at_scale() {
        assert_eq!(activate_fixed(1600, Activation::Relu6, p(8)), 1536);
        assert_eq!(activate_fixed(-3, Activation::Relu, p(8)), 0);
        assert_eq!(activate_fixed(-3, Activation::None, p(8)), -3);
        // 6 does not fit at e = 13; the clamp becomes saturation.
        assert_eq!(activate_fixed(32000, Activation::Relu6, p(13)), 32000);
    }

    #[test]
    fn pool_one_hot_global_average() {
        let mut stats = OpStats::default();
        // 49.0 at e = 8 over a 7x7 window is 1.0.
        assert_eq!(average_fixed(49 * 256, 49, &mut stats), 256);
        for c in [-32768i64, -1, 0, 1, 1234, 32767] {
            assert_eq!(average_fixed(49 * c, 49, &mut stats) as i64, c);
        }
    }

    proptest! {
        #[test]
        fn round_trip_half_ulp(e in -8i32..=15, u in -1.0f64..1.0) {
            let params = p(e);
            let x = u * 32767.0 * params.ulp();
            let (q, _) = quantize_value(x, params);
            prop_assert!((dequantize_value(q, params) - x).abs() <= 0.5 * params.ulp());
        }

        #[test]
        fn quantize_is_monotone(e in -8i32..=15, a in -1e6f64..1e6, b in -1e6f64..1e6) {
            let params = p(e);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_value(lo, params).0 <= quantize_value(hi, params).0);
        }

        #[test]
        fn adder_tree_never_overflows(products in proptest::collection::vec((any::<i16>(), any::<i16>()), 288)) {
            let mut acc = Accumulator::default();
            let mut exact = 0i128;
            for (a, b) in products {
                acc = mac_fixed(a, b, acc);
                exact += a as i128 * b as i128;
            }
            prop_assert_eq!(acc.value() as i128, exact);
        }
    }
}
