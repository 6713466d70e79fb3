//! Shapes and dense tensors shared by every module.
//!
//! Feature maps are stored `[channel][row][col]`, kernels `[out][in][kh][kw]`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of bits in one stored activation or weight.
pub const ELEMENT_BITS: u64 = 16;

/// Height, width and channel count of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl TensorShape {
    /// Square `side x side x channels` shape; rejects zero dimensions.
    pub fn square(side: usize, channels: usize) -> Result<Self> {
        Self::new(side, side, channels)
    }

    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        let shape = TensorShape {
            height,
            width,
            channels,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Shape(format!("{self} has a zero dimension")));
        }
        if self.height != self.width {
            return Err(Error::Shape(format!("{self} is not square")));
        }
        Ok(())
    }

    /// Spatial side length (feature maps are square).
    pub fn side(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Storage size at 16 bits per element.
    pub fn bits(&self) -> u64 {
        self.len() as u64 * ELEMENT_BITS
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Real-valued feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: TensorShape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: TensorShape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_vec(shape: TensorShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!("{} values for shape {shape}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Tensor { shape, data })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.index(c, y, x)]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Power-of-two scale of a 16-bit fixed-point tensor: `real = stored / 2^frac_bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QParams {
    frac_bits: i8,
}

impl QParams {
    pub const MIN_FRAC_BITS: i8 = -8;
    pub const MAX_FRAC_BITS: i8 = 15;

    pub fn new(frac_bits: i32) -> Result<Self> {
        if !(Self::MIN_FRAC_BITS as i32..=Self::MAX_FRAC_BITS as i32).contains(&frac_bits) {
            return Err(Error::invalid(format!(
                "frac_bits {frac_bits} outside [{}, {}]",
                Self::MIN_FRAC_BITS,
                Self::MAX_FRAC_BITS
            )));
        }
        Ok(QParams {
            frac_bits: frac_bits as i8,
        })
    }

    pub fn frac_bits(&self) -> i32 {
        self.frac_bits as i32
    }

    /// Real value of one stored unit.
    pub fn ulp(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }
}

/// 16-bit two's-complement feature map with a per-tensor scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QTensor {
    pub shape: TensorShape,
    pub data: Vec<i16>,
    pub params: QParams,
}

impl QTensor {
    pub fn zeros(shape: TensorShape, params: QParams) -> Self {
        QTensor {
            shape,
            data: vec![0; shape.len()],
            params,
        }
    }

    pub fn from_vec(shape: TensorShape, data: Vec<i16>, params: QParams) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!("{} values for shape {shape}", data.len())));
        }
        Ok(QTensor { shape, data, params })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> i16 {
        self.data[self.shape.index(c, y, x)]
    }
}

/// Convolution kernel `[out][in][k][k]`. Depthwise kernels have `in_channels == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub size: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Kernel<T> {
    pub fn new(out_channels: usize, in_channels: usize, size: usize, data: Vec<T>) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || size == 0 {
            return Err(Error::Shape("kernel with a zero dimension".into()));
        }
        if data.len() != out_channels * in_channels * size * size {
            return Err(Error::Shape(format!(
                "kernel {out_channels}x{in_channels}x{size}x{size} given {} values",
                data.len()
            )));
        }
        Ok(Kernel {
            out_channels,
            in_channels,
            size,
            data,
        })
    }

    #[inline]
    pub fn at(&self, o: usize, i: usize, kh: usize, kw: usize) -> T {
        self.data[((o * self.in_channels + i) * self.size + kh) * self.size + kw]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Fixed-point kernel with one scale for the whole tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QKernel {
    pub kernel: Kernel<i16>,
    pub params: QParams,
}

/// Per-channel fixed-point vector (bias, folded batch-norm scale or shift).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QVector {
    pub data: Vec<i16>,
    pub params: QParams,
}
