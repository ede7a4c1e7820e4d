use serde::{Deserialize, Serialize};

use super::KernelError;

/// Supported code widths, widest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum BitWidth {
    B4,
    B8,
    B12,
    B16,
}

impl BitWidth {
    pub const LADDER: [BitWidth; 4] = [BitWidth::B16, BitWidth::B12, BitWidth::B8, BitWidth::B4];

    pub fn from_bits(bits: u32) -> Result<Self, KernelError> {
        match bits {
            16 => Ok(BitWidth::B16),
            12 => Ok(BitWidth::B12),
            8 => Ok(BitWidth::B8),
            4 => Ok(BitWidth::B4),
            other => Err(KernelError::InvalidBitWidth(other)),
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            BitWidth::B16 => 16,
            BitWidth::B12 => 12,
            BitWidth::B8 => 8,
            BitWidth::B4 => 4,
        }
    }

    /// Largest code magnitude, `2^(bits-1) - 1`.
    pub fn max_code(self) -> i32 {
        (1i32 << (self.bits() - 1)) - 1
    }

    /// Next narrower width, or `None` at 4 bits.
    pub fn step_down(self) -> Option<Self> {
        match self {
            BitWidth::B16 => Some(BitWidth::B12),
            BitWidth::B12 => Some(BitWidth::B8),
            BitWidth::B8 => Some(BitWidth::B4),
            BitWidth::B4 => None,
        }
    }
}

impl TryFrom<u32> for BitWidth {
    type Error = KernelError;

    fn try_from(bits: u32) -> Result<Self, Self::Error> {
        Self::from_bits(bits)
    }
}

impl From<BitWidth> for u32 {
    fn from(b: BitWidth) -> u32 {
        b.bits()
    }
}

/// Symmetric fixed-point format: code `c` represents `c * scale / max_code`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QFormat {
    pub bits: BitWidth,
    pub scale: f64,
}

impl QFormat {
    pub fn new(bits: u32, scale: f64) -> Result<Self, KernelError> {
        let bits = BitWidth::from_bits(bits)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(KernelError::NonPositiveScale(scale));
        }
        Ok(Self { bits, scale })
    }

    pub fn max_code(&self) -> i32 {
        self.bits.max_code()
    }

    /// Real value of one code step.
    pub fn step(&self) -> f64 {
        self.scale / self.max_code() as f64
    }

    pub fn encode(&self, v: f64) -> i32 {
        let m = self.max_code();
        let code = round_half_even(v / self.scale * m as f64);
        code.clamp(-(m as f64), m as f64) as i32
    }

    pub fn decode(&self, code: i32) -> f64 {
        code as f64 * self.scale / self.max_code() as f64
    }
}

pub fn round_half_even(x: f64) -> f64 {
    x.round_ties_even()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedTensor {
    shape: Vec<usize>,
    codes: Vec<i32>,
    qformat: QFormat,
}

impl FixedTensor {
    pub fn new(shape: Vec<usize>, codes: Vec<i32>, qformat: QFormat) -> Result<Self, KernelError> {
        let n: usize = shape.iter().product();
        if codes.len() != n {
            return Err(KernelError::ShapeMismatch(format!("{} codes for shape {shape:?}", codes.len())));
        }
        let m = qformat.max_code();
        if codes.iter().any(|c| c.abs() > m) {
            return Err(KernelError::ShapeMismatch(format!("code outside +-{m}")));
        }
        Ok(Self { shape, codes, qformat })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn qformat(&self) -> QFormat {
        self.qformat
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

pub fn quantize(values: &[f64], shape: &[usize], bits: u32, scale: f64) -> Result<FixedTensor, KernelError> {
    let q = QFormat::new(bits, scale)?;
    let codes = values.iter().map(|&v| q.encode(v)).collect();
    FixedTensor::new(shape.to_vec(), codes, q)
}

pub fn dequantize(t: &FixedTensor) -> Vec<f64> {
    t.codes.iter().map(|&c| t.qformat.decode(c)).collect()
}
