use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::KernelError;

/// Effective rounding applied to operands and partial results.
///
/// Storage is always `f64`; the reduced modes are emulated by explicit
/// round-to-nearest-even on the 52-bit fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PrecisionMode {
    Full64,
    /// IEEE binary32.
    Full32,
    /// `mantissa_bits` explicit fraction bits (bf16 ≈ 7, fp16 ≈ 10), with the
    /// binary32 overflow threshold.
    EmulatedReduced {
        mantissa_bits: u32,
    },
}

pub const MIN_MANTISSA_BITS: u32 = 4;
pub const MAX_MANTISSA_BITS: u32 = 23;

impl PrecisionMode {
    pub fn reduced(mantissa_bits: u32) -> Result<Self, KernelError> {
        if !(MIN_MANTISSA_BITS..=MAX_MANTISSA_BITS).contains(&mantissa_bits) {
            return Err(KernelError::InvalidPrecision(mantissa_bits));
        }
        Ok(PrecisionMode::EmulatedReduced { mantissa_bits })
    }

    pub fn is_exact(self) -> bool {
        matches!(self, PrecisionMode::Full64)
    }

    /// Infallible rounding used inside kernels. Values beyond the format's
    /// range become infinite and are caught by the kernels' output checks.
    #[inline]
    pub(crate) fn round(self, x: f64) -> f64 {
        match self {
            PrecisionMode::Full64 => x,
            PrecisionMode::Full32 => x as f32 as f64,
            PrecisionMode::EmulatedReduced { mantissa_bits } => {
                let y = round_mantissa(x, mantissa_bits);
                if y.abs() > f32::MAX as f64 {
                    f64::INFINITY.copysign(y)
                } else {
                    y
                }
            }
        }
    }
}

/// Round-to-nearest-even of an `f64` to `bits` explicit fraction bits.
///
/// Works on the raw bits: adding `half - 1` plus the lowest kept bit and
/// truncating rounds ties to even, and a carry out of the fraction bumps the
/// exponent, which is the correct result.
#[inline]
fn round_mantissa(x: f64, bits: u32) -> f64 {
    if !x.is_finite() {
        return x;
    }
    let shift = 52 - bits;
    let raw = x.to_bits();
    let mask = (1u64 << shift) - 1;
    let bias = (mask >> 1) + ((raw >> shift) & 1);
    f64::from_bits((raw + bias) & !mask)
}

/// Round `x` as the given precision would store it.
///
/// Errors on non-finite input and on overflow of the target format.
pub fn quantize(x: f64, precision: PrecisionMode) -> Result<f64, KernelError> {
    if !x.is_finite() {
        return Err(KernelError::NonFinite { index: 0, value: x });
    }
    let y = precision.round(x);
    if y.is_finite() {
        Ok(y)
    } else {
        Err(KernelError::Overflow { value: x, precision })
    }
}

impl fmt::Display for PrecisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrecisionMode::Full64 => f.write_str("full64"),
            PrecisionMode::Full32 => f.write_str("full32"),
            PrecisionMode::EmulatedReduced { mantissa_bits } => write!(f, "reduced:{mantissa_bits}"),
        }
    }
}

impl FromStr for PrecisionMode {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full64" => Ok(PrecisionMode::Full64),
            "full32" => Ok(PrecisionMode::Full32),
            other => {
                let bits = other
                    .strip_prefix("reduced:")
                    .and_then(|b| b.parse::<u32>().ok())
                    .ok_or_else(|| KernelError::Parse(format!("unknown precision mode `{other}`")))?;
                PrecisionMode::reduced(bits)
            }
        }
    }
}

impl TryFrom<String> for PrecisionMode {
    type Error = KernelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<PrecisionMode> for String {
    fn from(p: PrecisionMode) -> String {
        p.to_string()
    }
}
