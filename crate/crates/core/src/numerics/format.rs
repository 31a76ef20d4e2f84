//! Reduced-precision emulation on an `f64` carrier.
//!
//! Every format is described by its explicit mantissa width and exponent
//! range; rounding is performed directly from the `f64` value (no
//! intermediate `f32` hop, which would double-round).

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumericFormat {
    Fp16,
    Bf16,
    Fp32,
    Fp64,
}

impl NumericFormat {
    pub const ALL: [NumericFormat; 4] = [
        NumericFormat::Fp16,
        NumericFormat::Bf16,
        NumericFormat::Fp32,
        NumericFormat::Fp64,
    ];

    /// Explicit (stored) mantissa bits.
    pub fn mantissa_bits(self) -> u32 {
        match self {
            NumericFormat::Fp16 => 10,
            NumericFormat::Bf16 => 7,
            NumericFormat::Fp32 => 23,
            NumericFormat::Fp64 => 52,
        }
    }

    /// Smallest normal exponent.
    pub fn min_exponent(self) -> i32 {
        match self {
            NumericFormat::Fp16 => -14,
            NumericFormat::Bf16 | NumericFormat::Fp32 => -126,
            NumericFormat::Fp64 => -1022,
        }
    }

    /// Largest finite exponent.
    pub fn max_exponent(self) -> i32 {
        match self {
            NumericFormat::Fp16 => 15,
            NumericFormat::Bf16 | NumericFormat::Fp32 => 127,
            NumericFormat::Fp64 => 1023,
        }
    }

    /// Storage width in bytes, used by the memory meter.
    pub fn bytes(self) -> usize {
        match self {
            NumericFormat::Fp16 | NumericFormat::Bf16 => 2,
            NumericFormat::Fp32 => 4,
            NumericFormat::Fp64 => 8,
        }
    }

    /// Largest finite value.
    pub fn max_finite(self) -> f64 {
        let p = self.mantissa_bits() as i32;
        (2.0 - pow2(-p)) * pow2(self.max_exponent())
    }

    /// Unit roundoff, 2^-(p+1).
    pub fn unit_roundoff(self) -> f64 {
        pow2(-(self.mantissa_bits() as i32) - 1)
    }

    pub fn name(self) -> &'static str {
        match self {
            NumericFormat::Fp16 => "fp16",
            NumericFormat::Bf16 => "bf16",
            NumericFormat::Fp32 => "fp32",
            NumericFormat::Fp64 => "fp64",
        }
    }

    #[inline]
    pub fn quantize(self, x: f64) -> f64 {
        quantize(x, self)
    }

    /// True when `x` already lies on this format's value grid.
    pub fn contains(self, x: f64) -> bool {
        let q = quantize(x, self);
        q == x || (q.is_nan() && x.is_nan())
    }
}

impl fmt::Display for NumericFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown numeric format `{0}` (expected fp16, bf16, fp32 or fp64)")]
pub struct UnknownFormat(pub String);

impl FromStr for NumericFormat {
    type Err = UnknownFormat;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp16" | "f16" | "half" => Ok(NumericFormat::Fp16),
            "bf16" | "bfloat16" => Ok(NumericFormat::Bf16),
            "fp32" | "f32" | "float" => Ok(NumericFormat::Fp32),
            "fp64" | "f64" | "double" => Ok(NumericFormat::Fp64),
            _ => Err(UnknownFormat(s.to_string())),
        }
    }
}

/// 2^e as an exact `f64` for e in the normal range.
#[inline]
fn pow2(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// Round `x` to the nearest value of `fmt`, ties to even.
///
/// Overflow goes to ±∞ under IEEE round-to-nearest (a value rounds to
/// infinity once it reaches `max_finite + ulp/2`). Subnormals are kept.
/// NaN propagates.
#[inline]
pub fn quantize(x: f64, fmt: NumericFormat) -> f64 {
    match fmt {
        NumericFormat::Fp64 => x,
        // The hardware conversion is IEEE round-to-nearest-even, subnormals included.
        NumericFormat::Fp32 => x as f32 as f64,
        NumericFormat::Fp16 | NumericFormat::Bf16 => round_to_grid(x, fmt),
    }
}

#[inline]
fn round_to_grid(x: f64, fmt: NumericFormat) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    // f64 subnormals are far below every emulated format's subnormal range.
    let exp = if biased == 0 { -1023 } else { biased - 1023 };
    let p = fmt.mantissa_bits() as i32;
    if exp >= fmt.min_exponent() {
        // Normal range: round the magnitude bits directly. A carry out of
        // the fraction bumps the exponent, which is the correct result.
        let drop = (52 - p) as u32;
        let lsb = (bits >> drop) & 1;
        let rounded = f64::from_bits((bits + (1u64 << (drop - 1)) - 1 + lsb) & !((1u64 << drop) - 1));
        return if rounded.abs() > fmt.max_finite() {
            f64::INFINITY.copysign(x)
        } else {
            rounded
        };
    }
    let quantum_exp = exp.max(fmt.min_exponent()) - p;
    let scaled = x * pow2(-quantum_exp);
    let rounded = scaled.round_ties_even() * pow2(quantum_exp);
    if rounded.abs() > fmt.max_finite() {
        f64::INFINITY.copysign(x)
    } else {
        rounded
    }
}

/// Quantize every element of a slice in place.
pub fn quantize_slice(xs: &mut [f64], fmt: NumericFormat) {
    if fmt == NumericFormat::Fp64 {
        return;
    }
    for x in xs {
        *x = quantize(*x, fmt);
    }
}
