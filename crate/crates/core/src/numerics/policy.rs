use super::NumericFormat;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Which numeric format each computation stage uses.
///
/// Activations and gradients may be half precision; parameter updates are
/// always applied to master weights held in `master_format`, which is FP32
/// or wider.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionPolicy {
    pub activation_format: NumericFormat,
    pub gradient_format: NumericFormat,
    pub master_format: NumericFormat,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("master format must be fp32 or fp64, got {0}")]
    NarrowMaster(NumericFormat),
    #[error("unknown precision policy `{0}` (expected fp64, fp32, bf16, fp16)")]
    Unknown(String),
}

impl PrecisionPolicy {
    pub fn new(
        activation_format: NumericFormat,
        gradient_format: NumericFormat,
        master_format: NumericFormat,
    ) -> Result<Self, PolicyError> {
        if !matches!(master_format, NumericFormat::Fp32 | NumericFormat::Fp64) {
            return Err(PolicyError::NarrowMaster(master_format));
        }
        Ok(Self {
            activation_format,
            gradient_format,
            master_format,
        })
    }

    pub const FP64: PrecisionPolicy = PrecisionPolicy {
        activation_format: NumericFormat::Fp64,
        gradient_format: NumericFormat::Fp64,
        master_format: NumericFormat::Fp64,
    };

    pub const FP32: PrecisionPolicy = PrecisionPolicy {
        activation_format: NumericFormat::Fp32,
        gradient_format: NumericFormat::Fp32,
        master_format: NumericFormat::Fp32,
    };

    /// Half-precision activations and gradients over FP32 master weights.
    pub fn mixed(half: NumericFormat) -> Self {
        Self {
            activation_format: half,
            gradient_format: half,
            master_format: NumericFormat::Fp32,
        }
    }

    pub fn bf16() -> Self {
        Self::mixed(NumericFormat::Bf16)
    }

    pub fn fp16() -> Self {
        Self::mixed(NumericFormat::Fp16)
    }

    #[inline]
    pub fn act(&self, x: f64) -> f64 {
        self.activation_format.quantize(x)
    }

    #[inline]
    pub fn grad(&self, x: f64) -> f64 {
        self.gradient_format.quantize(x)
    }

    pub fn label(&self) -> String {
        if self.activation_format == self.gradient_format
            && (self.activation_format == self.master_format || self.master_format == NumericFormat::Fp32)
        {
            self.activation_format.name().to_string()
        } else {
            format!(
                "{}/{}/{}",
                self.activation_format, self.gradient_format, self.master_format
            )
        }
    }
}

impl Default for PrecisionPolicy {
    fn default() -> Self {
        Self::FP64
    }
}

impl fmt::Display for PrecisionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for PrecisionPolicy {
    type Err = PolicyError;

    /// Accepts a preset name (`fp64`, `fp32`, `bf16`, `fp16`) or an explicit
    /// `activation/gradient/master` triple.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('/').collect();
        let parse = |p: &str| p.parse::<NumericFormat>().map_err(|_| PolicyError::Unknown(s.into()));
        match parts.as_slice() {
            [one] => match parse(one)? {
                NumericFormat::Fp64 => Ok(Self::FP64),
                NumericFormat::Fp32 => Ok(Self::FP32),
                half => Ok(Self::mixed(half)),
            },
            [a, g, m] => Self::new(parse(a)?, parse(g)?, parse(m)?),
            _ => Err(PolicyError::Unknown(s.into())),
        }
    }
}
