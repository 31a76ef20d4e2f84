use super::SsmError;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// How the fused Δ/B/C buffer produces per-timestep parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BufferMode {
    /// Row `t - 1` of a `t_max × 3d` buffer holds the diagonals for step `t`.
    TimeIndexed,
    /// A `d × 3d` projection maps each (gated) input `u_t` to its diagonals.
    InputProjected,
}

impl BufferMode {
    pub fn name(self) -> &'static str {
        match self {
            BufferMode::TimeIndexed => "time-indexed",
            BufferMode::InputProjected => "input-projected",
        }
    }
}

impl fmt::Display for BufferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BufferMode {
    type Err = SsmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "time-indexed" | "time_indexed" | "time" => Ok(BufferMode::TimeIndexed),
            "input-projected" | "input_projected" | "input" => Ok(BufferMode::InputProjected),
            other => Err(SsmError::InvalidParams(format!("unknown buffer mode `{other}`"))),
        }
    }
}

/// Storage for the Δ, B and C diagonals in three contiguous column
/// segments: `[0, d)` raw Δ, `[d, 2d)` B, `[2d, 3d)` C.
#[derive(Debug, Clone)]
pub struct FusedBuffer {
    mode: BufferMode,
    d: usize,
    pub weight: Tensor,
}

impl FusedBuffer {
    pub fn new(mode: BufferMode, d: usize, weight: Tensor) -> Result<Self, SsmError> {
        if weight.shape().len() != 2 || weight.cols() != 3 * d {
            return Err(SsmError::ShapeMismatch(format!(
                "fused buffer must have 3d = {} columns, got shape {:?}",
                3 * d,
                weight.shape()
            )));
        }
        if mode == BufferMode::InputProjected && weight.rows() != d {
            return Err(SsmError::ShapeMismatch(format!(
                "input-projected buffer must have d = {d} rows, got {}",
                weight.rows()
            )));
        }
        Ok(Self { mode, d, weight })
    }

    pub fn mode(&self) -> BufferMode {
        self.mode
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn rows(&self) -> usize {
        self.weight.rows()
    }

    pub fn delta_cols(&self) -> std::ops::Range<usize> {
        0..self.d
    }

    pub fn b_cols(&self) -> std::ops::Range<usize> {
        self.d..2 * self.d
    }

    pub fn c_cols(&self) -> std::ops::Range<usize> {
        2 * self.d..3 * self.d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MambaConfig {
    pub d: usize,
    pub t_max: usize,
    pub mode: BufferMode,
    pub gate_enabled: bool,
}

impl MambaConfig {
    pub fn new(d: usize, t_max: usize, mode: BufferMode) -> Self {
        Self {
            d,
            t_max,
            mode,
            gate_enabled: false,
        }
    }

    pub fn with_gate(mut self, enabled: bool) -> Self {
        self.gate_enabled = enabled;
        self
    }

    pub fn fused_rows(&self) -> usize {
        match self.mode {
            BufferMode::TimeIndexed => self.t_max,
            BufferMode::InputProjected => self.d,
        }
    }

    fn validate(&self) -> Result<(), SsmError> {
        if self.d == 0 || self.t_max == 0 {
            return Err(SsmError::InvalidParams("d and t_max must be positive".to_string()));
        }
        Ok(())
    }
}

/// Learnable parameters of one selective SSM block.
///
/// `A = -exp(a_log)` elementwise, so every decay rate is strictly negative
/// whatever value `a_log` takes.
#[derive(Debug, Clone)]
pub struct MambaParams {
    pub d: usize,
    pub t_max: usize,
    pub a_log: Tensor,
    pub fused: FusedBuffer,
    pub delta_bias: Tensor,
    pub gate_enabled: bool,
    pub gate_weight: Tensor,
}

impl MambaParams {
    /// Assemble parameters from tensors, checking every shape.
    pub fn from_parts(
        config: MambaConfig,
        a_log: Tensor,
        fused_weight: Tensor,
        delta_bias: Tensor,
        gate_weight: Tensor,
    ) -> Result<Self, SsmError> {
        config.validate()?;
        let d = config.d;
        for (name, t) in [("a_log", &a_log), ("delta_bias", &delta_bias)] {
            if t.shape() != [d] {
                return Err(SsmError::ShapeMismatch(format!(
                    "{name} must have shape [{d}], got {:?}",
                    t.shape()
                )));
            }
        }
        if gate_weight.shape() != [d, d] {
            return Err(SsmError::ShapeMismatch(format!(
                "gate_weight must have shape [{d}, {d}], got {:?}",
                gate_weight.shape()
            )));
        }
        if fused_weight.shape().len() != 2 || fused_weight.rows() != config.fused_rows() {
            return Err(SsmError::ShapeMismatch(format!(
                "fused buffer must have {} rows in {} mode, got shape {:?}",
                config.fused_rows(),
                config.mode,
                fused_weight.shape()
            )));
        }
        if let Some(bad) = a_log.data().iter().find(|v| !v.is_finite()) {
            return Err(SsmError::InvalidParams(format!("a_log entry {bad} is not finite")));
        }
        let fused = FusedBuffer::new(config.mode, d, fused_weight)?;
        Ok(Self {
            d,
            t_max: config.t_max,
            a_log,
            fused,
            delta_bias,
            gate_enabled: config.gate_enabled,
            gate_weight,
        })
    }

    /// All-zero parameters: `A = -1`, zero bias, zero buffer, zero gate.
    pub fn zeros(config: MambaConfig) -> Result<Self, SsmError> {
        let d = config.d;
        Self::from_parts(
            config,
            Tensor::zeros(&[d]),
            Tensor::zeros2(config.fused_rows(), 3 * d),
            Tensor::zeros(&[d]),
            Tensor::zeros2(d, d),
        )
    }

    /// Training initialisation: decay rates spread over `[1, 16]`, step
    /// sizes log-uniform in `[1e-3, 1e-1]` and Gaussian buffer/gate weights
    /// with standard deviation `1/sqrt(d)`.
    pub fn init<R: Rng + ?Sized>(config: MambaConfig, rng: &mut R) -> Result<Self, SsmError> {
        config.validate()?;
        let d = config.d;
        let a_log: Vec<f64> = (0..d)
            .map(|j| {
                let frac = if d > 1 { j as f64 / (d - 1) as f64 } else { 0.0 };
                (1.0 + 15.0 * frac).ln()
            })
            .collect();
        let dt = Uniform::new(1e-3_f64.ln(), 1e-1_f64.ln()).expect("valid range");
        let delta_bias: Vec<f64> = (0..d)
            .map(|_| {
                let step = dt.sample(rng).exp();
                // inverse softplus
                step + (-(-step).exp_m1()).ln()
            })
            .collect();
        let std = 1.0 / (d as f64).sqrt();
        Self::from_parts(
            config,
            Tensor::from_vec(&[d], a_log),
            gaussian(rng, &[config.fused_rows(), 3 * d], std),
            Tensor::from_vec(&[d], delta_bias),
            gaussian(rng, &[d, d], std),
        )
    }

    /// A random valid block for stability experiments: `a_log ~ N(0, 1)`,
    /// `delta_bias ~ N(0, 1)`, buffer and gate entries Gaussian.
    pub fn random<R: Rng + ?Sized>(config: MambaConfig, rng: &mut R) -> Result<Self, SsmError> {
        config.validate()?;
        let d = config.d;
        let buffer_std = match config.mode {
            BufferMode::TimeIndexed => 1.0,
            BufferMode::InputProjected => 1.0 / (d as f64).sqrt(),
        };
        Self::from_parts(
            config,
            gaussian(rng, &[d], 1.0),
            gaussian(rng, &[config.fused_rows(), 3 * d], buffer_std),
            gaussian(rng, &[d], 1.0),
            gaussian(rng, &[d, d], 1.0 / (d as f64).sqrt()),
        )
    }

    pub fn config(&self) -> MambaConfig {
        MambaConfig {
            d: self.d,
            t_max: self.t_max,
            mode: self.fused.mode(),
            gate_enabled: self.gate_enabled,
        }
    }

    pub fn mode(&self) -> BufferMode {
        self.fused.mode()
    }

    /// Materialised `A = -exp(a_log)`.
    pub fn a(&self) -> Vec<f64> {
        self.a_log.data().iter().map(|v| -v.exp()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.a_log.numel() + self.delta_bias.numel() + self.fused.weight.numel() + self.gate_weight.numel()
    }

    /// Bitwise equality of every tensor.
    pub fn bit_eq(&self, other: &MambaParams) -> bool {
        self.config() == other.config()
            && self.a_log.bit_eq(&other.a_log)
            && self.delta_bias.bit_eq(&other.delta_bias)
            && self.fused.weight.bit_eq(&other.fused.weight)
            && self.gate_weight.bit_eq(&other.gate_weight)
    }
}

pub(crate) fn gaussian<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_vec(shape, (0..n).map(|_| normal.sample(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fused_layout_segments() {
        let p = MambaParams::zeros(MambaConfig::new(4, 10, BufferMode::TimeIndexed)).unwrap();
        assert_eq!(p.fused.weight.shape(), &[10, 12]);
        assert_eq!(p.fused.delta_cols(), 0..4);
        assert_eq!(p.fused.b_cols(), 4..8);
        assert_eq!(p.fused.c_cols(), 8..12);
        let q = MambaParams::zeros(MambaConfig::new(4, 10, BufferMode::InputProjected)).unwrap();
        assert_eq!(q.fused.weight.shape(), &[4, 12]);
    }

    #[test]
    fn decay_rates_strictly_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = MambaParams::random(MambaConfig::new(8, 4, BufferMode::InputProjected), &mut rng).unwrap();
            assert!(p.a().iter().all(|&a| a < 0.0));
        }
    }

    #[test]
    fn init_step_sizes_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = MambaParams::init(MambaConfig::new(16, 8, BufferMode::InputProjected), &mut rng).unwrap();
        for &b in p.delta_bias.data() {
            let step = crate::numerics::softplus(b);
            assert!((1e-3 - 1e-12..=1e-1 + 1e-12).contains(&step), "{step}");
        }
    }

    #[test]
    fn shape_errors() {
        let cfg = MambaConfig::new(3, 5, BufferMode::TimeIndexed);
        let err = MambaParams::from_parts(
            cfg,
            Tensor::zeros(&[3]),
            Tensor::zeros2(5, 8),
            Tensor::zeros(&[3]),
            Tensor::zeros2(3, 3),
        )
        .unwrap_err();
        assert!(err.to_string().contains("columns") || err.to_string().contains("fused"));
        assert!(MambaParams::zeros(MambaConfig::new(0, 5, BufferMode::TimeIndexed)).is_err());
    }
}
