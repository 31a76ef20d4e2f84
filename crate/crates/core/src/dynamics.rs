//! Stability of the selective recurrence: maximal Lyapunov exponents (closed
//! form and from Jacobian products) and ε-perturbation divergence probes.
//!
//! For the diagonal recurrence the state Jacobian is
//! `∂x_t/∂x_{t-1} = diag(exp(Δ̄_t ⊙ A))`, so the exponent along channel `j`
//! is `A[j] · mean_t Δ̄_t[j]`, which is never positive because `A < 0` and
//! `Δ̄ ≥ 0`.

use crate::numerics::PrecisionPolicy;
use crate::ssm::{mamba_forward, BufferMode, MambaConfig, MambaParams, SsmError, StateTrace};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Minimum number of usable steps for a deviation-rate fit.
pub const MIN_FIT_POINTS: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum DynamicsError {
    #[error("invalid Δ̄: entry {value} at step {step}, channel {channel} is negative")]
    InvalidDeltaBar { step: usize, channel: usize, value: f64 },
    #[error("insufficient signal: {usable} usable points, need {MIN_FIT_POINTS}")]
    InsufficientSignal { usable: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Ssm(#[from] SsmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovEstimate {
    pub per_dim: Vec<f64>,
    pub lambda_max: f64,
    /// Exponential deviation rate fitted from a probe, when one was run.
    pub zeta_fit: Option<f64>,
    pub t_used: usize,
}

impl LyapunovEstimate {
    fn from_per_dim(per_dim: Vec<f64>, t_used: usize) -> Self {
        let lambda_max = per_dim.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            per_dim,
            lambda_max,
            zeta_fit: None,
            t_used,
        }
    }
}

/// `per_dim[j] = A[j] · (1/T) Σ_t Δ̄_t[j]` with `A = -exp(a_log)`.
pub fn lyapunov_closed_form(a_log: &[f64], delta_bars: &Tensor) -> Result<LyapunovEstimate, DynamicsError> {
    let d = a_log.len();
    if delta_bars.shape().len() != 2 || delta_bars.cols() != d {
        return Err(DynamicsError::InvalidArgument(format!(
            "Δ̄ must be T × {d}, got {:?}",
            delta_bars.shape()
        )));
    }
    let t_len = delta_bars.rows();
    if t_len == 0 {
        return Err(DynamicsError::InvalidArgument("T must be at least 1".into()));
    }
    let mut sums = vec![0.0; d];
    for t in 0..t_len {
        for (j, s) in sums.iter_mut().enumerate() {
            let v = delta_bars.at(t, j);
            if v < 0.0 || v.is_nan() {
                return Err(DynamicsError::InvalidDeltaBar {
                    step: t,
                    channel: j,
                    value: v,
                });
            }
            *s += v;
        }
    }
    let per_dim = a_log
        .iter()
        .zip(&sums)
        .map(|(al, s)| -al.exp() * (s / t_len as f64))
        .collect();
    Ok(LyapunovEstimate::from_per_dim(per_dim, t_len))
}

/// Exponents from the product of state Jacobians along a forward pass,
/// accumulated in the log domain: `per_dim[j] = (1/T) Σ_t log a_t[j]`.
pub fn lyapunov_numeric(params: &MambaParams, u: &Tensor) -> Result<LyapunovEstimate, DynamicsError> {
    let trace = mamba_forward(params, u, &vec![0.0; params.d], &PrecisionPolicy::FP64)?;
    Ok(lyapunov_from_trace(&trace))
}

pub fn lyapunov_from_trace(trace: &StateTrace) -> LyapunovEstimate {
    let (t_len, d) = (trace.len(), trace.dim());
    let mut log_sums = vec![0.0; d];
    for t in 0..t_len {
        for (j, s) in log_sums.iter_mut().enumerate() {
            *s += trace.decay.at(t, j).abs().ln();
        }
    }
    let per_dim = log_sums.into_iter().map(|s| s / t_len as f64).collect();
    LyapunovEstimate::from_per_dim(per_dim, t_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perturbation {
    /// Shift the initial state by ε.
    X0,
    /// Shift the first input `u_1` by ε.
    Input,
    /// Both of the above.
    Both,
}

impl Perturbation {
    pub fn name(self) -> &'static str {
        match self {
            Perturbation::X0 => "x0",
            Perturbation::Input => "input",
            Perturbation::Both => "both",
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Perturbation {
    type Err = DynamicsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "x0" => Ok(Perturbation::X0),
            "input" | "u" => Ok(Perturbation::Input),
            "both" => Ok(Perturbation::Both),
            other => Err(DynamicsError::InvalidArgument(format!(
                "unknown perturbation `{other}` (expected x0, input, both)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceTrace {
    pub epsilon: f64,
    /// `deviations[i]` is `max_j |x_{i+1}[j] - x'_{i+1}[j]|`.
    pub deviations: Vec<f64>,
    pub overflowed: bool,
}

impl DivergenceTrace {
    /// Mean deviation over the second half of the horizon divided by the
    /// mean over the first half. `0/0` counts as no growth.
    pub fn half_ratio(&self) -> f64 {
        let n = self.deviations.len();
        let (first, second) = self.deviations.split_at(n / 2);
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
        let (a, b) = (mean(first), mean(second));
        if a == 0.0 && b == 0.0 {
            0.0
        } else {
            b / a
        }
    }

    pub fn first(&self) -> f64 {
        self.deviations[0]
    }

    pub fn last(&self) -> f64 {
        *self.deviations.last().expect("non-empty trace")
    }
}

/// Run a nominal and an ε-perturbed forward under the same policy from
/// `x0 = 0` and record the max-abs state deviation at every step.
pub fn divergence_probe(
    params: &MambaParams,
    u: &Tensor,
    epsilon: f64,
    perturb: Perturbation,
    policy: &PrecisionPolicy,
) -> Result<DivergenceTrace, DynamicsError> {
    divergence_probe_from(params, u, &vec![0.0; params.d], epsilon, perturb, policy)
}

pub fn divergence_probe_from(
    params: &MambaParams,
    u: &Tensor,
    x0: &[f64],
    epsilon: f64,
    perturb: Perturbation,
    policy: &PrecisionPolicy,
) -> Result<DivergenceTrace, DynamicsError> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(DynamicsError::InvalidArgument(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )));
    }
    if u.shape().len() != 2 || u.rows() < 2 {
        return Err(DynamicsError::InvalidArgument("probe needs T ≥ 2".into()));
    }
    let nominal = mamba_forward(params, u, x0, policy)?;

    let mut x0_p = x0.to_vec();
    let mut u_p = u.clone();
    if matches!(perturb, Perturbation::X0 | Perturbation::Both) {
        x0_p.iter_mut().for_each(|v| *v += epsilon);
    }
    if matches!(perturb, Perturbation::Input | Perturbation::Both) {
        u_p.row_mut(0).iter_mut().for_each(|v| *v += epsilon);
    }
    let perturbed = mamba_forward(params, &u_p, &x0_p, policy)?;

    let mut overflowed = false;
    let deviations = (0..nominal.len())
        .map(|t| {
            let mut dev = 0.0_f64;
            for (a, b) in nominal.states.row(t).iter().zip(perturbed.states.row(t)) {
                if !a.is_finite() || !b.is_finite() {
                    overflowed = true;
                    dev = f64::INFINITY;
                } else {
                    dev = dev.max((a - b).abs());
                }
            }
            dev
        })
        .collect();
    Ok(DivergenceTrace {
        epsilon,
        deviations,
        overflowed,
    })
}

/// Least-squares slope of `log(deviation)` against step index, in nats per
/// step. Steps whose deviation is zero or non-finite are excluded.
pub fn fit_deviation_rate(trace: &DivergenceTrace) -> Result<f64, DynamicsError> {
    let points: Vec<(f64, f64)> = trace
        .deviations
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite() && **v > 0.0)
        .map(|(i, v)| ((i + 1) as f64, v.ln()))
        .collect();
    if points.len() < MIN_FIT_POINTS {
        return Err(DynamicsError::InsufficientSignal { usable: points.len() });
    }
    let n = points.len() as f64;
    let mean_t = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, y) in &points {
        sxy += (t - mean_t) * (y - mean_y);
        sxx += (t - mean_t) * (t - mean_t);
    }
    Ok(sxy / sxx)
}

/// Mean absolute output difference between a run under `policy` and a run
/// under `reference`, same parameters and inputs.
pub fn precision_divergence(
    params: &MambaParams,
    u: &Tensor,
    policy: &PrecisionPolicy,
    reference: &PrecisionPolicy,
) -> Result<f64, DynamicsError> {
    let x0 = vec![0.0; params.d];
    let a = mamba_forward(params, u, &x0, policy)?;
    let b = mamba_forward(params, u, &x0, reference)?;
    let n = a.outputs.numel() as f64;
    Ok(a.outputs
        .data()
        .iter()
        .zip(b.outputs.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n)
}

/// True when every decay in the trace is at most `1 - margin`.
pub fn is_strictly_contracting(trace: &StateTrace, margin: f64) -> bool {
    trace.decay.data().iter().all(|&a| a <= 1.0 - margin)
}

/// A random valid block and a standard-normal input sequence.
pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    d: usize,
    t_len: usize,
    mode: BufferMode,
) -> Result<(MambaParams, Tensor), DynamicsError> {
    let params = MambaParams::random(MambaConfig::new(d, t_len, mode), rng)?;
    let u = crate::ssm::params::gaussian(rng, &[t_len, d], 1.0);
    Ok((params, u))
}
