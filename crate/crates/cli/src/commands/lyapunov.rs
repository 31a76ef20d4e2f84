use super::require;
use crate::error::CliResult;
use crate::RunContext;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ssmdynlab::dynamics::{lyapunov_closed_form, lyapunov_from_trace, random_instance};
use ssmdynlab::numerics::PrecisionPolicy;
use ssmdynlab::ssm::{mamba_forward, BufferMode};
use std::fmt::Write as _;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LyapunovConfig {
    pub draws: usize,
    pub dims: Vec<usize>,
    pub lengths: Vec<usize>,
    pub modes: Vec<BufferMode>,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        Self {
            draws: 1000,
            dims: vec![1, 4, 16],
            lengths: vec![64, 512],
            modes: vec![BufferMode::TimeIndexed, BufferMode::InputProjected],
        }
    }
}

impl LyapunovConfig {
    fn validate(&self) -> CliResult<()> {
        require(self.draws > 0, || "no draws requested".into())?;
        require(!self.dims.is_empty() && self.dims.iter().all(|&d| d > 0), || {
            "[lyapunov] dims must be a non-empty list of positive integers".into()
        })?;
        require(!self.lengths.is_empty() && self.lengths.iter().all(|&t| t > 0), || {
            "[lyapunov] lengths must be a non-empty list of positive integers".into()
        })?;
        require(!self.modes.is_empty(), || "[lyapunov] modes must not be empty".into())
    }

    /// Draw `k` cycles through every (d, T, mode) combination.
    fn cell(&self, k: usize) -> (usize, usize, BufferMode) {
        let shapes = self.dims.len() * self.lengths.len();
        let s = k % shapes;
        let d = self.dims[s % self.dims.len()];
        let t = self.lengths[s / self.dims.len()];
        let mode = self.modes[(k / shapes) % self.modes.len()];
        (d, t, mode)
    }
}

#[derive(Debug, Serialize)]
struct DrawRecord {
    draw: usize,
    d: usize,
    t: usize,
    mode: BufferMode,
    lambda_max: f64,
    /// Largest per-dimension gap between the closed form and the
    /// log-Jacobian average.
    closed_form_gap: f64,
    per_dim: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct Summary {
    draws: usize,
    max_lambda: f64,
    positive_count: usize,
    max_closed_form_gap: f64,
}

#[derive(Debug, Serialize)]
struct Report {
    summary: Summary,
    estimates: Vec<DrawRecord>,
}

pub fn run(ctx: &RunContext) -> CliResult<()> {
    let cfg: LyapunovConfig = ctx.doc.section("lyapunov")?;
    cfg.validate()?;
    let dir = ctx.start(&cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut estimates = Vec::with_capacity(cfg.draws);
    for k in 0..cfg.draws {
        let (d, t, mode) = cfg.cell(k);
        let (params, u) = random_instance(&mut rng, d, t, mode)?;
        let trace = mamba_forward(&params, &u, &vec![0.0; d], &PrecisionPolicy::FP64)?;
        let numeric = lyapunov_from_trace(&trace);
        let closed = lyapunov_closed_form(params.a_log.data(), &trace.delta_bar)?;
        let gap = numeric
            .per_dim
            .iter()
            .zip(&closed.per_dim)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        estimates.push(DrawRecord {
            draw: k,
            d,
            t,
            mode,
            lambda_max: numeric.lambda_max,
            closed_form_gap: gap,
            per_dim: numeric.per_dim,
        });
    }

    let summary = Summary {
        draws: estimates.len(),
        max_lambda: estimates.iter().map(|e| e.lambda_max).fold(f64::NEG_INFINITY, f64::max),
        positive_count: estimates.iter().filter(|e| e.lambda_max > 0.0).count(),
        max_closed_form_gap: estimates.iter().map(|e| e.closed_form_gap).fold(0.0, f64::max),
    };
    let mut csv = String::from("draw,d,t,mode,lambda_max,closed_form_gap\n");
    for e in &estimates {
        let _ = writeln!(
            csv,
            "{},{},{},{},{:e},{:e}",
            e.draw, e.d, e.t, e.mode, e.lambda_max, e.closed_form_gap
        );
    }
    dir.write_csv("lyapunov.csv", &csv)?;
    dir.write_json("report.json", &Report { summary, estimates })?;
    Ok(())
}
