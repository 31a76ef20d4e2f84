use super::require;
use crate::error::{CliError, CliResult};
use crate::output::finite_or_null;
use crate::RunContext;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ssmdynlab::dynamics::{divergence_probe, fit_deviation_rate, precision_divergence, random_instance, Perturbation};
use ssmdynlab::numerics::PrecisionPolicy;
use ssmdynlab::ssm::BufferMode;
use std::fmt::Write as _;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivergenceConfig {
    pub epsilons: Vec<f64>,
    /// `fp64`, `fp32`, `bf16`, `fp16` or `activation/gradient/master`.
    pub policies: Vec<String>,
    /// Policy every other policy's outputs are compared against.
    pub reference: String,
    pub seq_len: usize,
    pub d: usize,
    pub draws: usize,
    pub perturb: Perturbation,
    pub mode: BufferMode,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        Self {
            epsilons: vec![1e-2, 1e-3, 1e-4],
            policies: ["fp64", "fp32", "bf16", "fp16"].map(String::from).to_vec(),
            reference: "fp64".into(),
            seq_len: 256,
            d: 8,
            draws: 20,
            perturb: Perturbation::X0,
            mode: BufferMode::InputProjected,
        }
    }
}

const RESOLVED_FACTOR: f64 = 100.0;

fn parse_policy(s: &str) -> CliResult<PrecisionPolicy> {
    s.parse().map_err(|e| CliError::config(format!("[divergence] {e}")))
}

/// Probe results for one (policy, ε) pair, aggregated over draws.
#[derive(Debug, Serialize)]
struct ProbeRow {
    policy: String,
    epsilon: f64,
    /// Largest fitted rate over draws with enough signal; `null` if none.
    zeta_max: Option<f64>,
    zeta_mean: Option<f64>,
    fitted_draws: usize,
    /// Largest second-half over first-half mean deviation.
    half_ratio_max: Option<f64>,
    overflowed_draws: usize,
    /// The perturbation is at least `RESOLVED_FACTOR` roundoffs of the
    /// activation format. Below that, nominal and perturbed states snap to
    /// grid points a whole ulp apart and the fit measures rounding, not the
    /// recurrence; such rows are reported but carry no bound.
    resolved: bool,
    trace_csv: String,
}

#[derive(Debug, Serialize)]
struct PolicyRow {
    policy: String,
    /// Mean absolute output difference against the reference policy.
    mean_divergence: f64,
}

#[derive(Debug, Serialize)]
struct Report {
    reference: String,
    summary: Vec<PolicyRow>,
    probes: Vec<ProbeRow>,
}

pub fn run(ctx: &RunContext) -> CliResult<()> {
    let cfg: DivergenceConfig = ctx.doc.section("divergence")?;
    require(cfg.draws > 0, || "no draws requested".into())?;
    require(cfg.d > 0, || "[divergence] d must be positive".into())?;
    require(cfg.seq_len >= 2, || "[divergence] seq_len must be at least 2".into())?;
    require(!cfg.policies.is_empty(), || {
        "[divergence] policies must not be empty".into()
    })?;
    require(cfg.epsilons.iter().all(|e| *e > 0.0 && e.is_finite()), || {
        "[divergence] epsilons must be positive and finite".into()
    })?;
    let policies = cfg
        .policies
        .iter()
        .map(|s| parse_policy(s).map(|p| (s.clone(), p)))
        .collect::<CliResult<Vec<_>>>()?;
    let reference = parse_policy(&cfg.reference)?;
    let dir = ctx.start(&cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let instances = (0..cfg.draws)
        .map(|_| random_instance(&mut rng, cfg.d, cfg.seq_len, cfg.mode))
        .collect::<Result<Vec<_>, _>>()?;

    let mut probes = Vec::new();
    for (name, policy) in &policies {
        for &eps in &cfg.epsilons {
            let mut mean = vec![0.0; cfg.seq_len];
            let (mut zetas, mut ratio_max, mut overflowed) = (Vec::new(), 0.0_f64, 0);
            for (params, u) in &instances {
                let tr = divergence_probe(params, u, eps, cfg.perturb, policy)?;
                for (m, v) in mean.iter_mut().zip(&tr.deviations) {
                    *m += v / cfg.draws as f64;
                }
                if let Ok(z) = fit_deviation_rate(&tr) {
                    zetas.push(z);
                }
                ratio_max = ratio_max.max(tr.half_ratio());
                overflowed += tr.overflowed as usize;
            }
            let file = format!("trace_{}_eps{eps:e}.csv", name.replace('/', "-"));
            let mut csv = String::from("step,deviation\n");
            for (i, v) in mean.iter().enumerate() {
                let _ = writeln!(csv, "{},{v:e}", i + 1);
            }
            dir.write_csv(&file, &csv)?;
            probes.push(ProbeRow {
                policy: name.clone(),
                epsilon: eps,
                zeta_max: zetas.iter().copied().reduce(f64::max),
                zeta_mean: (!zetas.is_empty()).then(|| zetas.iter().sum::<f64>() / zetas.len() as f64),
                fitted_draws: zetas.len(),
                half_ratio_max: finite_or_null(ratio_max),
                overflowed_draws: overflowed,
                resolved: eps >= RESOLVED_FACTOR * policy.activation_format.unit_roundoff(),
                trace_csv: file,
            });
        }
    }

    let mut summary = Vec::new();
    let mut csv = String::from("policy,mean_divergence\n");
    for (name, policy) in &policies {
        let mut total = 0.0;
        for (params, u) in &instances {
            total += precision_divergence(params, u, policy, &reference)?;
        }
        let mean_divergence = total / cfg.draws as f64;
        let _ = writeln!(csv, "{name},{mean_divergence:e}");
        summary.push(PolicyRow {
            policy: name.clone(),
            mean_divergence,
        });
    }
    dir.write_csv("summary.csv", &csv)?;
    dir.write_json(
        "report.json",
        &Report {
            reference: cfg.reference.clone(),
            summary,
            probes,
        },
    )?;
    Ok(())
}
