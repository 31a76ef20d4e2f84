use crate::error::{CliError, CliResult};
use crate::RunContext;
use serde::{Deserialize, Serialize};
use ssmdynlab::lora::{merged_weight, take_adapters, verify_tying_against, LoraAdapter, TyingReport};
use ssmdynlab::ssm::Container;
use ssmdynlab::train::{ParamId, ToyModel};
use std::path::PathBuf;
use std::sync::Arc;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraVerifyConfig {
    pub checkpoint: Option<PathBuf>,
    /// Adapted weight to check; must be a fused buffer.
    pub target: String,
}

impl Default for LoraVerifyConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            target: ParamId::Fused.name().to_string(),
        }
    }
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    target: &'a str,
    rank: usize,
    scale: f64,
    tying: &'a TyingReport,
    passed: bool,
}

pub fn run(ctx: &RunContext, checkpoint: Option<PathBuf>) -> CliResult<()> {
    let mut cfg: LoraVerifyConfig = ctx.doc.section("lora-verify")?;
    if checkpoint.is_some() {
        cfg.checkpoint = checkpoint;
    }
    let path = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::config("no checkpoint given"))?;
    let mut container = Container::load(&path).map_err(|e| CliError::io(&path, e))?;
    let model = ToyModel::from_container(&mut container)?;
    let file = take_adapters(&mut container)?.ok_or_else(|| CliError::runtime("checkpoint has no adapter"))?;
    let loaded = file
        .get(&cfg.target)
        .ok_or_else(|| CliError::runtime(format!("checkpoint has no adapter on `{}`", cfg.target)))?;
    let base = ParamId::from_name(&cfg.target)
        .and_then(|id| model.param(id))
        .ok_or_else(|| CliError::runtime(format!("model has no weight `{}`", cfg.target)))?;
    let dir = ctx.start(&cfg)?;

    let adapter = LoraAdapter {
        base: Arc::new(base.clone()),
        u: loaded.u.clone(),
        v: loaded.v.clone(),
        rank: loaded.u.cols(),
        scale: file.scale,
    };
    let adapted = loaded.adapted.clone().unwrap_or_else(|| merged_weight(&adapter));
    let tying = verify_tying_against(&adapter, &adapted, model.config().d)?;
    dir.write_json(
        "report.json",
        &Report {
            target: &cfg.target,
            rank: adapter.rank,
            scale: adapter.scale,
            tying: &tying,
            passed: tying.passed(),
        },
    )?;
    if !tying.passed() {
        let [a, b, c] = tying.segment_residuals;
        return Err(CliError::TyingFailed(format!(
            "`{}`: segment residuals {a:e} {b:e} {c:e}, observed rank {} (bound {})",
            cfg.target, tying.rank_observed, tying.rank_bound
        )));
    }
    Ok(())
}
