use crate::error::{CliError, CliResult};
use crate::output::RunDir;
use crate::{RunContext, TrainArgs};
use serde::{Deserialize, Serialize};
use ssmdynlab::data::{corpus_from_bytes, gen_selective_copy_with, held_out_seed, BatchStream, SelectiveCopySpec};
use ssmdynlab::lora::TargetStrategy;
use ssmdynlab::numerics::PrecisionPolicy;
use ssmdynlab::ssm::BufferMode;
use ssmdynlab::train::{
    evaluate, preset, preset_model, train_loop, EvalMetrics, ToyModel, ToyModelConfig, TrainConfig, TrainMetrics,
};
use std::fmt::Write as _;
use std::path::PathBuf;

const DEFAULT_PRESET: &str = "toy";

/// Every training key is optional and falls back to the preset.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub preset: Option<String>,
    /// `fp64`, `fp32`, `bf16`, `fp16` or `activation/gradient/master`.
    pub policy: Option<String>,
    pub learning_rate: Option<f64>,
    /// 0 trains every weight.
    pub lora_rank: Option<usize>,
    pub lora_scale: Option<f64>,
    pub lora_targets: Option<TargetStrategy>,
    pub warmup_steps: Option<usize>,
    pub total_steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub clip_norm: Option<f64>,
    pub epochs: Option<usize>,
    pub loss_scale: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub weight_decay: Option<f64>,
    pub vocab: Option<usize>,
    pub d: Option<usize>,
    pub t_max: Option<usize>,
    pub mode: Option<BufferMode>,
    pub gate: Option<bool>,
    pub n_train: Option<usize>,
    pub n_eval: Option<usize>,
    pub marked: Option<usize>,
    /// Byte-level text file; replaces the selective-copy task. The last
    /// tenth is held out.
    pub corpus: Option<PathBuf>,
    pub compare_policy: Option<String>,
    pub compare_baseline_policy: Option<String>,
    pub compare_repeats: Option<usize>,
}

/// Fully resolved settings, recorded in the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedTrain {
    pub preset: String,
    pub policy: String,
    pub train: TrainConfig,
    pub model: ToyModelConfig,
    pub n_train: usize,
    pub n_eval: usize,
    pub marked: usize,
    pub corpus: Option<PathBuf>,
    pub compare: Option<CompareSettings>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareSettings {
    pub baseline_policy: String,
    pub policy: String,
    pub lora_rank: usize,
    pub repeats: usize,
}

fn parse_policy(s: &str) -> CliResult<PrecisionPolicy> {
    s.parse().map_err(|e| CliError::config(format!("[train] {e}")))
}

impl TrainSection {
    fn resolve(&self, cli_preset: Option<&str>, seed: u64, compare: bool) -> CliResult<ResolvedTrain> {
        let name = cli_preset
            .or(self.preset.as_deref())
            .unwrap_or(DEFAULT_PRESET)
            .to_string();
        let base = preset(&name).ok_or_else(|| CliError::config(format!("[train] unknown preset `{name}`")))?;
        let mut t = base.config;
        let mut m = preset_model(&name);
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(t.learning_rate, self.learning_rate);
        if let Some(r) = self.lora_rank {
            t.lora_rank = (r > 0).then_some(r);
        }
        set!(t.lora_scale, self.lora_scale);
        set!(t.lora_targets, self.lora_targets);
        set!(t.warmup_steps, self.warmup_steps);
        set!(t.total_steps, self.total_steps);
        set!(t.batch_size, self.batch_size);
        set!(t.max_seq_len, self.max_seq_len);
        set!(t.clip_norm, self.clip_norm);
        set!(t.epochs, self.epochs);
        if self.loss_scale.is_some() {
            t.loss_scale = self.loss_scale;
        }
        set!(t.optimizer.beta1, self.beta1);
        set!(t.optimizer.beta2, self.beta2);
        set!(t.optimizer.eps, self.eps);
        set!(t.optimizer.weight_decay, self.weight_decay);
        t.seed = seed;
        t.validate()?;

        if self.corpus.is_some() {
            m.vocab = ssmdynlab::data::BYTE_VOCAB;
        }
        set!(m.vocab, self.vocab);
        set!(m.d, self.d);
        set!(m.mode, self.mode);
        set!(m.gate, self.gate);
        m.t_max = self.t_max.unwrap_or(m.t_max.max(t.max_seq_len));

        let policy = self.policy.clone().unwrap_or_else(|| "fp32".into());
        parse_policy(&policy)?;
        let compare = if compare {
            let s = CompareSettings {
                baseline_policy: self.compare_baseline_policy.clone().unwrap_or_else(|| "fp32".into()),
                policy: self.compare_policy.clone().unwrap_or_else(|| "bf16".into()),
                lora_rank: t.lora_rank.unwrap_or(8),
                repeats: self.compare_repeats.unwrap_or(3),
            };
            parse_policy(&s.baseline_policy)?;
            parse_policy(&s.policy)?;
            if s.repeats == 0 {
                return Err(CliError::config("[train] compare_repeats must be at least 1"));
            }
            Some(s)
        } else {
            None
        };
        Ok(ResolvedTrain {
            preset: name,
            policy,
            train: t,
            model: m,
            n_train: self.n_train.unwrap_or(2048),
            n_eval: self.n_eval.unwrap_or(256),
            marked: self.marked.unwrap_or(ssmdynlab::data::DEFAULT_MARKED),
            corpus: self.corpus.clone(),
            compare,
        })
    }
}

impl ResolvedTrain {
    fn datasets(&self) -> CliResult<(BatchStream, BatchStream)> {
        let seq_len = self.train.max_seq_len;
        if let Some(path) = &self.corpus {
            let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
            let split = bytes.len() - bytes.len() / 10;
            let train = corpus_from_bytes(&bytes[..split], seq_len)?;
            let eval = corpus_from_bytes(&bytes[split..], seq_len)?;
            if train.is_empty() || eval.is_empty() {
                return Err(CliError::config(format!(
                    "corpus {} is too short for {seq_len}-byte windows",
                    path.display()
                )));
            }
            return Ok((train, eval));
        }
        let spec = |n| SelectiveCopySpec::new(seq_len, self.model.vocab, n).with_marked(self.marked);
        let seed = self.train.seed;
        Ok((
            gen_selective_copy_with(&spec(self.n_train), seed)?,
            gen_selective_copy_with(&spec(self.n_eval), held_out_seed(seed))?,
        ))
    }
}

#[derive(Debug, Serialize)]
struct TrainReport<'a> {
    preset: &'a str,
    variant: String,
    policy: &'a str,
    steps: usize,
    total_tokens: usize,
    final_loss: Option<f64>,
    trainable_params: usize,
    total_params: usize,
    peak_bytes: usize,
    mmpt: f64,
    eval: EvalMetrics,
    checkpoint: Option<&'a str>,
}

pub fn run(ctx: &RunContext, args: &TrainArgs) -> CliResult<()> {
    let section: TrainSection = ctx.doc.section("train")?;
    let resolved = section.resolve(args.preset.as_deref(), ctx.seed, args.compare)?;
    let (train_data, eval_data) = resolved.datasets()?;
    let dir = ctx.start(&resolved)?;
    match &resolved.compare {
        Some(cmp) => run_compare(&dir, &resolved, cmp, &train_data, args.require_faster),
        None => run_single(&dir, &resolved, &train_data, &eval_data),
    }
}

fn run_single(dir: &RunDir, r: &ResolvedTrain, train_data: &BatchStream, eval_data: &BatchStream) -> CliResult<()> {
    let policy = parse_policy(&r.policy)?;
    let mut model = ToyModel::init(r.model, r.train.seed)?;
    let outcome = train_loop(&mut model, &r.train, &policy, train_data)?;
    let m = &outcome.metrics;
    let eval = evaluate(&model, outcome.adapters.as_ref(), eval_data, &policy)?;

    let checkpoint = if m.steps > 0 {
        let mut c = model.to_container();
        if let Some(set) = &outcome.adapters {
            set.push_to(&mut c);
        }
        let path = dir.file("model.ckpt");
        c.save(&path).map_err(|e| CliError::io(&path, e))?;
        Some("model.ckpt")
    } else {
        None
    };
    dir.write_json("metrics.json", m)?;
    dir.write_csv("metrics.csv", &m.to_csv())?;
    dir.write_json(
        "timing.json",
        &serde_json::json!({ "atps": m.atps, "wall_seconds": m.wall_seconds }),
    )?;
    dir.write_json(
        "report.json",
        &TrainReport {
            preset: &r.preset,
            variant: r.train.variant(),
            policy: &r.policy,
            steps: m.steps,
            total_tokens: m.total_tokens,
            final_loss: m.loss_trace.last().copied(),
            trainable_params: m.trainable_params,
            total_params: m.total_params,
            peak_bytes: m.peak_bytes,
            mmpt: m.mmpt,
            eval,
            checkpoint,
        },
    )?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct VariantReport {
    variant: String,
    policy: String,
    steps: usize,
    final_loss: Option<f64>,
    trainable_params: usize,
    total_params: usize,
    peak_bytes: usize,
    mmpt: f64,
}

impl VariantReport {
    fn new(cfg: &TrainConfig, policy: &str, m: &TrainMetrics) -> Self {
        Self {
            variant: cfg.variant(),
            policy: policy.to_string(),
            steps: m.steps,
            final_loss: m.loss_trace.last().copied(),
            trainable_params: m.trainable_params,
            total_params: m.total_params,
            peak_bytes: m.peak_bytes,
            mmpt: m.mmpt,
        }
    }
}

#[derive(Debug, Serialize)]
struct CompareReport {
    baseline: VariantReport,
    adapter: VariantReport,
    peak_bytes_ratio: f64,
    mmpt_ratio: f64,
    trainable_share: f64,
}

#[derive(Debug, Serialize)]
struct CompareTiming {
    baseline_atps: Vec<f64>,
    adapter_atps: Vec<f64>,
    baseline_atps_best: f64,
    adapter_atps_best: f64,
    atps_ratio: f64,
}

/// Full fine-tuning and adapter fine-tuning from one initialisation. Runs
/// alternate so slow drift of the host affects both variants alike; the
/// fastest run of each counts.
fn run_compare(
    dir: &RunDir,
    r: &ResolvedTrain,
    cmp: &CompareSettings,
    train_data: &BatchStream,
    require_faster: bool,
) -> CliResult<()> {
    let init = ToyModel::init(r.model, r.train.seed)?;
    let full_cfg = TrainConfig {
        lora_rank: None,
        ..r.train.clone()
    };
    let lora_cfg = TrainConfig {
        lora_rank: Some(cmp.lora_rank),
        ..r.train.clone()
    };
    let full_policy = parse_policy(&cmp.baseline_policy)?;
    let lora_policy = parse_policy(&cmp.policy)?;

    let (mut full_runs, mut lora_runs) = (Vec::new(), Vec::new());
    for _ in 0..cmp.repeats {
        full_runs.push(train_loop(&mut init.clone(), &full_cfg, &full_policy, train_data)?.metrics);
        lora_runs.push(train_loop(&mut init.clone(), &lora_cfg, &lora_policy, train_data)?.metrics);
    }
    let best = |runs: &[TrainMetrics]| runs.iter().map(|m| m.atps).fold(0.0, f64::max);
    let (full, lora) = (&full_runs[0], &lora_runs[0]);
    let report = CompareReport {
        baseline: VariantReport::new(&full_cfg, &cmp.baseline_policy, full),
        adapter: VariantReport::new(&lora_cfg, &cmp.policy, lora),
        peak_bytes_ratio: lora.peak_bytes as f64 / full.peak_bytes as f64,
        mmpt_ratio: lora.mmpt / full.mmpt,
        trainable_share: lora.trainable_params as f64 / lora.total_params as f64,
    };
    let timing = CompareTiming {
        baseline_atps: full_runs.iter().map(|m| m.atps).collect(),
        adapter_atps: lora_runs.iter().map(|m| m.atps).collect(),
        baseline_atps_best: best(&full_runs),
        adapter_atps_best: best(&lora_runs),
        atps_ratio: best(&lora_runs) / best(&full_runs),
    };

    let mut csv = String::from("variant,policy,peak_bytes,mmpt,trainable_params,total_params\n");
    for v in [&report.baseline, &report.adapter] {
        let _ = writeln!(
            csv,
            "{},{},{},{:e},{},{}",
            v.variant, v.policy, v.peak_bytes, v.mmpt, v.trainable_params, v.total_params
        );
    }
    dir.write_csv("compare.csv", &csv)?;
    dir.write_json("timing.json", &timing)?;
    dir.write_json("report.json", &report)?;

    if require_faster && timing.adapter_atps_best < timing.baseline_atps_best {
        return Err(CliError::runtime(format!(
            "adapter ATPS {:.1} is below full ATPS {:.1}",
            timing.adapter_atps_best, timing.baseline_atps_best
        )));
    }
    Ok(())
}
