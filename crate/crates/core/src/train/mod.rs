//! Fine-tuning harness: AdamW with a cosine schedule and global-norm
//! clipping, full or adapter-only updates, precision policies, and
//! throughput/memory metering.

mod model;
mod optim;
mod presets;

pub use crate::numerics::PrecisionPolicy;
pub use model::{
    backward_seq, evaluate, forward_seq, output_divergence, predict, softmax_xent, AdapterSet, Effective, EvalMetrics,
    GradAccum, GradPlan, ParamId, SeqCache, ToyModel, ToyModelConfig,
};
pub use optim::{adamw_step, clip_grad_norm, cosine_lr, AdamState, AdamWConfig, ParamSlot};
pub use presets::{preset, preset_model, preset_names, Preset, TABLE3};

use crate::data::BatchStream;
use crate::lora::{LoraError, TargetStrategy};
use crate::ssm::{CheckpointError, SsmError};
use crate::tensor::memory;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty data stream")]
    EmptyData,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Ssm(#[from] SsmError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Adapter rank; `None` trains every weight.
    pub lora_rank: Option<usize>,
    pub lora_scale: f64,
    pub lora_targets: TargetStrategy,
    pub warmup_steps: usize,
    /// Schedule length in optimizer steps.
    pub total_steps: usize,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub clip_norm: f64,
    /// Passes over the stream; 0 leaves only `total_steps` as the limit.
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    /// Static loss scale; off by default.
    pub loss_scale: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            lora_rank: None,
            lora_scale: 1.0,
            lora_targets: TargetStrategy::Sll,
            warmup_steps: 0,
            total_steps: 100,
            batch_size: 8,
            max_seq_len: 64,
            clip_norm: 1.0,
            epochs: 0,
            seed: 0,
            optimizer: AdamWConfig::default(),
            loss_scale: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate = {} must be finite and non-negative",
                self.learning_rate
            ));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps = {} exceeds total_steps = {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 || self.max_seq_len == 0 {
            return bad("batch_size and max_seq_len must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm = {} must be positive", self.clip_norm));
        }
        if self.lora_rank == Some(0) {
            return bad("lora_rank must be at least 1".into());
        }
        if let Some(s) = self.loss_scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("loss_scale = {s} must be positive"));
            }
        }
        Ok(())
    }

    /// Optimizer steps actually run on a stream with `batches_per_epoch`.
    pub fn steps_to_run(&self, batches_per_epoch: usize) -> usize {
        if self.epochs == 0 {
            self.total_steps
        } else {
            self.total_steps.min(self.epochs * batches_per_epoch)
        }
    }

    pub fn variant(&self) -> String {
        match self.lora_rank {
            None => "full".to_string(),
            Some(r) => format!("lora-{}-r{r}", self.lora_targets),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub loss_trace: Vec<f64>,
    pub lr_trace: Vec<f64>,
    pub grad_norm_trace: Vec<f64>,
    /// Tokens per second: `total_tokens / wall_seconds`.
    pub atps: f64,
    /// Bytes per token: `peak_bytes / (batch_size · max_seq_len)`.
    pub mmpt: f64,
    pub peak_bytes: usize,
    pub total_tokens: usize,
    pub wall_seconds: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub trainable_params: usize,
    pub total_params: usize,
}

impl TrainMetrics {
    /// One row per step: `step,lr,loss,grad_norm`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss,grad_norm\n");
        for (i, ((lr, loss), gn)) in self
            .lr_trace
            .iter()
            .zip(&self.loss_trace)
            .zip(&self.grad_norm_trace)
            .enumerate()
        {
            let _ = writeln!(out, "{i},{lr:e},{loss:e},{gn:e}");
        }
        out
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: TrainMetrics,
    /// Trained adapters for LoRA runs; the model's own weights are untouched.
    pub adapters: Option<AdapterSet>,
}

/// Train `model` on `data`.
///
/// Each step runs the policy-quantized forward and backward over the valid
/// rows of one batch, clips the global gradient norm, and applies AdamW in
/// the master format, to every weight (full) or to the adapter factors only
/// (LoRA). Sequences run one after another on the calling thread, so the
/// allocation meter sees every tensor.
///
/// Peak bytes are the high-water mark of tensor bytes allocated during the
/// run plus the model's own parameter bytes.
pub fn train_loop(
    model: &mut ToyModel,
    cfg: &TrainConfig,
    policy: &PrecisionPolicy,
    data: &BatchStream,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mcfg = model.config();
    if data.seq_len() != cfg.max_seq_len {
        return Err(TrainError::InvalidConfig(format!(
            "max_seq_len = {} but the stream has sequences of length {}",
            cfg.max_seq_len,
            data.seq_len()
        )));
    }
    if data.vocab_size() > mcfg.vocab {
        return Err(TrainError::InvalidConfig(format!(
            "stream vocab {} exceeds model vocab {}",
            data.vocab_size(),
            mcfg.vocab
        )));
    }
    let master = policy.master_format;
    let baseline = memory::live_bytes();
    memory::reset();

    let mut adapters = match cfg.lora_rank {
        Some(r) => {
            let mut set = AdapterSet::attach(model, cfg.lora_targets, r, cfg.lora_scale, cfg.seed)?;
            for a in set.adapters.values_mut() {
                a.u.quantize(master);
                a.v.quantize(master);
            }
            Some(set)
        }
        None => {
            for (_, w) in model.params_mut() {
                w.quantize(master);
            }
            None
        }
    };
    let plan = match &adapters {
        Some(set) => GradPlan::lora(set),
        None => GradPlan::full(model),
    };
    let trainable_params = match &adapters {
        Some(set) => set.num_trainable(),
        None => model.num_params(),
    };
    let mut state = AdamState::new();
    let steps = cfg.steps_to_run(data.batches_per_epoch(cfg.batch_size));
    let tokens_per_batch = cfg.batch_size * data.seq_len();
    let mut metrics = TrainMetrics {
        loss_trace: Vec::with_capacity(steps),
        lr_trace: Vec::with_capacity(steps),
        grad_norm_trace: Vec::with_capacity(steps),
        atps: 0.0,
        mmpt: 0.0,
        peak_bytes: 0,
        total_tokens: 0,
        wall_seconds: 0.0,
        steps,
        batch_size: cfg.batch_size,
        max_seq_len: cfg.max_seq_len,
        trainable_params,
        total_params: model.num_params(),
    };

    let start = Instant::now();
    for step in 0..steps {
        let lr = cosine_lr(step, cfg);
        let batch = data.batch(step, cfg.batch_size);
        let eff = model.effective(adapters.as_ref(), policy.activation_format)?;
        let positions = (batch.valid * batch.seq_len()) as f64;
        let loss_scale = cfg.loss_scale.unwrap_or(1.0);
        let mut acc = GradAccum::default();
        let mut loss_sum = 0.0;
        for row in 0..batch.valid {
            let cache = forward_seq(&eff, &batch.inputs[row], policy)?;
            let (loss, dlogits) = softmax_xent(
                &cache.logits,
                &batch.targets[row],
                loss_scale / positions,
                policy.gradient_format,
            );
            loss_sum += loss;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    detail: format!(
                        "{} activations overflowed (max |logit| = {}, largest finite {})",
                        policy.activation_format,
                        cache.logits.max_abs(),
                        policy.activation_format.max_finite()
                    ),
                });
            }
            backward_seq(&eff, &cache, &dlogits, &plan, adapters.as_ref(), policy, &mut acc)?;
        }
        drop(eff);
        acc.finalize(adapters.as_ref());
        if loss_scale != 1.0 {
            acc.scale(1.0 / loss_scale);
        }

        // gradients move to the master format before clipping and the update
        for g in acc.full.values_mut() {
            g.quantize(master);
        }
        for (gu, gv) in acc.factors.values_mut() {
            gu.quantize(master);
            gv.quantize(master);
        }
        let grad_norm = {
            let mut grads: Vec<&mut crate::Tensor> = acc.full.values_mut().collect();
            for (gu, gv) in acc.factors.values_mut() {
                grads.push(gu);
                grads.push(gv);
            }
            if grads.iter().any(|g| !g.is_finite()) {
                let name = acc
                    .full
                    .iter()
                    .find(|(_, g)| !g.is_finite())
                    .map(|(id, _)| id.name().to_string())
                    .or_else(|| {
                        acc.factors
                            .iter()
                            .find(|(_, (u, v))| !u.is_finite() || !v.is_finite())
                            .map(|(id, _)| format!("{}.lora", id.name()))
                    })
                    .unwrap_or_default();
                return Err(TrainError::NonFiniteGradient(name));
            }
            clip_grad_norm(&mut grads, cfg.clip_norm)
        };

        match adapters.as_mut() {
            Some(set) => {
                let names: Vec<(String, String)> = set
                    .adapters
                    .keys()
                    .map(|id| (format!("{}.lora_U", id.name()), format!("{}.lora_V", id.name())))
                    .collect();
                let mut slots = Vec::new();
                for ((id, a), (nu, nv)) in set.adapters.iter_mut().zip(&names) {
                    let (gu, gv) = &acc.factors[id];
                    slots.push(ParamSlot {
                        name: nu,
                        value: &mut a.u,
                        grad: gu,
                    });
                    slots.push(ParamSlot {
                        name: nv,
                        value: &mut a.v,
                        grad: gv,
                    });
                }
                adamw_step(&mut slots, &mut state, lr, &cfg.optimizer, master)?;
            }
            None => {
                let mut slots: Vec<ParamSlot<'_>> = model
                    .params_mut()
                    .map(|(id, w)| ParamSlot {
                        name: id.name(),
                        value: w,
                        grad: &acc.full[&id],
                    })
                    .collect();
                adamw_step(&mut slots, &mut state, lr, &cfg.optimizer, master)?;
            }
        }

        metrics.loss_trace.push(loss_sum / positions);
        metrics.lr_trace.push(lr);
        metrics.grad_norm_trace.push(grad_norm);
        metrics.total_tokens += tokens_per_batch;
    }
    metrics.wall_seconds = start.elapsed().as_secs_f64();
    metrics.atps = if metrics.wall_seconds > 0.0 {
        metrics.total_tokens as f64 / metrics.wall_seconds
    } else {
        0.0
    };
    metrics.peak_bytes = memory::peak_bytes().saturating_sub(baseline) + model.bytes();
    metrics.mmpt = metrics.peak_bytes as f64 / (cfg.batch_size * cfg.max_seq_len) as f64;
    drop(state);
    Ok(TrainOutcome { metrics, adapters })
}
