//! A one-block language model over a small vocabulary:
//!
//! ```text
//! h0 = E[tok]            embeddings,  V × d
//! u  = h0 · W_in         in_proj,     d × d
//! y  = block(u)          selective SSM block (fused buffer, optional gate)
//! h  = h0 + y · W_out    out_proj,    d × d
//! z  = h · H             head,        d × V
//! ```
//!
//! Loss is mean next-token cross-entropy over all positions of the valid
//! rows of a batch.

use super::TrainError;
use crate::data::BatchStream;
use crate::lora::{
    attach_lora, effective_rank, merged_weight, push_adapters, select_targets, take_adapters, AdaptableModel,
    LoraAdapter, TargetSelection, TargetStrategy, WeightRole,
};
use crate::numerics::{NumericFormat, PrecisionPolicy};
use crate::ssm::checkpoint::Container;
use crate::ssm::params::gaussian;
use crate::ssm::{mamba_backward_with, mamba_forward, BufferMode, GradRequest, MambaConfig, MambaParams, StateTrace};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamId {
    Embeddings,
    InProj,
    Fused,
    Gate,
    OutProj,
    Head,
    ALog,
    DeltaBias,
}

impl ParamId {
    pub const ALL: [ParamId; 8] = [
        ParamId::Embeddings,
        ParamId::InProj,
        ParamId::Fused,
        ParamId::Gate,
        ParamId::OutProj,
        ParamId::Head,
        ParamId::ALog,
        ParamId::DeltaBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::Embeddings => "embeddings",
            ParamId::InProj => "in_proj",
            ParamId::Fused => "block.x_proj",
            ParamId::Gate => "block.gate",
            ParamId::OutProj => "out_proj",
            ParamId::Head => "head",
            ParamId::ALog => "block.a_log",
            ParamId::DeltaBias => "block.delta_bias",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|id| id.name() == name)
    }

    /// Adapter role; the head and the per-channel vectors have none.
    pub fn role(self) -> Option<WeightRole> {
        match self {
            ParamId::Embeddings => Some(WeightRole::Embeddings),
            ParamId::InProj => Some(WeightRole::InProj),
            ParamId::Fused => Some(WeightRole::FusedBuffer),
            ParamId::Gate => Some(WeightRole::Gate),
            ParamId::OutProj => Some(WeightRole::OutProj),
            ParamId::Head | ParamId::ALog | ParamId::DeltaBias => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub vocab: usize,
    pub d: usize,
    /// Buffer rows in time-indexed mode; the longest admissible sequence.
    pub t_max: usize,
    pub mode: BufferMode,
    pub gate: bool,
}

impl ToyModelConfig {
    pub fn block_config(&self) -> MambaConfig {
        MambaConfig::new(self.d, self.t_max, self.mode).with_gate(self.gate)
    }
}

/// Model weights, shared copy-on-write so adapters can hold the frozen
/// bases without duplicating them. `clone` copies every tensor.
#[derive(Debug)]
pub struct ToyModel {
    config: ToyModelConfig,
    weights: BTreeMap<ParamId, Arc<Tensor>>,
}

impl Clone for ToyModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            weights: self
                .weights
                .iter()
                .map(|(id, t)| (*id, Arc::new((**t).clone())))
                .collect(),
        }
    }
}

impl ToyModel {
    /// Seeded initialisation; every weight starts on the FP32 grid.
    pub fn init(config: ToyModelConfig, seed: u64) -> Result<Self, TrainError> {
        if config.vocab == 0 || config.d == 0 {
            return Err(TrainError::InvalidConfig("vocab and d must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d;
        let std = 1.0 / (d as f64).sqrt();
        let block = MambaParams::init(config.block_config(), &mut rng)?;
        let mut weights = BTreeMap::new();
        weights.insert(ParamId::Embeddings, gaussian(&mut rng, &[config.vocab, d], 1.0));
        weights.insert(ParamId::InProj, gaussian(&mut rng, &[d, d], std));
        weights.insert(ParamId::OutProj, gaussian(&mut rng, &[d, d], std));
        weights.insert(ParamId::Head, gaussian(&mut rng, &[d, config.vocab], std));
        weights.insert(ParamId::Fused, block.fused.weight.clone());
        if config.gate {
            weights.insert(ParamId::Gate, block.gate_weight.clone());
        }
        weights.insert(ParamId::ALog, block.a_log.clone());
        weights.insert(ParamId::DeltaBias, block.delta_bias.clone());
        let weights = weights
            .into_iter()
            .map(|(id, t)| (id, Arc::new(t.quantized(NumericFormat::Fp32))))
            .collect();
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> ToyModelConfig {
        self.config
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.weights.keys().copied().collect()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.weights.get(&id).map(|t| &**t)
    }

    pub fn param_arc(&self, id: ParamId) -> Option<&Arc<Tensor>> {
        self.weights.get(&id)
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.weights.get_mut(&id).map(Arc::make_mut)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.weights.iter_mut().map(|(id, t)| (*id, Arc::make_mut(t)))
    }

    pub fn num_params(&self) -> usize {
        self.weights.values().map(|t| t.numel()).sum()
    }

    pub fn bytes(&self) -> usize {
        self.weights.values().map(|t| t.bytes()).sum()
    }

    pub fn bit_eq(&self, other: &ToyModel) -> bool {
        self.config == other.config
            && self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .all(|(id, t)| other.param(*id).is_some_and(|o| t.bit_eq(o)))
    }

    /// Weights the forward pass runs with: merged where adapted, rounded to
    /// `fmt` for the matrices. The per-channel block vectors stay at master
    /// precision; the block casts them itself.
    pub fn effective(&self, adapters: Option<&AdapterSet>, fmt: NumericFormat) -> Result<Effective, TrainError> {
        let get = |id: ParamId| -> Tensor {
            let w = match adapters.and_then(|a| a.adapters.get(&id)) {
                Some(ad) => merged_weight(ad),
                None => (*self.weights[&id]).clone(),
            };
            w.quantized(fmt)
        };
        let d = self.config.d;
        let gate = if self.config.gate {
            get(ParamId::Gate)
        } else {
            Tensor::zeros2(d, d)
        };
        let block = MambaParams::from_parts(
            self.config.block_config(),
            (*self.weights[&ParamId::ALog]).clone(),
            get(ParamId::Fused),
            (*self.weights[&ParamId::DeltaBias]).clone(),
            gate,
        )?;
        Ok(Effective {
            embeddings: get(ParamId::Embeddings),
            in_proj: get(ParamId::InProj),
            out_proj: get(ParamId::OutProj),
            head: get(ParamId::Head),
            block,
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set_meta("kind", "toy-model");
        c.set_meta("vocab", self.config.vocab as u64);
        c.set_meta("d", self.config.d as u64);
        c.set_meta("t_max", self.config.t_max as u64);
        c.set_meta("mode", self.config.mode.name());
        c.set_meta("gate", self.config.gate);
        for (id, t) in &self.weights {
            c.push(id.name(), (**t).clone());
        }
        c
    }

    pub fn from_container(c: &mut Container) -> Result<Self, TrainError> {
        if c.meta_str("kind")? != "toy-model" {
            return Err(crate::ssm::CheckpointError::Meta("kind".into()).into());
        }
        let mode = c
            .meta_str("mode")?
            .parse()
            .map_err(|_| crate::ssm::CheckpointError::Meta("mode".into()))?;
        let config = ToyModelConfig {
            vocab: c.meta_u64("vocab")? as usize,
            d: c.meta_u64("d")? as usize,
            t_max: c.meta_u64("t_max")? as usize,
            mode,
            gate: c.meta_bool("gate")?,
        };
        let (v, d) = (config.vocab, config.d);
        let rows = config.block_config().fused_rows();
        let mut shapes = vec![
            (ParamId::Embeddings, vec![v, d]),
            (ParamId::InProj, vec![d, d]),
            (ParamId::Fused, vec![rows, 3 * d]),
            (ParamId::OutProj, vec![d, d]),
            (ParamId::Head, vec![d, v]),
            (ParamId::ALog, vec![d]),
            (ParamId::DeltaBias, vec![d]),
        ];
        if config.gate {
            shapes.push((ParamId::Gate, vec![d, d]));
        }
        let mut weights = BTreeMap::new();
        for (id, shape) in shapes {
            weights.insert(id, Arc::new(c.take(id.name(), Some(&shape))?));
        }
        Ok(Self { config, weights })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        self.to_container().save(path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::from_container(&mut Container::load(path)?)
    }
}

impl AdaptableModel for ToyModel {
    fn weight_roles(&self) -> Vec<(String, String, (usize, usize))> {
        self.weights
            .iter()
            .filter_map(|(id, t)| {
                id.role()
                    .map(|r| (id.name().to_string(), r.name().to_string(), (t.rows(), t.cols())))
            })
            .collect()
    }

    fn total_params(&self) -> usize {
        self.num_params()
    }
}

/// Adapters attached to a model's targeted weights.
#[derive(Debug, Clone)]
pub struct AdapterSet {
    pub rank: usize,
    pub scale: f64,
    pub selection: TargetSelection,
    pub adapters: BTreeMap<ParamId, LoraAdapter>,
}

impl AdapterSet {
    /// One adapter per selected weight, rank capped at the weight's smaller
    /// dimension; adapter `i` in model order is seeded with `seed + i`.
    pub fn attach(
        model: &ToyModel,
        strategy: TargetStrategy,
        rank: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let selection = select_targets(model, strategy)?;
        let mut adapters = BTreeMap::new();
        for (i, (name, _)) in selection.targeted.iter().enumerate() {
            let id = ParamId::from_name(name).expect("model role ids round-trip");
            let base = model.param_arc(id).expect("selected weight exists").clone();
            let r = effective_rank(rank, base.rows(), base.cols());
            adapters.insert(id, attach_lora(base, r, scale, seed.wrapping_add(i as u64))?);
        }
        Ok(Self {
            rank,
            scale,
            selection,
            adapters,
        })
    }

    pub fn num_trainable(&self) -> usize {
        self.adapters.values().map(LoraAdapter::num_trainable).sum()
    }

    pub fn bytes(&self) -> usize {
        self.adapters.values().map(|a| a.u.bytes() + a.v.bytes()).sum()
    }

    /// Store the factors and adapted weights next to the model tensors.
    pub fn push_to(&self, c: &mut Container) {
        let merged: Vec<(String, &LoraAdapter, Tensor)> = self
            .adapters
            .iter()
            .map(|(id, a)| (id.name().to_string(), a, merged_weight(a)))
            .collect();
        let entries: Vec<(String, &LoraAdapter, Option<&Tensor>)> =
            merged.iter().map(|(n, a, w)| (n.clone(), *a, Some(w))).collect();
        push_adapters(c, &entries, self.rank, self.scale);
        c.set_meta("lora_strategy", self.selection.strategy.to_string());
    }

    /// Rebuild adapters over `model` from a checkpoint container.
    pub fn take_from(c: &mut Container, model: &ToyModel) -> Result<Option<Self>, TrainError> {
        let strategy: TargetStrategy = match c.meta.get("lora_strategy").and_then(|v| v.as_str()) {
            Some(s) => s.parse()?,
            None => TargetStrategy::Sll,
        };
        let Some(file) = take_adapters(c)? else {
            return Ok(None);
        };
        let mut adapters = BTreeMap::new();
        let mut targeted = Vec::new();
        for la in file.adapters {
            let id = ParamId::from_name(&la.target)
                .ok_or_else(|| TrainError::InvalidConfig(format!("unknown adapter target `{}`", la.target)))?;
            let base = model
                .param_arc(id)
                .ok_or_else(|| TrainError::InvalidConfig(format!("model has no weight `{}`", la.target)))?
                .clone();
            if la.u.rows() != base.rows() || la.v.cols() != base.cols() {
                return Err(TrainError::Shape(format!(
                    "adapter `{}` does not fit its base",
                    la.target
                )));
            }
            targeted.push((la.target.clone(), id.role().expect("adapted weights have roles")));
            let rank = la.u.cols();
            adapters.insert(
                id,
                LoraAdapter {
                    base,
                    u: la.u,
                    v: la.v,
                    rank,
                    scale: file.scale,
                },
            );
        }
        Ok(Some(Self {
            rank: file.rank,
            scale: file.scale,
            selection: TargetSelection { strategy, targeted },
            adapters,
        }))
    }
}

/// Forward-pass weights for one step.
#[derive(Debug)]
pub struct Effective {
    pub embeddings: Tensor,
    pub in_proj: Tensor,
    pub out_proj: Tensor,
    pub head: Tensor,
    pub block: MambaParams,
}

/// Activations of one sequence kept for the backward pass.
#[derive(Debug)]
pub struct SeqCache {
    pub tokens: Vec<u32>,
    pub h0: Tensor,
    pub trace: StateTrace,
    pub h: Tensor,
    pub logits: Tensor,
}

pub fn forward_seq(eff: &Effective, tokens: &[u32], policy: &PrecisionPolicy) -> Result<SeqCache, TrainError> {
    let fmt = policy.activation_format;
    let d = eff.block.d;
    let t_len = tokens.len();
    let vocab = eff.embeddings.rows();
    let mut h0 = Tensor::zeros2(t_len, d);
    for (t, &tok) in tokens.iter().enumerate() {
        if tok as usize >= vocab {
            return Err(TrainError::Shape(format!("token {tok} outside vocab {vocab}")));
        }
        h0.row_mut(t).copy_from_slice(eff.embeddings.row(tok as usize));
    }
    let h0 = h0.quantized(fmt);
    let u = h0.matmul(&eff.in_proj).quantized(fmt);
    let trace = mamba_forward(&eff.block, &u, &vec![0.0; d], policy)?;
    drop(u);
    let mut h = trace.outputs.matmul(&eff.out_proj);
    h.add_assign(&h0);
    let h = h.quantized(fmt);
    let logits = h.matmul(&eff.head).quantized(fmt);
    Ok(SeqCache {
        tokens: tokens.to_vec(),
        h0,
        trace,
        h,
        logits,
    })
}

/// Summed cross-entropy of one sequence and `grad_scale · (softmax − onehot)`
/// rounded to `grad_fmt`. The softmax runs in f64 on the upcast logits.
pub fn softmax_xent(logits: &Tensor, targets: &[u32], grad_scale: f64, grad_fmt: NumericFormat) -> (f64, Tensor) {
    let v = logits.cols();
    let mut dlogits = Tensor::zeros2(logits.rows(), v);
    let mut loss = 0.0;
    for (t, &target) in targets.iter().enumerate() {
        let row = logits.row(t);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - row[target as usize];
        let g = dlogits.row_mut(t);
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            let onehot = if j == target as usize { 1.0 } else { 0.0 };
            *gj = grad_fmt.quantize(grad_scale * (p - onehot));
        }
    }
    (loss, dlogits.quantized(grad_fmt))
}

/// Which parameters receive gradients, and by which route.
#[derive(Debug, Clone, Default)]
pub struct GradPlan {
    /// Trained directly.
    pub full: BTreeSet<ParamId>,
    /// Trained through adapter factors.
    pub lora: BTreeSet<ParamId>,
}

impl GradPlan {
    pub fn full(model: &ToyModel) -> Self {
        Self {
            full: model.ids().into_iter().collect(),
            lora: BTreeSet::new(),
        }
    }

    pub fn lora(adapters: &AdapterSet) -> Self {
        Self {
            full: BTreeSet::new(),
            lora: adapters.adapters.keys().copied().collect(),
        }
    }

    fn wants(&self, id: ParamId) -> bool {
        self.full.contains(&id) || self.lora.contains(&id)
    }
}

/// Gradient accumulators over a batch.
#[derive(Debug, Default)]
pub struct GradAccum {
    pub full: BTreeMap<ParamId, Tensor>,
    pub factors: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl GradAccum {
    fn add_full(&mut self, id: ParamId, g: Tensor) {
        match self.full.get_mut(&id) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.full.insert(id, g);
            }
        }
    }

    fn add_factors(&mut self, id: ParamId, gu: Tensor, gv: Tensor) {
        match self.factors.get_mut(&id) {
            Some((au, av)) => {
                au.add_assign(&gu);
                av.add_assign(&gv);
            }
            None => {
                self.factors.insert(id, (gu, gv));
            }
        }
    }

    /// Convert full gradients of adapted weights into factor gradients.
    pub fn finalize(&mut self, adapters: Option<&AdapterSet>) {
        let Some(set) = adapters else { return };
        for (id, adapter) in &set.adapters {
            if let Some(gw) = self.full.remove(id) {
                let (gu, gv) = adapter.factor_grads(&gw);
                self.add_factors(*id, gu, gv);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.full.values_mut() {
            g.scale(s);
        }
        for (gu, gv) in self.factors.values_mut() {
            gu.scale(s);
            gv.scale(s);
        }
    }
}

/// Gradient of `x · W` with respect to `W` or to its adapter factors.
fn linear_weight_grad(
    id: ParamId,
    x: &Tensor,
    dy: &Tensor,
    plan: &GradPlan,
    adapters: Option<&AdapterSet>,
    fmt: NumericFormat,
    acc: &mut GradAccum,
) {
    if plan.full.contains(&id) {
        acc.add_full(id, x.t_matmul(dy).quantized(fmt));
    } else if plan.lora.contains(&id) {
        let a = &adapters.expect("lora plan has adapters").adapters[&id];
        // dU = s · xᵀ (dy Vᵀ), dV = s · (x U)ᵀ dy
        let mut gu = x.t_matmul(&dy.matmul_t(&a.v));
        let mut gv = x.matmul(&a.u).t_matmul(dy);
        gu.scale(a.scale);
        gv.scale(a.scale);
        acc.add_factors(id, gu.quantized(fmt), gv.quantized(fmt));
    }
}

/// Backward through one sequence, accumulating into `acc`.
pub fn backward_seq(
    eff: &Effective,
    cache: &SeqCache,
    dlogits: &Tensor,
    plan: &GradPlan,
    adapters: Option<&AdapterSet>,
    policy: &PrecisionPolicy,
    acc: &mut GradAccum,
) -> Result<(), TrainError> {
    let fmt = policy.gradient_format;
    if plan.full.contains(&ParamId::Head) {
        acc.add_full(ParamId::Head, cache.h.t_matmul(dlogits).quantized(fmt));
    }
    let dh = dlogits.matmul_t(&eff.head).quantized(fmt);
    linear_weight_grad(ParamId::OutProj, &cache.trace.outputs, &dh, plan, adapters, fmt, acc);
    let dy = dh.matmul_t(&eff.out_proj).quantized(fmt);

    let input_projected = eff.block.mode() == BufferMode::InputProjected;
    let fused_by_factors = input_projected && plan.lora.contains(&ParamId::Fused);
    let request = GradRequest {
        fused: plan.wants(ParamId::Fused) && !fused_by_factors,
        gate: plan.wants(ParamId::Gate),
    };
    let bg = mamba_backward_with(&eff.block, &cache.trace, &dy, request)?;
    if plan.full.contains(&ParamId::ALog) {
        acc.add_full(ParamId::ALog, bg.a_log);
    }
    if plan.full.contains(&ParamId::DeltaBias) {
        acc.add_full(ParamId::DeltaBias, bg.delta_bias);
    }
    if let Some(gw) = bg.fused {
        acc.add_full(ParamId::Fused, gw);
    } else if fused_by_factors {
        linear_weight_grad(
            ParamId::Fused,
            &cache.trace.scan_inputs,
            &bg.row_grads,
            plan,
            adapters,
            fmt,
            acc,
        );
    }
    if let Some(gg) = bg.gate_weight {
        acc.add_full(ParamId::Gate, gg);
    }

    let du = bg.input;
    linear_weight_grad(ParamId::InProj, &cache.h0, &du, plan, adapters, fmt, acc);
    if plan.wants(ParamId::Embeddings) {
        let mut dh0 = du.matmul_t(&eff.in_proj);
        dh0.add_assign(&dh);
        let dh0 = dh0.quantized(fmt);
        let mut de = Tensor::zeros2(eff.embeddings.rows(), eff.embeddings.cols());
        for (t, &tok) in cache.tokens.iter().enumerate() {
            for (e, g) in de.row_mut(tok as usize).iter_mut().zip(dh0.row(t)) {
                *e += g;
            }
        }
        acc.add_full(ParamId::Embeddings, de.quantized(fmt));
    }
    Ok(())
}

/// Held-out quality of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    /// Argmax accuracy over every position.
    pub token_accuracy: f64,
    /// Argmax accuracy over positions whose target is not padding.
    pub answer_accuracy: f64,
    pub answer_positions: usize,
}

pub fn evaluate(
    model: &ToyModel,
    adapters: Option<&AdapterSet>,
    data: &BatchStream,
    policy: &PrecisionPolicy,
) -> Result<EvalMetrics, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let eff = model.effective(adapters, policy.activation_format)?;
    let pad = data.pad_token();
    let (mut loss, mut hits, mut total, mut ans_hits, mut ans_total) = (0.0, 0usize, 0usize, 0usize, 0usize);
    for i in 0..data.len() {
        let (inputs, targets) = data.sequence(i);
        let cache = forward_seq(&eff, inputs, policy)?;
        loss += softmax_xent(&cache.logits, targets, 0.0, NumericFormat::Fp64).0;
        for (t, &target) in targets.iter().enumerate() {
            let hit = argmax(cache.logits.row(t)) == target as usize;
            hits += hit as usize;
            total += 1;
            if target != pad {
                ans_hits += hit as usize;
                ans_total += 1;
            }
        }
    }
    Ok(EvalMetrics {
        loss: loss / total as f64,
        token_accuracy: hits as f64 / total as f64,
        answer_accuracy: if ans_total == 0 {
            1.0
        } else {
            ans_hits as f64 / ans_total as f64
        },
        answer_positions: ans_total,
    })
}

/// Logits of every sequence in `data`, rows concatenated.
pub fn predict(
    model: &ToyModel,
    adapters: Option<&AdapterSet>,
    data: &BatchStream,
    policy: &PrecisionPolicy,
) -> Result<Vec<Tensor>, TrainError> {
    let eff = model.effective(adapters, policy.activation_format)?;
    (0..data.len())
        .map(|i| forward_seq(&eff, data.sequence(i).0, policy).map(|c| c.logits))
        .collect()
}

/// Mean absolute difference between the next-token distributions implied
/// by two sets of logits. Probabilities, unlike logits, are invariant to a
/// per-row shift, so confident and diffuse models compare on one scale.
pub fn output_divergence(a: &[Tensor], b: &[Tensor]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (x, y) in a.iter().zip(b) {
        for t in 0..x.rows() {
            let (p, q) = (softmax(x.row(t)), softmax(y.row(t)));
            for (pi, qi) in p.iter().zip(&q) {
                sum += (pi - qi).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
