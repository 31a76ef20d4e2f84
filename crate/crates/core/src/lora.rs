//! Low-rank adaptation: `W̃ = W + scale · U V` with `W` frozen.
//!
//! When the adapted weight is the fused Δ/B/C buffer, every row of the
//! update is `U[i, :] · V`, so a single left factor row drives the Δ, B and
//! C columns of that row together. [`verify_tying`] checks this
//! numerically.

use crate::ssm::checkpoint::{CheckpointError, Container};
use crate::tensor::Tensor;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

/// Residual threshold for the shared-left-factor test.
pub const TYING_TOLERANCE: f64 = 1e-10;
/// Singular values below this fraction of the largest are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum LoraError {
    #[error("rank exceeds matrix: r = {rank}, matrix is {rows} × {cols}")]
    RankExceedsMatrix { rank: usize, rows: usize, cols: usize },
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("not a fused buffer: {cols} columns is not 3 × {d}")]
    NotFusedBuffer { cols: usize, d: usize },
    #[error("missing x_proj role")]
    MissingFusedBuffer,
    #[error("unknown weight role `{role}` for `{id}`")]
    UnknownRole { id: String, role: String },
    #[error("unknown target strategy `{0}` (expected all or sll)")]
    UnknownStrategy(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint has no adapter")]
    NoAdapter,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// Frozen base weight, `n_rows × n_cols`.
    pub base: Arc<Tensor>,
    /// Left factor, `n_rows × r`.
    pub u: Tensor,
    /// Right factor, `r × n_cols`.
    pub v: Tensor,
    pub rank: usize,
    pub scale: f64,
}

/// Attach a rank-`r` adapter to `base`.
///
/// `V` is drawn from `N(0, 1/n_cols)` with a seeded generator and `U`
/// starts at zero, so the initial update is exactly zero.
pub fn attach_lora(base: Arc<Tensor>, rank: usize, scale: f64, seed: u64) -> Result<LoraAdapter, LoraError> {
    let (rows, cols) = (base.rows(), base.cols());
    if rank == 0 {
        return Err(LoraError::ZeroRank);
    }
    if rank > rows.min(cols) {
        return Err(LoraError::RankExceedsMatrix { rank, rows, cols });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("finite std");
    let v = Tensor::from_vec(
        &[rank, cols],
        (0..rank * cols).map(|_| normal.sample(&mut rng)).collect(),
    );
    Ok(LoraAdapter {
        base,
        u: Tensor::zeros2(rows, rank),
        v,
        rank,
        scale,
    })
}

impl LoraAdapter {
    pub fn rows(&self) -> usize {
        self.base.rows()
    }

    pub fn cols(&self) -> usize {
        self.base.cols()
    }

    pub fn num_trainable(&self) -> usize {
        self.u.numel() + self.v.numel()
    }

    /// `scale · U V`.
    pub fn delta(&self) -> Tensor {
        let mut dw = self.u.matmul(&self.v);
        dw.scale(self.scale);
        dw
    }

    /// Factor gradients from the gradient of the adapted weight:
    /// `dU = scale · dW Vᵀ`, `dV = scale · Uᵀ dW`.
    pub fn factor_grads(&self, grad_weight: &Tensor) -> (Tensor, Tensor) {
        let mut gu = grad_weight.matmul_t(&self.v);
        let mut gv = self.u.t_matmul(grad_weight);
        gu.scale(self.scale);
        gv.scale(self.scale);
        (gu, gv)
    }
}

/// `base + scale · U V`; the base is left untouched.
pub fn merged_weight(adapter: &LoraAdapter) -> Tensor {
    let mut w = (*adapter.base).clone();
    if adapter.scale != 0.0 {
        w.add_assign(&adapter.delta());
    }
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TyingReport {
    pub rank_observed: usize,
    pub rank_bound: usize,
    /// Relative least-squares residuals of the Δ, B and C column segments
    /// against the left factor `U`.
    pub segment_residuals: [f64; 3],
    pub shared_left_factor_ok: bool,
    pub rank_ok: bool,
}

impl TyingReport {
    pub fn passed(&self) -> bool {
        self.shared_left_factor_ok && self.rank_ok
    }
}

/// Check the update `scale · U V` of an adapter on a fused buffer.
pub fn verify_tying(adapter: &LoraAdapter, d: usize) -> Result<TyingReport, LoraError> {
    verify_tying_against(adapter, &merged_weight(adapter), d)
}

/// Check the update `adapted - base` actually carried by a weight against
/// the adapter's left factor.
///
/// For each column segment `[0,d)`, `[d,2d)`, `[2d,3d)` the update is
/// projected onto the column space of `U`; the relative Frobenius residual
/// must stay below [`TYING_TOLERANCE`] for one shared `U` to explain all
/// three. The update's numerical rank must not exceed the adapter rank.
pub fn verify_tying_against(adapter: &LoraAdapter, adapted: &Tensor, d: usize) -> Result<TyingReport, LoraError> {
    let (rows, cols) = (adapter.rows(), adapter.cols());
    if cols != 3 * d {
        return Err(LoraError::NotFusedBuffer { cols, d });
    }
    if adapted.shape() != adapter.base.shape() {
        return Err(LoraError::Shape(format!(
            "adapted weight {:?} does not match base {:?}",
            adapted.shape(),
            adapter.base.shape()
        )));
    }
    let delta = DMatrix::from_fn(rows, cols, |i, j| adapted.at(i, j) - adapter.base.at(i, j));
    let rank_observed = numerical_rank(&delta);

    let basis = column_basis(&to_dmatrix(&adapter.u));
    let mut segment_residuals = [0.0; 3];
    for (s, res) in segment_residuals.iter_mut().enumerate() {
        let seg = delta.columns(s * d, d).into_owned();
        let norm = seg.norm();
        *res = if norm == 0.0 {
            0.0
        } else {
            let projected = match &basis {
                Some(q) => q * (q.transpose() * &seg),
                None => DMatrix::zeros(rows, d),
            };
            (seg - projected).norm() / norm
        };
    }
    let shared_left_factor_ok = segment_residuals.iter().all(|&r| r < TYING_TOLERANCE);
    Ok(TyingReport {
        rank_observed,
        rank_bound: adapter.rank,
        segment_residuals,
        shared_left_factor_ok,
        rank_ok: rank_observed <= adapter.rank,
    })
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// Count of singular values above `RANK_TOLERANCE · σ₁`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.iter().all(|&v| v == 0.0) {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.iter().copied().fold(0.0_f64, f64::max);
    sv.iter().filter(|&&s| s > RANK_TOLERANCE * top).count()
}

/// Orthonormal basis of the column space, or `None` for a zero matrix.
fn column_basis(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.iter().all(|&v| v == 0.0) {
        return None;
    }
    let svd = m.clone().svd(true, false);
    let top = svd.singular_values.iter().copied().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 1e-12 * top)
        .map(|(i, _)| i)
        .collect();
    let u = svd.u.expect("requested left singular vectors");
    Some(u.select_columns(keep.iter()))
}

/// Named roles a model exposes for adapter targeting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WeightRole {
    /// The fused Δ/B/C buffer (`x_proj`).
    FusedBuffer,
    InProj,
    OutProj,
    Embeddings,
    Gate,
}

impl WeightRole {
    pub fn name(self) -> &'static str {
        match self {
            WeightRole::FusedBuffer => "x_proj",
            WeightRole::InProj => "in_proj",
            WeightRole::OutProj => "out_proj",
            WeightRole::Embeddings => "embeddings",
            WeightRole::Gate => "gate",
        }
    }

    pub fn parse(id: &str, role: &str) -> Result<Self, LoraError> {
        match role {
            "x_proj" | "fused_buffer" => Ok(WeightRole::FusedBuffer),
            "in_proj" => Ok(WeightRole::InProj),
            "out_proj" => Ok(WeightRole::OutProj),
            "embeddings" => Ok(WeightRole::Embeddings),
            "gate" => Ok(WeightRole::Gate),
            other => Err(LoraError::UnknownRole {
                id: id.to_string(),
                role: other.to_string(),
            }),
        }
    }

    fn in_sll(self) -> bool {
        !matches!(self, WeightRole::Gate)
    }
}

/// A model whose linear weights can be adapter targets.
pub trait AdaptableModel {
    /// `(weight id, role name, (rows, cols))` for every adaptable weight.
    fn weight_roles(&self) -> Vec<(String, String, (usize, usize))>;
    /// Total parameter count, adapters excluded.
    fn total_params(&self) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetStrategy {
    All,
    Sll,
}

impl fmt::Display for TargetStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetStrategy::All => "all",
            TargetStrategy::Sll => "sll",
        })
    }
}

impl FromStr for TargetStrategy {
    type Err = LoraError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(TargetStrategy::All),
            "sll" => Ok(TargetStrategy::Sll),
            other => Err(LoraError::UnknownStrategy(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSelection {
    pub strategy: TargetStrategy,
    /// `(weight id, role)` in model order.
    pub targeted: Vec<(String, WeightRole)>,
}

impl TargetSelection {
    pub fn empty(strategy: TargetStrategy) -> Self {
        Self {
            strategy,
            targeted: Vec::new(),
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.targeted.iter().any(|(t, _)| t == id)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.targeted.iter().map(|(t, _)| t.as_str()).collect()
    }
}

/// ALL targets every role; SLL targets the fused buffer, embeddings and
/// the input/output projections.
pub fn select_targets<M: AdaptableModel + ?Sized>(
    model: &M,
    strategy: TargetStrategy,
) -> Result<TargetSelection, LoraError> {
    let mut targeted = Vec::new();
    for (id, role, _) in model.weight_roles() {
        let role = WeightRole::parse(&id, &role)?;
        if strategy == TargetStrategy::All || role.in_sll() {
            targeted.push((id, role));
        }
    }
    if strategy == TargetStrategy::Sll && !targeted.iter().any(|(_, r)| *r == WeightRole::FusedBuffer) {
        return Err(LoraError::MissingFusedBuffer);
    }
    Ok(TargetSelection { strategy, targeted })
}

/// Rank actually used on a `rows × cols` target.
pub fn effective_rank(rank: usize, rows: usize, cols: usize) -> usize {
    rank.min(rows).min(cols)
}

/// `(trainable, total)` where trainable is `Σ r · (rows + cols)` over the
/// selected targets, `r` capped at each target's smaller dimension.
pub fn trainable_param_count<M: AdaptableModel + ?Sized>(
    model: &M,
    selection: &TargetSelection,
    rank: usize,
) -> (usize, usize) {
    let shapes: BTreeMap<String, (usize, usize)> = model
        .weight_roles()
        .into_iter()
        .map(|(id, _, shape)| (id, shape))
        .collect();
    let trainable = selection
        .targeted
        .iter()
        .filter_map(|(id, _)| shapes.get(id))
        .map(|&(r, c)| effective_rank(rank, r, c) * (r + c))
        .sum();
    (trainable, model.total_params())
}

/// Adapters stored alongside model tensors: meta keys `lora_r`,
/// `lora_scale` and `lora_targets`, tensors `<target>.lora_U`,
/// `<target>.lora_V` and, optionally, the adapted weight the model ran with
/// as `<target>.adapted`.
pub fn push_adapters(c: &mut Container, adapters: &[(String, &LoraAdapter, Option<&Tensor>)], rank: usize, scale: f64) {
    c.set_meta("lora_r", rank as u64);
    c.set_meta("lora_scale", scale);
    c.set_meta(
        "lora_targets",
        adapters.iter().map(|(t, _, _)| t.clone()).collect::<Vec<_>>(),
    );
    for (target, adapter, adapted) in adapters {
        c.push(format!("{target}.lora_U"), adapter.u.clone());
        c.push(format!("{target}.lora_V"), adapter.v.clone());
        if let Some(w) = adapted {
            c.push(format!("{target}.adapted"), (*w).clone());
        }
    }
}

#[derive(Debug)]
pub struct LoadedAdapter {
    pub target: String,
    pub u: Tensor,
    pub v: Tensor,
    pub adapted: Option<Tensor>,
}

#[derive(Debug)]
pub struct AdapterFile {
    pub rank: usize,
    pub scale: f64,
    pub adapters: Vec<LoadedAdapter>,
}

impl AdapterFile {
    pub fn get(&self, target: &str) -> Option<&LoadedAdapter> {
        self.adapters.iter().find(|a| a.target == target)
    }
}

/// Inverse of [`push_adapters`]; `None` when the container carries no
/// adapters.
pub fn take_adapters(c: &mut Container) -> Result<Option<AdapterFile>, LoraError> {
    let Some(targets) = c.meta.get("lora_targets").cloned() else {
        return Ok(None);
    };
    let rank = c.meta_u64("lora_r")? as usize;
    let scale = c.meta_f64("lora_scale")?;
    let targets: Vec<String> = targets
        .as_array()
        .ok_or_else(|| CheckpointError::Meta("lora_targets".into()))?
        .iter()
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| CheckpointError::Meta("lora_targets".into()))
        })
        .collect::<Result<_, _>>()?;
    let mut adapters = Vec::new();
    for target in targets {
        let u = c.take(&format!("{target}.lora_U"), None)?;
        let v = c.take(&format!("{target}.lora_V"), None)?;
        if u.shape().len() != 2 || v.shape().len() != 2 || u.cols() != v.rows() || u.cols() > rank {
            return Err(LoraError::Shape(format!(
                "{target}: factors {:?} × {:?} inconsistent with r = {rank}",
                u.shape(),
                v.shape()
            )));
        }
        let name = format!("{target}.adapted");
        let adapted = if c.get(&name).is_some() {
            Some(c.take(&name, None)?)
        } else {
            None
        };
        adapters.push(LoadedAdapter { target, u, v, adapted });
    }
    Ok(Some(AdapterFile { rank, scale, adapters }))
}

/// A standalone adapter file.
pub fn save_adapters(
    path: impl AsRef<Path>,
    adapters: &[(String, &LoraAdapter, Option<&Tensor>)],
    rank: usize,
    scale: f64,
) -> Result<(), LoraError> {
    let mut c = Container::new();
    c.set_meta("kind", "lora-adapters");
    push_adapters(&mut c, adapters, rank, scale);
    c.save(path)?;
    Ok(())
}

pub fn load_adapters(path: impl AsRef<Path>) -> Result<AdapterFile, LoraError> {
    let mut c = Container::load(path)?;
    take_adapters(&mut c)?.ok_or(LoraError::NoAdapter)
}
