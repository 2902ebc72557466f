//! Shared-space projector merging.
//!
//! Every layer is processed independently:
//!
//! 1. task vectors `ΔWᵢ = Wᵢ − W₀` on bias-augmented matrices;
//! 2. one SVD of `[ΔW₁, …, ΔW_N] = U·Σ·[V₁ᵀ, …, V_Nᵀ]`;
//! 3. each coefficient block is split into a rank-`r` core `Aᵢ` and a residual `Bᵢ`;
//! 4. residual rows are gated by a sigmoid of their cross-expert consistency, then
//!    rescaled to their original L1 mass;
//! 5. cores are merged with alignment-derived weights, residuals with uniform weights;
//! 6. `W* = W₀ + U·Σ·(A* + B*)`.
//!
//! With a magnitude-based inner operator (TIES, DARE-TIES) steps 3–5 run on `Σ·Vᵢᵀ`,
//! and the merged coefficients are divided by `Σ` before reconstruction.

use rayon::prelude::*;
use serde::Serialize;

use crate::linalg::{cosine, l1_norm, thin_svd};
use crate::operators::{merge_weighted, MergeKind, MergeOperator};
use crate::scores::{threshold_from_ratio, ScoreTable, DEFAULT_BETA};
use crate::tensorstore::{augment, split, AugmentedLayer, Layer, ProjectorCheckpoint};
use crate::{Error, Matrix, Result};

/// Singular values (and masked L1 masses) below this are treated as zero.
pub const TINY: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PivotConfig {
    pub rank: usize,
    pub gamma: f64,
    pub rho: f64,
    pub beta: f64,
    pub inner: MergeOperator,
    /// `None` selects Σ-space handling exactly for magnitude-based inner operators.
    pub magnitude_space: Option<bool>,
}

impl Default for PivotConfig {
    fn default() -> Self {
        PivotConfig {
            rank: 64,
            gamma: 20.0,
            rho: 0.5,
            beta: DEFAULT_BETA,
            inner: MergeOperator::new(MergeKind::Ties { trim_fraction: 1.0 }),
            magnitude_space: None,
        }
    }
}

impl PivotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank < 1 {
            return Err(Error::InvalidArgument("rank must be at least 1".into()));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rho must lie in (0, 1), got {}",
                self.rho
            )));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        self.inner.validate()
    }

    pub fn uses_magnitude_space(&self) -> bool {
        self.magnitude_space
            .unwrap_or_else(|| self.inner.kind.is_magnitude_based())
    }
}

/// Per-layer augmented task vectors: `result[l][i]` is expert `i`'s delta at layer `l`.
pub fn task_vectors(
    experts: &[ProjectorCheckpoint],
    base: &ProjectorCheckpoint,
) -> Result<Vec<Vec<Matrix>>> {
    if experts.is_empty() {
        return Err(Error::InvalidArgument("need at least one expert".into()));
    }
    for e in experts {
        base.check_compatible(e)?;
    }
    (0..base.num_layers())
        .map(|l| {
            let b = augment(&base.layers[l])?;
            experts
                .iter()
                .map(|e| Ok(augment(&e.layers[l])?.matrix - &b.matrix))
                .collect()
        })
        .collect()
}

/// Joint decomposition of one layer's deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedSpaceLayer {
    /// `d_out × k` shared basis.
    pub u: Matrix,
    pub s: Vec<f64>,
    /// One `k × w` block per expert, in input order.
    pub coeffs: Vec<Matrix>,
    /// All deltas were zero; the basis is empty.
    pub degenerate: bool,
}

impl SharedSpaceLayer {
    pub fn k(&self) -> usize {
        self.s.len()
    }

    /// `U · diag(S) · coeffs`.
    pub fn lift(&self, coeffs: &Matrix) -> Matrix {
        let mut us = self.u.clone();
        for (j, mut col) in us.column_iter_mut().enumerate() {
            col *= self.s[j];
        }
        us * coeffs
    }
}

/// SVD of the column-wise concatenation `[ΔW₁, …, ΔW_N]`.
///
/// Only components above the numerical rank threshold are kept, so `k` is the rank
/// of the concatenation (at most `min(d_out, N·w)`).
pub fn joint_decompose(deltas: &[Matrix]) -> Result<SharedSpaceLayer> {
    let first = deltas.first().ok_or_else(|| {
        Error::InvalidArgument("joint decomposition needs at least one delta".into())
    })?;
    let (rows, w) = first.shape();
    if let Some(d) = deltas.iter().find(|d| d.shape() != (rows, w)) {
        return Err(Error::Shape(format!(
            "deltas have shapes {:?} and {:?}",
            (rows, w),
            d.shape()
        )));
    }
    let mut concat = Matrix::zeros(rows, w * deltas.len());
    for (i, d) in deltas.iter().enumerate() {
        concat.columns_mut(i * w, w).copy_from(d);
    }
    let f = thin_svd(&concat)?;
    let k = f.numerical_rank();
    if k == 0 {
        log::warn!("all task vectors are zero; shared basis is empty");
    }
    let vt = f.vt.rows(0, k);
    Ok(SharedSpaceLayer {
        u: f.u.columns(0, k).into_owned(),
        s: f.s[..k].to_vec(),
        coeffs: (0..deltas.len())
            .map(|i| vt.columns(i * w, w).into_owned())
            .collect(),
        degenerate: k == 0,
    })
}

/// Rank-`r` cores and their residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledLayer {
    pub cores: Vec<Matrix>,
    pub residuals: Vec<Matrix>,
    /// Rank actually used after clamping to `min(k, w)`.
    pub rank: usize,
}

pub fn decouple(coeffs: &[Matrix], rank: usize) -> Result<DecoupledLayer> {
    if rank < 1 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    let full = coeffs.first().map_or(0, |c| c.nrows().min(c.ncols()));
    if rank > full && full > 0 {
        log::warn!("rank {rank} exceeds coefficient rank bound {full}; clamping");
    }
    let rank = rank.min(full);
    let mut cores = Vec::with_capacity(coeffs.len());
    let mut residuals = Vec::with_capacity(coeffs.len());
    for c in coeffs {
        if rank >= c.nrows().min(c.ncols()) {
            cores.push(c.clone());
            residuals.push(Matrix::zeros(c.nrows(), c.ncols()));
        } else {
            let core = thin_svd(c)?.truncated(rank);
            residuals.push(c - &core);
            cores.push(core);
        }
    }
    Ok(DecoupledLayer {
        cores,
        residuals,
        rank,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredResiduals {
    pub residuals: Vec<Matrix>,
    /// Per-row gate `sigmoid(γ(c_k − τ))`.
    pub mask: Vec<f64>,
    /// Mean pairwise row cosine across experts; empty for a single expert.
    pub consistencies: Vec<f64>,
    pub tau: Option<f64>,
    /// Experts whose masked residual had (near) zero L1 mass and were left unscaled.
    pub uncompensated: Vec<bool>,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean over expert pairs of the cosine between row `k` of each residual.
pub fn row_consistencies(residuals: &[Matrix]) -> Result<Vec<f64>> {
    let n = residuals.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "consistency needs at least two experts".into(),
        ));
    }
    let rows: Vec<Vec<Vec<f64>>> = residuals
        .iter()
        .map(|m| m.row_iter().map(|r| r.iter().copied().collect()).collect())
        .collect();
    let k = residuals[0].nrows();
    let pairs = (n * (n - 1) / 2) as f64;
    (0..k)
        .map(|row| {
            let mut total = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    total += cosine(&rows[i][row], &rows[j][row])?;
                }
            }
            Ok(total / pairs)
        })
        .collect()
}

/// Consistency-gated residual filtering with L1 mass compensation.
pub fn filter_residuals(residuals: &[Matrix], gamma: f64, rho: f64) -> Result<FilteredResiduals> {
    let k = residuals.first().map_or(0, Matrix::nrows);
    if residuals.len() < 2 || k == 0 {
        return Ok(FilteredResiduals {
            residuals: residuals.to_vec(),
            mask: vec![1.0; k],
            consistencies: Vec::new(),
            tau: None,
            uncompensated: vec![false; residuals.len()],
        });
    }
    let consistencies = row_consistencies(residuals)?;
    let tau = threshold_from_ratio(&consistencies, rho)?;
    let mask: Vec<f64> = consistencies
        .iter()
        .map(|c| sigmoid(gamma * (c - tau)))
        .collect();

    let mut filtered = Vec::with_capacity(residuals.len());
    let mut uncompensated = Vec::with_capacity(residuals.len());
    for b in residuals {
        let mut masked = b.clone();
        for (r, &m) in mask.iter().enumerate() {
            masked.row_mut(r).scale_mut(m);
        }
        let masked_mass = l1_norm(&masked);
        if masked_mass < TINY {
            filtered.push(masked);
            uncompensated.push(true);
        } else {
            filtered.push(masked * (l1_norm(b) / masked_mass));
            uncompensated.push(false);
        }
    }
    Ok(FilteredResiduals {
        residuals: filtered,
        mask,
        consistencies,
        tau: Some(tau),
        uncompensated,
    })
}

fn scale_rows(m: &Matrix, s: &[f64]) -> Matrix {
    let mut out = m.clone();
    for (r, &v) in s.iter().enumerate() {
        out.row_mut(r).scale_mut(v);
    }
    out
}

fn unscale_rows(m: &Matrix, s: &[f64]) -> Matrix {
    let mut out = m.clone();
    for (r, &v) in s.iter().enumerate() {
        if v < TINY {
            out.row_mut(r).fill(0.0);
        } else {
            out.row_mut(r).scale_mut(1.0 / v);
        }
    }
    out
}

/// `Merge(cores, alphas) + Merge(filtered residuals, uniform)`.
pub fn merge_layer(
    cores: &[Matrix],
    filtered: &[Matrix],
    alphas: &[f64],
    op: &MergeOperator,
) -> Result<Matrix> {
    let core = merge_weighted(op, cores, alphas)?;
    let residual = merge_weighted(op, filtered, &vec![1.0; filtered.len()])?;
    Ok(core + residual)
}

/// `W₀ + U·diag(S)·V*ᵀ`, split back into weight and bias.
pub fn reconstruct(
    shared: &SharedSpaceLayer,
    merged_coeffs: &Matrix,
    base: &AugmentedLayer,
) -> Result<Layer> {
    if merged_coeffs.nrows() != shared.k() || merged_coeffs.ncols() != base.matrix.ncols() {
        return Err(Error::Shape(format!(
            "merged coefficients are {:?}, expected ({}, {})",
            merged_coeffs.shape(),
            shared.k(),
            base.matrix.ncols()
        )));
    }
    let matrix = &base.matrix + shared.lift(merged_coeffs);
    Ok(split(&AugmentedLayer {
        matrix,
        had_bias: base.had_bias,
    }))
}

/// Everything computed for one layer before the weighted merge.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub deltas: Vec<Matrix>,
    pub shared: SharedSpaceLayer,
    /// True when cores and residuals live in `Σ·Vᵢᵀ` coordinates.
    pub magnitude_space: bool,
    pub decoupled: DecoupledLayer,
    pub filtered: FilteredResiduals,
}

impl LayerState {
    /// `Aᵢ + B̃ᵢ` for each expert, in working coordinates.
    pub fn filtered_coefficients(&self) -> Vec<Matrix> {
        self.decoupled
            .cores
            .iter()
            .zip(&self.filtered.residuals)
            .map(|(a, b)| a + b)
            .collect()
    }

    /// `Aᵢ + B̃ᵢ` mapped back to weight space, comparable with `deltas`.
    pub fn filtered_deltas(&self) -> Vec<Matrix> {
        self.filtered_coefficients()
            .iter()
            .map(|c| {
                if self.magnitude_space {
                    &self.shared.u * c
                } else {
                    self.shared.lift(c)
                }
            })
            .collect()
    }
}

pub fn decompose_layer(deltas: Vec<Matrix>, config: &PivotConfig) -> Result<LayerState> {
    let shared = joint_decompose(&deltas)?;
    let magnitude_space = config.uses_magnitude_space();
    let working: Vec<Matrix> = if magnitude_space {
        shared
            .coeffs
            .iter()
            .map(|c| scale_rows(c, &shared.s))
            .collect()
    } else {
        shared.coeffs.clone()
    };
    let decoupled = decouple(&working, config.rank)?;
    let filtered = filter_residuals(&decoupled.residuals, config.gamma, config.rho)?;
    Ok(LayerState {
        deltas,
        shared,
        magnitude_space,
        decoupled,
        filtered,
    })
}

/// Per-layer state for all experts, ordered by expert id.
pub fn decompose_all(
    experts: &[ProjectorCheckpoint],
    base: &ProjectorCheckpoint,
    config: &PivotConfig,
) -> Result<Vec<LayerState>> {
    config.validate()?;
    let sorted = sorted_by_id(experts);
    let owned: Vec<ProjectorCheckpoint> = sorted.into_iter().cloned().collect();
    task_vectors(&owned, base)?
        .into_par_iter()
        .map(|deltas| decompose_layer(deltas, config))
        .collect()
}

fn merge_state(state: &LayerState, alphas: &[f64], op: &MergeOperator) -> Result<Matrix> {
    let merged = merge_layer(
        &state.decoupled.cores,
        &state.filtered.residuals,
        alphas,
        op,
    )?;
    Ok(if state.magnitude_space {
        unscale_rows(&merged, &state.shared.s)
    } else {
        merged
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub alpha: Vec<f64>,
    pub consistencies: Vec<f64>,
    pub mask: Vec<f64>,
    pub tau: Option<f64>,
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub magnitude_space: bool,
    pub degenerate: bool,
    pub uncompensated: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigRecord {
    pub rank: usize,
    pub gamma: f64,
    pub rho: f64,
    pub beta: f64,
    pub inner: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PivotDiagnostics {
    pub experts: Vec<String>,
    pub config: ConfigRecord,
    pub layers: Vec<LayerDiagnostics>,
}

impl PivotDiagnostics {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn sorted_by_id(experts: &[ProjectorCheckpoint]) -> Vec<&ProjectorCheckpoint> {
    let mut sorted: Vec<&ProjectorCheckpoint> = experts.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    sorted
}

fn check_unique_ids(experts: &[&ProjectorCheckpoint]) -> Result<()> {
    if let Some(pair) = experts.windows(2).find(|p| p[0].id == p[1].id) {
        return Err(Error::InvalidArgument(format!(
            "duplicate expert id `{}`",
            pair[0].id
        )));
    }
    Ok(())
}

/// Full merge. Experts are processed in lexicographic id order; `scores` must cover
/// every expert and layer. The temperature comes from `config.beta`.
pub fn pivot_merge(
    experts: &[ProjectorCheckpoint],
    base: &ProjectorCheckpoint,
    scores: &ScoreTable,
    config: &PivotConfig,
) -> Result<(ProjectorCheckpoint, PivotDiagnostics)> {
    config.validate()?;
    let sorted = sorted_by_id(experts);
    check_unique_ids(&sorted)?;
    let ids: Vec<&str> = sorted.iter().map(|e| e.id.as_str()).collect();
    if scores.num_layers() != base.num_layers() {
        return Err(Error::Shape(format!(
            "scores cover {} layers but the checkpoints have {}",
            scores.num_layers(),
            base.num_layers()
        )));
    }
    let table = ScoreTable {
        beta: config.beta,
        ..scores.clone()
    };
    let weights = table.layer_weights_for(&ids)?;
    let owned: Vec<ProjectorCheckpoint> = sorted.iter().map(|e| (*e).clone()).collect();
    let deltas = task_vectors(&owned, base)?;

    let results: Vec<(Layer, LayerDiagnostics)> = deltas
        .into_par_iter()
        .enumerate()
        .map(|(l, layer_deltas)| {
            let alphas = weights.column(l);
            let state = decompose_layer(layer_deltas, config)?;
            let merged = merge_state(&state, &alphas, &config.inner)?;
            let layer = reconstruct(&state.shared, &merged, &augment(&base.layers[l])?)?;
            let diag = LayerDiagnostics {
                layer: l + 1,
                alpha: alphas,
                consistencies: state.filtered.consistencies.clone(),
                mask: state.filtered.mask.clone(),
                tau: state.filtered.tau,
                singular_values: state.shared.s.clone(),
                rank: state.decoupled.rank,
                magnitude_space: state.magnitude_space,
                degenerate: state.shared.degenerate,
                uncompensated: ids
                    .iter()
                    .zip(&state.filtered.uncompensated)
                    .filter(|(_, &u)| u)
                    .map(|(id, _)| id.to_string())
                    .collect(),
            };
            Ok((layer, diag))
        })
        .collect::<Result<Vec<_>>>()?;

    let (layers, layer_diags): (Vec<Layer>, Vec<LayerDiagnostics>) = results.into_iter().unzip();
    let merged = ProjectorCheckpoint::new("merged", layers, base.dtype)?;
    let diagnostics = PivotDiagnostics {
        experts: ids.iter().map(|s| s.to_string()).collect(),
        config: ConfigRecord {
            rank: config.rank,
            gamma: config.gamma,
            rho: config.rho,
            beta: config.beta,
            inner: config.inner.kind.name().to_string(),
        },
        layers: layer_diags,
    };
    Ok((merged, diagnostics))
}

/// Baseline merge: `W₀ + op(ΔW₁, …, ΔW_N)` per layer with uniform weights.
pub fn merge_task_vectors(
    experts: &[ProjectorCheckpoint],
    base: &ProjectorCheckpoint,
    op: &MergeOperator,
) -> Result<ProjectorCheckpoint> {
    op.validate()?;
    let sorted = sorted_by_id(experts);
    check_unique_ids(&sorted)?;
    if let [only] = sorted.as_slice() {
        // every operator passes a single input through; skip W₀ + (W − W₀) rounding
        base.check_compatible(only)?;
        return Ok(ProjectorCheckpoint {
            id: "merged".into(),
            ..(*only).clone()
        });
    }
    let owned: Vec<ProjectorCheckpoint> = sorted.into_iter().cloned().collect();
    let deltas = task_vectors(&owned, base)?;
    let layers = deltas
        .into_par_iter()
        .enumerate()
        .map(|(l, d)| {
            let merged = merge_weighted(op, &d, &vec![1.0; d.len()])?;
            let b = augment(&base.layers[l])?;
            Ok(split(&AugmentedLayer {
                matrix: b.matrix + merged,
                had_bias: b.had_bias,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    ProjectorCheckpoint::new("merged", layers, base.dtype)
}
