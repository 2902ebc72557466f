//! Synthetic experts with a planted shared low-rank update.
//!
//! Per layer, each expert is `W₀ + C + Rᵢ + noise`, where `C` is a random rank-`core_rank`
//! matrix common to all experts and
//! `Rᵢ = residual_scale · (f · R_common + (1 − f) · R_private,i)`.
//! All matrices live in the bias-augmented space (`d_out × (d_in + 1)` when bias is on).
//! Gaussian entries have standard deviation `1/√d_in`. Draws come from ChaCha8 seeded
//! with `seed`, so outputs are reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::principal_angles;
use crate::tensorstore::{augment, split, AugmentedLayer, DType, ProjectorCheckpoint, Tensor};
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// `(d_out, d_in)` per layer.
    pub dims: Vec<(usize, usize)>,
    pub experts: usize,
    pub core_rank: usize,
    pub residual_scale: f64,
    pub shared_residual_fraction: f64,
    pub noise_scale: f64,
    pub bias: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            dims: vec![(32, 16), (24, 32)],
            experts: 5,
            core_rank: 4,
            residual_scale: 0.5,
            shared_residual_fraction: 0.0,
            noise_scale: 0.01,
            bias: true,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::InvalidArgument(
                "synthetic spec needs at least one layer".into(),
            ));
        }
        if self.dims.iter().any(|&(o, i)| o == 0 || i == 0) {
            return Err(Error::InvalidArgument(
                "layer dimensions must be positive".into(),
            ));
        }
        for (l, pair) in self.dims.windows(2).enumerate() {
            if pair[1].1 != pair[0].0 {
                return Err(Error::Shape(format!(
                    "layer {} has d_in {} but layer {} has d_out {}",
                    l + 2,
                    pair[1].1,
                    l + 1,
                    pair[0].0
                )));
            }
        }
        if self.experts == 0 {
            return Err(Error::InvalidArgument("need at least one expert".into()));
        }
        if self.core_rank == 0 {
            return Err(Error::InvalidArgument(
                "core rank must be at least 1".into(),
            ));
        }
        if !(self.residual_scale >= 0.0 && self.noise_scale >= 0.0) {
            return Err(Error::InvalidArgument("scales must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.shared_residual_fraction) {
            return Err(Error::InvalidArgument(
                "shared residual fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn width(&self, layer: usize) -> usize {
        self.dims[layer].1 + usize::from(self.bias)
    }
}

/// Planted cores `C` per layer, in augmented coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub cores: Vec<Matrix>,
}

impl GroundTruth {
    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.cores
            .iter()
            .enumerate()
            .map(|(l, c)| Tensor::from_matrix(format!("layer.{}.core", l + 1), c, DType::F64))
            .collect()
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let cores = (1..=tensors.len())
            .map(|l| {
                let name = format!("layer.{l}.core");
                tensors
                    .iter()
                    .find(|t| t.name == name)
                    .ok_or_else(|| Error::Format(format!("ground truth is missing `{name}`")))?
                    .to_matrix()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GroundTruth { cores })
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub base: ProjectorCheckpoint,
    pub experts: Vec<ProjectorCheckpoint>,
    pub truth: GroundTruth,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    // column-major fill order is part of the reproducibility contract
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

fn to_checkpoint(id: String, layers: Vec<Matrix>, bias: bool) -> Result<ProjectorCheckpoint> {
    let layers = layers
        .into_iter()
        .map(|matrix| {
            split(&AugmentedLayer {
                matrix,
                had_bias: bias,
            })
        })
        .collect();
    ProjectorCheckpoint::new(id, layers, DType::F64)
}

/// Expert ids are `expert_00`, `expert_01`, … so lexicographic order matches generation order.
pub fn expert_id(i: usize) -> String {
    format!("expert_{i:02}")
}

/// Generates the base, the experts, and the planted cores.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.experts;
    let mut base_layers = Vec::new();
    let mut expert_layers = vec![Vec::new(); n];
    let mut cores = Vec::new();
    let f = spec.shared_residual_fraction;

    for (l, &(d_out, d_in)) in spec.dims.iter().enumerate() {
        let w = spec.width(l);
        let std = 1.0 / (d_in as f64).sqrt();
        let base = gaussian(&mut rng, d_out, w, std);
        let left = gaussian(
            &mut rng,
            d_out,
            spec.core_rank,
            1.0 / (spec.core_rank as f64).sqrt(),
        );
        let right = gaussian(&mut rng, spec.core_rank, w, std);
        let core = left * right;
        let common = gaussian(&mut rng, d_out, w, std);
        for layers in expert_layers.iter_mut() {
            let private = gaussian(&mut rng, d_out, w, std);
            let noise = gaussian(&mut rng, d_out, w, std);
            let residual = (&common * f + private * (1.0 - f)) * spec.residual_scale;
            layers.push(&base + &core + residual + noise * spec.noise_scale);
        }
        base_layers.push(base);
        cores.push(core);
    }

    let base = to_checkpoint("base".into(), base_layers, spec.bias)?;
    let experts = expert_layers
        .into_iter()
        .enumerate()
        .map(|(i, layers)| to_checkpoint(expert_id(i), layers, spec.bias))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthOutput {
        base,
        experts,
        truth: GroundTruth { cores },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerRecovery {
    /// Mean principal angle (degrees) between the merged delta and the planted core.
    pub mean_angle: f64,
    /// The merged delta was zero; `mean_angle` is reported as 90.
    pub degenerate: bool,
}

/// Per-layer mean principal angle between `merged − base` and the planted core subspace.
pub fn recovery_score(
    merged: &ProjectorCheckpoint,
    base: &ProjectorCheckpoint,
    truth: &GroundTruth,
) -> Result<Vec<LayerRecovery>> {
    base.check_compatible(merged)?;
    if truth.cores.len() != base.num_layers() {
        return Err(Error::Shape(format!(
            "ground truth has {} layers, checkpoints have {}",
            truth.cores.len(),
            base.num_layers()
        )));
    }
    merged
        .layers
        .iter()
        .zip(&base.layers)
        .zip(&truth.cores)
        .map(|((m, b), core)| {
            let delta = augment(m)?.matrix - augment(b)?.matrix;
            if delta.shape() != core.shape() {
                return Err(Error::Shape(format!(
                    "delta is {:?} but planted core is {:?}",
                    delta.shape(),
                    core.shape()
                )));
            }
            if delta.iter().all(|&x| x == 0.0) {
                return Ok(LayerRecovery {
                    mean_angle: 90.0,
                    degenerate: true,
                });
            }
            let angles = principal_angles(&delta, core)?;
            Ok(LayerRecovery {
                mean_angle: crate::linalg::mean(&angles),
                degenerate: false,
            })
        })
        .collect()
}

/// Mean recovery angle over layers.
pub fn mean_recovery(layers: &[LayerRecovery]) -> f64 {
    crate::linalg::mean(&layers.iter().map(|r| r.mean_angle).collect::<Vec<_>>())
}
