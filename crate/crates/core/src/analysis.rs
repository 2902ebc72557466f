//! Cross-expert diagnostics: residual similarity, pairwise principal angles and
//! layer-weight tables, emitted as CSV matrices plus a JSON summary.
//!
//! CSV layout: the first row holds column labels (first cell empty), each following
//! row starts with its label. Values use the shortest representation that parses
//! back to the same float64.
//!
//! `summary.json` fields: `experts`, `layer_weights` (`[expert][layer]`), `tau`
//! (per layer, `null` when undefined), `mask_stats` (per layer `{layer, mean, min, max}`),
//! `similarity_before_mean`, `similarity_after_mean`, `angle_raw_mean`,
//! `angle_filtered_mean` (each `null` when not computed), and `flags`.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::linalg::{cosine, flatten, mean, principal_angles};
use crate::pivot::LayerState;
use crate::scores::LayerWeights;
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub name: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Matrix,
}

/// Pairwise cosine between flattened inputs.
///
/// The diagonal is 1, or 0 for an all-zero input (whose index is reported in the flags).
pub fn residual_similarity<V: AsRef<[f64]>>(flat: &[V]) -> Result<(Matrix, Vec<usize>)> {
    let n = flat.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "similarity needs at least two inputs".into(),
        ));
    }
    let len = flat[0].as_ref().len();
    if flat.iter().any(|v| v.as_ref().len() != len) {
        return Err(Error::Shape("similarity inputs differ in size".into()));
    }
    let mut sim = Matrix::zeros(n, n);
    let mut zero = Vec::new();
    for i in 0..n {
        let is_zero = flat[i].as_ref().iter().all(|&x| x == 0.0);
        if is_zero {
            zero.push(i);
        }
        sim[(i, i)] = if is_zero { 0.0 } else { 1.0 };
        for j in i + 1..n {
            let c = cosine(flat[i].as_ref(), flat[j].as_ref())?;
            sim[(i, j)] = c;
            sim[(j, i)] = c;
        }
    }
    Ok((sim, zero))
}

/// [`residual_similarity`] over matrices, flattened row-major.
pub fn matrix_similarity(mats: &[Matrix]) -> Result<(Matrix, Vec<usize>)> {
    if let Some(m) = mats.iter().find(|m| m.shape() != mats[0].shape()) {
        return Err(Error::Shape(format!(
            "residuals have shapes {:?} and {:?}",
            mats[0].shape(),
            m.shape()
        )));
    }
    let flat: Vec<Vec<f64>> = mats.iter().map(flatten).collect();
    residual_similarity(&flat)
}

pub fn off_diagonal_mean(m: &Matrix) -> f64 {
    let n = m.nrows();
    let values: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| m[(i, j)])
        .collect();
    mean(&values)
}

/// Places each layer's matrix in its own row block, so the column space is the direct
/// sum of the per-layer column spaces.
pub fn model_subspace(layers: &[Matrix]) -> Matrix {
    let rows: usize = layers.iter().map(Matrix::nrows).sum();
    let cols: usize = layers.iter().map(Matrix::ncols).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for m in layers {
        out.view_mut((r, c), m.shape()).copy_from(m);
        r += m.nrows();
        c += m.ncols();
    }
    out
}

/// Mean principal angle (degrees) between each pair of column spaces.
///
/// Pairs involving a zero matrix are reported as 90° and listed in the flags.
pub fn pairwise_principal_angles(sources: &[Matrix]) -> Result<(Matrix, Vec<(usize, usize)>)> {
    let n = sources.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "principal angles need at least two inputs".into(),
        ));
    }
    let mut angles = Matrix::zeros(n, n);
    let mut flagged = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let a = match principal_angles(&sources[i], &sources[j]) {
                Ok(theta) => mean(&theta),
                Err(Error::InvalidArgument(_)) => {
                    flagged.push((i, j));
                    90.0
                }
                Err(e) => return Err(e),
            };
            angles[(i, j)] = a;
            angles[(j, i)] = a;
        }
    }
    Ok((angles, flagged))
}

fn per_expert<F>(states: &[LayerState], pick: F) -> Vec<Vec<Matrix>>
where
    F: Fn(&LayerState) -> Vec<Matrix>,
{
    let per_layer: Vec<Vec<Matrix>> = states.iter().map(pick).collect();
    let n = per_layer.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| per_layer.iter().map(|layer| layer[i].clone()).collect())
        .collect()
}

fn flatten_all(layers: &[Matrix]) -> Vec<f64> {
    layers.iter().flat_map(flatten).collect()
}

/// Model-level flattened residuals before (`Bᵢ`) or after (`B̃ᵢ`) filtering.
pub fn model_residuals(states: &[LayerState], filtered: bool) -> Vec<Vec<f64>> {
    per_expert(states, |s| {
        if filtered {
            s.filtered.residuals.clone()
        } else {
            s.decoupled.residuals.clone()
        }
    })
    .iter()
    .map(|layers| flatten_all(layers))
    .collect()
}

/// Model-level subspace sources from the raw task vectors.
pub fn raw_delta_subspaces(states: &[LayerState]) -> Vec<Matrix> {
    per_expert(states, |s| s.deltas.clone())
        .iter()
        .map(|layers| model_subspace(layers))
        .collect()
}

/// Model-level subspace sources from the filtered coefficients `Aᵢ + B̃ᵢ`, lifted to
/// weight space.
pub fn filtered_coefficient_subspaces(states: &[LayerState]) -> Vec<Matrix> {
    per_expert(states, LayerState::filtered_deltas)
        .iter()
        .map(|layers| model_subspace(layers))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskStats {
    pub layer: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AnalysisSummary {
    pub experts: Vec<String>,
    pub layer_weights: Vec<Vec<f64>>,
    pub tau: Vec<Option<f64>>,
    pub mask_stats: Vec<MaskStats>,
    pub similarity_before_mean: Option<f64>,
    pub similarity_after_mean: Option<f64>,
    pub angle_raw_mean: Option<f64>,
    pub angle_filtered_mean: Option<f64>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub summary: AnalysisSummary,
    pub matrices: Vec<LabeledMatrix>,
}

impl Report {
    pub fn new(experts: Vec<String>) -> Self {
        Report {
            summary: AnalysisSummary {
                experts,
                ..AnalysisSummary::default()
            },
            matrices: Vec::new(),
        }
    }

    fn square(&mut self, name: &str, values: Matrix) {
        let labels = self.summary.experts.clone();
        self.matrices.push(LabeledMatrix {
            name: name.to_string(),
            row_labels: labels.clone(),
            col_labels: labels,
            values,
        });
    }

    /// Threshold and mask statistics from a decomposition.
    pub fn add_filter_stats(&mut self, states: &[LayerState]) {
        for (l, s) in states.iter().enumerate() {
            self.summary.tau.push(s.filtered.tau);
            let m = &s.filtered.mask;
            if !m.is_empty() {
                self.summary.mask_stats.push(MaskStats {
                    layer: l + 1,
                    mean: mean(m),
                    min: m.iter().copied().fold(f64::INFINITY, f64::min),
                    max: m.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                });
            }
        }
    }

    /// Before/after residual similarity matrices.
    pub fn add_residual_similarity(&mut self, states: &[LayerState]) -> Result<()> {
        let (before, zb) = residual_similarity(&model_residuals(states, false))?;
        let (after, za) = residual_similarity(&model_residuals(states, true))?;
        self.summary.similarity_before_mean = Some(off_diagonal_mean(&before));
        self.summary.similarity_after_mean = Some(off_diagonal_mean(&after));
        for (tag, zero) in [("before", zb), ("after", za)] {
            for i in zero {
                self.summary.flags.push(format!(
                    "residual of `{}` is zero ({tag} filtering)",
                    self.summary.experts[i]
                ));
            }
        }
        self.square("residual_similarity_before", before);
        self.square("residual_similarity_after", after);
        Ok(())
    }

    pub fn add_principal_angles(
        &mut self,
        states: &[LayerState],
        raw: bool,
        filtered: bool,
    ) -> Result<()> {
        if raw {
            let m = self.angle_matrix("principal_angles_raw", raw_delta_subspaces(states))?;
            self.summary.angle_raw_mean = Some(m);
        }
        if filtered {
            let m = self.angle_matrix(
                "principal_angles_filtered",
                filtered_coefficient_subspaces(states),
            )?;
            self.summary.angle_filtered_mean = Some(m);
        }
        Ok(())
    }

    fn angle_matrix(&mut self, name: &str, sources: Vec<Matrix>) -> Result<f64> {
        let (angles, flagged) = pairwise_principal_angles(&sources)?;
        for (i, j) in flagged {
            self.summary.flags.push(format!(
                "{name}: zero subspace for pair ({}, {})",
                self.summary.experts[i], self.summary.experts[j]
            ));
        }
        let m = off_diagonal_mean(&angles);
        self.square(name, angles);
        Ok(m)
    }

    pub fn add_layer_weights(&mut self, weights: &LayerWeights) {
        let alpha = &weights.alpha;
        self.summary.layer_weights = alpha
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        self.matrices.push(LabeledMatrix {
            name: "layer_weights".into(),
            row_labels: self.summary.experts.clone(),
            col_labels: (1..=alpha.ncols()).map(|l| format!("layer.{l}")).collect(),
            values: alpha.clone(),
        });
    }
}

fn write_csv(path: &Path, m: &LabeledMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![String::new()];
    header.extend(m.col_labels.iter().cloned());
    w.write_record(&header)?;
    for (i, label) in m.row_labels.iter().enumerate() {
        let mut record = vec![label.clone()];
        record.extend(m.values.row(i).iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes `<name>.csv` for every matrix and `summary.json` into `dir`.
pub fn emit_report(report: &Report, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for m in &report.matrices {
        write_csv(&dir.join(format!("{}.csv", m.name)), m)?;
    }
    let path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&report.summary)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Reads a matrix written by [`emit_report`].
pub fn read_csv_matrix(path: impl AsRef<Path>) -> Result<LabeledMatrix> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let col_labels: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut row_labels = Vec::new();
    let mut values = Vec::new();
    for record in r.records() {
        let record = record?;
        row_labels.push(record.get(0).unwrap_or_default().to_string());
        for field in record.iter().skip(1) {
            values.push(
                field
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad CSV value `{field}`: {e}")))?,
            );
        }
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(LabeledMatrix {
        name,
        values: Matrix::from_row_slice(row_labels.len(), col_labels.len(), &values),
        row_labels,
        col_labels,
    })
}
