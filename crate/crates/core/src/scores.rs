//! Alignment scores and the softmax layer weights derived from them.
//!
//! Scores are read from a JSON document
//!
//! ```json
//! {"beta": 0.05, "experts": [{"id": "a", "scores": [0.21, 0.34]}, ...]}
//! ```
//!
//! or computed from pre-pooled feature tensors stored in a container under
//! `expert.{id}.layer.{l}.features` (one `M × d` matrix per layer) and `texts` (`M × d`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::linalg::cosine;
use crate::tensorstore::read_container;
use crate::{Error, Matrix, Result};

pub const DEFAULT_BETA: f64 = 0.05;

/// Per-expert, per-layer alignment scores with the softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub expert_ids: Vec<String>,
    /// `scores[i][l]` is expert `i`'s score at layer `l + 1`.
    pub scores: Vec<Vec<f64>>,
    pub beta: f64,
}

impl ScoreTable {
    pub fn new(expert_ids: Vec<String>, scores: Vec<Vec<f64>>, beta: f64) -> Result<Self> {
        if expert_ids.is_empty() || expert_ids.len() != scores.len() {
            return Err(Error::InvalidArgument(format!(
                "score table needs one score row per expert ({} ids, {} rows)",
                expert_ids.len(),
                scores.len()
            )));
        }
        let layers = scores[0].len();
        if layers == 0 {
            return Err(Error::InvalidArgument("score table has no layers".into()));
        }
        if let Some((id, row)) = expert_ids
            .iter()
            .zip(&scores)
            .find(|(_, r)| r.len() != layers)
        {
            return Err(Error::Shape(format!(
                "expert `{id}` has {} scores, expected {layers}",
                row.len()
            )));
        }
        if scores.iter().flatten().any(|s| !s.is_finite()) {
            return Err(Error::Numerical("scores must be finite".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = expert_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidArgument(format!(
                "duplicate expert id `{dup}`"
            )));
        }
        check_beta(beta)?;
        Ok(ScoreTable {
            expert_ids,
            scores,
            beta,
        })
    }

    /// Equal scores for every expert and layer, which yields uniform layer weights.
    pub fn uniform(expert_ids: Vec<String>, layers: usize, beta: f64) -> Result<Self> {
        let scores = vec![vec![0.0; layers]; expert_ids.len()];
        ScoreTable::new(expert_ids, scores, beta)
    }

    pub fn num_layers(&self) -> usize {
        self.scores[0].len()
    }

    pub fn scores_for(&self, id: &str) -> Option<&[f64]> {
        self.expert_ids
            .iter()
            .position(|e| e == id)
            .map(|i| self.scores[i].as_slice())
    }

    /// Softmax weights over experts for every layer, restricted to `ids` in that order.
    pub fn layer_weights_for(&self, ids: &[&str]) -> Result<LayerWeights> {
        let increments = ids
            .iter()
            .map(|id| {
                self.scores_for(id)
                    .map(score_increments)
                    .ok_or_else(|| Error::InvalidArgument(format!("no scores for expert `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        layer_weights(&increments, self.beta)
    }

    pub fn layer_weights(&self) -> Result<LayerWeights> {
        let ids: Vec<&str> = self.expert_ids.iter().map(String::as_str).collect();
        self.layer_weights_for(&ids)
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta.is_finite() && beta > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {beta}"
        )))
    }
}

/// `alpha[(i, l)]`: weight of expert `i` at layer `l`. Every column sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub alpha: Matrix,
}

impl LayerWeights {
    pub fn column(&self, layer: usize) -> Vec<f64> {
        self.alpha.column(layer).iter().copied().collect()
    }
}

/// Mean row-wise cosine between projected features and text embeddings, per layer.
pub fn compute_scores_from_features(features: &[Matrix], texts: &Matrix) -> Result<Vec<f64>> {
    if texts.nrows() == 0 {
        return Err(Error::InvalidArgument("no samples to score".into()));
    }
    let text_rows: Vec<Vec<f64>> = texts
        .row_iter()
        .map(|r| r.iter().copied().collect())
        .collect();
    features
        .iter()
        .enumerate()
        .map(|(l, f)| {
            if f.shape() != texts.shape() {
                return Err(Error::Shape(format!(
                    "layer {} features are {:?} but texts are {:?}",
                    l + 1,
                    f.shape(),
                    texts.shape()
                )));
            }
            let mut total = 0.0;
            for (row, text) in f.row_iter().zip(&text_rows) {
                let row: Vec<f64> = row.iter().copied().collect();
                total += cosine(&row, text)?;
            }
            Ok(total / texts.nrows() as f64)
        })
        .collect()
}

/// First-layer score followed by successive differences.
pub fn score_increments(scores: &[f64]) -> Vec<f64> {
    scores
        .iter()
        .enumerate()
        .map(|(l, &s)| if l == 0 { s } else { s - scores[l - 1] })
        .collect()
}

/// Temperature softmax across experts, independently for each layer.
///
/// `increments[i][l]` is expert `i`'s score increment at layer `l`.
pub fn layer_weights(increments: &[Vec<f64>], beta: f64) -> Result<LayerWeights> {
    check_beta(beta)?;
    let n = increments.len();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "layer weights need at least one expert".into(),
        ));
    }
    let layers = increments[0].len();
    if increments.iter().any(|r| r.len() != layers) {
        return Err(Error::Shape("ragged score increments".into()));
    }
    let mut alpha = Matrix::zeros(n, layers);
    for l in 0..layers {
        let max = increments
            .iter()
            .map(|r| r[l])
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = increments
            .iter()
            .map(|r| ((r[l] - max) / beta).exp())
            .collect();
        let total: f64 = exps.iter().sum();
        for (i, e) in exps.iter().enumerate() {
            alpha[(i, l)] = e / total;
        }
    }
    Ok(LayerWeights { alpha })
}

/// Consistency threshold induced by retention ratio `rho`: the `max(1, ⌊m(1-ρ)⌋)`-th
/// smallest value (1-based).
pub fn threshold_from_ratio(consistencies: &[f64], rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "retention ratio must lie in (0, 1), got {rho}"
        )));
    }
    if consistencies.is_empty() {
        return Err(Error::InvalidArgument("no consistency scores".into()));
    }
    let mut sorted = consistencies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let k = ((m as f64 * (1.0 - rho)).floor() as usize).clamp(1, m);
    Ok(sorted[k - 1])
}

#[derive(Serialize, Deserialize)]
struct ScoreFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    experts: Vec<ExpertScores>,
}

#[derive(Serialize, Deserialize)]
struct ExpertScores {
    id: String,
    scores: Vec<f64>,
}

pub fn parse_scores(text: &str) -> Result<ScoreTable> {
    let file: ScoreFile = serde_json::from_str(text)?;
    let beta = file.beta.unwrap_or_else(|| {
        log::warn!("score file has no \"beta\"; using default {DEFAULT_BETA}");
        DEFAULT_BETA
    });
    let (ids, scores) = file.experts.into_iter().map(|e| (e.id, e.scores)).unzip();
    ScoreTable::new(ids, scores, beta)
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<ScoreTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text)
}

pub fn scores_to_json(table: &ScoreTable) -> Result<String> {
    let file = ScoreFile {
        beta: Some(table.beta),
        experts: table
            .expert_ids
            .iter()
            .zip(&table.scores)
            .map(|(id, s)| ExpertScores {
                id: id.clone(),
                scores: s.clone(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn write_scores(path: impl AsRef<Path>, table: &ScoreTable) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, scores_to_json(table)?).map_err(|e| Error::io(path, e))
}

/// Builds a score table from a feature container.
pub fn read_feature_scores(path: impl AsRef<Path>, beta: f64) -> Result<ScoreTable> {
    let tensors = read_container(path)?;
    let mut texts = None;
    let mut features: BTreeMap<String, BTreeMap<usize, Matrix>> = BTreeMap::new();
    for t in &tensors {
        if t.name == "texts" {
            texts = Some(t.to_matrix()?);
            continue;
        }
        let parsed = t
            .name
            .strip_prefix("expert.")
            .and_then(|rest| rest.strip_suffix(".features"))
            .and_then(|rest| rest.rsplit_once(".layer."))
            .and_then(|(id, l)| l.parse::<usize>().ok().map(|l| (id.to_string(), l)));
        let (id, layer) = parsed.ok_or_else(|| {
            Error::Format(format!(
                "unexpected tensor `{}` in feature container",
                t.name
            ))
        })?;
        features
            .entry(id)
            .or_default()
            .insert(layer, t.to_matrix()?);
    }
    let texts =
        texts.ok_or_else(|| Error::Format("feature container has no `texts` tensor".into()))?;
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    for (id, layers) in features {
        if layers.keys().copied().ne(1..=layers.len()) {
            return Err(Error::Format(format!(
                "expert `{id}` has non-contiguous feature layers"
            )));
        }
        let mats: Vec<Matrix> = layers.into_values().collect();
        scores.push(compute_scores_from_features(&mats, &texts)?);
        ids.push(id);
    }
    ScoreTable::new(ids, scores, beta)
}
