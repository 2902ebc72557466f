//! Baseline merge operators: weight averaging, task arithmetic, TIES and DARE-TIES.
//!
//! [`merge_weighted`] is the generic entry point. Weights are rescaled to sum to
//! the operator's `weight_sum_target` (default: number of inputs) before dispatch.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MergeKind {
    WeightAverage,
    TaskArithmetic {
        lambda: f64,
    },
    Ties {
        trim_fraction: f64,
    },
    DareTies {
        trim_fraction: f64,
        drop_rate: f64,
        seed: u64,
    },
}

impl MergeKind {
    /// TIES-style operators prune by magnitude and are sensitive to per-row scale.
    pub fn is_magnitude_based(&self) -> bool {
        matches!(self, MergeKind::Ties { .. } | MergeKind::DareTies { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            MergeKind::WeightAverage => "average",
            MergeKind::TaskArithmetic { .. } => "task-arithmetic",
            MergeKind::Ties { .. } => "ties",
            MergeKind::DareTies { .. } => "dare-ties",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeOperator {
    pub kind: MergeKind,
    /// Sum the weights are normalized to; `None` means the number of inputs.
    pub weight_sum_target: Option<f64>,
}

impl MergeOperator {
    pub fn new(kind: MergeKind) -> Self {
        MergeOperator {
            kind,
            weight_sum_target: None,
        }
    }

    pub fn with_weight_sum(mut self, target: f64) -> Self {
        self.weight_sum_target = Some(target);
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            MergeKind::WeightAverage => {}
            MergeKind::TaskArithmetic { lambda } => {
                if !(lambda.is_finite() && lambda >= 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "task arithmetic scale must be non-negative, got {lambda}"
                    )));
                }
            }
            MergeKind::Ties { trim_fraction } => check_trim(trim_fraction)?,
            MergeKind::DareTies {
                trim_fraction,
                drop_rate,
                ..
            } => {
                check_trim(trim_fraction)?;
                check_drop(drop_rate)?;
            }
        }
        if let Some(t) = self.weight_sum_target {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "weight sum target must be positive, got {t}"
                )));
            }
        }
        Ok(())
    }
}

fn check_trim(trim: f64) -> Result<()> {
    if trim > 0.0 && trim <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "trim fraction must lie in (0, 1], got {trim}"
        )))
    }
}

fn check_drop(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "drop rate must lie in [0, 1), got {p}"
        )))
    }
}

fn check_inputs(mats: &[Matrix], weights: &[f64]) -> Result<()> {
    let first = mats
        .first()
        .ok_or_else(|| Error::InvalidArgument("merge needs at least one input".into()))?;
    if mats.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} inputs but {} weights",
            mats.len(),
            weights.len()
        )));
    }
    if let Some(m) = mats.iter().find(|m| m.shape() != first.shape()) {
        return Err(Error::Shape(format!(
            "merge inputs have shapes {:?} and {:?}",
            first.shape(),
            m.shape()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidArgument(
            "merge weights must be finite and non-negative".into(),
        ));
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidArgument("merge weights are all zero".into()));
    }
    Ok(())
}

fn normalize(weights: &[f64], target: f64) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w * target / total).collect()
}

/// Applies `op` to equal-shape inputs with non-negative weights.
///
/// A single input is returned unchanged regardless of the operator.
pub fn merge_weighted(op: &MergeOperator, mats: &[Matrix], weights: &[f64]) -> Result<Matrix> {
    op.validate()?;
    check_inputs(mats, weights)?;
    if mats.len() == 1 {
        return Ok(mats[0].clone());
    }
    let target = op.weight_sum_target.unwrap_or(mats.len() as f64);
    let weights = normalize(weights, target);
    match op.kind {
        MergeKind::WeightAverage => weight_average(mats, &weights),
        MergeKind::TaskArithmetic { lambda } => task_arithmetic(mats, &weights, lambda),
        MergeKind::Ties { trim_fraction } => ties(mats, &weights, trim_fraction),
        MergeKind::DareTies {
            trim_fraction,
            drop_rate,
            seed,
        } => {
            let dropped = mats
                .iter()
                .enumerate()
                .map(|(i, m)| dare(m, drop_rate, DareKey::new(seed, i as u64)))
                .collect::<Result<Vec<_>>>()?;
            ties(&dropped, &weights, trim_fraction)
        }
    }
}

/// `Σ wᵢ·Mᵢ / Σ wᵢ`.
pub fn weight_average(mats: &[Matrix], weights: &[f64]) -> Result<Matrix> {
    check_inputs(mats, weights)?;
    let total: f64 = weights.iter().sum();
    // accumulate offsets from one positive-weight input so identical inputs stay exact
    let anchor = weights.iter().position(|&w| w > 0.0).unwrap();
    let mut out = mats[anchor].clone();
    for (m, &w) in mats.iter().zip(weights) {
        if w > 0.0 {
            out += (m - &mats[anchor]) * (w / total);
        }
    }
    Ok(out)
}

/// `λ · Σ wᵢ·Mᵢ` over task-vector inputs; weights are used as given.
pub fn task_arithmetic(mats: &[Matrix], weights: &[f64], lambda: f64) -> Result<Matrix> {
    check_inputs(mats, weights)?;
    let mut out = Matrix::zeros(mats[0].nrows(), mats[0].ncols());
    for (m, &w) in mats.iter().zip(weights) {
        out += m * (lambda * w);
    }
    Ok(out)
}

/// Zeroes all but the `ceil(trim · len)` largest-magnitude entries.
///
/// Entries are ranked over the row-major flattening; ties at the cutoff keep the
/// lower flat index.
pub fn trim_top_magnitude(m: &Matrix, trim_fraction: f64) -> Result<Matrix> {
    check_trim(trim_fraction)?;
    let flat = crate::linalg::flatten(m);
    let n = flat.len();
    // the epsilon keeps e.g. 0.1 × 30 from rounding up to 4
    let keep = ((trim_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1));
    if keep >= n {
        return Ok(m.clone());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| flat[b].abs().total_cmp(&flat[a].abs()).then(a.cmp(&b)));
    let mut kept = vec![0.0; n];
    for &i in &order[..keep] {
        kept[i] = flat[i];
    }
    Ok(Matrix::from_row_slice(m.nrows(), m.ncols(), &kept))
}

/// TIES: trim each input, elect a per-entry sign from the weighted sum, then take
/// the weighted mean of the trimmed values that agree with it.
///
/// An entry whose weighted sum is exactly zero merges to 0.
pub fn ties(mats: &[Matrix], weights: &[f64], trim_fraction: f64) -> Result<Matrix> {
    check_trim(trim_fraction)?;
    check_inputs(mats, weights)?;
    let trimmed = mats
        .iter()
        .map(|m| trim_top_magnitude(m, trim_fraction))
        .collect::<Result<Vec<_>>>()?;
    let (rows, cols) = mats[0].shape();
    let mut out = Matrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            let elected: f64 = trimmed
                .iter()
                .zip(weights)
                .map(|(t, w)| w * t[(i, j)])
                .sum();
            if elected == 0.0 {
                continue;
            }
            let agreeing = trimmed.iter().zip(weights).filter_map(|(t, &w)| {
                let v = t[(i, j)];
                (w > 0.0 && v != 0.0 && (v > 0.0) == (elected > 0.0)).then_some((v, w))
            });
            // mean as anchor + weighted offsets, exact when all agreeing values coincide
            let mut anchor = None;
            let (mut offset, mut den) = (0.0, 0.0);
            for (v, w) in agreeing {
                let a = *anchor.get_or_insert(v);
                offset += w * (v - a);
                den += w;
            }
            if let Some(a) = anchor {
                out[(i, j)] = a + offset / den;
            }
        }
    }
    Ok(out)
}

/// Key of one DARE random stream: a base seed and the input ordinal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DareKey {
    pub seed: u64,
    pub stream: u64,
}

impl DareKey {
    pub fn new(seed: u64, stream: u64) -> Self {
        DareKey { seed, stream }
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Uniform draw in `[0, 1)` for flat entry `index`.
    ///
    /// Entry `i` consumes words `2i` and `2i + 1` of the ChaCha8 stream, so this is
    /// the same value a sequential pass over the matrix produces.
    pub fn uniform_at(&self, index: u64) -> f64 {
        let mut rng = self.rng();
        rng.set_word_pos(u128::from(index) * 2);
        to_unit(rng.next_u64())
    }
}

fn to_unit(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Drop-and-rescale: each entry is zeroed with probability `p`, survivors scaled by `1/(1-p)`.
pub fn dare(m: &Matrix, drop_rate: f64, key: DareKey) -> Result<Matrix> {
    check_drop(drop_rate)?;
    if drop_rate == 0.0 {
        return Ok(m.clone());
    }
    let scale = 1.0 / (1.0 - drop_rate);
    let mut rng = key.rng();
    let flat: Vec<f64> = crate::linalg::flatten(m)
        .into_iter()
        .map(|v| {
            if to_unit(rng.next_u64()) < drop_rate {
                0.0
            } else {
                v * scale
            }
        })
        .collect();
    Ok(Matrix::from_row_slice(m.nrows(), m.ncols(), &flat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::testing::gaussian;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> Matrix {
        Matrix::from_row_slice(1, v.len(), v)
    }

    fn all_ops() -> Vec<MergeOperator> {
        vec![
            MergeOperator::new(MergeKind::WeightAverage),
            MergeOperator::new(MergeKind::TaskArithmetic { lambda: 0.7 }),
            MergeOperator::new(MergeKind::Ties { trim_fraction: 0.2 }),
            MergeOperator::new(MergeKind::DareTies {
                trim_fraction: 0.5,
                drop_rate: 0.3,
                seed: 1,
            }),
        ]
    }

    #[test]
    fn singleton_passes_through() {
        let m = gaussian(3, 4, 0);
        for op in all_ops() {
            assert_eq!(
                merge_weighted(&op, std::slice::from_ref(&m), &[0.3]).unwrap(),
                m
            );
        }
    }

    #[test]
    fn average_cancels_opposites() {
        let m = gaussian(3, 3, 1);
        let op = MergeOperator::new(MergeKind::WeightAverage);
        let out = merge_weighted(&op, &[m.clone(), -m], &[1.0, 1.0]).unwrap();
        assert!(out.amax() == 0.0);
    }

    #[test]
    fn zero_weight_inputs_are_ignored() {
        let a = gaussian(2, 3, 2);
        let b = gaussian(2, 3, 3);
        let c = gaussian(2, 3, 4);
        for op in all_ops() {
            let op = op.with_weight_sum(2.0);
            let x = merge_weighted(&op, &[a.clone(), b.clone()], &[2.0, 0.0]).unwrap();
            let y = merge_weighted(&op, &[a.clone(), c.clone()], &[2.0, 0.0]).unwrap();
            assert_eq!(x, y, "{:?}", op.kind);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let op = MergeOperator::new(MergeKind::WeightAverage);
        let a = Matrix::zeros(2, 2);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(
            merge_weighted(&op, &[a.clone(), b], &[1.0, 1.0]),
            Err(Error::Shape(_))
        ));
        assert!(merge_weighted(&op, &[a.clone(), a.clone()], &[0.0, 0.0]).is_err());
        assert!(merge_weighted(&op, &[], &[]).is_err());
        let bad = MergeOperator::new(MergeKind::Ties { trim_fraction: 0.0 });
        assert!(merge_weighted(&bad, &[a.clone(), a.clone()], &[1.0, 1.0]).is_err());
        let bad = MergeOperator::new(MergeKind::DareTies {
            trim_fraction: 1.0,
            drop_rate: 1.0,
            seed: 0,
        });
        assert!(merge_weighted(&bad, &[a.clone(), a], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn weight_average_examples() {
        assert_eq!(
            weight_average(&[row(&[2.0]), row(&[4.0])], &[1.0, 1.0]).unwrap(),
            row(&[3.0])
        );
        let m = gaussian(2, 2, 5);
        let out = weight_average(&[m.clone(), m.clone()], &[0.3, 2.0]).unwrap();
        assert!((out - &m).amax() <= 1e-15);
        assert_eq!(
            weight_average(&[row(&[0.0]), row(&[4.0])], &[1.0, 3.0]).unwrap(),
            row(&[3.0])
        );
    }

    #[test]
    fn task_arithmetic_examples() {
        let m = gaussian(2, 2, 6);
        let op = MergeOperator::new(MergeKind::TaskArithmetic { lambda: 1.0 }).with_weight_sum(1.0);
        assert_eq!(
            merge_weighted(&op, std::slice::from_ref(&m), &[1.0]).unwrap(),
            m
        );
        assert_eq!(
            task_arithmetic(std::slice::from_ref(&m), &[1.0], 1.0).unwrap(),
            m
        );
        let zero = MergeOperator::new(MergeKind::TaskArithmetic { lambda: 0.0 });
        let out = merge_weighted(&zero, &[m.clone(), gaussian(2, 2, 7)], &[1.0, 1.0]).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
        let half = MergeOperator::new(MergeKind::TaskArithmetic { lambda: 0.5 });
        assert_eq!(
            merge_weighted(&half, &[row(&[2.0]), row(&[2.0])], &[1.0, 1.0]).unwrap(),
            row(&[2.0])
        );
    }

    #[test]
    fn ties_examples() {
        let a = row(&[2.0, -3.0]);
        let b = row(&[3.0, -1.0]);
        assert_eq!(
            ties(&[a.clone(), b], &[1.0, 1.0], 1.0).unwrap(),
            row(&[2.5, -2.0])
        );
        assert_eq!(ties(std::slice::from_ref(&a), &[1.0], 1.0).unwrap(), a);
        assert_eq!(
            ties(&[row(&[1.0]), row(&[-1.0])], &[1.0, 1.0], 1.0).unwrap(),
            row(&[0.0])
        );
    }

    #[test]
    fn trimming_keeps_lower_index_on_ties() {
        let m = row(&[1.0, -3.0, 3.0, 0.5]);
        assert_eq!(
            trim_top_magnitude(&m, 0.25).unwrap(),
            row(&[0.0, -3.0, 0.0, 0.0])
        );
        assert_eq!(
            trim_top_magnitude(&m, 0.5).unwrap(),
            row(&[0.0, -3.0, 3.0, 0.0])
        );
        // row-major ranking on a 2x2
        let m = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(
            trim_top_magnitude(&m, 0.25).unwrap(),
            Matrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 0.0])
        );
    }

    #[test]
    fn dare_identity_and_determinism() {
        let m = gaussian(10, 10, 8);
        assert_eq!(dare(&m, 0.0, DareKey::new(3, 0)).unwrap(), m);
        let a = dare(&m, 0.4, DareKey::new(3, 1)).unwrap();
        let b = dare(&m, 0.4, DareKey::new(3, 1)).unwrap();
        let c = dare(&m, 0.4, DareKey::new(3, 2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(dare(&m, 1.0, DareKey::new(3, 0)).is_err());
    }

    #[test]
    fn dare_is_keyed_by_entry_index() {
        let key = DareKey::new(42, 3);
        let m = Matrix::from_element(4, 5, 1.0);
        let out = dare(&m, 0.5, key).unwrap();
        let flat = crate::linalg::flatten(&out);
        for (i, v) in flat.iter().enumerate() {
            let dropped = key.uniform_at(i as u64) < 0.5;
            assert_eq!(*v, if dropped { 0.0 } else { 2.0 });
        }
    }

    #[test]
    fn dare_preserves_mean() {
        let n = 10_000;
        let p = 0.5;
        let ones = Matrix::from_element(100, 100, 1.0);
        let out = dare(&ones, p, DareKey::new(2024, 0)).unwrap();
        let mean = out.sum() / n as f64;
        let se = 2.0 * (p * (1.0 - p) / n as f64).sqrt();
        assert!((mean - 1.0).abs() <= 3.0 * se, "mean {mean}");
    }

    proptest! {
        #[test]
        fn ties_output_has_elected_sign(
            vals in prop::collection::vec(-5.0f64..5.0, 12),
            w in prop::collection::vec(0.1f64..3.0, 3),
            trim in 0.1f64..1.0,
        ) {
            let mats: Vec<Matrix> = vals.chunks(4).map(|c| Matrix::from_row_slice(2, 2, c)).collect();
            let out = ties(&mats, &w, trim).unwrap();
            let trimmed: Vec<Matrix> = mats.iter().map(|m| trim_top_magnitude(m, trim).unwrap()).collect();
            for idx in 0..4 {
                let elected: f64 = trimmed.iter().zip(&w).map(|(t, w)| w * t[idx]).sum();
                prop_assert!(out[idx] == 0.0 || out[idx].signum() == elected.signum());
            }
        }

        #[test]
        fn permutation_equivariant(seed in any::<u64>(), w in prop::collection::vec(0.1f64..3.0, 3)) {
            let mats: Vec<Matrix> = (0..3).map(|i| gaussian(3, 2, seed.wrapping_add(i))).collect();
            let perm = [2usize, 0, 1];
            let pm: Vec<Matrix> = perm.iter().map(|&i| mats[i].clone()).collect();
            let pw: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
            for op in all_ops().into_iter().take(3) {
                let a = merge_weighted(&op, &mats, &w).unwrap();
                let b = merge_weighted(&op, &pm, &pw).unwrap();
                prop_assert!((a - b).amax() <= 1e-12);
            }
        }

        #[test]
        fn identical_inputs_are_fixed_points(seed in any::<u64>(), w in prop::collection::vec(0.1f64..3.0, 4)) {
            let m = gaussian(3, 3, seed);
            let mats = vec![m.clone(); 4];
            prop_assert!((weight_average(&mats, &w).unwrap() - &m).amax() <= 1e-12);
            prop_assert_eq!(ties(&mats, &w, 1.0).unwrap(), m.clone());
        }
    }
}
