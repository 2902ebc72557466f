//! Thin SVD, rank truncation, cosine similarity and principal angles.

use crate::{Error, Matrix, Result};

/// Norm below which a vector is treated as zero by [`cosine`].
pub const ZERO_NORM: f64 = 1e-12;

/// Relative threshold (against the largest singular value) for numerical rank.
pub const RANK_TOL: f64 = 1e-10;

/// `M = U · diag(s) · Vt` with `k = min(m, n)` components.
///
/// Singular values are non-increasing, and each column of `u` is sign-canonicalized
/// so its largest-magnitude entry is positive (first such entry on ties).
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        self.truncated(self.s.len())
    }

    /// Product keeping only the `r` largest singular values.
    pub fn truncated(&self, r: usize) -> Matrix {
        let r = r.min(self.s.len());
        let mut us = self.u.columns(0, r).into_owned();
        for (j, mut col) in us.column_iter_mut().enumerate() {
            col *= self.s[j];
        }
        us * self.vt.rows(0, r)
    }

    /// Number of singular values above `RANK_TOL × σ_max`.
    pub fn numerical_rank(&self) -> usize {
        match self.s.first() {
            Some(&smax) if smax > 0.0 => self.s.iter().filter(|&&s| s > RANK_TOL * smax).count(),
            _ => 0,
        }
    }
}

pub fn thin_svd(m: &Matrix) -> Result<SvdFactors> {
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Ok(SvdFactors {
            u: Matrix::zeros(rows, 0),
            s: Vec::new(),
            vt: Matrix::zeros(0, cols),
        });
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(
            "SVD input contains non-finite values".into(),
        ));
    }
    let fm = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m[(i, j)]);
    let svd = fm
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("SVD of {rows}x{cols} matrix failed: {e:?}")))?;
    let (fu, fs, fv) = (svd.U(), svd.S(), svd.V());
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| fs[b].total_cmp(&fs[a]).then(a.cmp(&b)));
    let s: Vec<f64> = order.iter().map(|&t| fs[t]).collect();
    let mut u = Matrix::from_fn(rows, k, |i, j| fu[(i, order[j])]);
    let mut vt = Matrix::from_fn(k, cols, |i, j| fv[(j, order[i])]);

    for j in 0..k {
        let col = u.column(j);
        let mut best = 0usize;
        for i in 1..rows {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            u.column_mut(j).neg_mut();
            vt.row_mut(j).neg_mut();
        }
    }
    Ok(SvdFactors { u, s, vt })
}

/// Best rank-`r` Frobenius approximation of `m`.
pub fn truncate_rank(m: &Matrix, r: usize) -> Result<Matrix> {
    if r < 1 {
        return Err(Error::InvalidArgument(
            "truncation rank must be at least 1".into(),
        ));
    }
    Ok(thin_svd(m)?.truncated(r))
}

/// Cosine similarity; 0 when either vector has norm below [`ZERO_NORM`].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Orthonormal basis for the numerical column space of `a`.
pub fn orthonormal_basis(a: &Matrix) -> Result<Matrix> {
    let f = thin_svd(a)?;
    let r = f.numerical_rank();
    Ok(f.u.columns(0, r).into_owned())
}

/// Principal angles in degrees between the column spaces of `a` and `b`, ascending.
pub fn principal_angles(a: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::Shape(format!(
            "subspaces live in R^{} and R^{}",
            a.nrows(),
            b.nrows()
        )));
    }
    let qa = orthonormal_basis(a)?;
    let qb = orthonormal_basis(b)?;
    if qa.ncols() == 0 || qb.ncols() == 0 {
        return Err(Error::InvalidArgument(
            "principal angles of a zero matrix are undefined".into(),
        ));
    }
    // project the smaller basis onto the larger; its residual gives accurate sines
    // for small angles where acos alone loses half the digits
    let (qa, qb) = if qa.ncols() >= qb.ncols() {
        (qa, qb)
    } else {
        (qb, qa)
    };
    let proj = qa.transpose() * &qb;
    let cosines = thin_svd(&proj)?.s;
    let mut sines = thin_svd(&(&qb - &qa * &proj))?.s;
    sines.reverse();
    Ok(cosines
        .iter()
        .zip(&sines)
        .map(|(&c, &s)| {
            s.atan2(c)
                .clamp(0.0, std::f64::consts::FRAC_PI_2)
                .to_degrees()
        })
        .collect())
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Row-major flattening.
pub fn flatten(m: &Matrix) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Sum of absolute values over all entries.
pub fn l1_norm(m: &Matrix) -> f64 {
    m.iter().map(|x| x.abs()).sum()
}

pub fn relative_error(approx: &Matrix, exact: &Matrix) -> f64 {
    (approx - exact).norm() / exact.norm().max(f64::EPSILON)
}
