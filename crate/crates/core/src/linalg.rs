//! Small dense helpers shared by the estimators.

use nalgebra::{DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::Matrix;

/// Relative eigenvalue floor below which a covariance counts as singular.
pub const SINGULAR_REL_TOL: f64 = 1e-12;

pub fn column_means(m: &Matrix) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

/// Subtracts `mean` from every row.
pub fn center(m: &Matrix, mean: &DVector<f64>) -> Matrix {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    out
}

/// Cross-covariance of two row-aligned matrices, normalized by `n`.
pub fn cross_covariance(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.nrows() as f64;
    let ca = center(a, &column_means(a));
    let cb = center(b, &column_means(b));
    (ca.transpose() * cb) / n
}

pub fn covariance(m: &Matrix) -> Matrix {
    let n = m.nrows() as f64;
    let c = center(m, &column_means(m));
    let mut cov = (c.transpose() * &c) / n;
    symmetrize(&mut cov);
    cov
}

pub fn symmetrize(m: &mut Matrix) {
    let d = m.nrows();
    for i in 0..d {
        for j in (i + 1)..d {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Symmetric inverse square root `S^{-1/2}` of a covariance matrix.
///
/// With `floor == 0` a matrix whose smallest eigenvalue is at or below
/// `SINGULAR_REL_TOL * trace` is rejected; otherwise eigenvalues are clamped
/// below at `floor`.
pub fn inv_sqrt_sym(s: &Matrix, floor: f64) -> Result<Matrix> {
    let eig = SymmetricEigen::new(s.clone());
    let trace: f64 = eig.eigenvalues.iter().map(|v| v.abs()).sum();
    let min = eig.eigenvalues.min();
    if floor <= 0.0 && (min <= SINGULAR_REL_TOL * trace.max(f64::MIN_POSITIVE) || !min.is_finite())
    {
        return Err(Error::SingularCovariance {
            min_eigenvalue: min,
        });
    }
    let scaled = eig.eigenvalues.map(|v| 1.0 / v.max(floor).sqrt());
    let q = &eig.eigenvectors;
    let mut out = q * Matrix::from_diagonal(&scaled) * q.transpose();
    symmetrize(&mut out);
    Ok(out)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(s: &Matrix) -> f64 {
    SymmetricEigen::new(s.clone()).eigenvalues.min()
}

/// Pearson correlation of two equally long slices; `None` if either is constant.
pub fn sample_corr(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa.sqrt() * sbb.sqrt()))
}

/// Row-major nested vectors, used for readable JSON.
pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<Matrix> {
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(Error::invalid(format!(
            "row {i} has {} entries, expected {ncols}",
            r.len()
        )));
    }
    Ok(Matrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Max-abs deviation of a square matrix from the identity.
pub fn identity_deviation(m: &Matrix) -> f64 {
    let d = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((m[(i, j)] - target).abs());
        }
    }
    worst
}

pub(crate) mod serde_matrix {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::Matrix;

    #[derive(Serialize, Deserialize)]
    struct Repr {
        rows: usize,
        cols: usize,
        data: Vec<Vec<f64>>,
    }

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        Repr {
            rows: m.nrows(),
            cols: m.ncols(),
            data: super::to_rows(m),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let r = Repr::deserialize(d)?;
        if r.data.len() != r.rows {
            return Err(serde::de::Error::custom("matrix row count mismatch"));
        }
        super::from_rows(&r.data, r.cols).map_err(serde::de::Error::custom)
    }
}
