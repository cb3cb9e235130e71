//! Linear CCA through the SVD of the whitened cross-covariance.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dataset::PairedDataset;
use crate::error::{Error, Result};
use crate::linalg::{self, serde_matrix};
use crate::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearCcaModel {
    /// `d x dx`; row `i` is the i-th canonical direction for X.
    #[serde(with = "serde_matrix")]
    pub projection_x: Matrix,
    /// `d x dy`.
    #[serde(with = "serde_matrix")]
    pub projection_y: Matrix,
    pub mean_x: Vec<f64>,
    pub mean_y: Vec<f64>,
    /// Canonical correlations, descending and non-negative.
    pub correlations: Vec<f64>,
}

/// Fits the top-`d` canonical pairs.
///
/// `ridge` is added to both covariance diagonals and also used as the
/// eigenvalue floor of the inverse square roots. With `ridge == 0` a singular
/// covariance is an error.
pub fn fit_linear_cca(data: &PairedDataset, d: usize, ridge: f64) -> Result<LinearCcaModel> {
    fit_matrices(data.x(), data.y(), d, ridge)
}

pub(crate) fn fit_matrices(x: &Matrix, y: &Matrix, d: usize, ridge: f64) -> Result<LinearCcaModel> {
    let (n, dx, dy) = (x.nrows(), x.ncols(), y.ncols());
    if d == 0 || d > dx.min(dy) {
        return Err(Error::invalid(format!(
            "need 1 <= d <= min(dx, dy) = {}, got {d}",
            dx.min(dy)
        )));
    }
    if n <= dx.max(dy) {
        return Err(Error::invalid(format!(
            "need more samples ({n}) than dimensions ({})",
            dx.max(dy)
        )));
    }
    if !(ridge >= 0.0) {
        return Err(Error::invalid(format!(
            "ridge must be non-negative, got {ridge}"
        )));
    }

    let mean_x = linalg::column_means(x);
    let mean_y = linalg::column_means(y);
    let xc = linalg::center(x, &mean_x);
    let yc = linalg::center(y, &mean_y);
    let nf = n as f64;
    let mut sx = xc.transpose() * &xc / nf;
    let mut sy = yc.transpose() * &yc / nf;
    linalg::symmetrize(&mut sx);
    linalg::symmetrize(&mut sy);
    let sxy = xc.transpose() * &yc / nf;
    for i in 0..dx {
        sx[(i, i)] += ridge;
    }
    for i in 0..dy {
        sy[(i, i)] += ridge;
    }

    let wx = linalg::inv_sqrt_sym(&sx, ridge)?;
    let wy = linalg::inv_sqrt_sym(&sy, ridge)?;
    let m = &wx * sxy * &wy;
    let svd = m.svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    order.truncate(d);

    let mut projection_x = Matrix::zeros(d, dx);
    let mut projection_y = Matrix::zeros(d, dy);
    let wx_t = wx.transpose();
    let wy_t = wy.transpose();
    for (row, &k) in order.iter().enumerate() {
        let a = u.column(k).transpose() * &wx_t;
        let b = vt.row(k) * &wy_t;
        projection_x.row_mut(row).copy_from(&a);
        projection_y.row_mut(row).copy_from(&b);
    }
    Ok(LinearCcaModel {
        projection_x,
        projection_y,
        mean_x: mean_x.as_slice().to_vec(),
        mean_y: mean_y.as_slice().to_vec(),
        correlations: order.iter().map(|&k| svd.singular_values[k]).collect(),
    })
}

impl LinearCcaModel {
    pub fn dims(&self) -> usize {
        self.correlations.len()
    }

    pub fn project_x(&self, x: &Matrix) -> Result<Matrix> {
        apply(&self.projection_x, &self.mean_x, x)
    }

    pub fn project_y(&self, y: &Matrix) -> Result<Matrix> {
        apply(&self.projection_y, &self.mean_y, y)
    }

    /// `U = (x - mean_x) P_x^T`, `V = (y - mean_y) P_y^T`.
    pub fn project(&self, x: &Matrix, y: &Matrix) -> Result<(Matrix, Matrix)> {
        Ok((self.project_x(x)?, self.project_y(y)?))
    }
}

fn apply(proj: &Matrix, mean: &[f64], m: &Matrix) -> Result<Matrix> {
    if m.ncols() != mean.len() {
        return Err(Error::DimensionMismatch {
            expected: mean.len(),
            found: m.ncols(),
        });
    }
    let centered = linalg::center(m, &DVector::from_column_slice(mean));
    Ok(centered * proj.transpose())
}

/// Per-component sample correlations of two `n x d` matrices.
pub fn component_correlations(u: &Matrix, v: &Matrix) -> Result<Vec<f64>> {
    if u.shape() != v.shape() {
        return Err(Error::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            u.shape(),
            v.shape()
        )));
    }
    if u.nrows() < 2 {
        return Err(Error::invalid("correlation needs at least 2 rows"));
    }
    (0..u.ncols())
        .map(|j| {
            linalg::sample_corr(u.column(j).as_slice(), v.column(j).as_slice())
                .ok_or(Error::ZeroVariance { column: j })
        })
        .collect()
}

/// Mean of the per-component sample correlations, in `[-1, 1]`.
pub fn normalized_objective(u: &Matrix, v: &Matrix) -> Result<f64> {
    let c = component_correlations(u, v)?;
    Ok(c.iter().sum::<f64>() / c.len() as f64)
}
