//! Alternating conditional expectations with k-nearest-neighbour smoothing.
//!
//! Conditional expectations are estimated by averaging over the `k` nearest
//! training points in Euclidean distance (the query point itself included when
//! it is a training point). Distance ties are broken by training index.
//! Components are extracted one at a time; each new component is
//! Gram–Schmidt residualized against the earlier ones after every smoothing
//! step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PairedDataset;
use crate::error::{Error, Result};
use crate::linalg::serde_matrix;
use crate::linear_cca;
use crate::Matrix;

/// Variances below this count as a constant fit.
const DEGENERATE_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AceConfig {
    pub dims: usize,
    /// Neighbours per conditional-expectation estimate.
    pub k: usize,
    pub max_iters: usize,
    /// Stop once the component correlation changes by less than this.
    pub tol: f64,
}

impl Default for AceConfig {
    fn default() -> Self {
        Self {
            dims: 2,
            k: 70,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AceModel {
    #[serde(with = "serde_matrix")]
    pub train_x: Matrix,
    #[serde(with = "serde_matrix")]
    pub train_y: Matrix,
    /// `n x d` fitted transforms of the training X rows.
    #[serde(with = "serde_matrix")]
    pub phi: Matrix,
    #[serde(with = "serde_matrix")]
    pub psi: Matrix,
    pub k: usize,
    pub correlations: Vec<f64>,
    /// Correlation after every alternation, per component.
    pub correlation_traces: Vec<Vec<f64>>,
    pub iterations: Vec<usize>,
}

pub fn fit_ace(train: &PairedDataset, config: &AceConfig) -> Result<AceModel> {
    let (x, y) = (train.x(), train.y());
    let n = train.n();
    let d = config.dims;
    if config.k == 0 || config.k >= n {
        return Err(Error::invalid(format!(
            "need 1 <= k < n = {n}, got k = {}",
            config.k
        )));
    }
    if d == 0 || d > train.dx().min(train.dy()) {
        return Err(Error::invalid(format!(
            "dims must be in 1..={}, got {d}",
            train.dx().min(train.dy())
        )));
    }
    if config.max_iters == 0 || !(config.tol > 0.0) {
        return Err(Error::invalid("need max_iters >= 1 and tol > 0"));
    }

    let nbr_x = knn(x, x, config.k);
    let nbr_y = knn(y, y, config.k);
    let init = linear_cca::fit_matrices(x, y, d, 0.0)?.project_y(y)?;

    let mut phi_cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut psi_cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut correlations = Vec::with_capacity(d);
    let mut traces = Vec::with_capacity(d);
    let mut iterations = Vec::with_capacity(d);

    for comp in 0..d {
        let mut psi = init.column(comp).as_slice().to_vec();
        deflate(&mut psi, &psi_cols);
        standardize(&mut psi, comp)?;
        let mut phi = vec![0.0; n];
        let mut trace = Vec::new();
        let mut prev = f64::NEG_INFINITY;
        let mut iters = 0;
        for _ in 0..config.max_iters {
            iters += 1;
            phi = knn_average(&nbr_x, config.k, &psi);
            deflate(&mut phi, &phi_cols);
            standardize(&mut phi, comp)?;

            psi = knn_average(&nbr_y, config.k, &phi);
            deflate(&mut psi, &psi_cols);
            standardize(&mut psi, comp)?;
            let corr = dot(&phi, &psi) / n as f64;
            trace.push(corr);
            if (corr - prev).abs() < config.tol {
                break;
            }
            prev = corr;
        }
        correlations.push(*trace.last().expect("at least one iteration"));
        traces.push(trace);
        iterations.push(iters);
        phi_cols.push(phi);
        psi_cols.push(psi);
    }

    let to_matrix = |cols: &[Vec<f64>]| Matrix::from_fn(n, d, |i, j| cols[j][i]);
    Ok(AceModel {
        train_x: x.clone(),
        train_y: y.clone(),
        phi: to_matrix(&phi_cols),
        psi: to_matrix(&psi_cols),
        k: config.k,
        correlations,
        correlation_traces: traces,
        iterations,
    })
}

impl AceModel {
    pub fn dims(&self) -> usize {
        self.phi.ncols()
    }

    pub fn normalized_objective(&self) -> f64 {
        self.correlations.iter().sum::<f64>() / self.correlations.len() as f64
    }

    pub fn transform_x(&self, x: &Matrix) -> Result<Matrix> {
        extend(&self.train_x, &self.phi, self.k, x)
    }

    pub fn transform_y(&self, y: &Matrix) -> Result<Matrix> {
        extend(&self.train_y, &self.psi, self.k, y)
    }
}

/// Out-of-sample transforms: each new row takes the mean fitted value of its
/// `k` nearest training rows.
pub fn predict_ace(model: &AceModel, x_new: &Matrix, y_new: &Matrix) -> Result<(Matrix, Matrix)> {
    Ok((model.transform_x(x_new)?, model.transform_y(y_new)?))
}

fn extend(reference: &Matrix, values: &Matrix, k: usize, query: &Matrix) -> Result<Matrix> {
    if query.ncols() != reference.ncols() {
        return Err(Error::DimensionMismatch {
            expected: reference.ncols(),
            found: query.ncols(),
        });
    }
    let nbrs = knn(reference, query, k);
    let mut out = Matrix::zeros(query.nrows(), values.ncols());
    for j in 0..values.ncols() {
        let col = knn_average(&nbrs, k, values.column(j).as_slice());
        out.column_mut(j).copy_from_slice(&col);
    }
    Ok(out)
}

/// Indices of the `k` nearest reference rows for every query row, flattened
/// row-major and ordered by (distance, index).
pub(crate) fn knn(reference: &Matrix, query: &Matrix, k: usize) -> Vec<usize> {
    let dim = reference.ncols();
    let refs: Vec<f64> = reference.transpose().as_slice().to_vec();
    let queries: Vec<f64> = query.transpose().as_slice().to_vec();
    let k = k.min(reference.nrows());
    queries
        .par_chunks(dim.max(1))
        .flat_map_iter(|q| {
            let mut dist: Vec<(f64, usize)> = refs
                .chunks(dim.max(1))
                .enumerate()
                .map(|(j, r)| (r.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum(), j))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < dist.len() {
                dist.select_nth_unstable_by(k - 1, cmp);
                dist.truncate(k);
            }
            dist.sort_unstable_by(cmp);
            dist.into_iter().map(|(_, j)| j)
        })
        .collect()
}

pub(crate) fn knn_average(neighbors: &[usize], k: usize, values: &[f64]) -> Vec<f64> {
    neighbors
        .chunks(k)
        .map(|idx| idx.iter().map(|&j| values[j]).sum::<f64>() / k as f64)
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Removes the projection onto each earlier (standardized) component.
fn deflate(v: &mut [f64], earlier: &[Vec<f64>]) {
    let n = v.len() as f64;
    for e in earlier {
        let c = dot(v, e) / n;
        for (a, b) in v.iter_mut().zip(e) {
            *a -= c * b;
        }
    }
}

fn standardize(v: &mut [f64], component: usize) -> Result<()> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    if !(var > DEGENERATE_VARIANCE) {
        return Err(Error::DegenerateVariance(format!(
            "component {component} has variance {var:e} after smoothing"
        )));
    }
    let sd = var.sqrt();
    for a in v.iter_mut() {
        *a = (*a - mean) / sd;
    }
    Ok(())
}
