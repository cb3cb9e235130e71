//! Uniform lattice quantization of a source space and the remote-source fit.
//!
//! A [`QuantizedMap`] partitions the source space with a [`LatticeGrid`] and
//! assigns each occupied cell the mean of the *remote* targets whose source
//! points fell in it. An affine correction `A f + B` on top of the raw cell
//! means enforces zero mean and identity covariance on the training set.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::Matrix;

/// Relative widening of the upper bound so the sample maximum lands in the
/// last cell.
pub const UPPER_WIDENING: f64 = 1e-9;

/// Relative eigenvalue threshold for declaring quantized outputs rank deficient.
pub const RANK_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeGrid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    levels: Vec<usize>,
}

impl LatticeGrid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, levels: Vec<usize>) -> Result<Self> {
        if lower.len() != upper.len() || lower.len() != levels.len() || lower.is_empty() {
            return Err(Error::invalid(
                "grid bounds and levels must have equal, nonzero length",
            ));
        }
        for i in 0..lower.len() {
            if levels[i] == 0 {
                return Err(Error::invalid(format!("dimension {i} has zero levels")));
            }
            if !(lower[i] < upper[i]) || !lower[i].is_finite() || !upper[i].is_finite() {
                return Err(Error::invalid(format!(
                    "dimension {i} has bounds [{}, {}]",
                    lower[i], upper[i]
                )));
            }
        }
        let grid = Self {
            lower,
            upper,
            levels,
        };
        if grid.cell_count().is_none() {
            return Err(Error::invalid(
                "grid has more cells than fit in a 64-bit id",
            ));
        }
        Ok(grid)
    }

    /// Grid over the per-dimension sample range with `levels` cells per
    /// dimension. A constant dimension gets a single cell.
    pub fn from_samples(samples: &Matrix, levels: usize) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::invalid("cannot build a grid from zero samples"));
        }
        if levels == 0 {
            return Err(Error::invalid("levels must be at least 1"));
        }
        let ds = samples.ncols();
        let mut lower = Vec::with_capacity(ds);
        let mut upper = Vec::with_capacity(ds);
        let mut lv = Vec::with_capacity(ds);
        for (j, col) in samples.column_iter().enumerate() {
            let lo = col.min();
            let hi = col.max();
            let range = hi - lo;
            if range > 0.0 {
                lower.push(lo);
                upper.push(hi + UPPER_WIDENING * range);
                lv.push(levels);
            } else {
                log::warn!("dimension {j} is constant; using a single cell");
                lower.push(lo);
                upper.push(lo + 1.0);
                lv.push(1);
            }
        }
        Self::new(lower, upper, lv)
    }

    pub fn dim(&self) -> usize {
        self.levels.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn widths(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| (self.upper[i] - self.lower[i]) / self.levels[i] as f64)
            .collect()
    }

    /// Total number of cells, `None` on u64 overflow.
    pub fn cell_count(&self) -> Option<u64> {
        self.levels
            .iter()
            .try_fold(1u64, |acc, &n| acc.checked_mul(n as u64))
    }

    /// Per-dimension cell index, clamped into `[0, N-1]`.
    pub fn cell_index(&self, point: &[f64]) -> Vec<usize> {
        (0..self.dim())
            .map(|i| self.axis_index(i, point[i]))
            .collect()
    }

    #[inline]
    fn axis_index(&self, i: usize, v: f64) -> usize {
        let n = self.levels[i];
        let h = (self.upper[i] - self.lower[i]) / n as f64;
        let t = ((v - self.lower[i]) / h).floor();
        if t.is_nan() || t < 0.0 {
            0
        } else if t >= (n - 1) as f64 {
            n - 1
        } else {
            t as usize
        }
    }

    /// Row-major flattened cell id; out-of-range points clamp to the boundary.
    pub fn assign(&self, point: &[f64]) -> u64 {
        debug_assert_eq!(point.len(), self.dim());
        let mut id = 0u64;
        for (i, (&n, &v)) in self.levels.iter().zip(point).enumerate() {
            id = id * n as u64 + self.axis_index(i, v) as u64;
        }
        id
    }

    pub fn unflatten(&self, mut id: u64) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for i in (0..self.dim()).rev() {
            let n = self.levels[i] as u64;
            idx[i] = (id % n) as usize;
            id /= n;
        }
        idx
    }

    /// Cell ids of every row of `x`.
    pub fn assign_rows(&self, x: &Matrix) -> Result<Vec<u64>> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.ncols(),
            });
        }
        Ok((0..x.nrows())
            .into_par_iter()
            .map_init(
                || vec![0.0; x.ncols()],
                |buf, i| {
                    for (j, b) in buf.iter_mut().enumerate() {
                        *b = x[(i, j)];
                    }
                    self.assign(buf)
                },
            )
            .collect())
    }
}

/// Training rows grouped by occupied cell. Built once per source matrix and
/// reused across alternating fits.
#[derive(Debug, Clone)]
pub(crate) struct CellAssignment {
    /// Occupied cell ids, ascending.
    pub ids: Vec<u64>,
    /// Position in `ids` of each row's cell.
    pub row_cell: Vec<usize>,
    pub counts: Vec<usize>,
}

impl CellAssignment {
    pub fn new(grid: &LatticeGrid, x: &Matrix) -> Result<Self> {
        let raw = grid.assign_rows(x)?;
        let mut ids = raw.clone();
        ids.sort_unstable();
        ids.dedup();
        let pos: HashMap<u64, usize> = ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
        let row_cell: Vec<usize> = raw.iter().map(|id| pos[id]).collect();
        let mut counts = vec![0; ids.len()];
        for &c in &row_cell {
            counts[c] += 1;
        }
        Ok(Self {
            ids,
            row_cell,
            counts,
        })
    }

    /// Per-cell means of `targets` (`n x d`), one `Vec` per occupied cell.
    pub fn cell_means(&self, targets: &Matrix) -> Vec<Vec<f64>> {
        let d = targets.ncols();
        let mut sums = vec![vec![0.0; d]; self.ids.len()];
        for (i, &c) in self.row_cell.iter().enumerate() {
            let s = &mut sums[c];
            for (j, v) in s.iter_mut().enumerate() {
                *v += targets[(i, j)];
            }
        }
        for (s, &cnt) in sums.iter_mut().zip(&self.counts) {
            let inv = 1.0 / cnt as f64;
            s.iter_mut().for_each(|v| *v *= inv);
        }
        sums
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFit {
    pub count: usize,
    /// Mean of the training targets in the cell, before the affine correction.
    pub fit: Vec<f64>,
}

/// A fitted remote-source uniform quantizer with its affine correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MapRepr", into = "MapRepr")]
pub struct QuantizedMap {
    grid: LatticeGrid,
    output_dim: usize,
    cells: BTreeMap<u64, CellFit>,
    fallback: Vec<f64>,
    affine_a: Matrix,
    affine_b: Vec<f64>,
}

/// Fits per-cell target means: the empirical squared-error minimizer over
/// all quantizers sharing `grid`'s partition.
pub fn fit_rsuq(x: &Matrix, targets: &Matrix, grid: &LatticeGrid) -> Result<QuantizedMap> {
    if x.nrows() == 0 {
        return Err(Error::invalid("cannot fit a quantizer on zero rows"));
    }
    if x.nrows() != targets.nrows() {
        return Err(Error::invalid(format!(
            "x has {} rows but targets have {}",
            x.nrows(),
            targets.nrows()
        )));
    }
    let assignment = CellAssignment::new(grid, x)?;
    Ok(QuantizedMap::from_assignment(
        grid.clone(),
        &assignment,
        targets,
    ))
}

/// Whitening correction on `x_train`: composes `W (A f + B - m)` with
/// `W = C^{-1/2}` so outputs have zero mean and identity covariance.
pub fn affine_correct(map: &QuantizedMap, x_train: &Matrix) -> Result<QuantizedMap> {
    let outputs = map.predict(x_train)?;
    if outputs.nrows() < 2 {
        return Err(Error::invalid("affine correction needs at least 2 rows"));
    }
    let mean = linalg::column_means(&outputs);
    let cov = linalg::covariance(&outputs);
    let mut out = map.clone();
    out.compose_whitening(&mean, &cov)?;
    Ok(out)
}

/// Plug-in Shannon entropy (bits) of the cell occupancy of `x` under `map`'s grid.
pub fn quantizer_entropy(map: &QuantizedMap, x: &Matrix) -> Result<f64> {
    occupancy_entropy(&map.grid, x)
}

pub fn occupancy_entropy(grid: &LatticeGrid, x: &Matrix) -> Result<f64> {
    let ids = grid.assign_rows(x)?;
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for id in ids {
        *counts.entry(id).or_default() += 1;
    }
    Ok(plugin_entropy(counts.values().copied(), x.nrows()))
}

pub(crate) fn plugin_entropy(counts: impl Iterator<Item = usize>, n: usize) -> f64 {
    let n = n as f64;
    let h: f64 = counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

impl QuantizedMap {
    pub(crate) fn from_assignment(
        grid: LatticeGrid,
        assignment: &CellAssignment,
        targets: &Matrix,
    ) -> Self {
        let d = targets.ncols();
        let means = assignment.cell_means(targets);
        let cells = assignment
            .ids
            .iter()
            .zip(means)
            .zip(&assignment.counts)
            .map(|((&id, fit), &count)| (id, CellFit { count, fit }))
            .collect();
        let fallback = linalg::column_means(targets).as_slice().to_vec();
        Self {
            grid,
            output_dim: d,
            cells,
            fallback,
            affine_a: Matrix::identity(d, d),
            affine_b: vec![0.0; d],
        }
    }

    pub fn grid(&self) -> &LatticeGrid {
        &self.grid
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn cells(&self) -> &BTreeMap<u64, CellFit> {
        &self.cells
    }

    pub fn fallback(&self) -> &[f64] {
        &self.fallback
    }

    pub fn affine(&self) -> (&Matrix, &[f64]) {
        (&self.affine_a, &self.affine_b)
    }

    pub fn occupied_cells(&self) -> usize {
        self.cells.len()
    }

    fn correct(&self, fit: &[f64]) -> Vec<f64> {
        let f = DVector::from_column_slice(fit);
        let out = &self.affine_a * f;
        out.iter().zip(&self.affine_b).map(|(a, b)| a + b).collect()
    }

    /// Corrected output of an occupied cell.
    pub fn corrected_fit(&self, id: u64) -> Option<Vec<f64>> {
        self.cells.get(&id).map(|c| self.correct(&c.fit))
    }

    /// Nearest occupied cell in grid-index space, ties to the lowest id.
    pub fn nearest_occupied(&self, id: u64) -> Option<u64> {
        if self.cells.contains_key(&id) {
            return Some(id);
        }
        let target = self.grid.unflatten(id);
        let mut best: Option<(u64, u64)> = None;
        for &cid in self.cells.keys() {
            let idx = self.grid.unflatten(cid);
            let d2: u64 = idx
                .iter()
                .zip(&target)
                .map(|(&a, &b)| (a as i64 - b as i64).unsigned_abs().pow(2))
                .sum();
            // keys iterate ascending, so strict < keeps the lowest id on ties
            if best.is_none_or(|(bd, _)| d2 < bd) {
                best = Some((d2, cid));
            }
        }
        best.map(|(_, cid)| cid)
    }

    /// Corrected outputs for each row of `x_new`. Rows in unoccupied cells use
    /// the nearest occupied cell.
    pub fn predict(&self, x_new: &Matrix) -> Result<Matrix> {
        let ids = self.grid.assign_rows(x_new)?;
        let mut unseen: Vec<u64> = ids
            .iter()
            .copied()
            .filter(|id| !self.cells.contains_key(id))
            .collect();
        unseen.sort_unstable();
        unseen.dedup();
        let resolved: HashMap<u64, u64> = unseen
            .par_iter()
            .filter_map(|&id| self.nearest_occupied(id).map(|c| (id, c)))
            .collect();
        let corrected: HashMap<u64, Vec<f64>> = self
            .cells
            .iter()
            .map(|(&id, c)| (id, self.correct(&c.fit)))
            .collect();
        let fallback = self.correct(&self.fallback);
        let d = self.output_dim;
        let mut out = Matrix::zeros(ids.len(), d);
        for (i, id) in ids.iter().enumerate() {
            let key = resolved.get(id).unwrap_or(id);
            let row = corrected.get(key).unwrap_or(&fallback);
            for j in 0..d {
                out[(i, j)] = row[j];
            }
        }
        Ok(out)
    }

    /// Outputs of the training rows behind `assignment`, without grid lookups.
    pub(crate) fn training_outputs(&self, assignment: &CellAssignment) -> Matrix {
        let fits: Vec<Vec<f64>> = assignment
            .ids
            .iter()
            .map(|id| self.correct(&self.cells[id].fit))
            .collect();
        let d = self.output_dim;
        Matrix::from_fn(assignment.row_cell.len(), d, |i, j| {
            fits[assignment.row_cell[i]][j]
        })
    }

    pub(crate) fn compose_whitening(&mut self, mean: &DVector<f64>, cov: &Matrix) -> Result<()> {
        let min = linalg::min_eigenvalue(cov);
        let trace = cov.trace();
        if !(min > RANK_REL_TOL * trace.max(f64::MIN_POSITIVE)) {
            return Err(Error::RankDeficient {
                min_eigenvalue: min,
            });
        }
        let w = linalg::inv_sqrt_sym(cov, 0.0).map_err(|_| Error::RankDeficient {
            min_eigenvalue: min,
        })?;
        let shifted = DVector::from_column_slice(&self.affine_b) - mean;
        self.affine_b = (&w * shifted).as_slice().to_vec();
        self.affine_a = &w * &self.affine_a;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct MapRepr {
    grid: LatticeGrid,
    output_dim: usize,
    cells: Vec<CellRepr>,
    fallback: Vec<f64>,
    affine_a: Vec<Vec<f64>>,
    affine_b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CellRepr {
    id: u64,
    count: usize,
    fit: Vec<f64>,
}

impl From<QuantizedMap> for MapRepr {
    fn from(m: QuantizedMap) -> Self {
        Self {
            affine_a: linalg::to_rows(&m.affine_a),
            grid: m.grid,
            output_dim: m.output_dim,
            cells: m
                .cells
                .into_iter()
                .map(|(id, c)| CellRepr {
                    id,
                    count: c.count,
                    fit: c.fit,
                })
                .collect(),
            fallback: m.fallback,
            affine_b: m.affine_b,
        }
    }
}

impl TryFrom<MapRepr> for QuantizedMap {
    type Error = Error;

    fn try_from(r: MapRepr) -> Result<Self> {
        let grid = LatticeGrid::new(r.grid.lower, r.grid.upper, r.grid.levels)?;
        let d = r.output_dim;
        let total = grid.cell_count().unwrap_or(u64::MAX);
        let mut cells = BTreeMap::new();
        for c in r.cells {
            if c.fit.len() != d || c.id >= total {
                return Err(Error::Corrupt(format!("bad cell entry {}", c.id)));
            }
            cells.insert(
                c.id,
                CellFit {
                    count: c.count,
                    fit: c.fit,
                },
            );
        }
        if r.fallback.len() != d || r.affine_b.len() != d || r.affine_a.len() != d {
            return Err(Error::Corrupt("affine/fallback dimension mismatch".into()));
        }
        Ok(Self {
            grid,
            output_dim: d,
            cells,
            fallback: r.fallback,
            affine_a: linalg::from_rows(&r.affine_a, d)?,
            affine_b: r.affine_b,
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn col(v: &[f64]) -> Matrix {
        Matrix::from_column_slice(v.len(), 1, v)
    }

    fn uniform(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, d, |_, _| rng.random::<f64>())
    }

    #[test]
    fn unit_interval_grid() {
        let g = LatticeGrid::from_samples(&col(&[0.0, 0.3, 1.0]), 5).unwrap();
        let w = g.widths()[0];
        assert!((w - 0.2).abs() < 1e-9);
        assert_eq!(g.assign(&[1.0]), 4);
        assert_eq!(g.assign(&[0.0]), 0);
    }

    #[test]
    fn thirteen_levels_in_two_dims() {
        let g = LatticeGrid::from_samples(&uniform(100, 2, 1), 13).unwrap();
        assert_eq!(g.cell_count(), Some(169));
        assert_eq!(g.assign(&[f64::INFINITY, f64::INFINITY]), 168);
    }

    #[test]
    fn max_sample_lands_in_last_cell() {
        for seed in 0..20 {
            let x = uniform(50, 3, seed) * 7.0;
            let g = LatticeGrid::from_samples(&x, 9).unwrap();
            for j in 0..3 {
                let i = x.column(j).imax();
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                assert_eq!(g.cell_index(&row)[j], 8);
            }
        }
    }

    #[test]
    fn assign_examples() {
        let g = LatticeGrid::new(vec![0.0], vec![1.0], vec![2]).unwrap();
        assert_eq!(g.assign(&[0.75]), 1);
        assert_eq!(g.assign(&[0.0]), 0);
        assert_eq!(g.assign(&[-3.0]), 0);
        let g2 = LatticeGrid::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![3, 4]).unwrap();
        let id = g2.assign(&[0.5, 0.9]);
        assert_eq!(id, 4 + 3);
        assert_eq!(g2.unflatten(id), vec![1, 3]);
    }

    #[test]
    fn constant_dimension_gets_one_cell() {
        let x = Matrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let g = LatticeGrid::from_samples(&x, 4).unwrap();
        assert_eq!(g.levels(), &[4, 1]);
    }

    #[test]
    fn two_cell_means() {
        let x = col(&[0.1, 0.2, 0.8, 0.9]);
        let t = col(&[1.0, 3.0, 5.0, 7.0]);
        let g = LatticeGrid::from_samples(&x, 2).unwrap();
        let m = fit_rsuq(&x, &t, &g).unwrap();
        assert_eq!(m.cells()[&0].fit, vec![2.0]);
        assert_eq!(m.cells()[&1].fit, vec![6.0]);
        assert_eq!(m.fallback(), &[4.0]);
    }

    #[test]
    fn single_cell_is_column_mean() {
        let x = col(&[0.5, 0.5, 0.5]);
        let t = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 3.0, 3.0, 6.0]);
        let g = LatticeGrid::from_samples(&x, 4).unwrap();
        let m = fit_rsuq(&x, &t, &g).unwrap();
        assert_eq!(m.occupied_cells(), 1);
        assert_eq!(m.cells().values().next().unwrap().fit, vec![2.0, 3.0]);
    }

    /// Brute-force check: the cell mean beats every grid-searched constant.
    #[test]
    fn cell_fit_minimizes_training_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::from_fn(50, 1, |_, _| rng.random::<f64>());
        let t = Matrix::from_fn(50, 1, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let g = LatticeGrid::from_samples(&x, 3).unwrap();
        let m = fit_rsuq(&x, &t, &g).unwrap();
        let pred = m.predict(&x).unwrap();
        let mse: f64 = (&pred - &t).map(|v| v * v).sum() / 50.0;

        let ids = g.assign_rows(&x).unwrap();
        let mut oracle = 0.0;
        for cell in 0..3u64 {
            let members: Vec<f64> = (0..50)
                .filter(|&i| ids[i] == cell)
                .map(|i| t[(i, 0)])
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut best = f64::INFINITY;
            for k in 0..=4000 {
                let c = -2.0 + k as f64 * 0.001;
                best = best.min(members.iter().map(|v| (v - c).powi(2)).sum::<f64>());
            }
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            best = best.min(members.iter().map(|v| (v - mean).powi(2)).sum::<f64>());
            oracle += best;
        }
        oracle /= 50.0;
        assert!((mse - oracle).abs() < 1e-12, "{mse} vs {oracle}");
    }

    #[test]
    fn correction_of_white_outputs_is_identity() {
        // four cells with fits at (+-1, +-1), equal counts: already white
        let x = Matrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        let t = Matrix::from_row_slice(4, 2, &[-1.0, -1.0, -1.0, 1.0, 1.0, -1.0, 1.0, 1.0]);
        let g = LatticeGrid::from_samples(&x, 2).unwrap();
        let m = affine_correct(&fit_rsuq(&x, &t, &g).unwrap(), &x).unwrap();
        let (a, b) = m.affine();
        assert!(linalg::identity_deviation(a) < 1e-10);
        assert!(b.iter().all(|v| v.abs() < 1e-10));

        let shifted = t.map(|v| v + 3.0);
        let m = affine_correct(&fit_rsuq(&x, &shifted, &g).unwrap(), &x).unwrap();
        let (a, b) = m.affine();
        assert!(linalg::identity_deviation(a) < 1e-10);
        assert!(b.iter().all(|v| (v + 3.0).abs() < 1e-10));
    }

    #[test]
    fn corrected_outputs_are_white() {
        let x = uniform(500, 2, 4);
        let t = Matrix::from_fn(500, 2, |i, j| {
            x[(i, j)].powi(2) * (j + 1) as f64 + x[(i, 1 - j)]
        });
        let g = LatticeGrid::from_samples(&x, 6).unwrap();
        let m = affine_correct(&fit_rsuq(&x, &t, &g).unwrap(), &x).unwrap();
        let out = m.predict(&x).unwrap();
        assert!(linalg::column_means(&out).amax() < 1e-8);
        assert!(linalg::identity_deviation(&linalg::covariance(&out)) < 1e-8);
        // raw fits remain the uncorrected cell means
        let ids = g.assign_rows(&x).unwrap();
        for (id, c) in m.cells() {
            let rows: Vec<usize> = (0..500).filter(|&i| ids[i] == *id).collect();
            assert_eq!(rows.len(), c.count);
            for j in 0..2 {
                let mean = rows.iter().map(|&i| t[(i, j)]).sum::<f64>() / rows.len() as f64;
                assert!((c.fit[j] - mean).abs() < 1e-10);
            }
        }
        // idempotent
        let again = affine_correct(&m, &x).unwrap();
        let out2 = again.predict(&x).unwrap();
        assert!((&out2 - &out).amax() < 1e-8);
    }

    #[test]
    fn rank_deficient_outputs_rejected() {
        let x = col(&[0.1, 0.2, 0.3]);
        let t = Matrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 1.0, 0.0, 5.0]);
        let g = LatticeGrid::from_samples(&x, 1).unwrap();
        let m = fit_rsuq(&x, &t, &g).unwrap();
        assert!(matches!(
            affine_correct(&m, &x),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn unseen_cell_uses_nearest_occupied() {
        let g = LatticeGrid::new(vec![0.0, 0.0], vec![4.0, 4.0], vec![4, 4]).unwrap();
        let x = Matrix::from_row_slice(3, 2, &[0.5, 0.5, 3.5, 3.5, 0.5, 3.5]);
        let t = Matrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let m = fit_rsuq(&x, &t, &g).unwrap();
        // (1,0) is adjacent only to (0,0)
        let p = m
            .predict(&Matrix::from_row_slice(1, 2, &[1.5, 0.5]))
            .unwrap();
        assert_eq!(p[(0, 0)], 1.0);
        // (2,2): (3,3) at d2=2 beats (0,3) at 5 and (0,0) at 8
        let p = m
            .predict(&Matrix::from_row_slice(1, 2, &[2.5, 2.5]))
            .unwrap();
        assert_eq!(p[(0, 0)], 2.0);
        // (0,2)->(0,3) dist 1, (0,0) dist 2
        let p = m
            .predict(&Matrix::from_row_slice(1, 2, &[0.5, 2.5]))
            .unwrap();
        assert_eq!(p[(0, 0)], 3.0);
        // (1,1): (0,0) at d2=2, (0,3) at 5
        assert_eq!(m.nearest_occupied(g.assign(&[1.5, 1.5])), Some(0));
        // (2,1): (0,0) d2=5, (3,3) d2=5 -> lowest id wins
        assert_eq!(m.nearest_occupied(g.assign(&[2.5, 1.5])), Some(0));
    }

    #[test]
    fn entropy_examples() {
        let x = col(&[0.1, 0.1, 0.1]);
        let g = LatticeGrid::new(vec![0.0], vec![1.0], vec![4]).unwrap();
        assert_eq!(occupancy_entropy(&g, &x).unwrap(), 0.0);
        let x = col(&[0.1, 0.3, 0.6, 0.9]);
        assert!((occupancy_entropy(&g, &x).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn entropy_matches_histogram_oracle() {
        let x = uniform(5000, 2, 12);
        let g = LatticeGrid::from_samples(&x, 13).unwrap();
        let h = occupancy_entropy(&g, &x).unwrap();
        let w = g.widths();
        let mut hist = vec![vec![0usize; 13]; 13];
        for i in 0..5000 {
            let a = (((x[(i, 0)] - g.lower()[0]) / w[0]).floor() as usize).min(12);
            let b = (((x[(i, 1)] - g.lower()[1]) / w[1]).floor() as usize).min(12);
            hist[a][b] += 1;
        }
        let mut oracle = 0.0;
        for c in hist.iter().flatten().filter(|&&c| c > 0) {
            let p = *c as f64 / 5000.0;
            oracle -= p * p.log2();
        }
        assert!((h - oracle).abs() < 1e-12);
        assert!(h <= 2.0 * 13f64.log2() + 1e-12);
        assert!(h > 7.0);
    }

    #[test]
    fn json_roundtrip_preserves_predictions() {
        let x = uniform(300, 2, 6);
        let t = Matrix::from_fn(300, 2, |i, j| (x[(i, j)] * 6.0).sin() + x[(i, 1 - j)]);
        let g = LatticeGrid::from_samples(&x, 5).unwrap();
        let m = affine_correct(&fit_rsuq(&x, &t, &g).unwrap(), &x).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: QuantizedMap = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        let probe = uniform(100, 2, 7) * 1.4;
        assert_eq!(back.predict(&probe).unwrap(), m.predict(&probe).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn in_range_indices_are_valid(seed in any::<u64>(), n in 1usize..12) {
            let x = uniform(30, 3, seed);
            let g = LatticeGrid::from_samples(&x, n).unwrap();
            for i in 0..30 {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                let idx = g.cell_index(&row);
                prop_assert!(idx.iter().zip(g.levels()).all(|(a, b)| a < b));
                prop_assert_eq!(g.unflatten(g.assign(&row)), idx);
            }
        }

        #[test]
        fn entropy_bounded_by_log_cells(seed in any::<u64>(), n in 1usize..20) {
            let x = uniform(200, 2, seed);
            let g = LatticeGrid::from_samples(&x, n).unwrap();
            let h = occupancy_entropy(&g, &x).unwrap();
            prop_assert!(h <= 2.0 * (n as f64).log2() + 1e-12);
        }
    }
}
