//! Alternating remote-source quantization between the two views.
//!
//! Each half-step fixes one view's representation and refits the other view's
//! quantizer to it, followed by the whitening correction. With both sides
//! whitened, maximizing the summed correlation is the same as minimizing
//! `E||U - V||^2`, so every half-step is the constrained empirical risk
//! minimizer for its quantizer and the training objective never decreases.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dataset::PairedDataset;
use crate::entropy;
use crate::error::{Error, Result};
use crate::linalg::{self, serde_matrix};
use crate::linear_cca::{self, component_correlations};
use crate::quantizer::{plugin_entropy, CellAssignment, LatticeGrid, QuantizedMap};
use crate::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrccaConfig {
    /// Quantization levels per dimension, shared by both views.
    pub levels: usize,
    /// Output dimension `d`.
    pub dims: usize,
    pub max_iters: usize,
    /// Stop once the relative objective change falls below this.
    pub tol: f64,
    /// Seed for data splits; the fit itself is deterministic.
    pub seed: u64,
    /// Ridge for the linear-CCA warm start.
    pub ridge: f64,
}

impl Default for CrccaConfig {
    fn default() -> Self {
        Self {
            levels: 9,
            dims: 2,
            max_iters: 100,
            tol: 1e-5,
            seed: 0,
            ridge: 0.0,
        }
    }
}

impl CrccaConfig {
    pub fn validate(&self, dx: usize, dy: usize) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::invalid(format!(
                "levels must be >= 2, got {}",
                self.levels
            )));
        }
        if self.dims == 0 || self.dims > dx.min(dy) {
            return Err(Error::invalid(format!(
                "dims must be in 1..={}, got {}",
                dx.min(dy),
                self.dims
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be >= 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// Per-iteration training diagnostics.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// `E||U - V||^2` after every half-step, starting with the first U update.
    pub half_step_distortion: Vec<f64>,
    /// Worst `|mean|` of U or V seen after any iteration.
    pub max_mean_deviation: f64,
    /// Worst max-abs deviation of cov(U) or cov(V) from I.
    pub max_covariance_deviation: f64,
    /// Objective before and after the final rotation.
    pub objective_before_alignment: f64,
    pub objective_after_alignment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrccaModel {
    pub map_u: QuantizedMap,
    pub map_v: QuantizedMap,
    #[serde(with = "serde_matrix")]
    pub align_u: Matrix,
    #[serde(with = "serde_matrix")]
    pub align_v: Matrix,
    /// Normalized objective after each iteration; the last entry is the
    /// objective after the final alignment.
    pub objective_trace: Vec<f64>,
    /// Plug-in cell entropies on the training set, in bits.
    pub entropy_u: f64,
    pub entropy_v: f64,
    pub iterations: usize,
    pub converged: bool,
    pub config: CrccaConfig,
    pub diagnostics: FitDiagnostics,
}

pub fn fit_crcca(train: &PairedDataset, config: &CrccaConfig) -> Result<CrccaModel> {
    let (x, y) = (train.x(), train.y());
    config.validate(train.dx(), train.dy())?;
    let d = config.dims;
    let n = train.n();

    let grid_x = LatticeGrid::from_samples(x, config.levels)?;
    let grid_y = LatticeGrid::from_samples(y, config.levels)?;
    let cells_x = CellAssignment::new(&grid_x, x)?;
    let cells_y = CellAssignment::new(&grid_y, y)?;

    let init = linear_cca::fit_matrices(x, y, d, config.ridge)?;
    let mut v = init.project_y(y)?;

    let mut diag = FitDiagnostics::default();
    let mut trace = Vec::new();
    let mut maps: Option<(QuantizedMap, QuantizedMap)> = None;
    let mut u = Matrix::zeros(n, d);
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..config.max_iters {
        iterations += 1;
        let (map_u, new_u) = half_step(&grid_x, &cells_x, &v)?;
        u = new_u;
        diag.half_step_distortion.push(mean_sq_dist(&u, &v));
        let (map_v, new_v) = half_step(&grid_y, &cells_y, &u)?;
        v = new_v;
        diag.half_step_distortion.push(mean_sq_dist(&u, &v));

        for m in [&u, &v] {
            diag.max_mean_deviation = diag.max_mean_deviation.max(linalg::column_means(m).amax());
            diag.max_covariance_deviation = diag
                .max_covariance_deviation
                .max(linalg::identity_deviation(&linalg::covariance(m)));
        }
        maps = Some((map_u, map_v));

        let obj = linear_cca::normalized_objective(&u, &v)?;
        let prev = trace.last().copied();
        trace.push(obj);
        if let Some(p) = prev {
            if (obj - p).abs() <= config.tol * p.abs().max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        log::warn!(
            "crcca did not converge in {} iterations (last objective {:?})",
            config.max_iters,
            trace.last()
        );
    }
    let (map_u, map_v) = maps.expect("at least one iteration");

    let (align_u, align_v) = alignment(&u, &v);
    diag.objective_before_alignment = *trace.last().expect("nonempty trace");
    let final_obj =
        linear_cca::normalized_objective(&(&u * align_u.transpose()), &(&v * align_v.transpose()))?;
    diag.objective_after_alignment = final_obj;
    trace.push(final_obj);

    Ok(CrccaModel {
        map_u,
        map_v,
        align_u,
        align_v,
        objective_trace: trace,
        entropy_u: plugin_entropy(cells_x.counts.iter().copied(), n),
        entropy_v: plugin_entropy(cells_y.counts.iter().copied(), n),
        iterations,
        converged,
        config: *config,
        diagnostics: diag,
    })
}

/// Fits cell means of `target` over `cells` and whitens them on the training rows.
fn half_step(
    grid: &LatticeGrid,
    cells: &CellAssignment,
    target: &Matrix,
) -> Result<(QuantizedMap, Matrix)> {
    let mut map = QuantizedMap::from_assignment(grid.clone(), cells, target);
    let raw = map.training_outputs(cells);
    map.compose_whitening(&linalg::column_means(&raw), &linalg::covariance(&raw))?;
    let out = map.training_outputs(cells);
    Ok((map, out))
}

fn mean_sq_dist(u: &Matrix, v: &Matrix) -> f64 {
    (u - v).map(|e| e * e).sum() / u.nrows() as f64
}

/// Orthogonal rotations diagonalizing the cross-covariance of two whitened
/// representations, ordered by descending canonical correlation.
fn alignment(u: &Matrix, v: &Matrix) -> (Matrix, Matrix) {
    let d = u.ncols();
    let cross = linalg::cross_covariance(u, v);
    let svd = cross.svd(true, true);
    let left = svd.u.expect("requested U");
    let right_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut au = Matrix::zeros(d, d);
    let mut av = Matrix::zeros(d, d);
    for (row, &k) in order.iter().enumerate() {
        au.row_mut(row).copy_from(&left.column(k).transpose());
        av.row_mut(row).copy_from(&right_t.row(k));
    }
    (au, av)
}

/// Metrics of a fitted model on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub normalized_objective: f64,
    pub correlations: Vec<f64>,
    /// Mean of `||U - V||^2` over rows.
    pub distortion: f64,
    /// Plug-in cell entropies of this dataset, in bits.
    pub entropy_u: f64,
    pub entropy_v: f64,
    /// Good-Turing entropy over observed cells, in bits.
    pub entropy_u_good_turing: f64,
    pub entropy_v_good_turing: f64,
    pub missing_mass_u: f64,
    pub missing_mass_v: f64,
}

impl CrccaModel {
    pub fn dims(&self) -> usize {
        self.config.dims
    }

    pub fn transform_x(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.map_u.predict(x)? * self.align_u.transpose())
    }

    pub fn transform_y(&self, y: &Matrix) -> Result<Matrix> {
        Ok(self.map_v.predict(y)? * self.align_v.transpose())
    }

    /// Aligned representations `(U, V)` of a dataset.
    pub fn transform(&self, data: &PairedDataset) -> Result<(Matrix, Matrix)> {
        Ok((self.transform_x(data.x())?, self.transform_y(data.y())?))
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("nonempty trace")
    }

    pub fn evaluate(&self, data: &PairedDataset) -> Result<EvalReport> {
        let (u, v) = self.transform(data)?;
        let correlations = component_correlations(&u, &v)?;
        let cu = cell_counts(self.map_u.grid(), data.x())?;
        let cv = cell_counts(self.map_v.grid(), data.y())?;
        let gu = entropy::good_turing(&cu)?;
        let gv = entropy::good_turing(&cv)?;
        Ok(EvalReport {
            n: data.n(),
            normalized_objective: correlations.iter().sum::<f64>() / correlations.len() as f64,
            correlations,
            distortion: mean_sq_dist(&u, &v),
            entropy_u: plugin_entropy(cu.iter().copied(), data.n()),
            entropy_v: plugin_entropy(cv.iter().copied(), data.n()),
            entropy_u_good_turing: entropy::entropy_bits(&gu),
            entropy_v_good_turing: entropy::entropy_bits(&gv),
            missing_mass_u: gu.missing_mass,
            missing_mass_v: gv.missing_mass,
        })
    }
}

/// Occupancy counts of the cells hit by `x`, ordered by cell id.
fn cell_counts(grid: &LatticeGrid, x: &Matrix) -> Result<Vec<usize>> {
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for id in grid.assign_rows(x)? {
        *counts.entry(id).or_default() += 1;
    }
    let mut pairs: Vec<(u64, usize)> = counts.into_iter().collect();
    pairs.sort_unstable();
    Ok(pairs.into_iter().map(|(_, c)| c).collect())
}

/// One point of the regularization curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub levels: usize,
    pub train_objective: Option<f64>,
    pub eval_objective: Option<f64>,
    pub entropy_u: Option<f64>,
    pub entropy_v: Option<f64>,
    pub entropy_u_good_turing: Option<f64>,
    pub entropy_v_good_turing: Option<f64>,
    pub iterations: Option<usize>,
    pub error: Option<String>,
}

/// Fits one model per level count; failures are recorded and skipped.
pub fn sweep_levels(
    train: &PairedDataset,
    eval: &PairedDataset,
    levels_list: &[usize],
    config: &CrccaConfig,
) -> Result<Vec<SweepPoint>> {
    Ok(sweep_with_models(train, eval, levels_list, config)?
        .into_iter()
        .map(|(p, _)| p)
        .collect())
}

pub(crate) fn sweep_with_models(
    train: &PairedDataset,
    eval: &PairedDataset,
    levels_list: &[usize],
    config: &CrccaConfig,
) -> Result<Vec<(SweepPoint, Option<CrccaModel>)>> {
    if levels_list.is_empty() {
        return Err(Error::invalid("levels list is empty"));
    }
    Ok(levels_list
        .iter()
        .map(|&levels| {
            let cfg = CrccaConfig { levels, ..*config };
            let fitted = fit_crcca(train, &cfg).and_then(|m| {
                let train_report = m.evaluate(train)?;
                let ev = m.evaluate(eval)?;
                Ok((m, train_report, ev))
            });
            match fitted {
                Ok((m, tr, ev)) => (
                    SweepPoint {
                        levels,
                        train_objective: Some(m.final_objective()),
                        eval_objective: Some(ev.normalized_objective),
                        entropy_u: Some(m.entropy_u),
                        entropy_v: Some(m.entropy_v),
                        entropy_u_good_turing: Some(tr.entropy_u_good_turing),
                        entropy_v_good_turing: Some(tr.entropy_v_good_turing),
                        iterations: Some(m.iterations),
                        error: None,
                    },
                    Some(m),
                ),
                Err(e) => {
                    log::warn!("sweep at N={levels} failed: {e}");
                    (
                        SweepPoint {
                            levels,
                            train_objective: None,
                            eval_objective: None,
                            entropy_u: None,
                            entropy_v: None,
                            entropy_u_good_turing: None,
                            entropy_v_good_turing: None,
                            iterations: None,
                            error: Some(e.to_string()),
                        },
                        None,
                    )
                }
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::synthgen;

    fn uniform(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, d, |_, _| rng.random::<f64>())
    }

    #[test]
    fn identity_coupling_is_perfect() {
        let x = uniform(10_000, 2, 1);
        let ds = PairedDataset::new(x.clone(), x).unwrap();
        let cfg = CrccaConfig {
            levels: 16,
            ..Default::default()
        };
        let m = fit_crcca(&ds, &cfg).unwrap();
        assert!(m.final_objective() >= 0.99, "{}", m.final_objective());
    }

    #[test]
    fn independent_views_stay_uncorrelated() {
        let ds = PairedDataset::new(uniform(5000, 2, 2), uniform(5000, 2, 3)).unwrap();
        let cfg = CrccaConfig {
            levels: 5,
            ..Default::default()
        };
        let m = fit_crcca(&ds, &cfg).unwrap();
        assert!(m.final_objective() < 0.15, "{}", m.final_objective());
    }

    #[test]
    fn constraints_and_monotone_trace() {
        let (ds, _) = synthgen::generate(3000, 5);
        let m = fit_crcca(&ds, &CrccaConfig::default()).unwrap();
        assert!(m.diagnostics.max_mean_deviation <= 1e-8);
        assert!(m.diagnostics.max_covariance_deviation <= 1e-6);
        for w in m.objective_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-6, "{:?}", m.objective_trace);
        }
        for w in m.diagnostics.half_step_distortion.windows(2) {
            assert!(w[1] <= w[0] + 1e-6);
        }
        assert!(
            m.diagnostics.objective_after_alignment
                >= m.diagnostics.objective_before_alignment - 1e-9
        );
        for a in [&m.align_u, &m.align_v] {
            assert!(linalg::identity_deviation(&(a * a.transpose())) < 1e-8);
        }
    }

    #[test]
    fn evaluate_on_train_matches_trace() {
        let (ds, _) = synthgen::generate(2000, 9);
        let m = fit_crcca(&ds, &CrccaConfig::default()).unwrap();
        let r = m.evaluate(&ds).unwrap();
        assert!((r.normalized_objective - m.final_objective()).abs() < 1e-9);
        let sum: f64 = r.correlations.iter().sum();
        let d = m.dims() as f64;
        assert!((r.distortion - (2.0 * d - 2.0 * sum)).abs() < 1e-8);
        assert!((r.entropy_u - m.entropy_u).abs() < 1e-12);
    }

    #[test]
    fn row_order_does_not_matter() {
        let (ds, _) = synthgen::generate(2000, 4);
        let mut perm: Vec<usize> = (0..2000).collect();
        perm.reverse();
        perm.swap(3, 700);
        let shuffled = ds.select(&perm);
        let cfg = CrccaConfig::default();
        let a = fit_crcca(&ds, &cfg).unwrap().final_objective();
        let b = fit_crcca(&shuffled, &cfg).unwrap().final_objective();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn held_out_objective_close_to_train() {
        let (train, _) = synthgen::generate(5000, 31);
        let (eval, _) = synthgen::generate(1500, 32);
        let m = fit_crcca(
            &train,
            &CrccaConfig {
                levels: 9,
                ..Default::default()
            },
        )
        .unwrap();
        let r = m.evaluate(&eval).unwrap();
        assert!(r.correlations.iter().all(|c| c.is_finite()));
        assert!((r.normalized_objective - m.final_objective()).abs() < 0.05);
    }

    #[test]
    fn sweep_records_each_level() {
        let (train, _) = synthgen::generate(3000, 1);
        let (eval, _) = synthgen::generate(800, 2);
        let cfg = CrccaConfig::default();
        let pts = sweep_levels(&train, &eval, &[5, 9, 13], &cfg).unwrap();
        assert_eq!(pts.len(), 3);
        let obj: Vec<f64> = pts.iter().map(|p| p.train_objective.unwrap()).collect();
        assert!(obj[0] < obj[1] && obj[1] < obj[2], "{obj:?}");
        let again = sweep_levels(&train, &eval, &[5, 9, 13], &cfg).unwrap();
        assert_eq!(pts, again);
        assert!(sweep_levels(&train, &eval, &[], &cfg).is_err());
    }

    #[test]
    fn entropy_grows_with_nested_refinement() {
        let (train, _) = synthgen::generate(3000, 8);
        let (eval, _) = synthgen::generate(500, 9);
        let pts = sweep_levels(&train, &eval, &[2, 4, 8, 16], &CrccaConfig::default()).unwrap();
        for w in pts.windows(2) {
            assert!(w[1].entropy_u.unwrap() >= w[0].entropy_u.unwrap());
            assert!(w[1].entropy_v.unwrap() >= w[0].entropy_v.unwrap());
        }
    }

    #[test]
    fn sweep_keeps_going_after_failure() {
        let (train, _) = synthgen::generate(500, 3);
        let cfg = CrccaConfig::default();
        // levels = 1 is rejected by validation
        let pts = sweep_levels(&train, &train, &[1, 5], &cfg).unwrap();
        assert!(pts[0].error.is_some());
        assert!(pts[1].eval_objective.is_some());
    }

    #[test]
    fn config_validation() {
        let (ds, _) = synthgen::generate(100, 3);
        for bad in [
            CrccaConfig {
                levels: 1,
                ..Default::default()
            },
            CrccaConfig {
                dims: 3,
                ..Default::default()
            },
            CrccaConfig {
                max_iters: 0,
                ..Default::default()
            },
            CrccaConfig {
                tol: 0.0,
                ..Default::default()
            },
        ] {
            assert!(fit_crcca(&ds, &bad).is_err());
        }
    }
}
