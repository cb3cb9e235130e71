//! Arimoto–Blahut iterations for rate distortion on finite supports, with
//! optional zero-mean and unit-second-moment constraints on the reproduction.
//!
//! For a fixed distortion multiplier `eta` the channel alternates between
//!
//! ```text
//! q(u_k | v_j) ∝ p(u_k) exp(-eta |u_k - v_j|^2 - tau·u_k - u_k' mu u_k)
//! p(u_k)       = sum_j prior_j q(u_k | v_j)
//! ```
//!
//! with `tau` and the diagonal of `mu` re-solved before each marginal update so
//! that the updated marginal meets the moment targets. An outer bisection on
//! `eta` meets a distortion bound.
//!
//! The sweeps slow down badly once support points start to die out, so the
//! fixed point is also computed directly every few sweeps: at fixed
//! multipliers it minimizes a convex function of the marginal, solved by an
//! active-set Newton method, and the multipliers are then searched against the
//! moments of that minimizer. A direct solution is only accepted once an
//! ordinary sweep leaves it in place.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::serde_matrix;
use crate::Matrix;

const SIMPLEX_TOL: f64 = 1e-10;
/// Moment accuracy requested from the multiplier search.
const MOMENT_TOL: f64 = 1e-12;
/// Looser target when the moments come from the direct fixed-point solve,
/// which is only accurate to about `STALL_TOL`.
const DIRECT_MOMENT_TOL: f64 = 1e-9;
const MAX_EXPANSIONS: usize = 80;
const MAX_ROOT_ITERS: usize = 200;
const MAX_COORDINATE_CYCLES: usize = 200;
const WARMUP_SWEEPS: usize = 50;
/// Masses below this fraction of the largest are dropped before the direct
/// fixed-point solve.
const START_FLOOR: f64 = 1e-8;
const MAX_ACTIVE_SET_STEPS: usize = 2000;
const STATIONARY_TOL: f64 = 1e-13;
/// Stationarity accepted once Newton can no longer resolve a decrease. Dense
/// Gaussian supports give Hessians too ill-conditioned to go further.
const STALL_TOL: f64 = 1e-9;
const KKT_SLACK: f64 = 1e-12;
const RANK_CUTOFF: f64 = 1e-14;
const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
/// Below this predicted decrease the objective cannot resolve a line search.
const NEGLIGIBLE_DECREASE: f64 = 1e-20;
const ENTRY_BISECTIONS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteChannel {
    /// `J x m` source points.
    #[serde(with = "serde_matrix")]
    pub source: Matrix,
    pub prior: Vec<f64>,
    /// `K x m` reproduction points.
    #[serde(with = "serde_matrix")]
    pub support: Matrix,
    /// `J x K`; row `j` is `q(. | v_j)`.
    #[serde(with = "serde_matrix")]
    pub conditional: Matrix,
    pub marginal: Vec<f64>,
    pub eta: f64,
    pub tau: Vec<f64>,
    /// Second-moment multiplier; only its diagonal is searched.
    #[serde(with = "serde_matrix")]
    pub mu: Matrix,
}

impl DiscreteChannel {
    /// Channel with uniform conditionals and zero multipliers.
    pub fn new(source: Matrix, prior: Vec<f64>, support: Matrix) -> Result<Self> {
        let (j, m, k) = (source.nrows(), source.ncols(), support.nrows());
        if j == 0 || k == 0 || m == 0 {
            return Err(Error::invalid("source and support must be non-empty"));
        }
        if support.ncols() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: support.ncols(),
            });
        }
        if prior.len() != j {
            return Err(Error::DimensionMismatch {
                expected: j,
                found: prior.len(),
            });
        }
        if prior.iter().any(|p| !(*p >= 0.0))
            || (prior.iter().sum::<f64>() - 1.0).abs() > SIMPLEX_TOL
        {
            return Err(Error::invalid("prior must be a probability vector"));
        }
        if source.iter().chain(support.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("source and support points must be finite"));
        }
        Ok(Self {
            source,
            prior,
            support,
            conditional: Matrix::from_element(j, k, 1.0 / k as f64),
            marginal: vec![1.0 / k as f64; k],
            eta: 0.0,
            tau: vec![0.0; m],
            mu: Matrix::zeros(m, m),
        })
    }

    pub fn dim(&self) -> usize {
        self.source.ncols()
    }

    /// Recomputes the conditional from the current marginal and multipliers.
    pub fn conditional_update(&self) -> Result<Self> {
        let conditional = self.tilted(&self.tau, &self.mu)?;
        Ok(Self {
            conditional,
            ..self.clone()
        })
    }

    /// Sets the marginal to the prior-weighted average of the conditionals.
    pub fn marginal_update(&self) -> Self {
        Self {
            marginal: marginal_of(&self.prior, &self.conditional),
            ..self.clone()
        }
    }

    /// Solves for `tau` and diag(`mu`) so that the channel after one
    /// conditional and marginal update has the given per-coordinate mean and
    /// second moment. Returns that updated channel.
    pub fn solve_multipliers(&self, target_mean: f64, target_second_moment: f64) -> Result<Self> {
        let (tau, mu) = fit_multipliers(
            self.dim(),
            self.tau.clone(),
            self.mu.clone(),
            (target_mean, target_second_moment),
            MOMENT_TOL,
            &mut |tau, mu| self.moments_after(tau, mu),
        )?;
        let conditional = self.tilted(&tau, &mu)?;
        Ok(Self {
            marginal: marginal_of(&self.prior, &conditional),
            conditional,
            tau,
            mu,
            ..self.clone()
        })
    }

    fn moments_after(&self, tau: &[f64], mu: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
        let q = self.tilted(tau, mu)?;
        Ok(moments(&self.support, &marginal_of(&self.prior, &q)))
    }

    fn tilted(&self, tau: &[f64], mu: &Matrix) -> Result<Matrix> {
        self.tilted_with(&self.marginal, tau, mu)
    }

    fn penalty(&self, tau: &[f64], mu: &Matrix) -> Vec<f64> {
        (0..self.support.nrows())
            .map(|k| {
                let u = self.support.row(k);
                let lin: f64 = u.iter().zip(tau).map(|(a, t)| a * t).sum();
                lin + (u * mu * u.transpose())[(0, 0)]
            })
            .collect()
    }

    fn tilted_with(&self, marginal: &[f64], tau: &[f64], mu: &Matrix) -> Result<Matrix> {
        let (j_count, k_count) = (self.source.nrows(), self.support.nrows());
        let penalty = self.penalty(tau, mu);
        let log_marginal: Vec<f64> = marginal.iter().map(|p| p.ln()).collect();
        let mut q = Matrix::zeros(j_count, k_count);
        let mut logw = vec![0.0; k_count];
        for j in 0..j_count {
            let v = self.source.row(j);
            for k in 0..k_count {
                let d2 = (self.support.row(k) - v).norm_squared();
                logw[k] = log_marginal[k] - self.eta * d2 - penalty[k];
            }
            let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !top.is_finite() {
                return Err(Error::VanishingConditional { row: j });
            }
            let total: f64 = logw.iter().map(|w| (w - top).exp()).sum();
            for k in 0..k_count {
                q[(j, k)] = (logw[k] - top).exp() / total;
            }
        }
        Ok(q)
    }

    /// Max-abs change of conditional and marginal under one more update pair.
    pub fn fixed_point_residual(&self) -> Result<f64> {
        let next = self.conditional_update()?.marginal_update();
        Ok(max_abs_change(self, &next))
    }

    /// `E[U]` and `E[U_c^2]` per coordinate under the marginal.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        moments(&self.support, &self.marginal)
    }

    /// `E|U - V|^2` under the prior and conditional.
    pub fn distortion(&self) -> f64 {
        let mut total = 0.0;
        for j in 0..self.source.nrows() {
            let v = self.source.row(j);
            for k in 0..self.support.nrows() {
                total += self.prior[j]
                    * self.conditional[(j, k)]
                    * (self.support.row(k) - v).norm_squared();
            }
        }
        total
    }

    /// Mutual information between source and reproduction in bits, as the
    /// prior-weighted KL divergence of each conditional from the joint's
    /// reproduction marginal.
    pub fn rate_bits(&self) -> f64 {
        let pu = marginal_of(&self.prior, &self.conditional);
        let mut nats = 0.0;
        for j in 0..self.source.nrows() {
            for (k, &p) in pu.iter().enumerate() {
                let q = self.conditional[(j, k)];
                if q > 0.0 {
                    nats += self.prior[j] * q * (q / p).ln();
                }
            }
        }
        (nats / std::f64::consts::LN_2).max(0.0)
    }

    /// The same quantity as `H(U) - H(U | V)`.
    pub fn rate_bits_entropy_form(&self) -> f64 {
        let pu = marginal_of(&self.prior, &self.conditional);
        let h_u: f64 = pu.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
        let mut h_cond = 0.0;
        for j in 0..self.source.nrows() {
            for q in self.conditional.row(j).iter().filter(|&&q| q > 0.0) {
                h_cond -= self.prior[j] * q * q.ln();
            }
        }
        (h_u - h_cond) / std::f64::consts::LN_2
    }
}

type MomentFn<'a> = dyn FnMut(&[f64], &Matrix) -> Result<(Vec<f64>, Vec<f64>)> + 'a;

/// Cyclic search over coordinates: for each coordinate, `tau_c` is solved
/// inside a root search on `mu_cc`. Both moments are non-increasing in their
/// own multiplier, so each one-dimensional search is a bracketed root.
fn fit_multipliers(
    m: usize,
    mut tau: Vec<f64>,
    mut mu: Matrix,
    (target_mean, target_second): (f64, f64),
    tol: f64,
    moments_of: &mut MomentFn<'_>,
) -> Result<(Vec<f64>, Matrix)> {
    let mut cycles = 0;
    loop {
        let (mean, second) = moments_of(&tau, &mu)?;
        let violation = mean
            .iter()
            .map(|v| (v - target_mean).abs())
            .chain(second.iter().map(|v| (v - target_second).abs()))
            .fold(0.0, f64::max);
        if violation <= tol {
            return Ok((tau, mu));
        }
        cycles += 1;
        if cycles > MAX_COORDINATE_CYCLES {
            return Err(Error::NoConvergence {
                iterations: cycles,
                residual: violation,
            });
        }
        for c in 0..m {
            solve_tau(c, &mut tau, &mu, target_mean, tol, moments_of)?;
            let second = moments_of(&tau, &mu)?.1[c];
            if (second - target_second).abs() <= tol {
                continue;
            }
            let mut inner_tau = tau.clone();
            let mu_c = decreasing_root(
                |val| {
                    let mut trial = mu.clone();
                    trial[(c, c)] = val;
                    solve_tau(c, &mut inner_tau, &trial, target_mean, tol, moments_of)?;
                    Ok(moments_of(&inner_tau, &trial)?.1[c] - target_second)
                },
                mu[(c, c)],
                tol,
                "second moment",
            )?;
            mu[(c, c)] = mu_c;
            solve_tau(c, &mut tau, &mu, target_mean, tol, moments_of)?;
        }
    }
}

fn solve_tau(
    c: usize,
    tau: &mut [f64],
    mu: &Matrix,
    target: f64,
    tol: f64,
    moments_of: &mut MomentFn<'_>,
) -> Result<()> {
    let mut trial = tau.to_vec();
    tau[c] = decreasing_root(
        |val| {
            trial[c] = val;
            Ok(moments_of(&trial, mu)?.0[c] - target)
        },
        tau[c],
        tol,
        "mean",
    )?;
    Ok(())
}

fn marginal_of(prior: &[f64], conditional: &Matrix) -> Vec<f64> {
    (0..conditional.ncols())
        .map(|k| {
            prior
                .iter()
                .enumerate()
                .map(|(j, p)| p * conditional[(j, k)])
                .sum()
        })
        .collect()
}

fn moments(support: &Matrix, marginal: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = support.ncols();
    let mut mean = vec![0.0; m];
    let mut second = vec![0.0; m];
    for (k, p) in marginal.iter().enumerate() {
        for c in 0..m {
            let u = support[(k, c)];
            mean[c] += p * u;
            second[c] += p * u * u;
        }
    }
    (mean, second)
}

fn max_abs_change(a: &DiscreteChannel, b: &DiscreteChannel) -> f64 {
    let dq = (&a.conditional - &b.conditional).amax();
    let dp = a
        .marginal
        .iter()
        .zip(&b.marginal)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    dq.max(dp)
}

/// Root of a continuous non-increasing function: the bracket is grown from
/// `start` by doubling steps, then narrowed by false position with the
/// Illinois correction, falling back to bisection when an iterate leaves the
/// bracket.
fn decreasing_root(
    mut f: impl FnMut(f64) -> Result<f64>,
    start: f64,
    tol: f64,
    what: &str,
) -> Result<f64> {
    let f0 = f(start)?;
    if f0.abs() <= tol {
        return Ok(start);
    }
    let dir = if f0 > 0.0 { 1.0 } else { -1.0 };
    let (mut a, mut fa) = (start, f0);
    let (mut b, mut fb);
    let mut step = 0.01;
    let mut expansions = 0;
    loop {
        b = start + dir * step;
        fb = f(b)?;
        if fb.abs() <= tol {
            return Ok(b);
        }
        if fb.signum() != fa.signum() {
            break;
        }
        a = b;
        fa = fb;
        step *= 2.0;
        expansions += 1;
        if expansions > MAX_EXPANSIONS {
            return Err(Error::Infeasible(format!(
                "{what} target not reachable on this reproduction support"
            )));
        }
    }
    let mut side = 0;
    for _ in 0..MAX_ROOT_ITERS {
        let mut c = (a * fb - b * fa) / (fb - fa);
        if !(c > a.min(b) && c < a.max(b)) {
            c = 0.5 * (a + b);
        }
        let fc = f(c)?;
        if fc.abs() <= tol || (b - a).abs() <= 4.0 * f64::EPSILON * (1.0 + c.abs()) {
            return Ok(c);
        }
        if fc.signum() == fb.signum() {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        }
    }
    Err(Error::NoConvergence {
        iterations: MAX_ROOT_ITERS,
        residual: fa.abs().min(fb.abs()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdOptions {
    /// Enforce `E[U] = 0` and `E[U_c^2] = 1`.
    pub constrained: bool,
    pub max_sweeps: usize,
    /// Fixed-point tolerance on the max-abs channel change per sweep.
    pub tol: f64,
    /// Accept a distortion in `[bound - distortion_tol, bound]`.
    pub distortion_tol: f64,
    pub max_eta: f64,
    pub max_bisections: usize,
}

impl Default for RdOptions {
    fn default() -> Self {
        Self {
            constrained: true,
            max_sweeps: 200_000,
            tol: 1e-9,
            distortion_tol: 1e-6,
            max_eta: 1e6,
            max_bisections: 200,
        }
    }
}

/// Runs update sweeps at the channel's current multipliers until the channel
/// stops moving. Returns the channel and the number of sweeps.
///
/// Sweeps alone converge sublinearly once support points start losing their
/// mass. So every `WARMUP_SWEEPS` sweeps the fixed point is also computed
/// directly (see [`DiscreteChannel::stationary_marginal`]), with the
/// multipliers searched against the moments of that fixed point; it is
/// accepted once one more sweep leaves it in place.
pub fn solve_fixed_eta(
    channel: DiscreteChannel,
    opts: &RdOptions,
) -> Result<(DiscreteChannel, usize)> {
    let step = |ch: &DiscreteChannel| -> Result<DiscreteChannel> {
        if opts.constrained {
            ch.solve_multipliers(0.0, 1.0)
        } else {
            Ok(ch.conditional_update()?.marginal_update())
        }
    };
    let mut ch = channel;
    let mut residual = f64::INFINITY;
    let mut sweeps = 0;
    while sweeps < opts.max_sweeps {
        let next = step(&ch)?;
        sweeps += 1;
        residual = max_abs_change(&ch, &next);
        ch = next;
        if residual <= opts.tol {
            return Ok((ch, sweeps));
        }
        if sweeps % WARMUP_SWEEPS != 0 {
            continue;
        }
        let Ok(direct) = ch.direct_fixed_point(opts.constrained) else {
            continue;
        };
        let next = step(&direct)?;
        sweeps += 1;
        if max_abs_change(&direct, &next) <= opts.tol {
            return Ok((next, sweeps));
        }
    }
    Err(Error::NoConvergence {
        iterations: sweeps,
        residual,
    })
}

impl DiscreteChannel {
    fn direct_fixed_point(&self, constrained: bool) -> Result<Self> {
        let mut warm = self.marginal.clone();
        let (tau, mu) = if constrained {
            fit_multipliers(
                self.dim(),
                self.tau.clone(),
                self.mu.clone(),
                (0.0, 1.0),
                DIRECT_MOMENT_TOL,
                &mut |tau, mu| {
                    warm = self.stationary_marginal(&warm, tau, mu)?;
                    Ok(moments(&self.support, &warm))
                },
            )?
        } else {
            (self.tau.clone(), self.mu.clone())
        };
        let marginal = self.stationary_marginal(&warm, &tau, &mu)?;
        let conditional = self.tilted_with(&marginal, &tau, &mu)?;
        Ok(Self {
            marginal: marginal_of(&self.prior, &conditional),
            conditional,
            tau,
            mu,
            ..self.clone()
        })
    }

    /// Fixed point of the update pair at the given multipliers, started
    /// from `start`.
    ///
    /// With `a_jk = exp(-eta |u_k - v_j|^2 - tau·u_k - u_k' mu u_k)` the fixed
    /// points are the minimizers over the simplex of the convex function
    /// `G(p) = -sum_j prior_j ln(sum_k p_k a_jk)`, whose gradient is minus
    /// the update factors `c_k = T_k / p_k`. This runs a primal active-set
    /// Newton method on `G`: Newton steps on a working set of points, points
    /// leaving when their mass reaches zero, and the empty point with the
    /// largest `c_k > 1` entering once the working set is stationary.
    pub fn stationary_marginal(&self, start: &[f64], tau: &[f64], mu: &Matrix) -> Result<Vec<f64>> {
        let (j_count, k_count) = (self.source.nrows(), self.support.nrows());
        let penalty = self.penalty(tau, mu);
        let mut a = Matrix::zeros(j_count, k_count);
        for j in 0..j_count {
            let v = self.source.row(j);
            for k in 0..k_count {
                a[(j, k)] = -self.eta * (self.support.row(k) - v).norm_squared() - penalty[k];
            }
            let top = a.row(j).max();
            if !top.is_finite() {
                return Err(Error::VanishingConditional { row: j });
            }
            for k in 0..k_count {
                a[(j, k)] = (a[(j, k)] - top).exp();
            }
        }
        let mixture = |p: &[f64]| -> Vec<f64> {
            (0..j_count)
                .map(|j| {
                    (0..k_count)
                        .filter(|&k| p[k] > 0.0)
                        .map(|k| a[(j, k)] * p[k])
                        .sum()
                })
                .collect()
        };
        let objective = |f: &[f64]| -> f64 {
            f.iter()
                .zip(&self.prior)
                .map(|(f, w)| if *w > 0.0 { -w * f.ln() } else { 0.0 })
                .sum()
        };

        let top = start.iter().copied().fold(0.0, f64::max);
        let mut p: Vec<f64> = start
            .iter()
            .map(|&v| if v > START_FLOOR * top { v } else { 0.0 })
            .collect();
        // every source needs a point it can reach
        let f = mixture(&p);
        for j in 0..j_count {
            if self.prior[j] > 0.0 && f[j] <= f64::MIN_POSITIVE {
                let best = (0..k_count)
                    .max_by(|&x, &y| a[(j, x)].total_cmp(&a[(j, y)]))
                    .unwrap_or(0);
                p[best] = p[best].max(START_FLOOR * top);
            }
        }
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        let mut working: Vec<bool> = p.iter().map(|&v| v > 0.0).collect();
        // set when the last Newton step predicted no resolvable decrease
        let mut stalled = false;

        for _ in 0..MAX_ACTIVE_SET_STEPS {
            let f = mixture(&p);
            let factor: Vec<f64> = (0..k_count)
                .map(|k| (0..j_count).map(|j| self.prior[j] * a[(j, k)] / f[j]).sum())
                .collect();
            // empty points that would shrink further leave the set
            for k in 0..k_count {
                if working[k] && p[k] == 0.0 && factor[k] <= 1.0 {
                    working[k] = false;
                }
            }
            let set: Vec<usize> = (0..k_count).filter(|&k| working[k]).collect();
            let deviation = set
                .iter()
                .map(|&k| (factor[k] - 1.0).abs())
                .fold(0.0, f64::max);
            if deviation <= STATIONARY_TOL || (stalled && deviation <= STALL_TOL) {
                let entering = (0..k_count)
                    .filter(|&k| !working[k] && factor[k] > 1.0 + KKT_SLACK)
                    .max_by(|&x, &y| factor[x].total_cmp(&factor[y]));
                let Some(k) = entering else {
                    return Ok(p);
                };
                // move mass toward the entering point along e_k - p, where
                // the objective falls at rate c_k - 1; the step is the root
                // of the directional derivative, found by bisection
                let slope_at = |t: f64| -> f64 {
                    (0..j_count)
                        .map(|j| {
                            let gap = a[(j, k)] - f[j];
                            -self.prior[j] * gap / (f[j] + t * gap)
                        })
                        .sum()
                };
                let t = if slope_at(1.0) <= 0.0 {
                    1.0
                } else {
                    let (mut lo, mut hi) = (0.0, 1.0);
                    for _ in 0..ENTRY_BISECTIONS {
                        let mid = 0.5 * (lo + hi);
                        if slope_at(mid) < 0.0 {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    lo
                };
                p.iter_mut().for_each(|v| *v *= 1.0 - t);
                p[k] += t;
                stalled = false;
                for l in 0..k_count {
                    working[l] = p[l] > 0.0;
                }
                continue;
            }

            // Newton step on the working set, keeping sum(p) = 1
            let n = set.len();
            let mut kkt = Matrix::zeros(n + 1, n + 1);
            let mut rhs = DVector::zeros(n + 1);
            for j in 0..j_count {
                let w = self.prior[j] / (f[j] * f[j]);
                if w == 0.0 {
                    continue;
                }
                for (r, &k) in set.iter().enumerate() {
                    let wk = w * a[(j, k)];
                    for (s, &l) in set.iter().enumerate().skip(r) {
                        kkt[(r, s)] += wk * a[(j, l)];
                    }
                }
            }
            for r in 0..n {
                for s in 0..r {
                    kkt[(r, s)] = kkt[(s, r)];
                }
                kkt[(r, n)] = 1.0;
                kkt[(n, r)] = 1.0;
                rhs[r] = factor[set[r]];
            }
            let svd = kkt.svd(true, true);
            let cutoff = RANK_CUTOFF * svd.singular_values.max();
            let slope_of =
                |d: &[f64]| -> f64 { -set.iter().zip(d).map(|(&k, d)| factor[k] * d).sum::<f64>() };
            let mut d: Vec<f64> = match svd.solve(&rhs, cutoff) {
                Ok(sol) if sol.iter().all(|v| v.is_finite()) => {
                    sol.rows(0, n).iter().copied().collect()
                }
                _ => vec![0.0; n],
            };
            let mut slope = slope_of(&d);
            if !(slope < 0.0) {
                // the update itself is a descent direction
                d = set.iter().map(|&k| p[k] * (factor[k] - 1.0)).collect();
                slope = slope_of(&d);
            }

            // largest step keeping the masses nonnegative
            let mut t_max = f64::INFINITY;
            for (r, &k) in set.iter().enumerate() {
                if d[r] < 0.0 {
                    t_max = t_max.min(p[k] / -d[r]);
                }
            }
            let trial_at = |t: f64| -> Vec<f64> {
                let mut trial = p.clone();
                for (r, &k) in set.iter().enumerate() {
                    trial[k] = (p[k] + t * d[r]).max(0.0);
                }
                trial
            };
            let base = objective(&f);
            let mut t = t_max.min(1.0);
            stalled = -slope <= NEGLIGIBLE_DECREASE;
            let mut accepted = stalled;
            for _ in 0..MAX_BACKTRACKS {
                if accepted {
                    break;
                }
                if objective(&mixture(&trial_at(t))) <= base + ARMIJO * t * slope {
                    accepted = true;
                } else {
                    t *= 0.5;
                }
            }
            if !accepted {
                return Err(Error::NoConvergence {
                    iterations: 0,
                    residual: deviation,
                });
            }
            let mut next = trial_at(t);
            if t >= t_max {
                for (r, &k) in set.iter().enumerate() {
                    if d[r] < 0.0 && p[k] / -d[r] <= t_max * (1.0 + 1e-12) {
                        next[k] = 0.0;
                    }
                }
            }
            for k in 0..k_count {
                if working[k] && next[k] == 0.0 && p[k] > 0.0 {
                    working[k] = false;
                }
            }
            let total: f64 = next.iter().sum();
            p = next.iter().map(|v| v / total).collect();
        }
        Err(Error::NoConvergence {
            iterations: MAX_ACTIVE_SET_STEPS,
            residual: f64::NAN,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaStep {
    pub eta: f64,
    pub distortion: f64,
    pub rate_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdSolution {
    pub channel: DiscreteChannel,
    pub rate_bits: f64,
    pub distortion: f64,
    pub mean: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub fixed_point_residual: f64,
    /// Every `eta` tried, in order.
    pub eta_trace: Vec<EtaStep>,
}

/// Minimizes the rate subject to `E|U - V|^2 <= bound` by bisection on `eta`.
pub fn solve_rd(
    prior: &[f64],
    source: &Matrix,
    support: &Matrix,
    bound: f64,
    opts: &RdOptions,
) -> Result<RdSolution> {
    if !(bound > 0.0) {
        return Err(Error::invalid(format!(
            "distortion bound must be positive, got {bound}"
        )));
    }
    let start = DiscreteChannel::new(source.clone(), prior.to_vec(), support.clone())?;
    let mut trace = Vec::new();
    let mut run = |ch: &DiscreteChannel, eta: f64| -> Result<DiscreteChannel> {
        let (solved, _) = solve_fixed_eta(DiscreteChannel { eta, ..ch.clone() }, opts)?;
        trace.push(EtaStep {
            eta,
            distortion: solved.distortion(),
            rate_bits: solved.rate_bits(),
        });
        Ok(solved)
    };

    let zero = run(&start, 0.0)?;
    if zero.distortion() <= bound {
        return finish(zero, trace);
    }
    let mut lo = (0.0, zero);
    let mut eta = 1.0;
    let mut hi = loop {
        let ch = run(&lo.1, eta)?;
        if ch.distortion() <= bound {
            break (eta, ch);
        }
        if eta >= opts.max_eta {
            return Err(Error::DistortionTooSmall {
                bound,
                achievable: ch.distortion(),
            });
        }
        lo = (eta, ch);
        eta = (eta * 2.0).min(opts.max_eta);
    };
    for _ in 0..opts.max_bisections {
        if hi.1.distortion() >= bound - opts.distortion_tol {
            break;
        }
        let mid = 0.5 * (lo.0 + hi.0);
        if mid <= lo.0 || mid >= hi.0 {
            break;
        }
        let ch = run(&hi.1, mid)?;
        if ch.distortion() <= bound {
            hi = (mid, ch);
        } else {
            lo = (mid, ch);
        }
    }
    finish(hi.1, trace)
}

fn finish(channel: DiscreteChannel, eta_trace: Vec<EtaStep>) -> Result<RdSolution> {
    let (mean, second_moment) = channel.moments();
    Ok(RdSolution {
        rate_bits: channel.rate_bits(),
        distortion: channel.distortion(),
        fixed_point_residual: channel.fixed_point_residual()?,
        mean,
        second_moment,
        channel,
        eta_trace,
    })
}

/// Evenly spaced reproduction grid covering the source range widened by one
/// prior standard deviation on each side, `points` per coordinate.
pub fn default_support(source: &Matrix, prior: &[f64], points: usize) -> Result<Matrix> {
    if points == 0 {
        return Err(Error::invalid("support needs at least one point per axis"));
    }
    let m = source.ncols();
    let axes: Vec<Vec<f64>> = (0..m)
        .map(|c| {
            let col = source.column(c);
            let mean: f64 = col.iter().zip(prior).map(|(v, p)| v * p).sum();
            let var: f64 = col
                .iter()
                .zip(prior)
                .map(|(v, p)| p * (v - mean).powi(2))
                .sum();
            let sd = var.sqrt();
            let lo = col.min() - sd;
            let hi = col.max() + sd;
            if points == 1 {
                vec![mean]
            } else {
                (0..points)
                    .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
                    .collect()
            }
        })
        .collect();
    let total = points
        .checked_pow(m as u32)
        .ok_or_else(|| Error::invalid("support grid too large"))?;
    Ok(Matrix::from_fn(total, m, |row, c| {
        let idx = (row / points.pow((m - 1 - c) as u32)) % points;
        axes[c][idx]
    }))
}
