//! Simple Good-Turing (Gale–Sampson) smoothing and plug-in entropy.
//!
//! Used to estimate the entropy of quantizer cell occupancies when many cells
//! are seen only a handful of times. The missing mass `N1 / n` is reported
//! separately and is not folded into the entropy.

use std::collections::BTreeMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// z-score of the Turing/LGT switching rule.
const CONFIDENCE_FACTOR: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodTuringEstimate {
    /// Observed count of each symbol, in input order.
    pub counts: Vec<usize>,
    /// Smoothed probability of each symbol, aligned with `counts`.
    pub probabilities: Vec<f64>,
    /// `r -> N_r`.
    pub counts_of_counts: BTreeMap<usize, usize>,
    /// Smoothed count `r*` for each observed frequency `r`.
    pub adjusted_counts: BTreeMap<usize, f64>,
    /// Estimated total probability of unseen symbols, `N1 / n`.
    pub missing_mass: f64,
    pub total: usize,
}

/// Smooths the given symbol counts. Every count must be positive.
pub fn good_turing(counts: &[usize]) -> Result<GoodTuringEstimate> {
    if counts.is_empty() {
        return Err(Error::invalid("good-turing needs at least one symbol"));
    }
    if counts.contains(&0) {
        return Err(Error::invalid("good-turing counts must be positive"));
    }
    let total: usize = counts.iter().sum();
    let mut counts_of_counts = BTreeMap::new();
    for &c in counts {
        *counts_of_counts.entry(c).or_insert(0usize) += 1;
    }
    let n1 = counts_of_counts.get(&1).copied().unwrap_or(0);
    let missing_mass = n1 as f64 / total as f64;

    let adjusted_counts = if n1 == 0 || counts_of_counts.len() == 1 {
        // no singletons (or nothing to regress on): empirical counts
        counts_of_counts.keys().map(|&r| (r, r as f64)).collect()
    } else {
        smoothed_counts(&counts_of_counts)
    };

    let n_prime: f64 = counts_of_counts
        .iter()
        .map(|(r, nr)| *nr as f64 * adjusted_counts[r])
        .sum();
    let observed_mass = 1.0 - missing_mass;
    let probabilities = counts
        .iter()
        .map(|c| observed_mass * adjusted_counts[c] / n_prime)
        .collect();
    Ok(GoodTuringEstimate {
        counts: counts.to_vec(),
        probabilities,
        counts_of_counts,
        adjusted_counts,
        missing_mass,
        total,
    })
}

/// Convenience wrapper over a symbol-to-count map; returns the estimate and
/// the symbols in the order used.
pub fn good_turing_map<K: Clone + Eq + Hash + Ord>(
    counts: &std::collections::HashMap<K, usize>,
) -> Result<(Vec<K>, GoodTuringEstimate)> {
    let mut keys: Vec<K> = counts.keys().cloned().collect();
    keys.sort();
    let c: Vec<usize> = keys.iter().map(|k| counts[k]).collect();
    Ok((keys, good_turing(&c)?))
}

fn smoothed_counts(nr: &BTreeMap<usize, usize>) -> BTreeMap<usize, f64> {
    let rs: Vec<usize> = nr.keys().copied().collect();
    let m = rs.len();

    // Z_r = N_r / (0.5 (t - q)) averages N_r over the gap to its neighbours.
    let mut log_r = Vec::with_capacity(m);
    let mut log_z = Vec::with_capacity(m);
    for (j, &r) in rs.iter().enumerate() {
        let q = if j == 0 { 0.0 } else { rs[j - 1] as f64 };
        let t = if j + 1 == m {
            2.0 * r as f64 - q
        } else {
            rs[j + 1] as f64
        };
        let z = 2.0 * nr[&r] as f64 / (t - q);
        log_r.push((r as f64).ln());
        log_z.push(z.ln());
    }
    let mx = log_r.iter().sum::<f64>() / m as f64;
    let my = log_z.iter().sum::<f64>() / m as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in log_r.iter().zip(&log_z) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    let slope = sxy / sxx;
    if slope > -1.0 {
        log::debug!("good-turing log-log slope {slope:.3} > -1; estimates may be unreliable");
    }

    let mut out = BTreeMap::new();
    let mut use_lgt = false;
    for &r in &rs {
        let rf = r as f64;
        // (r+1) S(r+1) / S(r) with S(r) = exp(a + b ln r)
        let lgt = (rf + 1.0) * ((rf + 1.0) / rf).powf(slope);
        if !use_lgt {
            match nr.get(&(r + 1)) {
                None => use_lgt = true,
                Some(&next) => {
                    let (next, cur) = (next as f64, nr[&r] as f64);
                    let turing = (rf + 1.0) * next / cur;
                    let sd = ((rf + 1.0).powi(2) * next / (cur * cur) * (1.0 + next / cur)).sqrt();
                    if (turing - lgt).abs() <= CONFIDENCE_FACTOR * sd {
                        use_lgt = true;
                    } else {
                        out.insert(r, turing);
                    }
                }
            }
        }
        if use_lgt {
            out.insert(r, lgt);
        }
    }
    out
}

/// `-sum p log2 p` over observed symbols; the missing mass is excluded.
pub fn entropy_bits(est: &GoodTuringEstimate) -> f64 {
    let h: f64 = est
        .probabilities
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.log2())
        .sum();
    h.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_mass_is_singleton_fraction() {
        let est = good_turing(&[1, 1, 2]).unwrap();
        assert_eq!(est.missing_mass, 0.5);
        let total: f64 = est.probabilities.iter().sum::<f64>() + est.missing_mass;
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_singletons_gives_empirical() {
        let est = good_turing(&[2, 3, 5, 10]).unwrap();
        assert_eq!(est.missing_mass, 0.0);
        for (p, c) in est.probabilities.iter().zip(&est.counts) {
            assert!((p - *c as f64 / 20.0).abs() < 1e-15);
        }
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy_bits(&good_turing(&[7]).unwrap()), 0.0);
        let h = entropy_bits(&good_turing(&[25, 25, 25, 25]).unwrap());
        assert!((h - 2.0).abs() < 1e-9);
    }

    #[test]
    fn only_singletons_puts_all_mass_on_unseen() {
        let est = good_turing(&[1, 1, 1]).unwrap();
        assert_eq!(est.missing_mass, 1.0);
        assert!(est.probabilities.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn textbook_example_is_monotone_and_normalized() {
        // counts-of-counts 1:10, 2:5, 3:3, 4:2, 6:1
        let mut counts = vec![1; 10];
        counts.extend([2; 5]);
        counts.extend([3; 3]);
        counts.extend([4; 2]);
        counts.push(6);
        let est = good_turing(&counts).unwrap();
        let n: usize = counts.iter().sum();
        assert_eq!(est.total, n);
        assert!((est.missing_mass - 10.0 / n as f64).abs() < 1e-15);
        let sum: f64 = est.probabilities.iter().sum();
        assert!((sum + est.missing_mass - 1.0).abs() < 1e-12);
        // singletons are discounted below their empirical share
        assert!(est.probabilities[0] < 1.0 / n as f64);
    }

    #[test]
    fn errors() {
        assert!(good_turing(&[]).is_err());
        assert!(good_turing(&[0, 2]).is_err());
    }
}
