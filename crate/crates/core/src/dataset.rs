//! Paired-sample ingestion, seeded splitting and moment bookkeeping.

use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg;
use crate::Matrix;

/// Two row-aligned sample matrices: row `i` of `x` pairs with row `i` of `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    x: Matrix,
    y: Matrix,
    pub x_names: Option<Vec<String>>,
    pub y_names: Option<Vec<String>>,
}

impl PairedDataset {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::invalid(format!(
                "x has {} rows but y has {}",
                x.nrows(),
                y.nrows()
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::invalid("dataset has no rows"));
        }
        if x.ncols() == 0 || y.ncols() == 0 {
            return Err(Error::invalid("dataset has no columns"));
        }
        for (name, m) in [("x", &x), ("y", &y)] {
            if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
                // column-major storage
                let (r, c) = (pos % m.nrows(), pos / m.nrows());
                return Err(Error::invalid(format!(
                    "{name} has a non-finite entry at row {r}, column {c}"
                )));
            }
        }
        Ok(Self {
            x,
            y,
            x_names: None,
            y_names: None,
        })
    }

    pub fn from_csv(x_path: &Path, y_path: &Path, has_header: bool) -> Result<Self> {
        let (x, xn) = read_csv(x_path, has_header)?;
        let (y, yn) = read_csv(y_path, has_header)?;
        let mut ds = Self::new(x, y)?;
        ds.x_names = xn;
        ds.y_names = yn;
        Ok(ds)
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &Matrix {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dx(&self) -> usize {
        self.x.ncols()
    }

    pub fn dy(&self) -> usize {
        self.y.ncols()
    }

    /// Subset of rows in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
            x_names: self.x_names.clone(),
            y_names: self.y_names.clone(),
        }
    }

    /// SHA-256 over the little-endian bytes of both matrices (row-major).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for m in [&self.x, &self.y] {
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for row in m.row_iter() {
                for v in row.iter() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Train/eval/test fractions plus the shuffling seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub eval: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.70,
            eval: 0.15,
            test: 0.15,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("train", self.train),
            ("eval", self.eval),
            ("test", self.test),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!(
                    "{name} fraction {f} outside [0, 1]"
                )));
            }
        }
        let sum = self.train + self.eval + self.test;
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "split fractions sum to {sum}, not 1"
            )));
        }
        Ok(())
    }

    /// Split sizes: train and eval rounded to nearest, test takes the remainder.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let train = (self.train * n as f64).round() as usize;
        let eval = (self.eval * n as f64).round() as usize;
        if train == 0 || eval == 0 || train + eval >= n {
            return Err(Error::invalid(format!(
                "split {:?} of {n} rows leaves an empty part",
                (self.train, self.eval, self.test)
            )));
        }
        Ok((train, eval, n - train - eval))
    }
}

/// Seeded random partition into (train, eval, test).
pub fn split(
    data: &PairedDataset,
    spec: &SplitSpec,
) -> Result<(PairedDataset, PairedDataset, PairedDataset)> {
    let (train, eval, test) = split_indices(data.n(), spec)?;
    Ok((data.select(&train), data.select(&eval), data.select(&test)))
}

/// Row indices of each part; the same permutation applies to both views.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let (ntr, nev, _) = spec.sizes(n)?;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    perm.shuffle(&mut rng);
    let test = perm.split_off(ntr + nev);
    let eval = perm.split_off(ntr);
    Ok((perm, eval, test))
}

/// Reads a numeric CSV file into an `n x d` matrix.
pub fn load_csv(path: &Path, has_header: bool) -> Result<Matrix> {
    read_csv(path, has_header).map(|(m, _)| m)
}

fn read_csv(path: &Path, has_header: bool) -> Result<(Matrix, Option<Vec<String>>)> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let names = if has_header {
        Some(
            reader
                .headers()
                .map_err(csv_err)?
                .iter()
                .map(str::to_owned)
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };

    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        rows += 1;
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::RaggedRow {
                path: path.to_path_buf(),
                row: rows,
                found: record.len(),
                expected,
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::ParseCell {
                path: path.to_path_buf(),
                row: rows,
                column: j + 1,
                cell: cell.to_owned(),
            })?;
            values.push(v);
        }
    }
    let Some(d) = width else {
        return Err(Error::NoRows {
            path: path.to_path_buf(),
        });
    };
    Ok((Matrix::from_row_slice(rows, d, &values), names))
}

/// Sample mean and `1/n`-normalized covariance of the columns.
pub fn column_moments(m: &Matrix) -> Result<(DVector<f64>, Matrix)> {
    if m.nrows() < 2 {
        return Err(Error::invalid(format!(
            "moments need at least 2 rows, got {}",
            m.nrows()
        )));
    }
    Ok((linalg::column_means(m), linalg::covariance(m)))
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_simple_csv() {
        let f = write_tmp("1,2\n3,4\n");
        let m = load_csv(f.path(), false).unwrap();
        assert_eq!(m, Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn header_is_skipped_and_kept() {
        let f = write_tmp("a,b\n1,2\n");
        let (m, names) = read_csv(f.path(), true).unwrap();
        assert_eq!(m.nrows(), 1);
        assert_eq!(names.unwrap(), vec!["a", "b"]);
    }

    #[test]
    fn empty_data_is_an_error() {
        let f = write_tmp("a,b\n");
        let err = load_csv(f.path(), true).unwrap_err();
        assert!(err.to_string().contains("no rows"), "{err}");
    }

    #[test]
    fn bad_cell_reports_position() {
        let f = write_tmp("1,2\n3,4\n5,abc\n");
        match load_csv(f.path(), false).unwrap_err() {
            Error::ParseCell { row, column, .. } => assert_eq!((row, column), (3, 2)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn ragged_rows_rejected() {
        let f = write_tmp("1,2\n3\n");
        assert!(matches!(
            load_csv(f.path(), false),
            Err(Error::RaggedRow { row: 2, .. })
        ));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_csv(Path::new("/nonexistent/x.csv"), false),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn split_sizes_follow_rounding_rule() {
        let spec = SplitSpec {
            seed: 1,
            ..Default::default()
        };
        // 0.15 * 10 rounds to 2
        assert_eq!(spec.sizes(10).unwrap(), (7, 2, 1));
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let a = split_indices(
            1000,
            &SplitSpec {
                seed: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let b = split_indices(
            1000,
            &SplitSpec {
                seed: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let c = split_indices(
            1000,
            &SplitSpec {
                seed: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn split_applies_same_permutation_to_both_views() {
        let x = Matrix::from_fn(20, 1, |i, _| i as f64);
        let y = Matrix::from_fn(20, 2, |i, j| (i * 10 + j) as f64);
        let ds = PairedDataset::new(x, y).unwrap();
        let (tr, ev, te) = split(
            &ds,
            &SplitSpec {
                seed: 9,
                ..Default::default()
            },
        )
        .unwrap();
        for part in [tr, ev, te] {
            for i in 0..part.n() {
                assert_eq!(part.y()[(i, 0)], part.x()[(i, 0)] * 10.0);
            }
        }
    }

    #[test]
    fn invalid_split_specs() {
        let bad = SplitSpec {
            train: 0.5,
            eval: 0.2,
            test: 0.2,
            seed: 0,
        };
        assert!(bad.validate().is_err());
        assert!(SplitSpec::default().sizes(2).is_err());
    }

    #[test]
    fn moments_two_point() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        let (mean, cov) = column_moments(&m).unwrap();
        assert_eq!(mean.as_slice(), &[0.0, 0.0]);
        assert_eq!(cov, Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn moments_repeated_row() {
        let m = Matrix::from_fn(5, 3, |_, j| j as f64 + 0.5);
        let (_, cov) = column_moments(&m).unwrap();
        assert!(cov.amax() < 1e-15);
        assert!(column_moments(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn moments_match_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Matrix::from_fn(100, 3, |_, _| rng.random::<f64>() * 4.0 - 1.0);
        let (mean, cov) = column_moments(&m).unwrap();
        let n = m.nrows();
        for a in 0..3 {
            let mut mu_a = 0.0;
            for i in 0..n {
                mu_a += m[(i, a)];
            }
            mu_a /= n as f64;
            assert!((mean[a] - mu_a).abs() < 1e-12);
            for b in 0..3 {
                let mut mu_b = 0.0;
                for i in 0..n {
                    mu_b += m[(i, b)];
                }
                mu_b /= n as f64;
                let mut s = 0.0;
                for i in 0..n {
                    s += (m[(i, a)] - mu_a) * (m[(i, b)] - mu_b);
                }
                assert!((cov[(a, b)] - s / n as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_non_finite() {
        let x = Matrix::from_row_slice(2, 1, &[1.0, f64::NAN]);
        let y = Matrix::zeros(2, 1);
        assert!(PairedDataset::new(x, y).is_err());
    }

    proptest! {
        #[test]
        fn split_partitions_all_rows(n in 10usize..400, seed in any::<u64>()) {
            let spec = SplitSpec { seed, ..Default::default() };
            let (a, b, c) = split_indices(n, &spec).unwrap();
            prop_assert!(!a.is_empty() && !b.is_empty() && !c.is_empty());
            let mut all: Vec<usize> = a.into_iter().chain(b).chain(c).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn covariance_is_psd(seed in any::<u64>(), n in 2usize..40, d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Matrix::from_fn(n, d, |_, _| rng.random::<f64>() * 10.0 - 5.0);
            let (_, cov) = column_moments(&m).unwrap();
            prop_assert!((&cov - cov.transpose()).amax() == 0.0);
            prop_assert!(linalg::min_eigenvalue(&cov) >= -1e-10);
        }
    }
}
