//! Repeated-split experiments: fit on train, select on eval, report on test.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ace::{fit_ace, predict_ace, AceConfig};
use crate::crcca::{fit_crcca, sweep_with_models, CrccaConfig, CrccaModel};
use crate::dataset::{split_indices, PairedDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::linear_cca::{component_correlations, fit_linear_cca};
use crate::model_io::Model;
use crate::synthgen;
use crate::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Linear,
    Ace,
    Crcca,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(Method::Linear),
            "ace" => Ok(Method::Ace),
            "crcca" => Ok(Method::Crcca),
            other => Err(Error::invalid(format!(
                "unknown method {other:?}; expected linear, ace or crcca"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    Csv {
        x: PathBuf,
        y: PathBuf,
        has_header: bool,
    },
    Synth {
        n: usize,
        seed: u64,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<PairedDataset> {
        match self {
            DataSource::Csv { x, y, has_header } => PairedDataset::from_csv(x, y, *has_header),
            DataSource::Synth { n, seed } => {
                if *n == 0 {
                    return Err(Error::invalid("synthetic n must be >= 1"));
                }
                Ok(synthgen::generate(*n, *seed).0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub data: DataSource,
    /// Repetition `r` shuffles with `split.seed + r`.
    pub split: SplitSpec,
    pub dims: usize,
    /// Candidate level counts for CRCCA; the eval split picks one.
    pub levels: Vec<usize>,
    /// Candidate neighbour counts for ACE.
    pub k: Vec<usize>,
    pub max_iters: usize,
    pub tol: f64,
    pub ridge: f64,
    pub repetitions: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Crcca,
            data: DataSource::Synth { n: 5000, seed: 0 },
            split: SplitSpec::default(),
            dims: 2,
            levels: vec![9],
            k: vec![70],
            max_iters: 100,
            tol: 1e-5,
            ridge: 0.0,
            repetitions: 1,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        if self.repetitions == 0 {
            return Err(Error::invalid("repetitions must be >= 1"));
        }
        if self.dims == 0 {
            return Err(Error::invalid("dims must be >= 1"));
        }
        match self.method {
            Method::Crcca if self.levels.is_empty() || self.levels.iter().any(|&n| n < 2) => Err(
                Error::invalid("crcca needs a non-empty levels list with every entry >= 2"),
            ),
            Method::Ace if self.k.is_empty() || self.k.contains(&0) => Err(Error::invalid(
                "ace needs a non-empty k list with every entry >= 1",
            )),
            _ if !(self.tol > 0.0) || self.max_iters == 0 || !(self.ridge >= 0.0) => Err(
                Error::invalid("need tol > 0, max_iters >= 1 and ridge >= 0"),
            ),
            _ => Ok(()),
        }
    }

    pub fn crcca_config(&self, levels: usize) -> CrccaConfig {
        CrccaConfig {
            levels,
            dims: self.dims,
            max_iters: self.max_iters,
            tol: self.tol,
            seed: self.split.seed,
            ridge: self.ridge,
        }
    }

    pub fn ace_config(&self, k: usize) -> AceConfig {
        AceConfig {
            dims: self.dims,
            k,
            max_iters: self.max_iters,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub normalized_objective: f64,
    pub correlations: Vec<f64>,
    /// Plug-in cell entropies in bits (CRCCA only).
    pub entropy_u: Option<f64>,
    pub entropy_v: Option<f64>,
    pub entropy_u_good_turing: Option<f64>,
    pub entropy_v_good_turing: Option<f64>,
    pub missing_mass_u: Option<f64>,
    pub missing_mass_v: Option<f64>,
}

impl Metrics {
    fn from_correlations(n: usize, correlations: Vec<f64>) -> Self {
        Self {
            n,
            normalized_objective: correlations.iter().sum::<f64>() / correlations.len() as f64,
            correlations,
            entropy_u: None,
            entropy_v: None,
            entropy_u_good_turing: None,
            entropy_v_good_turing: None,
            missing_mass_u: None,
            missing_mass_v: None,
        }
    }

    fn from_representations(u: &Matrix, v: &Matrix) -> Result<Self> {
        Ok(Self::from_correlations(
            u.nrows(),
            component_correlations(u, v)?,
        ))
    }

    /// Metrics of any fitted model on a dataset; entropies only for CRCCA.
    pub fn of_model(model: &Model, data: &PairedDataset) -> Result<Self> {
        match model {
            Model::Crcca(m) => Self::from_crcca(m, data),
            other => {
                let (u, v) = other.transform(data)?;
                Self::from_representations(&u, &v)
            }
        }
    }

    fn from_crcca(model: &CrccaModel, data: &PairedDataset) -> Result<Self> {
        let r = model.evaluate(data)?;
        Ok(Self {
            entropy_u: Some(r.entropy_u),
            entropy_v: Some(r.entropy_v),
            entropy_u_good_turing: Some(r.entropy_u_good_turing),
            entropy_v_good_turing: Some(r.entropy_v_good_turing),
            missing_mass_u: Some(r.missing_mass_u),
            missing_mass_v: Some(r.missing_mass_v),
            ..Self::from_correlations(r.n, r.correlations)
        })
    }
}

/// One hyperparameter setting tried in one repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub repetition: usize,
    /// Level count (CRCCA) or neighbour count (ACE).
    pub param: usize,
    pub train_objective: Option<f64>,
    pub eval_objective: Option<f64>,
    pub entropy_u: Option<f64>,
    pub entropy_v: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionResult {
    pub repetition: usize,
    pub split_seed: u64,
    /// Selected level count or neighbour count; `None` for linear CCA.
    pub selected: Option<usize>,
    pub train: Metrics,
    pub eval: Metrics,
    pub test: Metrics,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; zero for a single repetition.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub train: Summary,
    pub eval: Summary,
    pub test: Summary,
    /// Mean eval objective per candidate parameter across repetitions.
    pub curve: Vec<(usize, Summary)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub repetition: usize,
    pub error: String,
}

/// Wall-clock times; kept apart so the rest of the report is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub repetition_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool_version: String,
    pub config: ExperimentConfig,
    /// SHA-256 over both views of the loaded data.
    pub data_hash: String,
    pub n: usize,
    pub repetitions: Vec<RepetitionResult>,
    pub failures: Vec<Failure>,
    pub aggregate: Aggregate,
    pub timing: Timing,
}

impl Report {
    /// The report without its timing block, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            timing: Timing {
                total_seconds: 0.0,
                repetition_seconds: Vec::new(),
            },
            ..self.clone()
        }
    }
}

pub fn run(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    let start = Instant::now();
    let data = config.data.load()?;

    let outcomes: Vec<(Result<RepetitionResult>, f64)> = (0..config.repetitions)
        .into_par_iter()
        .map(|rep| {
            let t = Instant::now();
            let r = run_repetition(config, &data, rep).map_err(|e| Error::Repetition {
                repetition: rep,
                source: Box::new(e),
            });
            (r, t.elapsed().as_secs_f64())
        })
        .collect();

    let mut repetitions = Vec::new();
    let mut failures = Vec::new();
    let mut repetition_seconds = Vec::new();
    let mut first_error = None;
    for (rep, (outcome, secs)) in outcomes.into_iter().enumerate() {
        repetition_seconds.push(secs);
        match outcome {
            Ok(r) => repetitions.push(r),
            Err(e) => {
                log::error!("{e}");
                failures.push(Failure {
                    repetition: rep,
                    error: e.to_string(),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    if repetitions.is_empty() {
        return Err(first_error.expect("at least one repetition"));
    }

    let pick = |f: fn(&RepetitionResult) -> f64| -> Summary {
        Summary::of(&repetitions.iter().map(f).collect::<Vec<_>>()).expect("non-empty")
    };
    let aggregate = Aggregate {
        train: pick(|r| r.train.normalized_objective),
        eval: pick(|r| r.eval.normalized_objective),
        test: pick(|r| r.test.normalized_objective),
        curve: aggregate_curve(&repetitions),
    };
    let report = Report {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        data_hash: data.content_hash(),
        n: data.n(),
        repetitions,
        failures,
        aggregate,
        timing: Timing {
            total_seconds: start.elapsed().as_secs_f64(),
            repetition_seconds,
        },
    };
    if let Some(dir) = &config.output_dir {
        write_outputs(&report, dir)?;
    }
    Ok(report)
}

fn aggregate_curve(reps: &[RepetitionResult]) -> Vec<(usize, Summary)> {
    let mut params: Vec<usize> = reps
        .iter()
        .flat_map(|r| r.curve.iter().map(|p| p.param))
        .collect();
    params.sort_unstable();
    params.dedup();
    params
        .into_iter()
        .filter_map(|param| {
            let vals: Vec<f64> = reps
                .iter()
                .flat_map(|r| r.curve.iter())
                .filter(|p| p.param == param)
                .filter_map(|p| p.eval_objective)
                .collect();
            Summary::of(&vals).map(|s| (param, s))
        })
        .collect()
}

fn run_repetition(
    config: &ExperimentConfig,
    data: &PairedDataset,
    rep: usize,
) -> Result<RepetitionResult> {
    let split_seed = config.split.seed.wrapping_add(rep as u64);
    let spec = SplitSpec {
        seed: split_seed,
        ..config.split
    };
    let (tr, ev, te) = split_indices(data.n(), &spec)?;
    let (train, eval, test) = (data.select(&tr), data.select(&ev), data.select(&te));

    let (selected, metrics, curve) = match config.method {
        Method::Linear => {
            let m = fit_linear_cca(&train, config.dims, config.ridge)?;
            let eval_on = |d: &PairedDataset| {
                let (u, v) = m.project(d.x(), d.y())?;
                Metrics::from_representations(&u, &v)
            };
            (
                None,
                [eval_on(&train)?, eval_on(&eval)?, eval_on(&test)?],
                Vec::new(),
            )
        }
        Method::Crcca => {
            let fits = sweep_with_models(
                &train,
                &eval,
                &config.levels,
                &config.crcca_config(config.levels[0]),
            )?;
            let curve = fits
                .iter()
                .map(|(p, _)| CurvePoint {
                    repetition: rep,
                    param: p.levels,
                    train_objective: p.train_objective,
                    eval_objective: p.eval_objective,
                    entropy_u: p.entropy_u,
                    entropy_v: p.entropy_v,
                    error: p.error.clone(),
                })
                .collect();
            let (_, (levels, model)) = best_by_eval(
                fits.into_iter()
                    .filter_map(|(p, m)| Some((p.eval_objective?, (p.levels, m?)))),
            )
            .ok_or_else(|| Error::invalid("every level count failed"))?;
            let metrics = [
                Metrics::from_crcca(&model, &train)?,
                Metrics::from_crcca(&model, &eval)?,
                Metrics::from_crcca(&model, &test)?,
            ];
            (Some(levels), metrics, curve)
        }
        Method::Ace => {
            let mut curve = Vec::new();
            let mut fits = Vec::new();
            for &k in &config.k {
                let attempt = fit_ace(&train, &config.ace_config(k)).and_then(|m| {
                    let (u, v) = predict_ace(&m, eval.x(), eval.y())?;
                    let ev = Metrics::from_representations(&u, &v)?;
                    Ok((m, ev))
                });
                match attempt {
                    Ok((m, ev)) => {
                        curve.push(CurvePoint {
                            repetition: rep,
                            param: k,
                            train_objective: Some(m.normalized_objective()),
                            eval_objective: Some(ev.normalized_objective),
                            entropy_u: None,
                            entropy_v: None,
                            error: None,
                        });
                        fits.push((ev.normalized_objective, (k, m)));
                    }
                    Err(e) => {
                        log::warn!("ace with k={k} failed: {e}");
                        curve.push(CurvePoint {
                            repetition: rep,
                            param: k,
                            train_objective: None,
                            eval_objective: None,
                            entropy_u: None,
                            entropy_v: None,
                            error: Some(e.to_string()),
                        });
                    }
                }
            }
            let (_, (k, m)) =
                best_by_eval(fits.into_iter()).ok_or_else(|| Error::invalid("every k failed"))?;
            let train_metrics = Metrics::from_correlations(train.n(), m.correlations.clone());
            let (u, v) = predict_ace(&m, eval.x(), eval.y())?;
            let eval_metrics = Metrics::from_representations(&u, &v)?;
            let (u, v) = predict_ace(&m, test.x(), test.y())?;
            (
                Some(k),
                [
                    train_metrics,
                    eval_metrics,
                    Metrics::from_representations(&u, &v)?,
                ],
                curve,
            )
        }
    };
    let [train_m, eval_m, test_m] = metrics;
    Ok(RepetitionResult {
        repetition: rep,
        split_seed,
        selected,
        train: train_m,
        eval: eval_m,
        test: test_m,
        curve,
    })
}

/// Fits the configured method once on `train`, using the first entry of the
/// levels or k list.
pub fn fit_model(config: &ExperimentConfig, train: &PairedDataset) -> Result<Model> {
    config.validate()?;
    Ok(match config.method {
        Method::Linear => Model::Linear(fit_linear_cca(train, config.dims, config.ridge)?),
        Method::Crcca => Model::Crcca(fit_crcca(train, &config.crcca_config(config.levels[0]))?),
        Method::Ace => Model::Ace(fit_ace(train, &config.ace_config(config.k[0]))?),
    })
}

/// Highest score wins; the earliest candidate wins ties.
fn best_by_eval<T>(items: impl Iterator<Item = (f64, T)>) -> Option<(f64, T)> {
    items.fold(None, |best, (score, item)| match best {
        Some((b, _)) if b >= score => best,
        _ => Some((score, item)),
    })
}

/// Writes `report.json` and, when any curve was traced, `curve.csv`.
pub fn write_outputs(report: &Report, dir: &Path) -> Result<()> {
    let io = |source| Error::Io {
        path: dir.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Corrupt(e.to_string()))?;
    std::fs::write(dir.join("report.json"), json).map_err(io)?;

    let points: Vec<&CurvePoint> = report.repetitions.iter().flat_map(|r| &r.curve).collect();
    if points.is_empty() {
        return Ok(());
    }
    let path = dir.join("curve.csv");
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.clone(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    for p in points {
        w.serialize(p).map_err(csv_err)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth_config(method: Method) -> ExperimentConfig {
        ExperimentConfig {
            method,
            data: DataSource::Synth { n: 2000, seed: 3 },
            levels: vec![5, 9, 13],
            k: vec![40],
            repetitions: 3,
            ..Default::default()
        }
    }

    #[test]
    fn crcca_run_traces_curve_and_selects() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            output_dir: Some(dir.path().to_path_buf()),
            ..synth_config(Method::Crcca)
        };
        let r = run(&cfg).unwrap();
        assert_eq!(r.repetitions.len(), 3);
        assert_eq!(r.aggregate.curve.len(), 3);
        for rep in &r.repetitions {
            assert_eq!(rep.curve.len(), 3);
            let best = rep
                .curve
                .iter()
                .map(|p| p.eval_objective.unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(rep.eval.normalized_objective, best);
            assert!(rep.train.entropy_u.is_some());
        }
        let s = r.aggregate.test;
        assert!(s.min <= s.mean && s.mean <= s.max);
        assert!(dir.path().join("report.json").exists());
        let curve = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
        assert_eq!(curve.lines().count(), 1 + 9);
        assert!(curve.starts_with("repetition,param,train_objective"));
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = ExperimentConfig {
            repetitions: 1,
            ..synth_config(Method::Crcca)
        };
        let a = serde_json::to_string(&run(&cfg).unwrap().without_timing()).unwrap();
        let b = serde_json::to_string(&run(&cfg).unwrap().without_timing()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linear_and_ace_runs() {
        let r = run(&synth_config(Method::Linear)).unwrap();
        assert!(r.repetitions.iter().all(|x| x.selected.is_none()));
        assert!((r.aggregate.test.mean - 0.55).abs() < 0.06);
        let r = run(&synth_config(Method::Ace)).unwrap();
        assert!(r.repetitions.iter().all(|x| x.selected == Some(40)));
        assert!(r.aggregate.test.mean > 0.9);
    }

    #[test]
    fn config_validation_and_failures() {
        let bad = ExperimentConfig {
            repetitions: 0,
            ..Default::default()
        };
        assert!(run(&bad).is_err());
        let bad = ExperimentConfig {
            levels: vec![],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        // too few rows for a three-way split: every repetition fails
        let tiny = ExperimentConfig {
            data: DataSource::Synth { n: 2, seed: 0 },
            repetitions: 2,
            ..Default::default()
        };
        assert!(matches!(
            run(&tiny),
            Err(Error::Repetition { repetition: 0, .. })
        ));
    }

    #[test]
    fn config_json_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"method": "linear", "data": {"source": "synth", "n": 100, "seed": 1}}"#,
        )
        .unwrap();
        assert_eq!(cfg.method, Method::Linear);
        assert_eq!(cfg.split, SplitSpec::default());
        assert_eq!("ACE".parse::<Method>().unwrap(), Method::Ace);
        assert!("pca".parse::<Method>().is_err());
    }
}
