// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crcca::crcca::sweep_levels;
use crcca::dataset::{load_csv, split_indices};
use crcca::experiment::write_outputs;
use crcca::rd_solver::default_support;
use crcca::{
    fit_model, load_model, run, save_model, solve_rd, synthgen, DataSource, ExperimentConfig,
    Matrix, Method, Metrics, PairedDataset, RdOptions,
};

#[derive(Parser)]
#[command(
    name = "crcca",
    version,
    about = "Compressed-representation CCA experiments"
)]
struct Cli {
    /// Worker threads for parallel repetitions and neighbour searches.
    #[arg(long, env = "CRCCA_THREADS", global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the quarter-circle benchmark as x.csv, y.csv and labels.csv.
    Synth {
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one model on the whole dataset and save it as JSON.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved model on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Write the metrics JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit CRCCA for each level count on a train split and score the eval split.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        params: ParamArgs,
        /// Curve CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rate distortion with zero-mean, unit-second-moment reproductions.
    RdSolve {
        /// CSV of source points; the last column is the prior weight.
        #[arg(long)]
        prior: PathBuf,
        /// CSV of reproduction points; a grid around the source when absent.
        #[arg(long)]
        support: Option<PathBuf>,
        /// Grid points per axis for the default support.
        #[arg(long, default_value_t = 101)]
        points: usize,
        #[arg(long)]
        distortion: f64,
        /// Drop the moment constraints.
        #[arg(long)]
        unconstrained: bool,
        #[arg(long)]
        header: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeated-split experiment; writes report.json and curve.csv.
    Run {
        /// Experiment config JSON; flags given on the command line override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, requires = "y", conflicts_with = "synth")]
    x: Option<PathBuf>,
    #[arg(long, requires = "x")]
    y: Option<PathBuf>,
    /// The CSV files start with a header row.
    #[arg(long)]
    header: bool,
    /// Use n synthetic samples instead of CSV files.
    #[arg(long)]
    synth: Option<usize>,
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
}

#[derive(Args)]
struct ParamArgs {
    #[arg(long)]
    method: Option<Method>,
    /// Quantization level counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<usize>>,
    /// Neighbour counts for ACE, comma separated.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    ridge: Option<f64>,
    /// Split seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl DataArgs {
    fn source(&self) -> Option<DataSource> {
        match (&self.x, &self.y, self.synth) {
            (Some(x), Some(y), _) => Some(DataSource::Csv {
                x: x.clone(),
                y: y.clone(),
                has_header: self.header,
            }),
            (_, _, Some(n)) => Some(DataSource::Synth {
                n,
                seed: self.synth_seed,
            }),
            _ => None,
        }
    }

    fn load(&self) -> Result<PairedDataset> {
        let Some(source) = self.source() else {
            bail!("give --x and --y, or --synth N");
        };
        Ok(source.load()?)
    }
}

impl ParamArgs {
    fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(m) = self.method {
            config.method = m;
        }
        if let Some(l) = &self.levels {
            config.levels = l.clone();
        }
        if let Some(k) = &self.k {
            config.k = k.clone();
        }
        if let Some(d) = self.dims {
            config.dims = d;
        }
        if let Some(i) = self.max_iters {
            config.max_iters = i;
        }
        if let Some(t) = self.tol {
            config.tol = t;
        }
        if let Some(r) = self.ridge {
            config.ridge = r;
        }
        if let Some(s) = self.seed {
            config.split.seed = s;
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Synth { n, seed, out } => synth(n, seed, &out),
        Command::Fit { data, params, out } => {
            let mut config = ExperimentConfig::default();
            params.apply(&mut config);
            let dataset = data.load()?;
            let model = fit_model(&config, &dataset)?;
            save_model(&model, &out)?;
            let metrics = Metrics::of_model(&model, &dataset)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({ "kind": model.kind(), "train": metrics }))?
            );
            Ok(())
        }
        Command::Eval { model, data, out } => {
            let model = load_model(&model)?;
            let metrics = Metrics::of_model(&model, &data.load()?)?;
            emit(&serde_json::to_string_pretty(&metrics)?, out.as_deref())
        }
        Command::Sweep { data, params, out } => {
            let mut config = ExperimentConfig {
                levels: vec![3, 5, 9, 13, 17],
                ..Default::default()
            };
            params.apply(&mut config);
            config.method = Method::Crcca;
            config.validate()?;
            let dataset = data.load()?;
            let (tr, ev, _) = split_indices(dataset.n(), &config.split)?;
            let points = sweep_levels(
                &dataset.select(&tr),
                &dataset.select(&ev),
                &config.levels,
                &config.crcca_config(config.levels[0]),
            )?;
            let mut w = csv::Writer::from_writer(Vec::new());
            for p in &points {
                w.serialize(p)?;
            }
            emit(&String::from_utf8(w.into_inner()?)?, out.as_deref())
        }
        Command::RdSolve {
            prior,
            support,
            points,
            distortion,
            unconstrained,
            header,
            out,
        } => {
            let table = load_csv(&prior, header)?;
            if table.ncols() < 2 {
                bail!(
                    "{}: need at least one coordinate column and a weight column",
                    prior.display()
                );
            }
            let m = table.ncols() - 1;
            let source = table.columns(0, m).into_owned();
            let weights: Vec<f64> = table.column(m).iter().copied().collect();
            let total: f64 = weights.iter().sum();
            if weights.iter().any(|w| !(*w >= 0.0)) || !(total > 0.0) {
                bail!(
                    "{}: prior weights must be nonnegative with a positive sum",
                    prior.display()
                );
            }
            let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
            let support: Matrix = match support {
                Some(path) => load_csv(&path, header)?,
                None => default_support(&source, &weights, points)?,
            };
            let opts = RdOptions {
                constrained: !unconstrained,
                ..Default::default()
            };
            let sol = solve_rd(&weights, &source, &support, distortion, &opts)?;
            let body = json!({
                "rate_bits": sol.rate_bits,
                "distortion": sol.distortion,
                "mean": sol.mean,
                "second_moment": sol.second_moment,
                "fixed_point_residual": sol.fixed_point_residual,
                "eta": sol.channel.eta,
                "tau": sol.channel.tau,
                "eta_trace": sol.eta_trace,
                "support": (0..support.nrows())
                    .map(|k| support.row(k).iter().copied().collect::<Vec<f64>>())
                    .collect::<Vec<_>>(),
                "marginal": sol.channel.marginal,
            });
            emit(&serde_json::to_string_pretty(&body)?, out.as_deref())
        }
        Command::Run {
            config,
            data,
            params,
            reps,
            out,
        } => {
            let mut cfg = match &config {
                Some(path) => {
                    let text = fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str(&text)
                        .with_context(|| format!("parsing {}", path.display()))?
                }
                None => ExperimentConfig::default(),
            };
            if let Some(source) = data.source() {
                cfg.data = source;
            }
            params.apply(&mut cfg);
            if let Some(r) = reps {
                cfg.repetitions = r;
            }
            cfg.output_dir = Some(out.clone());
            let report = run(&cfg)?;
            write_outputs(&report, &out)?;
            let test = &report.aggregate.test;
            println!(
                "{} repetitions ({} failed): test objective {:.4} ± {:.4}; report in {}",
                report.repetitions.len(),
                report.failures.len(),
                test.mean,
                test.std,
                out.display()
            );
            Ok(())
        }
    }
}

fn synth(n: usize, seed: u64, out: &Path) -> Result<()> {
    if n == 0 {
        bail!("--n must be positive");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (data, labels) = synthgen::generate(n, seed);
    write_matrix(&out.join("x.csv"), &["x1", "x2"], data.x())?;
    write_matrix(&out.join("y.csv"), &["y1", "y2"], data.y())?;
    let mut w = csv::Writer::from_path(out.join("labels.csv"))?;
    w.write_record(["quadrant"])?;
    for q in labels {
        w.write_record([q.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_matrix(path: &Path, header: &[&str], m: &Matrix) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}
