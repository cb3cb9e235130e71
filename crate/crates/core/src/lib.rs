//! Compressed-representation canonical correlation analysis (CRCCA).
//!
//! Nonlinear CCA in which each view is mapped through a uniform lattice
//! quantizer whose cells are fitted to the other view's current
//! representation (remote-source uniform quantization), alternating until the
//! summed canonical correlation stops improving. The number of quantization
//! levels bounds the representation entropy and acts as the regularizer.
//!
//! Also provided:
//!
//! * [`linear_cca`]: classical linear CCA, used as baseline and warm start.
//! * [`ace`]: alternating conditional expectations with k-NN smoothing.
//! * [`rd_solver`]: an Arimoto–Blahut solver for rate distortion with
//!   mean/second-moment constraints on a finite support.
//! * [`entropy`]: simple Good-Turing estimation for cell-occupancy entropies.
//! * [`synthgen`]: the quarter-circle synthetic benchmark.
//! * [`experiment`] and [`model_io`]: repeated-split experiments, reports and
//!   the versioned JSON model format.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ace;
pub mod crcca;
pub mod dataset;
pub mod entropy;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod linear_cca;
pub mod model_io;
pub mod quantizer;
pub mod rd_solver;
pub mod synthgen;

pub use ace::{fit_ace, AceConfig, AceModel};
pub use crcca::{fit_crcca, CrccaConfig, CrccaModel, EvalReport, SweepPoint};
pub use dataset::{PairedDataset, SplitSpec};
pub use error::{Error, Result};
pub use experiment::{fit_model, run, DataSource, ExperimentConfig, Method, Metrics, Report};
pub use linear_cca::{fit_linear_cca, normalized_objective, LinearCcaModel};
pub use model_io::{load_model, save_model, Model};
pub use quantizer::{LatticeGrid, QuantizedMap};
pub use rd_solver::{solve_rd, DiscreteChannel, RdOptions, RdSolution};

/// Dense real matrix used throughout the crate (rows are samples).
pub type Matrix = nalgebra::DMatrix<f64>;
