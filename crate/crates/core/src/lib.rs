//! Hybrid proximal generalized conditional gradient (HPGCG) solver, with a
//! total-variation denoiser and a learner for patch-dependent regularization
//! weights built on top of it.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod learning;
pub mod metrics;
pub mod pgm;
pub mod psd;
pub mod rof;
pub mod solver;
pub mod tv;

pub use error::{Error, Result};
pub use learning::{ModelKind, TrainConfig, TrainedModel};
pub use psd::{psd_project, QuadraticModel};
pub use rof::{denoise, RofInstance};
pub use solver::{hpgcg_solve, ProblemOracle, SolveStatus, SolverConfig, Vector};
pub use tv::{div, grad, tv, ScalarField, VectorField};
