//! Residual-based error detection (RED) for classifiers.
//!
//! The core idea: fit a Gaussian process with a composite input/output
//! kernel to the residual between a binary correctness target and the
//! classifier's maximum class probability. The GP's predictive mean,
//! added back to the maximum class probability, is a detection score for
//! misclassifications; the predictive variance flags OOD and adversarial
//! inputs.
//!
//! Modules mirror the pipeline stages:
//!
//! - [`data`] — dataset ingestion, standardization, splits, synthetic
//!   OOD/adversarial batches
//! - [`classifier`] — a small feed-forward MLP base classifier (the same
//!   engine also backs two regression baselines)
//! - [`kernel`] — ARD-RBF kernels over raw features and softmax outputs,
//!   composed additively, with analytic log-space gradients
//! - [`gp`] — exact GP regression plus a deterministic inducing-point
//!   approximation
//! - [`optimizer`] — L-BFGS maximization of the log marginal likelihood
//!   with a multi-restart, two-schedule protocol
//! - [`red`] — the detector proper: targets, residuals, fitting, scoring
//! - [`baselines`] — seven comparison detectors sharing the same engines
//! - [`metrics`] — threshold-free detection metrics (AP, AUPR, AUROC)
//! - [`stats`] — paired significance tests and rank aggregation
//! - [`harness`] — experiment orchestration, reports, and plots

pub mod baselines;
pub mod classifier;
pub mod data;
pub mod error;
pub mod gp;
pub mod harness;
pub mod kernel;
pub mod metrics;
pub mod optimizer;
pub mod plot;
pub mod red;
pub mod stats;

pub use error::RedError;

/// Crate result alias.
pub type Result<T> = std::result::Result<T, RedError>;
