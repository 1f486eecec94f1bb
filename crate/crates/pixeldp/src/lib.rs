//! Certifiably robust classification through differentially private noise layers.
//!
//! The core idea: insert a single calibrated noise layer (Laplace or Gaussian)
//! into a feed-forward network so that the randomized scoring function is
//! (ε, δ)-differentially private with respect to p-norm changes of the *input
//! pixels*. The expected scores of a DP function are stable under bounded
//! input perturbations, which turns into a per-prediction robustness
//! certificate: a maximum attack size `L_max` below which no perturbation can
//! change the predicted label.
//!
//! The crate provides the full pipeline:
//!
//! - [`tensor`]: dense tensors, matrix/convolution kernels, and the operator
//!   norms that bound layer sensitivity.
//! - [`sensitivity`]: certified sensitivity bounds Δ_{p,q} for the pre-noise
//!   computation, with composition rules.
//! - [`dp`]: noise calibration (σ formulas), sampling, group-privacy
//!   accounting, and expected-output stability intervals.
//! - [`network`]: layer sequences with exactly one noise layer, forward and
//!   reverse-mode passes, and model serialization.
//! - [`training`]: momentum SGD with per-example noise draws and sensitivity
//!   projections that keep the pre-noise computation 1-Lipschitz.
//! - [`certification`]: Monte Carlo score estimation, simultaneous confidence
//!   bounds (Hoeffding, empirical Bernstein, Clopper-Pearson), the robustness
//!   check, and the `L_max` certificate solver.
//! - [`attacks`]: projected gradient descent attacks (2-norm and ∞-norm) with
//!   gradient averaging over noise draws, used to validate certificates.
//! - [`data`], [`metrics`], [`experiment`]: dataset loading (MNIST IDX,
//!   synthetic), the robustness metrics, and experiment orchestration behind
//!   the `pixeldp` command-line tool.
//!
//! Start with the runnable examples (`cargo run --release --example ...`);
//! each one exercises a single capability end to end.

pub mod attacks;
pub mod certification;
pub mod data;
pub mod dp;
mod error;
pub mod experiment;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod sensitivity;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
