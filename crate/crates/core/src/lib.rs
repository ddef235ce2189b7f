//! Estimation toolkit for per-evaluator grading gaps from matched
//! teacher/blind-score panels.
//!
//! The pipeline runs in stages, each usable on its own:
//!
//! 1. [`panel`] — typed ingestion of delimited panel files, score
//!    standardization, and education/labor outcome construction.
//! 2. [`gaps`] — the two-equation fixed-effects system producing per-teacher
//!    gap estimates with student-clustered standard errors, plus a joint
//!    (SURE) variant with cross-equation sampling covariances.
//! 3. [`hetero`] — bias-corrected variance decompositions of the gap
//!    estimates and predictor regressions on teacher characteristics or
//!    implicit-association scores.
//! 4. [`eb`] — empirical Bayes posterior means: Gaussian-prior linear
//!    shrinkage and nonparametric exponential-family deconvolution with
//!    moment-calibrated penalization.
//! 5. [`iat`] — latency-log scoring of implicit association tests into
//!    D-scores and severity categories.
//! 6. [`effects`] — leave-one-year-out treatment construction and long-run
//!    outcome regressions with multi-way fixed-effect absorption and one- or
//!    two-way cluster-robust covariance.
//! 7. [`synth`] — a seeded synthetic data generator with known ground truth,
//!    used as the oracle for every estimator in the crate.
//!
//! The shared regression machinery (absorption, collinearity handling,
//! sandwich covariances) lives in [`regress`].

pub mod eb;
pub mod effects;
mod error;
pub mod gaps;
pub mod hetero;
pub mod iat;
pub mod panel;
pub mod par;
pub mod regress;
pub mod synth;
pub mod table;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
