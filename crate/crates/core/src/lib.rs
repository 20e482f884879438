//! A numerical laboratory for linear estimation under model
//! misspecification with fake and missing features.
//!
//! The underlying system generates observations from shared features `A_S`
//! and missing features `A_C`; the estimator is built from a misspecified
//! model that sees `A_S` plus fake features `A_F` and an assumed noise
//! level. The crate provides:
//!
//! - [`model`]: domain types, covariance materialization, and sampling of
//!   features, unknowns and noise;
//! - [`estimator`]: the misspecified LMMSE estimator, the oracle baseline,
//!   and feature-conditional MSE evaluation;
//! - [`analytic`]: closed-form expected MSE, its fake/output components, the
//!   large-sample moment approximation, and the optimal assumed noise level;
//! - [`rmt`]: spectral-moment estimation and the random-matrix identities
//!   with sampling oracles;
//! - [`montecarlo`]: the simulation protocols (fake-count sweeps, assumed
//!   noise sweeps, output-MSE decomposition, structured covariances);
//! - [`dataset`]: the real-data double-descent sweep over tabular data;
//! - [`validate`]: the self-check suite wired to the command line.
//!
//! Everything numerical is generic over the [`Scalar`] type; the aliases
//! below fix the common double-precision instantiation.

pub mod analytic;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod model;
pub mod montecarlo;
pub mod rmt;
pub mod scalar;
pub mod stats;
pub mod stream;
pub mod validate;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use stream::StreamKey;

/// Double-precision aliases for the main types.
pub type ProblemConfig64 = model::ProblemConfig<f64>;
pub type CovarianceSpec64 = model::CovarianceSpec<f64>;
pub type FeatureSet64 = model::FeatureSet<f64>;
pub type MisspecifiedEstimator64 = estimator::MisspecifiedEstimator<f64>;
pub type MseBreakdown64 = analytic::MseBreakdown<f64>;
pub type SpectralMoments64 = analytic::SpectralMoments<f64>;
pub type SweepPlan64 = montecarlo::SweepPlan<f64>;
pub type SweepResult64 = montecarlo::SweepResult<f64>;
