//! Cramér-Rao bounds and maximum-likelihood estimation for distributed
//! passive radar with GMSK illuminators.
//!
//! Everything is generic over the scalar type (`f32` or `f64`); the aliases
//! below fix it to `f64`.

// `!(x <= y)` is used on purpose so that NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod estimator;
pub mod fim_crb;
pub mod geometry;
pub mod linalg;
pub mod montecarlo;
pub mod rng;
pub mod scalar;
pub mod signal_model;
pub mod validation;
pub mod waveform;

pub use error::{Error, Result, Station};
pub use scalar::Real;

pub type StationLayout64 = geometry::StationLayout<f64>;
pub type TargetState64 = geometry::TargetState<f64>;
pub type GmskParams64 = waveform::GmskParams<f64>;
pub type GmskWaveform64 = waveform::GmskWaveform<f64>;
pub type Scenario64 = signal_model::Scenario<f64>;
pub type CovarianceModel64 = signal_model::CovarianceModel<f64>;
pub type FimResult64 = fim_crb::FimResult<f64>;
pub type Ecrbob64 = fim_crb::Ecrbob<f64>;
pub type SearchSpec64 = estimator::SearchSpec<f64>;
pub type MlEstimate64 = estimator::MlEstimate<f64>;
pub type ExperimentPlan64 = montecarlo::ExperimentPlan<f64>;
pub type SweepResult64 = montecarlo::SweepResult<f64>;
