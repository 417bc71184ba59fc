//! Propensity-score estimation, full matching and effect estimation for
//! group-average test scores observed with measurement error.
//!
//! The numerical core is generic over [`scalar::Real`] (`f32` or `f64`); the
//! aliases below fix the precision for the common cases.

pub mod data;
pub mod error;
pub mod estimate;
pub mod hlm;
pub mod io;
pub mod linalg;
pub mod matching;
pub mod measure;
pub mod metrics;
pub mod optim;
pub mod ps;
pub mod scalar;
pub mod sim;
pub mod spline;

pub use error::{Error, Result};

pub type HlmFit = hlm::HlmFit<f64>;
pub type HlmFit32 = hlm::HlmFit<f32>;
pub type EbPredictions = hlm::EbPredictions<f64>;
pub type EbPredictions32 = hlm::EbPredictions<f32>;
pub type PsFit = ps::PsFit<f64>;
pub type PsFit32 = ps::PsFit<f32>;
pub type PenalizedSpline = spline::PenalizedSpline<f64>;
pub type PenalizedSpline32 = spline::PenalizedSpline<f32>;
