//! Bayesian flexible additive joint models for a longitudinal marker and a
//! time-to-event outcome: B-spline bases, penalised priors, posterior mode
//! estimation, block Metropolis-Hastings sampling and a simulation harness.

pub mod data;
pub mod estimation;
pub mod error;
pub mod io;
pub mod likelihood;
pub mod model;
pub mod quadrature;
pub mod scalar;
pub mod simulation;
pub mod spline;

pub use data::{Column, Covariates, Dataset};
pub use error::{Error, Result};
pub use scalar::Real;

pub type JointModel64 = model::JointModel<f64>;
pub type ThetaState64 = likelihood::ThetaState<f64>;
pub type FitResult64 = estimation::FitResult<f64>;
pub type SampleChain64 = estimation::SampleChain<f64>;
pub type JointModel32 = model::JointModel<f32>;
pub type ThetaState32 = likelihood::ThetaState<f32>;
