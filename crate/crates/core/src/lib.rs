//! Communication-free multi-agent policies that draw on shared entanglement.
//!
//! The numerical core ([`cmatrix`], [`quantum`], [`policies`]) is generic over
//! the real scalar type through [`Real`]; aliases for `f64` and `f32` are
//! provided below. Game search, Bell certification and training run in
//! `f64`.

pub mod bell_lp;
pub mod cmatrix;
pub mod error;
pub mod games;
pub mod optim;
pub mod policies;
pub mod quantum;
pub mod reinforce;
pub mod rng;
pub mod scalar;

pub use cmatrix::{CMat, HermEig, MatrixError};
pub use error::{Error, Result};
pub use scalar::Real;

pub type CMat64 = cmatrix::CMat<f64>;
pub type CMat32 = cmatrix::CMat<f32>;
pub type Povm64 = quantum::Povm<f64>;
pub type Povm32 = quantum::Povm<f32>;
pub type PovmLogits64 = quantum::PovmLogits<f64>;
pub type PovmLogits32 = quantum::PovmLogits<f32>;
pub type DensityMatrix64 = quantum::DensityMatrix<f64>;
pub type DensityMatrix32 = quantum::DensityMatrix<f32>;
pub type DensityFactor64 = quantum::DensityFactor<f64>;
pub type EntangledPolicy64 = policies::EntangledPolicy<f64>;
pub type EntangledParams64 = policies::EntangledParams<f64>;
pub type SharedRandomnessPolicy64 = policies::SharedRandomnessPolicy<f64>;
pub type CoordinatorAdvicePolicy64 = policies::CoordinatorAdvicePolicy<f64>;
pub type FactorizedPolicy64 = policies::FactorizedPolicy<f64>;
