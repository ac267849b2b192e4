//! Variational sequential Monte Carlo.
//!
//! Proposals for a particle filter are fitted by stochastic gradient ascent
//! on `E[log Ẑ]`, the expected log of the filter's marginal-likelihood
//! estimate. The crate provides the models, the sweep, the gradient
//! estimators, the optimizers and the experiment drivers.

pub mod error;
pub mod experiments;
pub mod gradients;
pub mod linalg;
pub mod models;
pub mod optimize;
pub mod proposals;
pub mod rng;
pub mod smc;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    pub struct Overview;
    #[doc = include_str!("../../../book/src/models.md")]
    pub struct Models;
    #[doc = include_str!("../../../book/src/sweep.md")]
    pub struct Sweep;
    #[doc = include_str!("../../../book/src/gradients.md")]
    pub struct Gradients;
    #[doc = include_str!("../../../book/src/fitting.md")]
    pub struct Fitting;
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub struct Experiments;
}
