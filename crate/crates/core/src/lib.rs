//! Function-space MCMC for wide Bayesian neural networks.
//!
//! The readout layer of an NTK-parametrized MLP is whitened against its
//! Gaussian conditional posterior, which leaves a target whose reference
//! measure is `N(0, I)`. pCN, pCNL and MALA are run against that target and
//! compared through acceptance rates, ESS and R-hat.

pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod network;
pub mod par;
pub mod posterior;
pub mod reparam;
pub mod samplers;

pub use error::{Error, Result};
