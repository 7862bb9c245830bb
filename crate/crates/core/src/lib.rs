//! Model-based clustering of multivariate count data with finite mixtures of
//! multivariate Poisson-log normal (MPLN) distributions.
//!
//! Parameters are estimated by Markov chain Monte Carlo EM: the latent
//! Gaussian layer is sampled per (observation, component) with Hamiltonian
//! Monte Carlo, chains are gated on split R-hat and effective sample size, and
//! the EM loop stops once the log-likelihood trace passes a Heidelberger-Welch
//! stationarity test.
//!
//! Module map:
//! - [`data_io`]: count matrices on disk and per-sample normalization factors.
//! - [`mpln`]: densities, gradients and moments of the MPLN hierarchy.
//! - [`sampler`]: HMC draws of the latent log-rates.
//! - [`diagnostics`]: R-hat, ESS, chain gating, Heidelberger-Welch.
//! - [`em`]: initialization, E-step, M-step and the fitting loop.
//! - [`selection`]: information criteria, model selection and ARI.
//! - [`sim`]: synthetic MPLN mixture data.

pub mod data_io;
pub mod diagnostics;
pub mod em;
mod error;
pub mod linalg;
pub mod mpln;
pub mod sampler;
pub mod seeds;
pub mod selection;
pub mod sim;

pub use error::{Error, Result};
