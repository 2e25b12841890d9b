//! Covariate-assisted latent space modeling for undirected binary networks.
//!
//! Latent positions live in a low-dimensional Euclidean space and edge
//! probabilities follow a logistic inner-product model; node covariates
//! inform the positions through a sparse low-rank linear transform guarded
//! by global-local shrinkage, so uninformative or mismatched covariates are
//! shrunk out of the fit rather than contaminating it.
//!
//! The crate provides:
//! - [`model`]: data containers, likelihood, and the logistic tangent bound;
//! - [`cavi`]: closed-form coordinate-ascent variational inference;
//! - [`svi`]: stochastic variational inference with edge subsampling for
//!   large sparse networks;
//! - [`simgen`]: seeded generators for the three covariate-match regimes;
//! - [`baselines`]: truncated-SVD comparison methods and a covariate-free
//!   latent space mode;
//! - [`cluster`]: k-means community detection and evaluation metrics.

pub mod baselines;
pub mod cavi;
pub mod cluster;
pub mod error;
pub mod model;
pub mod simgen;
pub mod special;
pub mod svi;

pub use error::{Error, Result};
pub use model::{Covariates, FitReport, LatentParams, ModelConfig, Network};
