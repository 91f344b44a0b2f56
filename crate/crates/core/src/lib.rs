//! Hierarchical Bayesian non-stationary Gaussian-process modeling of
//! vertically integrated heat content on a cylindrical spatial domain.
//!
//! The crate provides kernel-convolution covariances with spatially varying
//! parameter fields, a Vecchia engine for scalable likelihoods and
//! predictions, an adaptive Metropolis-within-Gibbs sampler over the field
//! bases, posterior integration of areal heat content, moving-window
//! initialization, and cross-validation scoring against a distance-weighted
//! reference predictor.

pub mod config;
pub mod data;
pub mod dense;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod init;
pub mod kernels;
pub mod ohc;
pub mod optimize;
pub mod sampler;
pub mod util;
pub mod validation;
pub mod vecchia;

pub use error::{Error, Result};
pub use geometry::Location;
