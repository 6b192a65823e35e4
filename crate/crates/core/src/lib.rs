//! Robust model-based clustering by weighted likelihood.
//!
//! Gaussian mixtures are fitted with the weighted EM (WEM) and weighted
//! classification EM (WCEM) algorithms. Each M-step downweights points whose
//! squared Mahalanobis distances disagree with the chi-square reference, as
//! measured by Pearson residuals of a boundary-corrected kernel density
//! estimate. Plain EM and CEM are available as baselines.

pub mod chi2;
pub mod constraint;
pub mod diagnose;
pub mod downweight;
pub mod error;
pub mod fit;
pub mod model;
pub mod select;
pub mod sim;

pub use error::{Error, Result};
pub use fit::{Algorithm, FitConfig, FitResult};
pub use model::{DataMatrix, MixtureModel};
