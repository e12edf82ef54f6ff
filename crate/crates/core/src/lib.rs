//! Bayesian clustering of multivariate longitudinal data of mixed type.
//!
//! Each marker follows a generalized linear mixed model; the markers are tied
//! together by a joint random-effects vector whose distribution is a finite
//! mixture of multivariate normals. Subjects are clustered by the mixture
//! component their random effects come from. Inference is by block Gibbs
//! sampling with Metropolis-Hastings steps.

pub mod error;
pub mod io;
pub mod linalg;
pub mod marglik;
pub mod mixture;
pub mod model;
pub mod ped;
pub mod postprocess;
pub mod priors;
pub mod rng;
pub mod sampler;
pub mod simulate;

pub use error::{Error, Result};
