//! Cross-fitted two-stage kernel estimation of bridge functions for off-policy
//! evaluation in confounded POMDPs.
//!
//! The crate is organized bottom-up:
//! - [`kernel`]: Gaussian kernels, Gram matrices, median-heuristic bandwidths, ridge solves.
//! - [`synthetic`]: simulators with hidden confounders and their ground-truth oracles.
//! - [`nuisance`]: folds, conditional mean embeddings and conditional densities.
//! - [`bridge`]: the Stage II objective, its closed-form minimizer and bridge evaluation.
//! - [`policy`]: policy-value identification from fitted bridges by quadrature.
//! - [`diagnostics`]: Monte Carlo risks and the stage-wise error terms.
//! - [`experiment`]: configuration-driven benchmark, diagnostics and policy-value runs.

pub mod bridge;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod kernel;
pub mod nuisance;
pub mod points;
pub mod policy;
pub mod rng;
pub mod stats;
pub mod synthetic;

pub use error::{Error, Result};
pub use points::PointSet;
