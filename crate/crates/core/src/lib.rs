//! Heat-kernel Gaussian processes on point clouds.
//!
//! The heat kernel of the unknown manifold underlying a point cloud is
//! estimated from a reduced-rank, two-step random walk routed through `s`
//! induced points:
//!
//! 1. [`subsample`] picks the induced points (random or k-means).
//! 2. [`basekernel`] builds the sparse `n × s` base kernel (squared
//!    exponential restricted to the `r` nearest landmarks, or local anchor
//!    embedding weights).
//! 3. [`graph`] turns it into the cross similarity `A` and the row-stochastic
//!    transition `Z` with landmark masses `Λ`.
//! 4. [`spectral`] computes the top singular triplets of `ZΛ^{-1/2}`, giving
//!    the smallest eigenpairs of the graph Laplacian.
//! 5. [`heatkernel`] assembles covariance blocks of
//!    `C = n Σ exp(-tλ_i/ε²) v_i v_iᵀ` on demand.
//!
//! [`gp`] provides regression and Laplace-approximated binary classification
//! on any covariance source, [`train`] fits the full model and the baselines,
//! and [`experiment`] runs seeded, repeated experiments and writes reports.

pub mod basekernel;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod graph;
pub mod heatkernel;
pub mod linalg;
pub mod sparse;
pub mod spectral;
pub mod subsample;
pub mod train;

pub use error::{Error, Result};

use rand::SeedableRng;

/// Seedable generator used by every stochastic operation.
pub type Rng = rand_chacha::ChaCha8Rng;

pub(crate) fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
