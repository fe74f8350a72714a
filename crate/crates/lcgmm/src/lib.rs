//! Rigid point-cloud registration with a locally consistent Gaussian mixture
//! model.
//!
//! The model cloud is treated as the centroids of an isotropic Gaussian
//! mixture (plus a uniform outlier component) from which the scanned cloud is
//! sampled. Registration runs expectation-maximization with closed-form
//! updates for the translation, the rotation (weighted SVD alignment) and the
//! per-component variances. A symmetrized KL-divergence penalty between the
//! posterior rows of neighboring scanned points makes the correspondences
//! robust to noise and outliers.
//!
//! The crate also ships a point-to-point ICP baseline, deterministic
//! synthetic-corruption generators and the error metrics used to benchmark
//! both methods. Everything is `no_std`-compatible (`alloc` required, enable
//! the `libm` feature instead of `std`); file formats and the CLI live in the
//! companion `lcgmm-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

#[cfg(not(any(feature = "std", feature = "libm")))]
compile_error!("lcgmm requires either the `std` or the `libm` feature");

extern crate alloc;

pub use nalgebra;

pub mod baselines;
pub mod geometry;
pub mod metrics;
pub mod mixture;
pub mod spatial;
pub mod synth;

mod exec;
mod fmath;
#[cfg(test)]
pub(crate) mod testutil;

pub use geometry::{GeometryError, PointCloud, RigidTransform};
pub use mixture::{
    register, ConvergenceReason, MixtureState, PosteriorMatrix, RegistrationConfig,
    RegistrationError, RegistrationReport,
};
