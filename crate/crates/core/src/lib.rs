//! Spectral convolutional filters on discrete Laplacians, ratio-threshold
//! filter design, layered spectral networks, and a perturbation-stability
//! laboratory, together with a wireless power-allocation testbed driven by a
//! trainable spectral graph policy.
//!
//! Module map:
//!
//! - [`operators`]: kernel Laplacians from point clouds, dense symmetric
//!   eigendecomposition, closed-form reference spectra.
//! - [`spectrum`]: sorted spectra, ratio-separated partitions, relative gap
//!   profiles.
//! - [`filters`]: polynomial and piecewise spectral filters, flatness
//!   verification, integral Lipschitz estimation.
//! - [`mnn`]: layered filter-bank networks with normalized Lipschitz
//!   activations.
//! - [`perturb`]: relative operator perturbations `L' = L + EL`.
//! - [`stability`]: the deviation bound, perturbation sweeps, and the
//!   stability/discriminability probe.
//! - [`wireless`]: the ad-hoc power-allocation experiment.
//!
//! All types are immutable after construction and all operations are pure
//! functions of their inputs plus explicit seeds, so everything here is safe
//! to call concurrently; sweeps and studies parallelize internally with
//! deterministic, order-stable reductions.

pub mod error;
pub mod filters;
pub mod mnn;
pub mod operators;
pub mod perturb;
pub mod rng;
pub mod spectrum;
pub mod stability;
pub mod wireless;

pub use error::{Error, Result};
