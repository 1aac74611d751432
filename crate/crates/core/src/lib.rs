//! Improved (G-MUSIC) noise-subspace estimation for the
//! information-plus-noise model `Sigma = B + W`, in the regime where the
//! observation dimension `M` and the sample count `N` are comparable.
//!
//! The crate provides:
//!
//! - the deterministic model and seeded random realizations ([`model`]);
//! - the limiting spectral measure: support clusters, the `w_N` / `m_N`
//!   branch machinery, density and resolvent equivalents ([`spectrum`]);
//! - eigen-analysis of one realization, including the secular roots used
//!   by the contour estimator ([`empirical`]);
//! - the traditional, improved (contour/residue) and fixed-rank
//!   simplified subspace estimators ([`estimators`], [`contour`]);
//! - second-order theory: variance coefficients by double contour
//!   quadrature or closed form, covariance assembly, MSE prediction
//!   ([`fluctuations`]);
//! - a seeded Monte Carlo harness that verifies the predicted Gaussian
//!   fluctuations ([`montecarlo`]);
//! - the scenario file format shared with the command-line front end
//!   ([`scenario`]).

pub mod contour;
pub mod empirical;
pub mod error;
pub mod estimators;
pub mod fluctuations;
pub mod model;
pub mod montecarlo;
pub mod poly;
mod laurent;
pub mod scenario;
pub mod spectrum;

/// Complex scalar used throughout the crate.
pub type C64 = nalgebra::Complex<f64>;

pub use error::{Error, Result};
pub use model::{derive_seed, eta_true, sample_realization, Realization, SignalModel, SubspaceQuery};
pub use spectrum::{phi_eval, spiked_pack, AsymptoticSpectrum, SpectralSupport, SpikedSummary, WPoint};
