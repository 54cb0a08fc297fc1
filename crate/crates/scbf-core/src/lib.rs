//! Spectral-Galerkin toolkit for the 2D stochastic convective
//! Brinkman–Forchheimer equations on the periodic torus: trajectory
//! simulation, invariant-measure statistics, the associated Kolmogorov
//! operator and resolvent, an HJB fixed-point solver with feedback-control
//! synthesis, and a variational-inequality solver for optimal stopping.

pub mod error;
pub mod fft;
pub mod functional;
pub mod hjb;
pub mod io;
pub mod kolmogorov;
pub mod measure;
pub mod operators;
pub mod scalar;
pub mod sim;
pub mod spectral;
pub mod stats;
pub mod stopping;

pub use error::{Result, ScbfError};
pub use scalar::Scalar;

/// Default-precision aliases; every public type is generic over [`Scalar`].
pub type Field = spectral::SpectralField<f64>;
pub type Lattice = spectral::Lattice<f64>;
pub type Grid = spectral::Grid<f64>;
