//! Shared builders for the integration suites.

#![allow(dead_code)]

use std::sync::Arc;

use scbf_core::measure::{kb_estimate, EmpiricalMeasure, KbConfig};
use scbf_core::operators::{ModelParams, NoiseSpec};
use scbf_core::spectral::{Lattice, SpectralField};

pub const TAU: f64 = std::f64::consts::TAU;

pub fn lat(n: usize) -> Arc<Lattice<f64>> {
    Lattice::new(n, TAU)
}

pub fn params(mu: f64, alpha: f64, beta: f64, r: u32) -> ModelParams<f64> {
    ModelParams { mu, alpha, beta, r, convection: true }
}

/// Krylov–Bogoliubov sample with explicit burn-in/stride so the suites
/// control their own budgets.
pub fn sample_measure(
    lat: &Arc<Lattice<f64>>,
    p: &ModelParams<f64>,
    noise: &NoiseSpec<f64>,
    horizon: f64,
    burn_in: f64,
    stride: f64,
    dt: f64,
    n_streams: usize,
    seed: u64,
) -> EmpiricalMeasure<f64> {
    let mut cfg = KbConfig::new(horizon, dt, n_streams, seed);
    cfg.burn_in = Some(burn_in);
    cfg.stride = Some(stride);
    let x0 = SpectralField::zero(lat);
    kb_estimate(lat, p, noise, &x0, &cfg).expect("measure sampling failed")
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-12)
}
