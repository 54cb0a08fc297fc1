//! Resolvent, invariance, and truncation checks that need real Monte Carlo
//! budgets — heavier than unit tests, still seconds each.

mod common;

use common::{lat, params, sample_measure};
use scbf_core::functional::{cylinder_battery, Functional, TestFunctional};
use scbf_core::kolmogorov::{
    carre_du_champ_residual, dissipativity_check, invariance_residual, resolvent_eval,
    resolvent_sqrtq_gradient, truncation_residuals, McConfig, ResolventConfig,
};
use scbf_core::operators::NoiseSpec;
use scbf_core::spectral::SpectralField;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit_cylinder(lattice: &std::sync::Arc<scbf_core::spectral::Lattice<f64>>, seed: u64) -> TestFunctional<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = SpectralField::random(lattice, &mut rng, 1.5);
    let n = h.norm_h();
    h.scale(1.0 / n);
    TestFunctional::CylinderCos { h }
}

/// λ(λ−𝒩)⁻¹f → f as λ → ∞: the quadrature is exact on constants up to
/// trapezoid error, and the bias on a cylinder shrinks like 1/λ.
#[test]
fn abelian_limit_recovers_the_identity() {
    let lattice = lat(2);
    let p = params(0.8, 0.4, 0.3, 3);
    let noise = NoiseSpec::power_law(&lattice, 2.0, 0.2, 2);
    let f = unit_cylinder(&lattice, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut x = SpectralField::random(&lattice, &mut rng, 1.5);
    x.scale(0.7 / x.norm_h());
    let fx = f.eval(&x);

    // Constant integrand: no Monte Carlo noise, only quadrature error.
    let one = TestFunctional::Constant(1.0);
    let rc = ResolventConfig::new(20.0, McConfig::new(8, 5e-3, 901));
    let (v, se) = resolvent_eval(&lattice, &p, &noise, &one, &x, &rc).unwrap();
    assert_eq!(se, 0.0);
    assert!(
        (20.0 * v - 1.0).abs() < 1e-3,
        "resolvent of a constant should be 1/λ, got λR·1 = {}",
        20.0 * v
    );

    let mut errs = Vec::new();
    for &lam in &[20.0, 80.0, 320.0] {
        let rc = ResolventConfig::new(lam, McConfig::new(600, 5e-3, 902));
        let (v, se) = resolvent_eval(&lattice, &p, &noise, &f, &x, &rc).unwrap();
        errs.push(((lam * v - fx).abs(), lam * se));
    }
    assert!(
        errs[2].0 < errs[0].0,
        "λRλf error should shrink with λ: {:?}",
        errs
    );
    assert!(
        errs[2].0 <= 0.05 + 3.0 * errs[2].1,
        "λ = 320 should be within 5% of the identity: err {} se {}",
        errs[2].0,
        errs[2].1
    );
}

/// ‖(λ−𝒩)⁻¹f‖ ≤ (1/λ)‖f‖₀ and ‖√Q D(λ−𝒩)⁻¹f‖ ≤ √(2/λ)‖f‖₀ on points
/// drawn from the sampled invariant measure, with a 5% margin for the
/// quadrature and interpolation bias.
#[test]
fn resolvent_bounds_hold_on_a_small_cloud() {
    let lattice = lat(1);
    let p = params(0.6, 0.3, 0.2, 3);
    let noise = NoiseSpec::power_law(&lattice, 1.5, 0.5, 1);
    let m = sample_measure(&lattice, &p, &noise, 24.0, 4.0, 0.5, 0.01, 4, 77);
    let cloud = m.subsample(3, 78);
    let f = unit_cylinder(&lattice, 79);
    let sup = f.sup_bound().unwrap();

    for &lam in &[1.0, 4.0, 16.0] {
        let rc = ResolventConfig::new(lam, McConfig::new(120, 0.05, 80));
        for (i, x) in cloud.points.iter().enumerate() {
            let rc_pt = ResolventConfig {
                mc: rc.mc.with_stream_base((i * 1000) as u64),
                ..rc
            };
            let (phi, se) = resolvent_eval(&lattice, &p, &noise, &f, x, &rc_pt).unwrap();
            assert!(
                phi.abs() <= 1.05 * sup / lam + 3.0 * se,
                "|φ| = {} breaks the 1/λ bound at λ = {}",
                phi.abs(),
                lam
            );
            let (g, gse) = resolvent_sqrtq_gradient(&lattice, &p, &noise, &f, x, &rc_pt).unwrap();
            let gn = g.norm_h();
            assert!(
                gn <= 1.05 * (2.0 / lam).sqrt() * sup + 3.0 * gse,
                "‖√QDφ‖ = {} breaks the √(2/λ) bound at λ = {}",
                gn,
                lam
            );
        }
    }
}

/// In stationarity ∫𝒩₀ψ dη = 0 for cylinders and the carré-du-champ
/// pairing balances the gradient energy.
#[test]
fn invariance_and_carre_hold_in_stationarity() {
    let lattice = lat(2);
    let p = params(0.8, 0.4, 0.3, 3);
    let noise = NoiseSpec::power_law(&lattice, 2.0, 0.3, 2);
    let m = sample_measure(&lattice, &p, &noise, 60.0, 10.0, 1.0, 5e-3, 6, 171);

    for (i, f) in cylinder_battery(&lattice, 10, 172, 1.0).iter().enumerate() {
        let (v, se) = invariance_residual(&m, &p, &noise, f).unwrap();
        assert!(
            v.abs() <= 3.0 * se + 5e-3,
            "cylinder {} fails invariance: residual {} vs se {}",
            i,
            v,
            se
        );
    }

    let mut battery: Vec<TestFunctional<f64>> = cylinder_battery(&lattice, 4, 173, 0.8);
    battery.push(TestFunctional::coordinate(&lattice, lattice.basis(0)));
    for (i, f) in battery.iter().enumerate() {
        let rep = carre_du_champ_residual(&m, &p, &noise, f).unwrap();
        assert!(
            rep.residual <= 3.0 * rep.residual_se + 5e-3,
            "functional {} fails carré du champ: residual {} vs se {} (pairing {}, energy {})",
            i,
            rep.residual,
            rep.residual_se,
            rep.pairing,
            rep.energy
        );
    }
}

/// ‖f‖ ≤ (1/λ)‖λf − 𝒩₀f‖ in L¹(η_emp) across a spread of λ.
#[test]
fn dissipativity_battery() {
    let lattice = lat(2);
    let p = params(0.8, 0.4, 0.3, 3);
    let noise = NoiseSpec::power_law(&lattice, 2.0, 0.3, 2);
    let m = sample_measure(&lattice, &p, &noise, 30.0, 6.0, 0.5, 0.01, 4, 271);

    let battery = cylinder_battery(&lattice, 3, 272, 1.0);
    for f in &battery {
        for &lam in &[0.5, 2.0, 8.0] {
            let rep = dissipativity_check(&m, &p, &noise, f, lam).unwrap();
            assert!(
                rep.pass,
                "dissipativity fails at λ = {}: lhs {} vs rhs {}",
                lam, rep.lhs, rep.rhs
            );
        }
    }
}

/// The ε-truncation residuals shrink as ε halves: the truncation region
/// ‖x‖_V > 1/ε recedes, so both drift mismatches die out. Streams are
/// frozen across levels, making the ladder comparison nearly deterministic.
#[test]
fn truncation_ladder_is_monotone() {
    let lattice = lat(2);
    let p = params(0.3, 0.2, 0.1, 3);
    let noise = NoiseSpec::with_trace(&lattice, 1.2, 4.0, 2);
    assert!((noise.trace() - 4.0).abs() < 1e-12);
    let m = sample_measure(&lattice, &p, &noise, 30.0, 6.0, 0.5, 5e-3, 4, 371);

    let f = unit_cylinder(&lattice, 372);
    let rc = ResolventConfig::new(4.0, McConfig::new(40, 0.02, 373));
    let levels =
        truncation_residuals(&m, &p, &noise, &f, &rc, &[0.5, 0.25, 0.125], 3).unwrap();

    assert!(
        levels[0].saturated_fraction > 0.1,
        "coarsest level should actually truncate: saturated fraction {}",
        levels[0].saturated_fraction
    );
    assert!(levels[0].b_resid > 0.0 && levels[0].c_resid > 0.0);
    for w in levels.windows(2) {
        let slack_b = 1e-12 + 0.02 * w[0].b_resid;
        let slack_c = 1e-12 + 0.02 * w[0].c_resid;
        assert!(
            w[1].b_resid <= w[0].b_resid + slack_b,
            "convection residual not monotone: {} -> {}",
            w[0].b_resid,
            w[1].b_resid
        );
        assert!(
            w[1].c_resid <= w[0].c_resid + slack_c,
            "damping residual not monotone: {} -> {}",
            w[0].c_resid,
            w[1].c_resid
        );
    }
}
