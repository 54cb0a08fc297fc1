//! Test functionals on state space: cylinder functions (the real cos/sin
//! pair of e^{i(h,x)}), norm and exponential observables, and cloud-backed
//! interpolants for functions known only through samples.
//!
//! Every functional can report closed-form gradients and Hessian-vector
//! products where they exist; consumers that need derivatives fail loudly
//! when they are missing rather than silently differencing.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScbfError};
use crate::scalar::Scalar;
use crate::spectral::{BasisIndex, Lattice, Phase, SpectralField, WaveIndex};

pub trait Functional<T: Scalar>: Sync {
    fn eval(&self, x: &SpectralField<T>) -> T;

    /// D_xf, written into `out`.
    fn grad(&self, _x: &SpectralField<T>, _out: &mut SpectralField<T>) -> Result<()> {
        Err(ScbfError::InvalidParam("functional provides no gradient".into()))
    }

    /// D²_xf(x)·h, written into `out`.
    fn hess_vec(
        &self,
        _x: &SpectralField<T>,
        _h: &SpectralField<T>,
        _out: &mut SpectralField<T>,
    ) -> Result<()> {
        Err(ScbfError::InvalidParam("functional provides no Hessian action".into()))
    }

    fn has_grad(&self) -> bool {
        false
    }

    fn has_hess(&self) -> bool {
        false
    }

    /// Lipschitz constant in H, when known.
    fn lip_bound(&self) -> Option<T> {
        None
    }

    /// Sup norm, when known (drives resolvent truncation horizons).
    fn sup_bound(&self) -> Option<T> {
        None
    }
}

/// Closed-form observables used throughout the diagnostics.
pub enum TestFunctional<T: Scalar> {
    Constant(T),
    /// cos((h,x))
    CylinderCos { h: SpectralField<T> },
    /// sin((h,x))
    CylinderSin { h: SpectralField<T> },
    /// ‖x‖²_H
    NormH2,
    /// ‖x‖²_V
    NormV2,
    /// e^{σ‖x‖²_H}
    ExpH { sigma: T },
    /// (x, e) for a fixed unit basis element
    Coordinate { e: SpectralField<T> },
    /// G(x) = k(s)·s at s = ‖x‖², k(s) = κ·s₀(1 − e^{−s/s₀}): a C²,
    /// concave, increasing gain saturating at κ·s₀ — the smooth stopping
    /// obstacle family.
    SaturatedNorm { kappa: T, s0: T },
}

impl<T: Scalar> TestFunctional<T> {
    pub fn coordinate(lat: &Arc<Lattice<T>>, b: BasisIndex) -> Self {
        TestFunctional::Coordinate { e: SpectralField::basis_field(lat, b) }
    }

    fn saturated_parts(kappa: T, s0: T, s: T) -> (T, T, T) {
        // G(s) = k(s)s; returns (G, dG/ds, d²G/ds²).
        let e = (-s / s0).exp();
        let k = kappa * s0 * (T::one() - e);
        let kp = kappa * e;
        let kpp = -(kappa / s0) * e;
        (k * s, kp * s + k, kpp * s + T::two() * kp)
    }
}

impl<T: Scalar> Functional<T> for TestFunctional<T> {
    fn eval(&self, x: &SpectralField<T>) -> T {
        match self {
            TestFunctional::Constant(c) => *c,
            TestFunctional::CylinderCos { h } => h.inner_h(x).cos(),
            TestFunctional::CylinderSin { h } => h.inner_h(x).sin(),
            TestFunctional::NormH2 => x.energy_norms_sq().0,
            TestFunctional::NormV2 => x.energy_norms_sq().1,
            TestFunctional::ExpH { sigma } => (*sigma * x.energy_norms_sq().0).exp(),
            TestFunctional::Coordinate { e } => e.inner_h(x),
            TestFunctional::SaturatedNorm { kappa, s0 } => {
                Self::saturated_parts(*kappa, *s0, x.energy_norms_sq().0).0
            }
        }
    }

    fn grad(&self, x: &SpectralField<T>, out: &mut SpectralField<T>) -> Result<()> {
        match self {
            TestFunctional::Constant(_) => {
                out.amps_mut().fill(Default::default());
            }
            TestFunctional::CylinderCos { h } => {
                let th = h.inner_h(x);
                out.amps_mut().copy_from_slice(h.amps());
                out.scale(-th.sin());
            }
            TestFunctional::CylinderSin { h } => {
                let th = h.inner_h(x);
                out.amps_mut().copy_from_slice(h.amps());
                out.scale(th.cos());
            }
            TestFunctional::NormH2 => {
                out.amps_mut().copy_from_slice(x.amps());
                out.scale(T::two());
            }
            TestFunctional::NormV2 => {
                let ax = x.stokes_pow(T::one());
                out.amps_mut().copy_from_slice(ax.amps());
                out.scale(T::two());
            }
            TestFunctional::ExpH { sigma } => {
                let v = (*sigma * x.energy_norms_sq().0).exp();
                out.amps_mut().copy_from_slice(x.amps());
                out.scale(T::two() * *sigma * v);
            }
            TestFunctional::Coordinate { e } => {
                out.amps_mut().copy_from_slice(e.amps());
            }
            TestFunctional::SaturatedNorm { kappa, s0 } => {
                let (_, dg, _) = Self::saturated_parts(*kappa, *s0, x.energy_norms_sq().0);
                out.amps_mut().copy_from_slice(x.amps());
                out.scale(T::two() * dg);
            }
        }
        Ok(())
    }

    fn hess_vec(
        &self,
        x: &SpectralField<T>,
        h_dir: &SpectralField<T>,
        out: &mut SpectralField<T>,
    ) -> Result<()> {
        match self {
            TestFunctional::Constant(_) => {
                out.amps_mut().fill(Default::default());
            }
            TestFunctional::CylinderCos { h } => {
                let th = h.inner_h(x);
                let hv = h.inner_h(h_dir);
                out.amps_mut().copy_from_slice(h.amps());
                out.scale(-th.cos() * hv);
            }
            TestFunctional::CylinderSin { h } => {
                let th = h.inner_h(x);
                let hv = h.inner_h(h_dir);
                out.amps_mut().copy_from_slice(h.amps());
                out.scale(-th.sin() * hv);
            }
            TestFunctional::NormH2 => {
                out.amps_mut().copy_from_slice(h_dir.amps());
                out.scale(T::two());
            }
            TestFunctional::NormV2 => {
                let av = h_dir.stokes_pow(T::one());
                out.amps_mut().copy_from_slice(av.amps());
                out.scale(T::two());
            }
            TestFunctional::ExpH { sigma } => {
                // D²f·v = e^{σ‖x‖²}(2σ v + 4σ²(x,v)x)
                let s = *sigma;
                let v = (s * x.energy_norms_sq().0).exp();
                let xv = x.inner_h(h_dir);
                out.amps_mut().copy_from_slice(h_dir.amps());
                out.scale(T::two() * s * v);
                out.axpy(T::of(4.0) * s * s * xv * v, x);
            }
            TestFunctional::Coordinate { .. } => {
                out.amps_mut().fill(Default::default());
            }
            TestFunctional::SaturatedNorm { kappa, s0 } => {
                // D²G·v = 2·G'(s)·v + 4·G''(s)·(x,v)·x
                let (_, dg, ddg) = Self::saturated_parts(*kappa, *s0, x.energy_norms_sq().0);
                let xv = x.inner_h(h_dir);
                out.amps_mut().copy_from_slice(h_dir.amps());
                out.scale(T::two() * dg);
                out.axpy(T::of(4.0) * ddg * xv, x);
            }
        }
        Ok(())
    }

    fn has_grad(&self) -> bool {
        true
    }

    fn has_hess(&self) -> bool {
        true
    }

    fn lip_bound(&self) -> Option<T> {
        match self {
            TestFunctional::Constant(_) => Some(T::zero()),
            TestFunctional::CylinderCos { h } | TestFunctional::CylinderSin { h } => {
                Some(h.norm_h())
            }
            TestFunctional::Coordinate { e } => Some(e.norm_h()),
            _ => None,
        }
    }

    fn sup_bound(&self) -> Option<T> {
        match self {
            TestFunctional::Constant(c) => Some(c.abs()),
            TestFunctional::CylinderCos { .. } | TestFunctional::CylinderSin { .. } => {
                Some(T::one())
            }
            TestFunctional::ExpH { sigma } if *sigma <= T::zero() => Some(T::one()),
            TestFunctional::SaturatedNorm { .. } => None, // grows linearly
            _ => None,
        }
    }
}

/// A battery of bounded cylinder functions with random low-mode directions,
/// alternating cos/sin; deterministic in `seed`.
pub fn cylinder_battery<T: Scalar>(
    lat: &Arc<Lattice<T>>,
    count: usize,
    seed: u64,
    amplitude: f64,
) -> Vec<TestFunctional<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let mut h = SpectralField::random(lat, &mut rng, 1.5);
            let n = h.norm_h();
            if n > T::zero() {
                h.scale(T::of(amplitude) / n);
            }
            if i % 2 == 0 {
                TestFunctional::CylinderCos { h }
            } else {
                TestFunctional::CylinderSin { h }
            }
        })
        .collect()
}

/// Serializable functional description (config files, CLI registration).
#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionalSpec {
    Constant { value: f64 },
    CylinderCos { modes: Vec<ModeAmp> },
    CylinderSin { modes: Vec<ModeAmp> },
    NormH2,
    NormV2,
    ExpH { sigma: f64 },
    Coordinate { k1: i32, k2: i32, phase: String },
    SaturatedNorm { kappa: f64, s0: f64 },
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct ModeAmp {
    pub k1: i32,
    pub k2: i32,
    pub phase: String,
    pub amp: f64,
}

fn parse_phase(s: &str) -> Result<Phase> {
    match s {
        "cos" => Ok(Phase::Cos),
        "sin" => Ok(Phase::Sin),
        other => Err(ScbfError::InvalidParam(format!("phase must be cos|sin, got {other}"))),
    }
}

impl FunctionalSpec {
    pub fn build<T: Scalar>(&self, lat: &Arc<Lattice<T>>) -> Result<TestFunctional<T>> {
        let direction = |modes: &[ModeAmp]| -> Result<SpectralField<T>> {
            let mut h = SpectralField::zero(lat);
            for m in modes {
                if m.k1 == 0 && m.k2 == 0 {
                    return Err(ScbfError::InvalidParam("zero mode in direction".into()));
                }
                let k = WaveIndex::new(m.k1, m.k2);
                if !lat.contains(k) {
                    return Err(ScbfError::InvalidParam(format!(
                        "mode ({},{}) outside cutoff",
                        m.k1, m.k2
                    )));
                }
                let b = BasisIndex { k: k.canonical(), phase: parse_phase(&m.phase)? };
                h.set_real_coeff(b, h.real_coeff(b) + T::of(m.amp));
            }
            Ok(h)
        };
        Ok(match self {
            FunctionalSpec::Constant { value } => TestFunctional::Constant(T::of(*value)),
            FunctionalSpec::CylinderCos { modes } => {
                TestFunctional::CylinderCos { h: direction(modes)? }
            }
            FunctionalSpec::CylinderSin { modes } => {
                TestFunctional::CylinderSin { h: direction(modes)? }
            }
            FunctionalSpec::NormH2 => TestFunctional::NormH2,
            FunctionalSpec::NormV2 => TestFunctional::NormV2,
            FunctionalSpec::ExpH { sigma } => TestFunctional::ExpH { sigma: T::of(*sigma) },
            FunctionalSpec::Coordinate { k1, k2, phase } => {
                let k = WaveIndex::new(*k1, *k2);
                if !lat.contains(k) {
                    return Err(ScbfError::InvalidParam(format!(
                        "mode ({k1},{k2}) outside cutoff"
                    )));
                }
                TestFunctional::coordinate(
                    lat,
                    BasisIndex { k: k.canonical(), phase: parse_phase(phase)? },
                )
            }
            FunctionalSpec::SaturatedNorm { kappa, s0 } => TestFunctional::SaturatedNorm {
                kappa: T::of(*kappa),
                s0: T::of(*s0),
            },
        })
    }
}

/// Finite representation of an L²(η) element: states drawn from an empirical
/// measure with per-point values, optionally per-point √Q-gradient fields.
pub struct SampleCloud<T: Scalar> {
    pub points: Vec<SpectralField<T>>,
    pub values: Vec<T>,
    pub grads: Option<Vec<SpectralField<T>>>,
}

impl<T: Scalar> SampleCloud<T> {
    pub fn new(points: Vec<SpectralField<T>>) -> Self {
        let n = points.len();
        SampleCloud { points, values: vec![T::zero(); n], grads: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn set_values_from(&mut self, f: &dyn Functional<T>) {
        self.values = self.points.iter().map(|p| f.eval(p)).collect();
    }

    /// Empirical L²-norm of the stored values.
    pub fn l2_norm(&self) -> T {
        let n = T::of(self.len().max(1) as f64);
        let mut acc = T::zero();
        for &v in &self.values {
            acc += v * v;
        }
        (acc / n).sqrt()
    }

    /// Empirical L²(η;H)-norm of the stored gradient fields.
    pub fn l2_norm_grads(&self) -> Option<T> {
        let grads = self.grads.as_ref()?;
        let n = T::of(self.len().max(1) as f64);
        let mut acc = T::zero();
        for g in grads {
            let h2 = g.energy_norms_sq().0;
            acc += h2;
        }
        Some((acc / n).sqrt())
    }
}

/// Inverse-distance-weighted interpolant over the K nearest cloud points in
/// H-norm (power-2 weights), with the interpolant's analytic gradient. Used
/// to evaluate cloud-represented functions and their feedback fields along
/// simulated paths.
pub struct CloudInterp<'c, T: Scalar> {
    cloud: &'c SampleCloud<T>,
    k: usize,
    /// Distance regularizer: exact hits and near-duplicates stay finite.
    eps2: T,
}

impl<'c, T: Scalar> CloudInterp<'c, T> {
    pub fn new(cloud: &'c SampleCloud<T>) -> Self {
        CloudInterp { cloud, k: 8, eps2: T::of(1e-12) }
    }

    pub fn with_neighbors(cloud: &'c SampleCloud<T>, k: usize) -> Self {
        CloudInterp { cloud, k, eps2: T::of(1e-12) }
    }

    /// Indices and squared distances of the K nearest points.
    fn nearest(&self, x: &SpectralField<T>) -> Vec<(usize, T)> {
        let mut d: Vec<(usize, T)> = self
            .cloud
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let dist = x.dist_h(p);
                (i, dist * dist)
            })
            .collect();
        d.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        d.truncate(self.k.min(d.len()));
        d
    }

    fn weights(&self, near: &[(usize, T)]) -> Vec<T> {
        near.iter().map(|&(_, d2)| T::one() / (d2 + self.eps2)).collect()
    }

    pub fn value(&self, x: &SpectralField<T>) -> T {
        let near = self.nearest(x);
        let w = self.weights(&near);
        let mut num = T::zero();
        let mut den = T::zero();
        for ((i, _), wi) in near.iter().zip(&w) {
            num += *wi * self.cloud.values[*i];
            den += *wi;
        }
        num / den
    }

    /// Analytic gradient of the IDW value: ∇w_i = −2w_i²(x − x_i), so
    /// ∇v = Σ_i ∇w_i (v_i − v(x)) / Σ_j w_j.
    pub fn value_grad(&self, x: &SpectralField<T>, out: &mut SpectralField<T>) -> T {
        let near = self.nearest(x);
        let w = self.weights(&near);
        let mut num = T::zero();
        let mut den = T::zero();
        for ((i, _), wi) in near.iter().zip(&w) {
            num += *wi * self.cloud.values[*i];
            den += *wi;
        }
        let val = num / den;
        out.amps_mut().fill(Default::default());
        for ((i, _), wi) in near.iter().zip(&w) {
            // ∇w_i(v_i − val)/den with ∇w_i = −2w_i²(x − x_i)
            let c = -T::two() * *wi * *wi * (self.cloud.values[*i] - val) / den;
            out.axpy(c, x);
            out.axpy(-c, &self.cloud.points[*i]);
        }
        val
    }

    /// IDW interpolation of the stored per-point gradient fields.
    pub fn grad_field(&self, x: &SpectralField<T>, out: &mut SpectralField<T>) -> Result<()> {
        let grads = self
            .cloud
            .grads
            .as_ref()
            .ok_or_else(|| ScbfError::InvalidParam("cloud stores no gradients".into()))?;
        let near = self.nearest(x);
        let w = self.weights(&near);
        let mut den = T::zero();
        for wi in &w {
            den += *wi;
        }
        out.amps_mut().fill(Default::default());
        for ((i, _), wi) in near.iter().zip(&w) {
            out.axpy(*wi / den, &grads[*i]);
        }
        Ok(())
    }
}

/// The interpolant as a functional (value + analytic gradient), so cloud
/// representations plug into the resolvent machinery.
pub struct InterpFunctional<'c, T: Scalar> {
    pub interp: CloudInterp<'c, T>,
    pub sup: Option<T>,
}

impl<'c, T: Scalar> InterpFunctional<'c, T> {
    pub fn new(cloud: &'c SampleCloud<T>) -> Self {
        // The IDW value is a convex combination of stored values, so the
        // stored range bounds the interpolant everywhere.
        let sup = cloud
            .values
            .iter()
            .fold(T::zero(), |m, v| m.max(v.abs()));
        InterpFunctional { interp: CloudInterp::new(cloud), sup: Some(sup) }
    }
}

impl<'c, T: Scalar> Functional<T> for InterpFunctional<'c, T> {
    fn eval(&self, x: &SpectralField<T>) -> T {
        self.interp.value(x)
    }

    fn grad(&self, x: &SpectralField<T>, out: &mut SpectralField<T>) -> Result<()> {
        self.interp.value_grad(x, out);
        Ok(())
    }

    fn has_grad(&self) -> bool {
        true
    }

    fn sup_bound(&self) -> Option<T> {
        self.sup
    }
}

/// Draw `count` points from an arbitrary index range with a deterministic
/// shuffle (used to subsample snapshot collections into clouds).
pub fn pick_indices(total: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates, deterministic in the seed.
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx.truncate(count.min(total));
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lat64(n: usize) -> Arc<Lattice<f64>> {
        Lattice::new(n, std::f64::consts::TAU)
    }

    /// Directional finite difference of eval vs closed-form gradient, and of
    /// grad vs Hessian-vector action.
    fn check_derivatives(f: &dyn Functional<f64>, lat: &Arc<Lattice<f64>>, seed: u64, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = SpectralField::random(lat, &mut rng, 0.9);
        let h = SpectralField::random(lat, &mut rng, 0.9);
        let eps = 1e-6;
        let mut xp = x.clone();
        xp.axpy(eps, &h);
        let mut xm = x.clone();
        xm.axpy(-eps, &h);
        let fd = (f.eval(&xp) - f.eval(&xm)) / (2.0 * eps);
        let mut g = SpectralField::zero(lat);
        f.grad(&x, &mut g).unwrap();
        let lin = g.inner_h(&h);
        assert!((fd - lin).abs() < tol * (1.0 + lin.abs()), "grad fd={fd} lin={lin}");

        let mut gp = SpectralField::zero(lat);
        let mut gm = SpectralField::zero(lat);
        f.grad(&xp, &mut gp).unwrap();
        f.grad(&xm, &mut gm).unwrap();
        let mut fd2 = gp.sub(&gm);
        fd2.scale(1.0 / (2.0 * eps));
        let mut hv = SpectralField::zero(lat);
        f.hess_vec(&x, &h, &mut hv).unwrap();
        assert!(
            fd2.dist_h(&hv) < tol * 10.0 * (1.0 + hv.norm_h()),
            "hess fd mismatch {}",
            fd2.dist_h(&hv)
        );
    }

    #[test]
    fn closed_form_derivatives_match_finite_differences() {
        let lat = lat64(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = SpectralField::random(&lat, &mut rng, 1.0);
        let cases: Vec<TestFunctional<f64>> = vec![
            TestFunctional::CylinderCos { h: h.clone() },
            TestFunctional::CylinderSin { h },
            TestFunctional::NormH2,
            TestFunctional::NormV2,
            TestFunctional::ExpH { sigma: 0.13 },
            TestFunctional::coordinate(
                &lat,
                BasisIndex { k: WaveIndex::new(1, 1), phase: Phase::Sin },
            ),
            TestFunctional::SaturatedNorm { kappa: 0.4, s0: 2.0 },
        ];
        for (i, f) in cases.iter().enumerate() {
            check_derivatives(f, &lat, 100 + i as u64, 1e-5);
        }
    }

    #[test]
    fn cylinder_pair_reproduces_complex_gradient_rule() {
        // D_x e^{i(h,x)} = i e^{i(h,x)} h splits into the real pair:
        // D cos = −sin·h, D sin = cos·h; checked to tight tolerance.
        let lat = lat64(3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = SpectralField::random(&lat, &mut rng, 1.0);
        let x = SpectralField::random(&lat, &mut rng, 1.0);
        let th = h.inner_h(&x);
        let fc = TestFunctional::CylinderCos { h: h.clone() };
        let fs = TestFunctional::CylinderSin { h: h.clone() };
        let mut gc = SpectralField::zero(&lat);
        let mut gs = SpectralField::zero(&lat);
        fc.grad(&x, &mut gc).unwrap();
        fs.grad(&x, &mut gs).unwrap();
        let mut expect_c = h.clone();
        expect_c.scale(-th.sin());
        let mut expect_s = h.clone();
        expect_s.scale(th.cos());
        assert!(gc.dist_h(&expect_c) < 1e-10);
        assert!(gs.dist_h(&expect_s) < 1e-10);
        // cos² + sin² = 1 and the product rule for the pair.
        assert!((fc.eval(&x).powi(2) + fs.eval(&x).powi(2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_functional_has_zero_derivatives() {
        let lat = lat64(2);
        let f = TestFunctional::Constant(3.5f64);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = SpectralField::random(&lat, &mut rng, 1.0);
        assert_eq!(f.eval(&x), 3.5);
        let mut g = SpectralField::zero(&lat);
        f.grad(&x, &mut g).unwrap();
        assert_eq!(g.norm_h(), 0.0);
        assert_eq!(f.lip_bound(), Some(0.0));
    }

    #[test]
    fn saturated_norm_is_bounded_by_linear_gain() {
        // k(s) ≤ κ·s ⇒ G(x) ≤ κ‖x‖⁴ and G ≤ κ·s₀·‖x‖².
        let lat = lat64(3);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = TestFunctional::SaturatedNorm { kappa: 0.7, s0: 1.3 };
        for _ in 0..50 {
            let x = SpectralField::random(&lat, &mut rng, 0.8);
            let s = x.energy_norms_sq().0;
            let v = g.eval(&x);
            assert!(v >= 0.0);
            assert!(v <= 0.7 * s * s + 1e-12);
            assert!(v <= 0.7 * 1.3 * s + 1e-12);
        }
        assert_eq!(g.eval(&SpectralField::zero(&lat)), 0.0);
    }

    #[test]
    fn functional_spec_round_trip_builds() {
        let lat = lat64(3);
        let spec = FunctionalSpec::CylinderCos {
            modes: vec![ModeAmp { k1: 1, k2: 0, phase: "cos".into(), amp: 0.5 }],
        };
        let json = serde_json::to_string(&spec).unwrap();
        let back: FunctionalSpec = serde_json::from_str(&json).unwrap();
        let f = back.build::<f64>(&lat).unwrap();
        let e = SpectralField::basis_field(
            &lat,
            BasisIndex { k: WaveIndex::new(1, 0), phase: Phase::Cos },
        );
        assert!((f.eval(&e) - 0.5f64.cos()).abs() < 1e-12);

        let bad = FunctionalSpec::Coordinate { k1: 9, k2: 0, phase: "cos".into() };
        assert!(bad.build::<f64>(&lat).is_err());
    }

    #[test]
    fn idw_interpolates_values_and_is_exact_at_nodes() {
        let lat = lat64(2);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let points: Vec<_> = (0..20).map(|_| SpectralField::random(&lat, &mut rng, 0.8)).collect();
        let f = TestFunctional::NormH2;
        let mut cloud = SampleCloud::new(points);
        cloud.set_values_from(&f);
        let interp = CloudInterp::new(&cloud);
        // At a node, the regularized weight concentrates there.
        let v0 = interp.value(&cloud.points[3]);
        assert!((v0 - cloud.values[3]).abs() < 1e-6 * (1.0 + cloud.values[3].abs()));
        // Between nodes, the value stays within the convex hull of values.
        let probe = SpectralField::random(&lat, &mut rng, 0.8);
        let v = interp.value(&probe);
        let lo = cloud.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = cloud.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }

    #[test]
    fn idw_gradient_matches_finite_difference_of_interpolant() {
        let lat = lat64(2);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let points: Vec<_> = (0..30).map(|_| SpectralField::random(&lat, &mut rng, 0.8)).collect();
        let f = TestFunctional::NormH2;
        let mut cloud = SampleCloud::new(points);
        cloud.set_values_from(&f);
        // Use all points so the K-neighbor set cannot change under the
        // probe perturbation (the IDW surface is only piecewise smooth in K).
        let interp = CloudInterp::with_neighbors(&cloud, 30);
        let x = SpectralField::random(&lat, &mut rng, 0.8);
        let h = SpectralField::random(&lat, &mut rng, 0.8);
        let mut g = SpectralField::zero(&lat);
        interp.value_grad(&x, &mut g);
        let eps = 1e-6;
        let mut xp = x.clone();
        xp.axpy(eps, &h);
        let mut xm = x.clone();
        xm.axpy(-eps, &h);
        let fd = (interp.value(&xp) - interp.value(&xm)) / (2.0 * eps);
        let lin = g.inner_h(&h);
        assert!((fd - lin).abs() < 1e-5 * (1.0 + lin.abs()), "fd={fd} lin={lin}");
    }

    #[test]
    fn grad_field_interpolation_averages_stored_fields() {
        let lat = lat64(2);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let points: Vec<_> = (0..10).map(|_| SpectralField::random(&lat, &mut rng, 0.8)).collect();
        let grads: Vec<_> = points.iter().map(|p| p.scaled(2.0)).collect();
        let mut cloud = SampleCloud::new(points);
        cloud.grads = Some(grads);
        let interp = CloudInterp::new(&cloud);
        let mut out = SpectralField::zero(&lat);
        interp.grad_field(&cloud.points[0], &mut out).unwrap();
        // Nearly exact at a node.
        assert!(out.dist_h(&cloud.points[0].scaled(2.0)) < 1e-5);
    }

    #[test]
    fn pick_indices_is_deterministic_and_unique() {
        let a = pick_indices(100, 10, 5);
        let b = pick_indices(100, 10, 5);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        let mut c = a.clone();
        c.dedup();
        assert_eq!(c.len(), 10);
        assert!(pick_indices(3, 10, 1).len() == 3);
    }

    #[test]
    fn cylinder_battery_is_bounded_and_deterministic() {
        let lat = lat64(3);
        let b1 = cylinder_battery::<f64>(&lat, 10, 42, 0.8);
        let b2 = cylinder_battery::<f64>(&lat, 10, 42, 0.8);
        assert_eq!(b1.len(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x = SpectralField::random(&lat, &mut rng, 1.0);
        for (f, g) in b1.iter().zip(&b2) {
            assert_eq!(f.eval(&x), g.eval(&x));
            assert!(f.eval(&x).abs() <= 1.0);
            assert!((f.lip_bound().unwrap() - 0.8).abs() < 1e-12);
        }
    }
}
