//! Discounted stochastic control: the explicit Hamiltonian/feedback pair,
//! the contraction fixed point for the stationary semilinear equation on a
//! sample cloud, discounted-cost evaluation under arbitrary policies, and
//! the verification identity that certifies a candidate optimum.

use std::sync::Arc;

use crate::error::{Result, ScbfError};
use crate::functional::{CloudInterp, Functional, InterpFunctional, SampleCloud};
use crate::kolmogorov::{resolvent_eval, resolvent_sqrtq_gradient, ResolventConfig};
use crate::operators::{ModelParams, NoiseSpec};
use crate::scalar::Scalar;
use crate::sim::{par_paths, Integrator, WienerStream};
use crate::spectral::{Lattice, SpectralField};
use crate::stats::{CompSum, Welford};

/// The Hamiltonian g applied to ‖p‖_H together with its feedback map
/// 𝒢(p) = −D_p g(p). Two kinds: the plain quadratic g(p) = ½‖p‖² (Legendre
/// pair of h(y) = ½‖y‖², no control bound, not globally Lipschitz) and its
/// radius-R truncation
///
/// ```text
/// g(p) = ½‖p‖²      ‖p‖ ≤ R
///        R‖p‖ − R²/2 ‖p‖ > R
/// ```
///
/// which is Lipschitz with constant R and clamps the feedback to ‖𝒢‖ ≤ R.
#[derive(Clone, Copy, Debug)]
pub struct Hamiltonian<T: Scalar> {
    radius: Option<T>,
}

impl<T: Scalar> Hamiltonian<T> {
    pub fn quadratic() -> Self {
        Hamiltonian { radius: None }
    }

    pub fn truncated(r: T) -> Self {
        assert!(r >= T::zero(), "control radius must be non-negative");
        Hamiltonian { radius: Some(r) }
    }

    /// g as a function of the gradient magnitude.
    pub fn g(&self, p_norm: T) -> T {
        let p = p_norm.abs();
        match self.radius {
            Some(r) if p > r => r * p - T::half() * r * r,
            _ => T::half() * p * p,
        }
    }

    pub fn g_of(&self, p: &SpectralField<T>) -> T {
        self.g(p.norm_h())
    }

    /// Global Lipschitz constant of g; None for the unbounded quadratic.
    pub fn lip(&self) -> Option<T> {
        self.radius
    }

    pub fn radius(&self) -> Option<T> {
        self.radius
    }

    /// Clamp a control into the admissible ball (no-op for quadratic).
    pub fn clip(&self, u: &mut SpectralField<T>) {
        if let Some(r) = self.radius {
            let n = u.norm_h();
            if n > r {
                u.scale(r / n);
            }
        }
    }

    /// 𝒢(p) = −p on ‖p‖ ≤ R, −Rp/‖p‖ outside; writes into `out`.
    pub fn feedback(&self, p: &SpectralField<T>, out: &mut SpectralField<T>) {
        out.amps_mut().copy_from_slice(p.amps());
        out.scale(-T::one());
        self.clip(out);
    }
}

/// A state-feedback control map producing the raw (pre-√Q) control U(x).
pub trait ControlPolicy<T: Scalar>: Sync {
    fn control(&self, x: &SpectralField<T>, out: &mut SpectralField<T>);
}

impl<T: Scalar, F> ControlPolicy<T> for F
where
    F: Fn(&SpectralField<T>, &mut SpectralField<T>) + Sync,
{
    fn control(&self, x: &SpectralField<T>, out: &mut SpectralField<T>) {
        self(x, out)
    }
}

/// U ≡ 0.
pub struct ZeroPolicy;

impl<T: Scalar> ControlPolicy<T> for ZeroPolicy {
    fn control(&self, _x: &SpectralField<T>, out: &mut SpectralField<T>) {
        out.set_zero();
    }
}

/// U ≡ u₀ regardless of state.
pub struct ConstantPolicy<T: Scalar>(pub SpectralField<T>);

impl<T: Scalar> ControlPolicy<T> for ConstantPolicy<T> {
    fn control(&self, _x: &SpectralField<T>, out: &mut SpectralField<T>) {
        out.amps_mut().copy_from_slice(self.0.amps());
    }
}

/// One application of the fixed-point map γ(ψ) = f − g(√Q D_x(λ−𝒩)^{−1}ψ)
/// over the cloud carried by `work` (points + current ψ values). Streams are
/// a pure function of the point index, so repeated calls reuse identical
/// noise — the contraction is measured on the map, not on Monte-Carlo
/// jitter.
pub struct GammaResult<T: Scalar> {
    pub psi: Vec<T>,
    /// √Q D_x(λ−𝒩)^{−1}ψ at each cloud point.
    pub grads: Vec<SpectralField<T>>,
    /// Largest per-point aggregate gradient SE.
    pub max_se: T,
}

pub fn picard_gamma<T: Scalar>(
    lat: &Arc<Lattice<T>>,
    params: &ModelParams<T>,
    noise: &NoiseSpec<T>,
    h: &Hamiltonian<T>,
    f_vals: &[T],
    work: &SampleCloud<T>,
    rc: &ResolventConfig<T>,
) -> Result<GammaResult<T>> {
    if f_vals.len() != work.len() {
        return Err(ScbfError::InvalidParam("one cost value per cloud point".into()));
    }
    let psi_fn = InterpFunctional::new(work);
    let mut psi = Vec::with_capacity(work.len());
    let mut grads = Vec::with_capacity(work.len());
    let mut max_se = T::zero();
    for (i, x) in work.points.iter().enumerate() {
        let rc_pt = ResolventConfig {
            mc: rc.mc.with_stream_base(rc.mc.stream_base + (i * rc.mc.n_paths) as u64),
            ..*rc
        };
        let (g, se) = resolvent_sqrtq_gradient(lat, params, noise, &psi_fn, x, &rc_pt)?;
        psi.push(f_vals[i] - h.g_of(&g));
        grads.push(g);
        max_se = max_se.max(se);
    }
    Ok(GammaResult { psi, grads, max_se })
}

#[derive(Clone, Copy, Debug)]
pub struct HjbConfig<T: Scalar> {
    pub resolvent: ResolventConfig<T>,
    /// Convergence threshold on ‖ψ_{n+1} − ψ_n‖_{L²(cloud)}.
    pub tol: T,
    pub max_iter: usize,
}

/// Converged fixed point: ψ = γ(ψ) and φ = (λ−𝒩)^{−1}ψ with its √Q-gradient,
/// all tabulated on the cloud. `cloud.values` holds φ, `cloud.grads` holds
/// √Q D_xφ — together they define the feedback policy off-cloud by
/// inverse-distance interpolation.
pub struct HjbSolution<T: Scalar> {
    pub cloud: SampleCloud<T>,
    pub psi: Vec<T>,
    pub lambda: T,
    pub lip: T,
    pub iterations: usize,
    pub residuals: Vec<T>,
    /// Largest gradient SE in the final sweep.
    pub grad_se: T,
    /// Largest resolvent-value SE in the φ sweep.
    pub phi_se: T,
}

impl<T: Scalar> HjbSolution<T> {
    pub fn phi(&self) -> &[T] {
        &self.cloud.values
    }

    pub fn phi_at(&self, x: &SpectralField<T>) -> T {
        CloudInterp::new(&self.cloud).value(x)
    }

    pub fn feedback_policy<'s>(&'s self, h: &'s Hamiltonian<T>) -> FeedbackPolicy<'s, T> {
        FeedbackPolicy { cloud: &self.cloud, h }
    }
}

/// U*(x) = 𝒢(√Q D_xφ(x)) with the gradient interpolated from the cloud.
pub struct FeedbackPolicy<'s, T: Scalar> {
    cloud: &'s SampleCloud<T>,
    h: &'s Hamiltonian<T>,
}

impl<'s, T: Scalar> ControlPolicy<T> for FeedbackPolicy<'s, T> {
    fn control(&self, x: &SpectralField<T>, out: &mut SpectralField<T>) {
        CloudInterp::new(self.cloud)
            .grad_field(x, out)
            .expect("feedback cloud stores gradients");
        out.scale(-T::one());
        self.h.clip(out);
    }
}

/// Picard iteration for ψ = f − g(√Q D_x(λ−𝒩)^{−1}ψ) on the cloud points,
/// starting from ψ₀ = f. Requires λ > lip(g)² so the map contracts with
/// factor lip/√λ < 1; the quadratic Hamiltonian is rejected outright since
/// it has no global Lipschitz bound. After convergence one extra sweep
/// tabulates φ and √Q D_xφ for the final ψ.
pub fn solve_hjb<T: Scalar>(
    lat: &Arc<Lattice<T>>,
    params: &ModelParams<T>,
    noise: &NoiseSpec<T>,
    f: &dyn Functional<T>,
    h: &Hamiltonian<T>,
    points: &[SpectralField<T>],
    cfg: &HjbConfig<T>,
) -> Result<HjbSolution<T>> {
    let lambda = cfg.resolvent.lambda;
    let lip = h.lip().ok_or_else(|| {
        ScbfError::InvalidParam(
            "fixed point needs a Lipschitz Hamiltonian; use the truncated kind".into(),
        )
    })?;
    if lambda <= lip * lip {
        return Err(ScbfError::InvalidParam(format!(
            "discount too small for contraction: need λ > lip² = {:e}",
            (lip * lip).to_f64_lossy()
        )));
    }
    if points.is_empty() {
        return Err(ScbfError::InvalidParam("empty sample cloud".into()));
    }

    let f_vals: Vec<T> = points.iter().map(|x| f.eval(x)).collect();
    let mut work = SampleCloud {
        points: points.to_vec(),
        values: f_vals.clone(),
        grads: None,
    };
    let n_inv = T::one() / T::of(points.len() as f64);

    let mut residuals: Vec<T> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 1..=cfg.max_iter {
        iterations += 1;
        let step = picard_gamma(lat, params, noise, h, &f_vals, &work, &cfg.resolvent)?;
        let mut acc = T::zero();
        for (new, old) in step.psi.iter().zip(&work.values) {
            let d = *new - *old;
            acc += d * d;
        }
        let residual = (acc * n_inv).sqrt();
        residuals.push(residual);
        work.values = step.psi;
        if residual <= cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(ScbfError::NoConvergence {
            iterations,
            history: residuals.iter().map(|r| r.to_f64_lossy()).collect(),
        });
    }

    // Final sweeps against the converged ψ: its resolvent gradient is
    // √Q D_xφ, its resolvent value is φ.
    let fin = picard_gamma(lat, params, noise, h, &f_vals, &work, &cfg.resolvent)?;
    let psi_fn = InterpFunctional::new(&work);
    let mut phi = Vec::with_capacity(points.len());
    let mut phi_se = T::zero();
    for (i, x) in work.points.iter().enumerate() {
        let rc_pt = ResolventConfig {
            mc: cfg
                .resolvent
                .mc
                .with_stream_base(cfg.resolvent.mc.stream_base + (i * cfg.resolvent.mc.n_paths) as u64),
            ..cfg.resolvent
        };
        let (v, se) = resolvent_eval(lat, params, noise, &psi_fn, x, &rc_pt)?;
        phi.push(v);
        phi_se = phi_se.max(se);
    }
    drop(psi_fn);
    let psi = work.values;
    let cloud = SampleCloud { points: work.points, values: phi, grads: Some(fin.grads) };
    Ok(HjbSolution {
        cloud,
        psi,
        lambda,
        lip,
        iterations,
        residuals,
        grad_se: fin.max_se,
        phi_se,
    })
}

/// J_∞(U) = E ∫₀^∞ e^{−λt} [f(X(t)) + ½‖U(X(t))‖²] dt under the controlled
/// dynamics dX = −[μAX + αX + B + βC]dt + √Q·U dt + √Q dW, by the same
/// discounted trapezoid quadrature as the resolvent. The policy's output is
/// clipped into the Hamiltonian's admissible ball before it acts or is
/// billed.
pub fn eval_cost<T: Scalar>(
    lat: &Arc<Lattice<T>>,
    params: &ModelParams<T>,
    noise: &NoiseSpec<T>,
    f: &dyn Functional<T>,
    h: &Hamiltonian<T>,
    policy: &dyn ControlPolicy<T>,
    x0: &SpectralField<T>,
    rc: &ResolventConfig<T>,
) -> Result<(T, T)> {
    let sup = match (f.sup_bound(), h.radius()) {
        (Some(s), Some(r)) => Some(s + T::half() * r * r),
        _ => None,
    };
    let (_, steps) = rc.horizon_steps(sup)?;
    let lam = rc.lambda;
    let dt = rc.mc.dt;
    let vals = par_paths(lat, *params, rc.mc.n_paths, |ws, path| {
        let mut x = x0.clone();
        let mut u = SpectralField::zero(lat);
        let mut src = WienerStream::new(rc.mc.seed, rc.mc.stream_base + path as u64);
        let mut ig = Integrator::new(ws, noise, dt);
        if let Some(e) = rc.truncation {
            ig.set_truncation(e);
        }
        let mut acc = CompSum::new();
        for n in 0..=steps {
            let w = if n == 0 || n == steps { T::half() } else { T::one() };
            let t = dt * T::of(n as f64);
            policy.control(&x, &mut u);
            h.clip(&mut u);
            let penalty = {
                let (h2, _) = u.energy_norms_sq();
                T::half() * h2
            };
            acc.add(w * dt * (-lam * t).exp() * (f.eval(&x) + penalty));
            if n < steps {
                noise.sqrt_apply_in_place(&mut u);
                ig.step(t, &mut x, &mut src, Some(&u))?;
            }
        }
        Ok(acc.total())
    })?;
    let mut w = Welford::new();
    for v in vals {
        w.push(v);
    }
    Ok((w.mean(), w.se()))
}

#[derive(Clone, Debug)]
pub struct PolicyCost<T: Scalar> {
    pub name: String,
    pub cost: T,
    pub se: T,
}

/// Costs of several policies from the same start under identical noise
/// streams, so pairwise gaps carry the common-random-number variance
/// reduction. Shifting f by a constant shifts every entry by the same
/// quadrature mass and leaves the ranking untouched.
pub fn cost_tournament<T: Scalar>(
    lat: &Arc<Lattice<T>>,
    params: &ModelParams<T>,
    noise: &NoiseSpec<T>,
    f: &dyn Functional<T>,
    h: &Hamiltonian<T>,
    entries: &[(&str, &dyn ControlPolicy<T>)],
    x0: &SpectralField<T>,
    rc: &ResolventConfig<T>,
) -> Result<Vec<PolicyCost<T>>> {
    entries
        .iter()
        .map(|(name, policy)| {
            let (cost, se) = eval_cost(lat, params, noise, f, h, *policy, x0, rc)?;
            Ok(PolicyCost { name: (*name).to_string(), cost, se })
        })
        .collect()
}

/// Both sides of the pathwise optimality identity
///
/// ```text
/// φ(x₀) + E ∫₀^∞ (e^{−λt}/2)[‖U + √QD_xφ‖² − Ψ(‖√QD_xφ‖ − R)] dt = J_∞(U)
/// ```
///
/// with Ψ(ξ) = ξ² on ξ > 0 and 0 otherwise, estimated along one common set
/// of controlled paths; `residual` is |LHS − RHS| and `se` the standard
/// error of the per-path difference. For the feedback policy with gradients
/// inside the ball the correction vanishes identically and the residual
/// collapses to |φ(x₀) − J_∞(U*)|.
pub struct VerificationReport<T: Scalar> {
    pub phi_x0: T,
    pub correction: T,
    pub cost: T,
    pub residual: T,
    pub se: T,
}

pub fn verification_residual<T: Scalar>(
    lat: &Arc<Lattice<T>>,
    params: &ModelParams<T>,
    noise: &NoiseSpec<T>,
    sol: &HjbSolution<T>,
    h: &Hamiltonian<T>,
    policy: &dyn ControlPolicy<T>,
    f: &dyn Functional<T>,
    x0: &SpectralField<T>,
    rc: &ResolventConfig<T>,
) -> Result<VerificationReport<T>> {
    let max_grad = sol
        .cloud
        .grads
        .as_ref()
        .map(|gs| gs.iter().fold(T::zero(), |m, g| m.max(g.norm_h())))
        .ok_or_else(|| ScbfError::InvalidParam("solution cloud stores no gradients".into()))?;
    let sup = match (f.sup_bound(), h.radius()) {
        (Some(s), Some(r)) => {
            let rg = r + max_grad;
            Some(s + T::half() * r * r + T::half() * rg * rg + T::half() * max_grad * max_grad)
        }
        _ => None,
    };
    let (_, steps) = rc.horizon_steps(sup)?;
    let lam = rc.lambda;
    let dt = rc.mc.dt;
    let radius = h.radius().unwrap_or_else(T::infinity);

    // Per path: discounted cost integrand and discounted correction
    // integrand accumulated together; their difference is the estimator.
    let vals = par_paths(lat, *params, rc.mc.n_paths, |ws, path| {
        let interp = CloudInterp::new(&sol.cloud);
        let mut x = x0.clone();
        let mut u = SpectralField::zero(lat);
        let mut g = SpectralField::zero(lat);
        let mut src = WienerStream::new(rc.mc.seed, rc.mc.stream_base + path as u64);
        let mut ig = Integrator::new(ws, noise, dt);
        if let Some(e) = rc.truncation {
            ig.set_truncation(e);
        }
        let mut acc = CompSum::new();
        for n in 0..=steps {
            let w = if n == 0 || n == steps { T::half() } else { T::one() };
            let t = dt * T::of(n as f64);
            policy.control(&x, &mut u);
            h.clip(&mut u);
            interp.grad_field(&x, &mut g)?;
            let gn = g.norm_h();
            let over = gn - radius;
            let psi_term = if over > T::zero() { over * over } else { T::zero() };
            g.axpy(T::one(), &u);
            let sum2 = {
                let (h2, _) = g.energy_norms_sq();
                h2
            };
            let corr = T::half() * (sum2 - psi_term);
            let penalty = {
                let (h2, _) = u.energy_norms_sq();
                T::half() * h2
            };
            let cost = f.eval(&x) + penalty;
            acc.add(w * dt * (-lam * t).exp() * (corr - cost));
            if n < steps {
                noise.sqrt_apply_in_place(&mut u);
                ig.step(t, &mut x, &mut src, Some(&u))?;
            }
        }
        Ok(acc.total())
    })?;
    let mut wf = Welford::new();
    for v in &vals {
        wf.push(*v);
    }
    let diff = wf.mean();
    let se = wf.se();
    let phi_x0 = sol.phi_at(x0);

    // diff = correction − cost, so LHS − RHS = φ(x₀) + diff. Recover the
    // pieces for reporting by a second pass over cost alone with the same
    // streams and the same quadrature nodes, which makes the decomposition
    // exact.
    let rc_cost = ResolventConfig {
        t_max: Some(dt * T::of(steps as f64 - 0.5)),
        ..*rc
    };
    let (cost, _) = eval_cost(lat, params, noise, f, h, policy, x0, &rc_cost)?;
    Ok(VerificationReport {
        phi_x0,
        correction: diff + cost,
        cost,
        residual: (phi_x0 + diff).abs(),
        se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional::TestFunctional;
    use crate::kolmogorov::McConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lat64(n: usize) -> Arc<Lattice<f64>> {
        Lattice::new(n, std::f64::consts::TAU)
    }

    fn params() -> ModelParams<f64> {
        ModelParams { mu: 0.8, alpha: 0.5, beta: 0.2, r: 3, convection: true }
    }

    #[test]
    fn hamiltonian_examples_and_feedback_geometry() {
        let r: f64 = 1.4;
        let h = Hamiltonian::truncated(r);
        assert_eq!(h.g(0.0), 0.0);
        assert!((h.g(r / 2.0) - r * r / 8.0).abs() < 1e-15);
        assert!((h.g(2.0 * r) - 1.5 * r * r).abs() < 1e-15);
        assert_eq!(h.lip(), Some(r));

        let lat = lat64(2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = SpectralField::random(&lat, &mut rng, 1.0);
        let mut out = SpectralField::zero(&lat);

        // Inside the ball 𝒢(p) = −p exactly.
        p.scale(0.5 * r / p.norm_h());
        h.feedback(&p, &mut out);
        let mut sum = out.clone();
        sum.axpy(1.0, &p);
        assert!(sum.norm_h() < 1e-14);

        // Outside: magnitude R, direction −p/‖p‖.
        p.scale(4.0);
        h.feedback(&p, &mut out);
        assert!((out.norm_h() - r).abs() < 1e-12);
        let cosang = out.inner_h(&p) / (out.norm_h() * p.norm_h());
        assert!((cosang + 1.0).abs() < 1e-12);

        // 𝒢(0) = 0 and continuity across the ball boundary.
        let zero = SpectralField::zero(&lat);
        h.feedback(&zero, &mut out);
        assert_eq!(out.norm_h(), 0.0);
        let mut just_in = p.clone();
        just_in.scale((1.0 - 1e-9) * r / just_in.norm_h());
        let mut just_out = p.clone();
        just_out.scale((1.0 + 1e-9) * r / just_out.norm_h());
        let mut fi = SpectralField::zero(&lat);
        let mut fo = SpectralField::zero(&lat);
        h.feedback(&just_in, &mut fi);
        h.feedback(&just_out, &mut fo);
        fi.axpy(-1.0, &fo);
        assert!(fi.norm_h() < 1e-8);

        // Quadratic: no clipping, g = ½p².
        let q = Hamiltonian::<f64>::quadratic();
        assert_eq!(q.lip(), None);
        assert!((q.g(3.0) - 4.5f64).abs() < 1e-15);
        q.feedback(&p, &mut out);
        out.axpy(1.0, &p);
        assert!(out.norm_h() < 1e-14);
    }

    #[test]
    fn truncated_g_is_lipschitz_on_sampled_pairs() {
        let r = 0.9;
        let h = Hamiltonian::truncated(r);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        use rand::Rng;
        for _ in 0..500 {
            let a: f64 = rng.gen_range(0.0..4.0);
            let b: f64 = rng.gen_range(0.0..4.0);
            assert!((h.g(a) - h.g(b)).abs() <= r * (a - b).abs() + 1e-15);
        }
    }

    #[test]
    fn solver_rejects_small_discounts_and_the_quadratic_kind() {
        let lat = lat64(2);
        let p = params();
        let q = NoiseSpec::power_law(&lat, 2.0, 0.1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = vec![SpectralField::random(&lat, &mut rng, 0.5)];
        let f = TestFunctional::Constant(1.0);
        let mk = |lambda| HjbConfig {
            resolvent: ResolventConfig::new(lambda, McConfig::new(2, 0.01, 5)),
            tol: 1e-3,
            max_iter: 5,
        };
        // lip = 2 ⇒ needs λ > 4.
        let h = Hamiltonian::truncated(2.0);
        assert!(solve_hjb(&lat, &p, &q, &f, &h, &pts, &mk(4.0)).is_err());
        assert!(solve_hjb(&lat, &p, &q, &f, &Hamiltonian::quadratic(), &pts, &mk(100.0)).is_err());
    }

    #[test]
    fn constant_cost_is_a_one_iteration_fixed_point() {
        let lat = lat64(2);
        let p = params();
        let q = NoiseSpec::power_law(&lat, 2.0, 0.1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pts: Vec<_> = (0..3).map(|_| SpectralField::random(&lat, &mut rng, 0.5)).collect();
        let c = 3.0;
        let lambda = 2.0;
        let h = Hamiltonian::truncated(1.0);
        let cfg = HjbConfig {
            resolvent: ResolventConfig::new(lambda, McConfig::new(2, 0.01, 5)),
            tol: 1e-6,
            max_iter: 10,
        };
        let sol =
            solve_hjb(&lat, &p, &q, &TestFunctional::Constant(c), &h, &pts, &cfg).unwrap();
        assert_eq!(sol.iterations, 1);
        for &v in &sol.psi {
            assert_eq!(v, c);
        }
        // Gradient of a constant interpolant vanishes to round-off (the
        // IDW value Σwᵢc/Σwᵢ reproduces c only up to the last bit).
        assert!(sol.grad_se < 1e-12);
        for g in sol.cloud.grads.as_ref().unwrap() {
            assert!(g.norm_h() < 1e-12);
        }
        // φ ≡ c/λ up to quadrature (trapezoid bias + discount tail).
        for &v in sol.phi() {
            assert!((v - c / lambda).abs() < 2e-3 * c, "phi = {v}");
        }
    }

    #[test]
    fn zero_hamiltonian_returns_the_cost_in_one_iteration() {
        let lat = lat64(2);
        let p = params();
        let q = NoiseSpec::power_law(&lat, 2.0, 0.1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pts: Vec<_> = (0..3).map(|_| SpectralField::random(&lat, &mut rng, 0.6)).collect();
        let hfield = SpectralField::random(&lat, &mut rng, 1.0);
        let f = TestFunctional::CylinderCos { h: hfield };
        let h = Hamiltonian::truncated(0.0); // g ≡ 0, 𝒢 ≡ 0
        let cfg = HjbConfig {
            resolvent: ResolventConfig::new(1.0, McConfig::new(2, 0.02, 5)).with_t_max(0.3),
            tol: 1e-9,
            max_iter: 3,
        };
        let sol = solve_hjb(&lat, &p, &q, &f, &h, &pts, &cfg).unwrap();
        assert_eq!(sol.iterations, 1);
        for (v, x) in sol.psi.iter().zip(&pts) {
            assert_eq!(*v, f.eval(x));
        }
    }

    #[test]
    fn uncontrolled_unit_cost_integrates_to_inverse_discount() {
        let lat = lat64(1);
        let p = params();
        let q = NoiseSpec::power_law(&lat, 2.0, 0.1, 1);
        let x0 = SpectralField::zero(&lat);
        let h = Hamiltonian::truncated(1.0);
        let lambda = 2.0;
        let rc = ResolventConfig::new(lambda, McConfig::new(3, 0.005, 23));
        let (v, _) = eval_cost(
            &lat,
            &p,
            &q,
            &TestFunctional::Constant(1.0),
            &h,
            &ZeroPolicy,
            &x0,
            &rc,
        )
        .unwrap();
        assert!((v - 1.0 / lambda).abs() < 1e-3, "cost = {v}");

        let (z, zse) = eval_cost(
            &lat,
            &p,
            &q,
            &TestFunctional::Constant(0.0),
            &h,
            &ZeroPolicy,
            &x0,
            &ResolventConfig::new(lambda, McConfig::new(3, 0.005, 23)).with_t_max(0.2),
        )
        .unwrap();
        assert_eq!(z, 0.0);
        assert_eq!(zse, 0.0);
    }

    #[test]
    fn verification_identity_closes_for_constant_cost_and_zero_control() {
        let lat = lat64(2);
        let p = params();
        let q = NoiseSpec::power_law(&lat, 2.0, 0.1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let pts: Vec<_> = (0..3).map(|_| SpectralField::random(&lat, &mut rng, 0.5)).collect();
        let c = 2.0;
        let lambda = 2.0;
        let h = Hamiltonian::truncated(1.0);
        let cfg = HjbConfig {
            resolvent: ResolventConfig::new(lambda, McConfig::new(2, 0.01, 31)),
            tol: 1e-6,
            max_iter: 10,
        };
        let f = TestFunctional::Constant(c);
        let sol = solve_hjb(&lat, &p, &q, &f, &h, &pts, &cfg).unwrap();
        let x0 = pts[0].clone();
        let rep = verification_residual(
            &lat,
            &p,
            &q,
            &sol,
            &h,
            &ZeroPolicy,
            &f,
            &x0,
            &cfg.resolvent,
        )
        .unwrap();
        // Dφ ≡ 0 and U ≡ 0 ⇒ correction ≡ 0 to round-off; both sides equal
        // c/λ up to quadrature bias.
        assert!(rep.correction.abs() < 1e-9, "correction = {}", rep.correction);
        assert!(rep.residual < 5e-3 * c, "residual = {}", rep.residual);
    }

    #[test]
    fn tournament_ranking_is_invariant_under_constant_cost_shifts() {
        let lat = lat64(1);
        let p = params();
        let q = NoiseSpec::power_law(&lat, 2.0, 0.1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let x0 = SpectralField::random(&lat, &mut rng, 0.4);
        let h = Hamiltonian::truncated(1.0);
        let rc = ResolventConfig::new(2.0, McConfig::new(3, 0.02, 41)).with_t_max(0.5);
        let u1 = SpectralField::random(&lat, &mut rng, 0.8);
        let u2 = SpectralField::random(&lat, &mut rng, 0.8);
        let p1 = ConstantPolicy(u1);
        let p2 = ConstantPolicy(u2);
        let entries: Vec<(&str, &dyn ControlPolicy<f64>)> =
            vec![("zero", &ZeroPolicy), ("c1", &p1), ("c2", &p2)];

        let hfield = SpectralField::random(&lat, &mut rng, 1.0);
        let base = TestFunctional::CylinderSin { h: hfield.clone() };
        let t0 = cost_tournament(&lat, &p, &q, &base, &h, &entries, &x0, &rc).unwrap();

        // Same functional shifted by a constant: per-policy costs move by
        // one common quadrature mass, so gaps and the argmin are unchanged.
        struct Shifted<'a>(&'a TestFunctional<f64>, f64);
        impl<'a> Functional<f64> for Shifted<'a> {
            fn eval(&self, x: &SpectralField<f64>) -> f64 {
                self.0.eval(x) + self.1
            }
            fn sup_bound(&self) -> Option<f64> {
                self.0.sup_bound().map(|s| s + self.1.abs())
            }
        }
        let shifted = Shifted(&base, 5.0);
        let t1 = cost_tournament(&lat, &p, &q, &shifted, &h, &entries, &x0, &rc).unwrap();

        let argmin = |t: &[PolicyCost<f64>]| {
            t.iter()
                .enumerate()
                .min_by(|a, b| a.1.cost.partial_cmp(&b.1.cost).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(argmin(&t0), argmin(&t1));
        let d0 = t1[0].cost - t0[0].cost;
        for (a, b) in t0.iter().zip(&t1) {
            assert!((b.cost - a.cost - d0).abs() < 1e-12);
        }
    }
}
