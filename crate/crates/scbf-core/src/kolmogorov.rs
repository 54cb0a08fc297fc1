//! The generator of the diffusion on state space, Monte-Carlo transition
//! semigroup and resolvent, the resolvent-gradient representation, and the
//! diagnostics built on them (carré du champ, dissipativity inequality,
//! perturbation pairing, drift-truncation residuals).

use std::sync::Arc;

use crate::error::{Result, ScbfError};
use crate::functional::Functional;
use crate::measure::EmpiricalMeasure;
use crate::operators::{ModelParams, NoiseSpec, Workspace};
use crate::scalar::Scalar;
use crate::sim::{par_paths, Integrator, WienerStream};
use crate::spectral::{Lattice, SpectralField};
use crate::stats::{CompSum, Welford};

/// Applies the generator 𝒩₀f(x) = ½Tr[Q D²f(x)] − (F(x), Df(x)), with
/// F(x) = μAx + αx + B(x) + βC(x) and the trace summed over the retained
/// modes. On the Galerkin lattice the noise has no tail beyond the cutoff,
/// so the truncated trace is the whole trace.
pub struct N0Evaluator<T: Scalar> {
    /// (μ_j, e_j) for modes with μ_j > 0 — the only ones in the trace.
    modes: Vec<(T, SpectralField<T>)>,
    drift: SpectralField<T>,
    grad: SpectralField<T>,
    hv: SpectralField<T>,
}

impl<T: Scalar> N0Evaluator<T> {
    pub fn new(lat: &Arc<Lattice<T>>, noise: &NoiseSpec<T>) -> Self {
        let modes = (0..lat.basis_len())
            .filter(|&j| noise.mu(j) > T::zero())
            .map(|j| (noise.mu(j), SpectralField::basis_field(lat, lat.basis(j))))
            .collect();
        N0Evaluator {
            modes,
            drift: SpectralField::zero(lat),
            grad: SpectralField::zero(lat),
            hv: SpectralField::zero(lat),
        }
    }

    /// Number of modes carried by the trace term.
    pub fn trace_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn apply(
        &mut self,
        ws: &mut Workspace<T>,
        f: &dyn Functional<T>,
        x: &SpectralField<T>,
    ) -> Result<T> {
        let mut trace = CompSum::new();
        for (mu_j, e_j) in &self.modes {
            f.hess_vec(x, e_j, &mut self.hv)?;
            trace.add(*mu_j * self.hv.inner_h(e_j));
        }
        ws.full_drift(x, &mut self.drift);
        f.grad(x, &mut self.grad)?;
        Ok(T::half() * trace.total() - self.drift.inner_h(&self.grad))
    }
}

/// Monte-Carlo sampling plan. Stream ids are `stream_base + path`; nested
/// estimators must hand out disjoint `stream_base` ranges.
#[derive(Clone, Copy, Debug)]
pub struct McConfig<T: Scalar> {
    pub n_paths: usize,
    pub dt: T,
    pub seed: u64,
    pub stream_base: u64,
}

impl<T: Scalar> McConfig<T> {
    pub fn new(n_paths: usize, dt: T, seed: u64) -> Self {
        McConfig { n_paths, dt, seed, stream_base: 0 }
    }

    pub fn with_stream_base(mut self, base: u64) -> Self {
        self.stream_base = base;
        self
    }
}

/// Discounted-quadrature plan for (λ − 𝒩)^{−1}.
#[derive(Clone, Copy, Debug)]
pub struct ResolventConfig<T: Scalar> {
    pub lambda: T,
    pub mc: McConfig<T>,
    /// Explicit horizon; None derives one from the integrand's sup bound.
    pub t_max: Option<T>,
    /// Truncation tolerance for the discarded tail ∫_T^∞.
    pub tol: T,
    /// Run the ε-truncated dynamics instead of the plain ones.
    pub truncation: Option<T>,
}

impl<T: Scalar> ResolventConfig<T> {
    pub fn new(lambda: T, mc: McConfig<T>) -> Self {
        ResolventConfig { lambda, mc, t_max: None, tol: T::of(1e-6), truncation: None }
    }

    pub fn with_t_max(mut self, t_max: T) -> Self {
        self.t_max = Some(t_max);
        self
    }

    pub fn with_truncation(mut self, eps: T) -> Self {
        self.truncation = Some(eps);
        self
    }

    /// Horizon and step count: e^{−λT}·sup/λ ≤ tol ⟹ T ≥ ln(sup/(tol·λ))/λ.
    fn horizon_for(&self, f: &dyn Functional<T>) -> Result<(T, usize)> {
        self.horizon_steps(f.sup_bound())
    }

    pub(crate) fn horizon_steps(&self, sup: Option<T>) -> Result<(T, usize)> {
        if self.lambda <= T::zero() {
            return Err(ScbfError::InvalidParam("resolvent needs λ > 0".into()));
        }
        let t_max = match self.t_max {
            Some(t) => t,
            None => {
                let sup = sup.ok_or_else(|| {
                    ScbfError::InvalidParam(
                        "resolvent horizon needs a sup bound or an explicit t_max".into(),
                    )
                })?;
                let ratio = sup / (self.tol * self.lambda);
                if ratio > T::one() {
                    ratio.ln() / self.lambda
                } else {
                    T::zero()
                }
            }
        };
        let t_max = t_max.max(self.mc.dt);
        let steps = (t_max / self.mc.dt).to_f64_lossy().ceil() as usize;
        Ok((self.mc.dt * T::of(steps as f64), steps.max(1)))
    }
}

/// P_t f(x) = E f(X_t^x) by Monte Carlo; exact at t = 0.
pub fn semigroup_eval<T: Scalar>(
    lat: &Arc<Lattice<T>>,
    params: &ModelParams<T>,
    noise: &NoiseSpec<T>,
    f: &dyn Functional<T>,
    x: &SpectralField<T>,
    t: T,
    mc: &McConfig<T>,
) -> Result<(T, T)> {
    if t < T::zero() {
        return Err(ScbfError::InvalidParam("semigroup needs t ≥ 0".into()));
    }
    if t == T::zero() {
        return Ok((f.eval(x), T::zero()));
    }
    let steps = ((t / mc.dt).to_f64_lossy().round() as usize).max(1);
    let vals = par_paths(lat, *params, mc.n_paths, |ws, path| {
        let mut xx = x.clone();
        let mut src = WienerStream::new(mc.seed, mc.stream_base + path as u64);
        let mut ig = Integrator::new(ws, noise, mc.dt);
        for n in 0..steps {
            ig.step(mc.dt * T::of(n as f64), &mut xx, &mut src, None)?;
        }
        Ok(f.eval(&xx))
    })?;
    let mut w = Welford::new();
    for v in vals {
        w.push(v);
    }
    Ok((w.mean(), w.se()))
}

/// (λ − 𝒩)^{−1} f(x) = ∫₀^∞ e^{−λt} P_t f(x) dt by per-path trapezoid
/// quadrature on the discounted integrand.
pub fn resolvent_eval<T: Scalar>(
    lat: &Arc<Lattice<T>>,
    params: &ModelParams<T>,
    noise: &NoiseSpec<T>,
    f: &dyn Functional<T>,
    x: &SpectralField<T>,
    rc: &ResolventConfig<T>,
) -> Result<(T, T)> {
    let (_, steps) = rc.horizon_for(f)?;
    let lam = rc.lambda;
    let dt = rc.mc.dt;
    let vals = par_paths(lat, *params, rc.mc.n_paths, |ws, path| {
        let mut xx = x.clone();
        let mut src = WienerStream::new(rc.mc.seed, rc.mc.stream_base + path as u64);
        let mut ig = Integrator::new(ws, noise, dt);
        if let Some(e) = rc.truncation {
            ig.set_truncation(e);
        }
        let mut acc = CompSum::new();
        for n in 0..=steps {
            let w = if n == 0 || n == steps { T::half() } else { T::one() };
            let t = dt * T::of(n as f64);
            acc.add(w * dt * (-lam * t).exp() * f.eval(&xx));
            if n < steps {
                ig.step(t, &mut xx, &mut src, None)?;
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

/// Gradient of the resolvent assembled from first-variation flows: the j-th
/// component ∫₀^∞ e^{−λt} E[(Df(X_t), ξ_j(t))] dt is estimated with one
/// variation direction per selected mode under common randomness, then the
/// output field is Σ_j weights[j]·component_j·e_j. Returns the field and an
/// aggregate H-norm standard error.
pub fn resolvent_gradient_weighted<T: Scalar>(
    lat: &Arc<Lattice<T>>,
    params: &ModelParams<T>,
    noise: &NoiseSpec<T>,
    f: &dyn Functional<T>,
    x: &SpectralField<T>,
    rc: &ResolventConfig<T>,
    weights: &[T],
) -> Result<(SpectralField<T>, T)> {
    if weights.len() != lat.basis_len() {
        return Err(ScbfError::InvalidParam("one weight per basis mode required".into()));
    }
    if !f.has_grad() {
        return Err(ScbfError::InvalidParam("resolvent gradient needs Df".into()));
    }
    let dirs: Vec<usize> =
        (0..weights.len()).filter(|&j| weights[j] != T::zero()).collect();
    let out_zero = SpectralField::zero(lat);
    if dirs.is_empty() {
        return Ok((out_zero, T::zero()));
    }
    let (_, steps) = rc.horizon_for(f)?;
    let lam = rc.lambda;
    let dt = rc.mc.dt;

    let per_path: Vec<Vec<T>> = par_paths(lat, *params, rc.mc.n_paths, |ws, path| {
        let mut xx = x.clone();
        let mut xis: Vec<SpectralField<T>> =
            dirs.iter().map(|&j| SpectralField::basis_field(lat, lat.basis(j))).collect();
        let mut gbuf = SpectralField::zero(lat);
        let mut src = WienerStream::new(rc.mc.seed, rc.mc.stream_base + path as u64);
        let mut ig = Integrator::new(ws, noise, dt);
        if let Some(e) = rc.truncation {
            ig.set_truncation(e);
        }
        let mut accs: Vec<CompSum<T>> = vec![CompSum::new(); dirs.len()];
        for n in 0..=steps {
            let w = if n == 0 || n == steps { T::half() } else { T::one() };
            let t = dt * T::of(n as f64);
            f.grad(&xx, &mut gbuf)?;
            let scale = w * dt * (-lam * t).exp();
            for (acc, xi) in accs.iter_mut().zip(&xis) {
                acc.add(scale * gbuf.inner_h(xi));
            }
            if n < steps {
                let info = ig.step_begin(&xx);
                for xi in xis.iter_mut() {
                    ig.step_variation(xi);
                }
                ig.step_commit(t, &mut xx, info, &mut src, None)?;
            }
        }
        Ok(accs.into_iter().map(|a| a.total()).collect())
    })?;

    let mut stats: Vec<Welford<T>> = vec![Welford::new(); dirs.len()];
    for row in &per_path {
        for (w, &v) in stats.iter_mut().zip(row) {
            w.push(v);
        }
    }
    let mut out = out_zero;
    let mut se2 = T::zero();
    for (d, &j) in dirs.iter().enumerate() {
        let a = stats[d].mean();
        let se = stats[d].se();
        out.set_real_coeff(lat.basis(j), weights[j] * a);
        se2 += weights[j] * weights[j] * se * se;
    }
    Ok((out, se2.sqrt()))
}

/// √Q D_x(λ−𝒩)^{−1} f(x): mode weights √μ_j.
pub fn resolvent_sqrtq_gradient<T: Scalar>(
    lat: &Arc<Lattice<T>>,
    params: &ModelParams<T>,
    noise: &NoiseSpec<T>,
    f: &dyn Functional<T>,
    x: &SpectralField<T>,
    rc: &ResolventConfig<T>,
) -> Result<(SpectralField<T>, T)> {
    let weights: Vec<T> = (0..lat.basis_len()).map(|j| noise.mu(j).sqrt()).collect();
    resolvent_gradient_weighted(lat, params, noise, f, x, rc, &weights)
}

/// D_x(λ−𝒩)^{−1} f(x), the unweighted gradient over every retained mode.
pub fn resolvent_full_gradient<T: Scalar>(
    lat: &Arc<Lattice<T>>,
    params: &ModelParams<T>,
    noise: &NoiseSpec<T>,
    f: &dyn Functional<T>,
    x: &SpectralField<T>,
    rc: &ResolventConfig<T>,
) -> Result<(SpectralField<T>, T)> {
    let weights = vec![T::one(); lat.basis_len()];
    resolvent_gradient_weighted(lat, params, noise, f, x, rc, &weights)
}

/// A bounded vector field on state space (the perturbation drift).
pub trait DriftMap<T: Scalar>: Sync {
    fn eval(&self, x: &SpectralField<T>, out: &mut SpectralField<T>);
    /// sup_x ‖F(x)‖_H when known.
    fn sup_bound(&self) -> Option<T>;
}

/// A constant vector field.
pub struct ConstantDrift<T: Scalar>(pub SpectralField<T>);

impl<T: Scalar> DriftMap<T> for ConstantDrift<T> {
    fn eval(&self, _x: &SpectralField<T>, out: &mut SpectralField<T>) {
        out.amps_mut().copy_from_slice(self.0.amps());
    }

    fn sup_bound(&self) -> Option<T> {
        Some(self.0.norm_h())
    }
}

pub struct TLambdaReport<T: Scalar> {
    /// ⟨F(x), √Q D_x(λ−𝒩)^{−1}f(x)⟩
    pub value: T,
    pub se: T,
    /// λ > 2‖F‖₀², the perturbation regime; None when ‖F‖₀ is unknown.
    pub regime_ok: Option<bool>,
}

pub fn apply_t_lambda<T: Scalar>(
    lat: &Arc<Lattice<T>>,
    params: &ModelParams<T>,
    noise: &NoiseSpec<T>,
    big_f: &dyn DriftMap<T>,
    f: &dyn Functional<T>,
    x: &SpectralField<T>,
    rc: &ResolventConfig<T>,
) -> Result<TLambdaReport<T>> {
    let (g, g_se) = resolvent_sqrtq_gradient(lat, params, noise, f, x, rc)?;
    let mut fx = SpectralField::zero(lat);
    big_f.eval(x, &mut fx);
    let value = fx.inner_h(&g);
    let se = g_se * fx.norm_h();
    let regime_ok = big_f.sup_bound().map(|s| rc.lambda > T::two() * s * s);
    Ok(TLambdaReport { value, se, regime_ok })
}

/// ∫ 𝒩₀f dη over an empirical measure, with jackknife SE over stream
/// blocks. Zero for the exact invariant measure.
pub fn invariance_residual<T: Scalar>(
    m: &EmpiricalMeasure<T>,
    params: &ModelParams<T>,
    noise: &NoiseSpec<T>,
    f: &dyn Functional<T>,
) -> Result<(T, T)> {
    let mut ws = Workspace::new(&m.lattice, *params);
    let mut n0 = N0Evaluator::new(&m.lattice, noise);
    let mut err = None;
    let (v, se) = m.mean(|x| match n0.apply(&mut ws, f, x) {
        Ok(v) => v,
        Err(e) => {
            err.get_or_insert(e);
            T::zero()
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok((v, se)),
    }
}

pub struct CarreReport<T: Scalar> {
    /// ∫ 𝒩₀f·f dη
    pub pairing: T,
    pub pairing_se: T,
    /// ½∫ ‖√Q Df‖² dη
    pub energy: T,
    pub energy_se: T,
    /// |∫ (𝒩₀f·f + ½‖√QDf‖²) dη| — zero in exact stationarity.
    pub residual: T,
    pub residual_se: T,
}

/// The integration-by-parts identity ∫𝒩₀f·f dη = −½∫‖√QDf‖² dη tested
/// against the empirical measure.
pub fn carre_du_champ_residual<T: Scalar>(
    m: &EmpiricalMeasure<T>,
    params: &ModelParams<T>,
    noise: &NoiseSpec<T>,
    f: &dyn Functional<T>,
) -> Result<CarreReport<T>> {
    let mut ws = Workspace::new(&m.lattice, *params);
    let mut n0 = N0Evaluator::new(&m.lattice, noise);
    let mut gbuf = SpectralField::zero(&m.lattice);
    let mut err = None;

    let mut term = |x: &SpectralField<T>, which: u8| -> T {
        match which {
            0 => match n0.apply(&mut ws, f, x) {
                Ok(v) => v * f.eval(x),
                Err(e) => {
                    err.get_or_insert(e);
                    T::zero()
                }
            },
            _ => {
                if let Err(e) = f.grad(x, &mut gbuf) {
                    err.get_or_insert(e);
                    return T::zero();
                }
                let g = noise.sqrt_apply(&gbuf);
                let n = g.norm_h();
                T::half() * n * n
            }
        }
    };
    let (pairing, pairing_se) = m.mean(|x| term(x, 0));
    let (energy, energy_se) = m.mean(|x| term(x, 1));
    let (total, total_se) = m.mean(|x| term(x, 0) + term(x, 1));
    match err {
        Some(e) => Err(e),
        None => Ok(CarreReport {
            pairing,
            pairing_se,
            energy,
            energy_se,
            residual: total.abs(),
            residual_se: total_se,
        }),
    }
}

pub struct DissipReport<T: Scalar> {
    pub lambda: T,
    /// ‖f‖_{L²(η)}
    pub lhs: T,
    pub lhs_se: T,
    /// (1/λ)‖λf − 𝒩₀f‖_{L²(η)}
    pub rhs: T,
    pub rhs_se: T,
    pub pass: bool,
}

/// Empirical restatement of dissipativity: ‖f‖ ≤ (1/λ)‖λf − 𝒩₀f‖ in L²(η).
pub fn dissipativity_check<T: Scalar>(
    m: &EmpiricalMeasure<T>,
    params: &ModelParams<T>,
    noise: &NoiseSpec<T>,
    f: &dyn Functional<T>,
    lambda: T,
) -> Result<DissipReport<T>> {
    if lambda <= T::zero() {
        return Err(ScbfError::InvalidParam("dissipativity check needs λ > 0".into()));
    }
    let mut ws = Workspace::new(&m.lattice, *params);
    let mut n0 = N0Evaluator::new(&m.lattice, noise);
    let mut err = None;
    let (f2, f2_se) = m.mean(|x| {
        let v = f.eval(x);
        v * v
    });
    let (u2, u2_se) = m.mean(|x| {
        let v = lambda * f.eval(x)
            - match n0.apply(&mut ws, f, x) {
                Ok(v) => v,
                Err(e) => {
                    err.get_or_insert(e);
                    T::zero()
                }
            };
        v * v
    });
    if let Some(e) = err {
        return Err(e);
    }
    // Delta method: se(√m) = se(m) / (2√m).
    let lhs = f2.sqrt();
    let lhs_se = if lhs > T::zero() { f2_se / (T::two() * lhs) } else { T::zero() };
    let rhs_raw = u2.sqrt();
    let rhs_raw_se = if rhs_raw > T::zero() { u2_se / (T::two() * rhs_raw) } else { T::zero() };
    let rhs = rhs_raw / lambda;
    let rhs_se = rhs_raw_se / lambda;
    let pass = lhs <= rhs + T::of(3.0) * (lhs_se + rhs_se);
    Ok(DissipReport { lambda, lhs, lhs_se, rhs, rhs_se, pass })
}

pub struct TruncationLevel<T: Scalar> {
    pub eps: T,
    /// ∫ |(B_ε − B, D_xφ_ε)|² dη over the sampled points
    pub b_resid: T,
    /// ∫ |(C_ε − C, D_xφ_ε)|² dη over the sampled points
    pub c_resid: T,
    /// fraction of sampled points with ‖x‖_V > 1/ε
    pub saturated_fraction: T,
}

/// Drift-truncation residuals at a ladder of ε levels: φ_ε is the resolvent
/// of the ε-truncated dynamics, and the residual pairs the drift difference
/// with its gradient. Both residuals shrink as ε does, since the region
/// ‖x‖_V > 1/ε where the truncation bites recedes. Points are drawn from
/// the measure deterministically; streams stay fixed across levels so the
/// ladder is compared under common randomness.
pub fn truncation_residuals<T: Scalar>(
    m: &EmpiricalMeasure<T>,
    params: &ModelParams<T>,
    noise: &NoiseSpec<T>,
    f: &dyn Functional<T>,
    rc: &ResolventConfig<T>,
    eps_levels: &[T],
    max_points: usize,
) -> Result<Vec<TruncationLevel<T>>> {
    let lat = &m.lattice;
    let cloud = m.subsample(max_points, rc.mc.seed ^ 0x7472756e63);
    if cloud.is_empty() {
        return Err(ScbfError::InvalidParam("empty measure".into()));
    }
    let mut ws = Workspace::new(lat, *params);
    let mut pb = SpectralField::zero(lat);
    let mut pc = SpectralField::zero(lat);
    let mut out = Vec::with_capacity(eps_levels.len());
    for &eps in eps_levels {
        if eps <= T::zero() {
            return Err(ScbfError::InvalidParam("truncation level must be positive".into()));
        }
        let rc_eps = ResolventConfig { truncation: Some(eps), ..*rc };
        let mut acc_b = CompSum::new();
        let mut acc_c = CompSum::new();
        let mut saturated = 0usize;
        for (pi, x) in cloud.points.iter().enumerate() {
            // Disjoint stream block per point, identical across levels.
            let rc_pt = ResolventConfig {
                mc: rc_eps
                    .mc
                    .with_stream_base(rc.mc.stream_base + (pi * rc.mc.n_paths) as u64),
                ..rc_eps
            };
            let (g, _) = resolvent_full_gradient(lat, params, noise, f, x, &rc_pt)?;
            ws.nonlinear_parts(x, &mut pb, &mut pc);
            let v2 = {
                let (_, v2) = x.energy_norms_sq();
                v2
            };
            let e2v2 = eps * eps * v2;
            let (s_b, s_c) = if e2v2 > T::one() {
                saturated += 1;
                let rp1 = T::of((params.r + 1) as f64);
                (T::one() / e2v2, e2v2.powf(-rp1 * T::half()))
            } else {
                (T::one(), T::one())
            };
            let vb = (s_b - T::one()) * pb.inner_h(&g);
            let vc = (s_c - T::one()) * pc.inner_h(&g);
            acc_b.add(vb * vb);
            acc_c.add(vc * vc);
        }
        let n = T::of(cloud.len() as f64);
        out.push(TruncationLevel {
            eps,
            b_resid: acc_b.total() / n,
            c_resid: acc_c.total() / n,
            saturated_fraction: T::of(saturated as f64) / n,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional::TestFunctional;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lat64(n: usize) -> Arc<Lattice<f64>> {
        Lattice::new(n, std::f64::consts::TAU)
    }

    fn params(r: u32) -> ModelParams<f64> {
        ModelParams { mu: 0.8, alpha: 0.4, beta: 0.3, r, convection: true }
    }

    #[test]
    fn generator_annihilates_constants() {
        let lat = lat64(3);
        let p = params(3);
        let q = NoiseSpec::power_law(&lat, 2.0, 0.2, 3);
        let mut ws = Workspace::new(&lat, p);
        let mut n0 = N0Evaluator::new(&lat, &q);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = SpectralField::random(&lat, &mut rng, 1.0);
        let f = TestFunctional::Constant(4.2);
        assert_eq!(n0.apply(&mut ws, &f, &x).unwrap(), 0.0);
    }

    #[test]
    fn generator_on_energy_matches_dissipation_ledger() {
        // For f = ‖x‖²: trace term = TrQ, (F, 2x) = 2μ‖x‖²_V + 2α‖x‖² +
        // 2β∫|x|^{r+1} (convection drops out against the state).
        for r in [1u32, 2, 3] {
            let lat = lat64(3);
            let p = params(r);
            let q = NoiseSpec::power_law(&lat, 1.5, 0.2, 3);
            let mut ws = Workspace::new(&lat, p);
            let mut n0 = N0Evaluator::new(&lat, &q);
            let mut rng = ChaCha8Rng::seed_from_u64(10 + r as u64);
            let x = SpectralField::random(&lat, &mut rng, 1.0);
            let got = n0.apply(&mut ws, &TestFunctional::NormH2, &x).unwrap();
            let (h2, v2) = x.energy_norms_sq();
            let lr = ws.lr_pow(&x);
            let expect = q.trace() - 2.0 * (p.mu * v2 + p.alpha * h2 + p.beta * lr);
            assert!(
                (got - expect).abs() < 1e-9 * (1.0 + expect.abs()),
                "r={r}: got {got}, expect {expect}"
            );
        }
    }

    #[test]
    fn generator_on_exponential_matches_closed_form() {
        let lat = lat64(3);
        let p = params(3);
        let q = NoiseSpec::power_law(&lat, 2.0, 0.15, 3);
        let mut ws = Workspace::new(&lat, p);
        let mut n0 = N0Evaluator::new(&lat, &q);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = SpectralField::random(&lat, &mut rng, 0.9);
        let sigma = 0.2;
        let got = n0.apply(&mut ws, &TestFunctional::ExpH { sigma }, &x).unwrap();
        let (h2, v2) = x.energy_norms_sq();
        let lr = ws.lr_pow(&x);
        let qx = q.sqrt_apply(&x);
        let qx2 = qx.norm_h().powi(2);
        let expect = (sigma * h2).exp()
            * (sigma * q.trace() + 2.0 * sigma * sigma * qx2
                - 2.0 * p.mu * sigma * v2
                - 2.0 * p.alpha * sigma * h2
                - 2.0 * p.beta * sigma * lr);
        assert!(
            (got - expect).abs() < 1e-9 * (1.0 + expect.abs()),
            "got {got}, expect {expect}"
        );
    }

    #[test]
    fn semigroup_time_zero_is_exact_and_bounded_contraction_holds() {
        let lat = lat64(2);
        let p = params(2);
        let q = NoiseSpec::power_law(&lat, 2.0, 0.1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let h = SpectralField::random(&lat, &mut rng, 1.0);
        let x = SpectralField::random(&lat, &mut rng, 1.0);
        let f = TestFunctional::CylinderCos { h };
        let mc = McConfig::new(8, 0.01, 5);
        let (v0, se0) = semigroup_eval(&lat, &p, &q, &f, &x, 0.0, &mc).unwrap();
        assert_eq!(v0, f.eval(&x));
        assert_eq!(se0, 0.0);
        let (v, _) = semigroup_eval(&lat, &p, &q, &f, &x, 0.2, &mc).unwrap();
        assert!(v.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn resolvent_of_constant_is_c_over_lambda() {
        let lat = lat64(2);
        let p = params(1);
        let q = NoiseSpec::power_law(&lat, 2.0, 0.1, 2);
        let x = SpectralField::zero(&lat);
        let f = TestFunctional::Constant(3.0);
        let rc = ResolventConfig::new(2.0, McConfig::new(4, 0.005, 9));
        let (v, se) = resolvent_eval(&lat, &p, &q, &f, &x, &rc).unwrap();
        // Quadrature of a smooth decaying exponential: error O(dt²) + tail tol.
        assert!((v - 1.5).abs() < 1e-3, "v = {v}");
        assert!(se < 1e-12); // constant integrand: path-independent
    }

    #[test]
    fn resolvent_gradient_of_constant_vanishes_and_t_lambda_degenerates() {
        let lat = lat64(2);
        let p = params(1);
        let q = NoiseSpec::power_law(&lat, 2.0, 0.1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = SpectralField::random(&lat, &mut rng, 0.6);
        let f = TestFunctional::Constant(2.0);
        let rc = ResolventConfig::new(2.0, McConfig::new(2, 0.01, 13));
        let (g, se) = resolvent_sqrtq_gradient(&lat, &p, &q, &f, &x, &rc).unwrap();
        assert_eq!(g.norm_h(), 0.0);
        assert_eq!(se, 0.0);

        // F ≡ 0 ⇒ T_λ f = 0 regardless of f.
        let zero_field = SpectralField::zero(&lat);
        let rep = apply_t_lambda(
            &lat,
            &p,
            &q,
            &ConstantDrift(zero_field),
            &TestFunctional::NormH2,
            &x,
            &ResolventConfig::new(2.0, McConfig::new(2, 0.01, 13)).with_t_max(0.1),
        )
        .unwrap();
        assert_eq!(rep.value, 0.0);
        assert_eq!(rep.regime_ok, Some(true));
    }

    #[test]
    fn resolvent_horizon_requires_a_bound_or_explicit_t_max() {
        let lat = lat64(2);
        let p = params(1);
        let q = NoiseSpec::power_law(&lat, 2.0, 0.1, 2);
        let x = SpectralField::zero(&lat);
        // ‖x‖² has no sup bound.
        let f = TestFunctional::NormH2;
        let rc = ResolventConfig::new(1.0, McConfig::new(2, 0.01, 1));
        assert!(resolvent_eval(&lat, &p, &q, &f, &x, &rc).is_err());
        let rc2 = rc.with_t_max(0.05);
        assert!(resolvent_eval(&lat, &p, &q, &f, &x, &rc2).is_ok());
    }

    #[test]
    fn carre_du_champ_of_constant_is_exact_zero() {
        let lat = lat64(2);
        let p = params(2);
        let q = NoiseSpec::power_law(&lat, 2.0, 0.1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let snapshots: Vec<_> =
            (0..6).map(|_| SpectralField::random(&lat, &mut rng, 0.7)).collect();
        let m = EmpiricalMeasure {
            lattice: lat.clone(),
            snapshots,
            blocks: vec![0..3, 3..6],
            meta: crate::measure::MeasureMeta {
                burn_in: 0.0,
                stride: 1.0,
                horizon: 1.0,
                dt: 0.1,
                n_streams: 2,
                samples_per_stream: 3,
                seed: 0,
            },
        };
        let rep =
            carre_du_champ_residual(&m, &p, &q, &TestFunctional::Constant(7.0)).unwrap();
        assert_eq!(rep.pairing, 0.0);
        assert_eq!(rep.energy, 0.0);
        assert_eq!(rep.residual, 0.0);
    }

    #[test]
    fn truncation_residuals_vanish_for_small_states() {
        // All snapshots inside every ball: the truncated and plain dynamics
        // coincide, so the residuals are exactly zero at every level.
        let lat = lat64(2);
        let p = params(3);
        let q = NoiseSpec::power_law(&lat, 2.0, 0.05, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let snapshots: Vec<_> = (0..4)
            .map(|_| {
                let mut x = SpectralField::random(&lat, &mut rng, 1.0);
                let nv = x.norm_v();
                x.scale(0.05 / nv);
                x
            })
            .collect();
        let m = EmpiricalMeasure {
            lattice: lat.clone(),
            snapshots,
            blocks: vec![0..4],
            meta: crate::measure::MeasureMeta {
                burn_in: 0.0,
                stride: 1.0,
                horizon: 1.0,
                dt: 0.1,
                n_streams: 1,
                samples_per_stream: 4,
                seed: 0,
            },
        };
        let mut rng2 = ChaCha8Rng::seed_from_u64(62);
        let h = SpectralField::random(&lat, &mut rng2, 1.0);
        let f = TestFunctional::CylinderCos { h };
        let rc = ResolventConfig::new(4.0, McConfig::new(2, 0.02, 17)).with_t_max(0.2);
        let levels =
            truncation_residuals(&m, &p, &q, &f, &rc, &[0.5, 0.25], 4).unwrap();
        for l in &levels {
            assert_eq!(l.b_resid, 0.0);
            assert_eq!(l.c_resid, 0.0);
            assert_eq!(l.saturated_fraction, 0.0);
        }
    }
}
