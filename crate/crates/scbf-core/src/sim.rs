//! Exponential-integrator time stepping for the stochastic flow, its
//! controlled variant, and the first-variation (derivative) flow, with
//! reproducible counter-based noise streams.
//!
//! Scheme, per real eigenmode with linear rate γ_k = μλ_k + α:
//!
//! ```text
//! x⁺_k = e^{−γ_k dt}·(x_k − dt·G_k(x) + dt·f_k) + √(μ_k dt)·z_k
//! ```
//!
//! where G = P(B(x) + βC(x)) is the explicit nonlinearity, f an optional
//! forcing (√Q·U for controlled runs), and z_k i.i.d. standard normals. The
//! linear part is propagated exactly, so the scheme is unconditionally
//! stable in the linear regime and weakly first-order overall. The variation
//! flow is stepped with the exact derivative of this discrete map, which
//! makes finite-difference consistency checks clean down to round-off.

use std::sync::Arc;

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, ScbfError};
use crate::operators::{ModelParams, NoiseSpec, Workspace};
use crate::scalar::Scalar;
use crate::spectral::{Lattice, SpectralField};
use crate::stats::CompSum;

/// Deterministic Gaussian source: independent streams are indexed by
/// (seed, stream_id) and draws happen in a fixed canonical order (two per
/// mode pair per step), so any trajectory is reproducible in isolation.
pub struct WienerStream {
    rng: ChaCha8Rng,
}

impl WienerStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        WienerStream { rng }
    }
}

/// Per-step supplier of the two standard normals of each mode pair, in
/// basis order. Implemented by [`WienerStream`]; tests supply coupled
/// sources (e.g. coarse increments summed from fine ones) through the same
/// interface.
pub trait NoiseDraws<T: Scalar> {
    fn next_pair(&mut self) -> (T, T);
}

impl<T: Scalar> NoiseDraws<T> for WienerStream {
    fn next_pair(&mut self) -> (T, T) {
        (T::standard_normal(&mut self.rng), T::standard_normal(&mut self.rng))
    }
}

/// Time-stepping parameters. `t_final` must be an integer multiple of `dt`.
#[derive(Clone, Copy, Debug)]
pub struct SimConfig<T: Scalar> {
    pub t_final: T,
    pub dt: T,
    /// Abort threshold on ‖X‖_H; the continuous theory excludes blow-up but
    /// the explicit nonlinearity can overflow at coarse dt.
    pub guard: T,
}

impl<T: Scalar> SimConfig<T> {
    pub fn new(t_final: T, dt: T) -> Self {
        SimConfig { t_final, dt, guard: T::of(1e6) }
    }

    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > T::zero()) {
            return Err(ScbfError::InvalidParam(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.t_final < T::zero() {
            return Err(ScbfError::InvalidParam("t_final must be >= 0".into()));
        }
        let ratio = (self.t_final / self.dt).to_f64_lossy();
        let n = ratio.round();
        if (ratio - n).abs() > 1e-8 * (1.0 + ratio) {
            return Err(ScbfError::InvalidParam(format!(
                "dt must divide t_final (t_final/dt = {})",
                ratio
            )));
        }
        Ok(n as usize)
    }
}

/// Left-state diagnostics produced by one step, plus the noise pairing
/// (√Q ΔW, X_n)_H that the energy identity needs.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepInfo<T: Scalar> {
    pub h2: T,
    pub v2: T,
    pub lr_pow: T,
    pub pairing: T,
}

/// One (state, noise, params) stepping engine; owns the per-pair decay
/// factors and scratch fields so the per-step cost is FFTs plus O(modes).
pub struct Integrator<'w, T: Scalar> {
    ws: &'w mut Workspace<T>,
    dt: T,
    guard: T,
    trace_q: T,
    /// e^{−(μλ+α)dt} per canonical pair.
    decay: Vec<T>,
    /// (√(μ_cos dt), √(μ_sin dt)) per canonical pair.
    noise_amp: Vec<(T, T)>,
    drift: SpectralField<T>,
    staged: SpectralField<T>,
    var_buf: SpectralField<T>,
    trunc: Option<Box<TruncState<T>>>,
}

/// Per-step scratch for the V-norm-ball drift truncation: outside the ball
/// ‖x‖_V ≤ 1/ε the nonlinearities are rescaled by s_B = (ε‖x‖_V)^{−2} and
/// s_C = (ε‖x‖_V)^{−(r+1)}; inside they are untouched.
struct TruncState<T: Scalar> {
    eps: T,
    x_left: SpectralField<T>,
    part_b: SpectralField<T>,
    part_c: SpectralField<T>,
    var_b: SpectralField<T>,
    var_c: SpectralField<T>,
    s_b: T,
    s_c: T,
    /// ds_B(ξ) = db·(x,ξ)_V and ds_C(ξ) = dc·(x,ξ)_V (zero inside the ball).
    db: T,
    dc: T,
}

impl<'w, T: Scalar> Integrator<'w, T> {
    pub fn new(ws: &'w mut Workspace<T>, noise: &NoiseSpec<T>, dt: T) -> Self {
        let lat = ws.lattice().clone();
        let p = *ws.params();
        let decay = lat
            .pair_indices()
            .iter()
            .map(|&(i, _)| (-(p.mu * lat.eigenvalue_at(i) + p.alpha) * dt).exp())
            .collect();
        let noise_amp = (0..lat.n_pairs())
            .map(|pr| ((noise.mu(2 * pr) * dt).sqrt(), (noise.mu(2 * pr + 1) * dt).sqrt()))
            .collect();
        Integrator {
            ws,
            dt,
            guard: T::of(1e6),
            trace_q: noise.trace(),
            decay,
            noise_amp,
            drift: SpectralField::zero(&lat),
            staged: SpectralField::zero(&lat),
            var_buf: SpectralField::zero(&lat),
            trunc: None,
        }
    }

    pub fn set_guard(&mut self, guard: T) {
        self.guard = guard;
    }

    /// Switch the drift (and its variations) to the ε-truncated dynamics.
    /// The energy-ledger byproducts keep reporting untruncated integrands,
    /// so the residual identity is not expected to close under truncation.
    pub fn set_truncation(&mut self, eps: T) {
        assert!(eps > T::zero(), "truncation radius must be positive");
        let lat = self.staged.lattice().clone();
        self.trunc = Some(Box::new(TruncState {
            eps,
            x_left: SpectralField::zero(&lat),
            part_b: SpectralField::zero(&lat),
            part_c: SpectralField::zero(&lat),
            var_b: SpectralField::zero(&lat),
            var_c: SpectralField::zero(&lat),
            s_b: T::one(),
            s_c: T::one(),
            db: T::zero(),
            dc: T::zero(),
        }));
    }

    pub fn trace_q(&self) -> T {
        self.trace_q
    }

    pub fn workspace(&mut self) -> &mut Workspace<T> {
        self.ws
    }

    /// Phase 1: evaluate the nonlinearity at the left state (grids x as a
    /// side effect) and report the left-state norms.
    pub fn step_begin(&mut self, x: &SpectralField<T>) -> StepInfo<T> {
        if self.trunc.is_some() {
            return self.step_begin_truncated(x);
        }
        let lr_pow = self.ws.nonlinear(x, &mut self.drift);
        let (h2, v2) = x.energy_norms_sq();
        StepInfo { h2, v2, lr_pow, pairing: T::zero() }
    }

    fn step_begin_truncated(&mut self, x: &SpectralField<T>) -> StepInfo<T> {
        let p = *self.ws.params();
        let tr = self.trunc.as_mut().expect("truncation state");
        let lr_pow = self.ws.nonlinear_parts(x, &mut tr.part_b, &mut tr.part_c);
        let (h2, v2) = x.energy_norms_sq();
        let thresh = T::one() / (tr.eps * tr.eps);
        if v2 > thresh {
            let e2v2 = tr.eps * tr.eps * v2;
            let rp1 = T::of((p.r + 1) as f64);
            tr.s_b = T::one() / e2v2;
            tr.s_c = e2v2.powf(-rp1 * T::half());
            tr.db = -T::two() * tr.s_b / v2;
            tr.dc = -rp1 * tr.s_c / v2;
        } else {
            tr.s_b = T::one();
            tr.s_c = T::one();
            tr.db = T::zero();
            tr.dc = T::zero();
        }
        tr.x_left.amps_mut().copy_from_slice(x.amps());
        let (cb, cc) = (tr.s_b, p.beta * tr.s_c);
        let pb = tr.part_b.amps();
        let pc = tr.part_c.amps();
        for ((d, b), c) in self.drift.amps_mut().iter_mut().zip(pb).zip(pc) {
            d.re = cb * b.re + cc * c.re;
            d.im = cb * b.im + cc * c.im;
        }
        StepInfo { h2, v2, lr_pow, pairing: T::zero() }
    }

    /// Phase 2 (optional, repeatable): advance one variation direction using
    /// the x gridded in `step_begin`. ξ⁺ = e^{−γdt}(ξ − dt·G'(x)ξ), the exact
    /// derivative of the discrete state map.
    pub fn step_variation(&mut self, xi: &mut SpectralField<T>) {
        if self.trunc.is_some() {
            return self.step_variation_truncated(xi);
        }
        self.ws.variation_rhs_loaded(xi, &mut self.var_buf);
        let dt = self.dt;
        let rhs = self.var_buf.amps();
        let amps = xi.amps_mut();
        for (p, &(i, j)) in self.staged.lattice().pair_indices().iter().enumerate() {
            let d = self.decay[p];
            let c = amps[i];
            let g = rhs[i];
            let cn = Complex::new(d * (c.re - dt * g.re), d * (c.im - dt * g.im));
            amps[i] = cn;
            amps[j] = cn.conj();
        }
    }

    /// Truncated-dynamics linearization: the exact derivative of the scaled
    /// drift includes the scale factors' own derivatives through ‖x‖_V,
    /// G'(x)ξ = s_B B'(x)ξ + βs_C C'(x)ξ + ds_B(ξ) B(x) + β ds_C(ξ) C(x).
    fn step_variation_truncated(&mut self, xi: &mut SpectralField<T>) {
        let beta = self.ws.params().beta;
        let tr = self.trunc.as_mut().expect("truncation state");
        self.ws.variation_parts_loaded(xi, &mut tr.var_b, &mut tr.var_c);
        let xv = tr.x_left.inner_v(xi);
        let (wb, wc) = (tr.s_b, beta * tr.s_c);
        let (eb, ec) = (tr.db * xv, beta * tr.dc * xv);
        let dt = self.dt;
        let vb = tr.var_b.amps();
        let vc = tr.var_c.amps();
        let pb = tr.part_b.amps();
        let pc = tr.part_c.amps();
        let amps = xi.amps_mut();
        for (p, &(i, j)) in self.staged.lattice().pair_indices().iter().enumerate() {
            let d = self.decay[p];
            let g_re = wb * vb[i].re + wc * vc[i].re + eb * pb[i].re + ec * pc[i].re;
            let g_im = wb * vb[i].im + wc * vc[i].im + eb * pb[i].im + ec * pc[i].im;
            let c = amps[i];
            let cn = Complex::new(d * (c.re - dt * g_re), d * (c.im - dt * g_im));
            amps[i] = cn;
            amps[j] = cn.conj();
        }
    }

    /// Phase 3: draw noise, advance the state in place, and return the
    /// left-state diagnostics completed with the noise pairing. On blow-up
    /// the state keeps its last finite value and the error carries the
    /// timestamp.
    pub fn step_commit<S: NoiseDraws<T>>(
        &mut self,
        t: T,
        x: &mut SpectralField<T>,
        info: StepInfo<T>,
        src: &mut S,
        forcing: Option<&SpectralField<T>>,
    ) -> Result<StepInfo<T>> {
        let dt = self.dt;
        let lat = self.staged.lattice().clone();
        let l = lat.period();
        let s = T::SQRT_2() * l;
        let inv_s = T::one() / s;
        let mut pairing = T::zero();
        let mut new_norm = T::zero();
        {
            let cur = x.amps();
            let g_amps = self.drift.amps();
            let staged = self.staged.amps_mut();
            for (p, &(i, j)) in lat.pair_indices().iter().enumerate() {
                let (za, zb) = src.next_pair();
                let (na, nb) = self.noise_amp[p];
                let c = cur[i];
                let g = g_amps[i];
                // Real-basis coefficients of the left state: a = √2L·Re c,
                // b = −√2L·Im c; pairing = Σ √(μ dt) z · coeff.
                pairing += na * za * (s * c.re) - nb * zb * (s * c.im);
                let mut re = c.re - dt * g.re;
                let mut im = c.im - dt * g.im;
                if let Some(f) = forcing {
                    let fa = f.amps()[i];
                    re += dt * fa.re;
                    im += dt * fa.im;
                }
                let d = self.decay[p];
                let cn = Complex::new(d * re + na * za * inv_s, d * im - nb * zb * inv_s);
                staged[i] = cn;
                staged[j] = cn.conj();
                new_norm += cn.norm_sqr();
            }
        }
        new_norm = (new_norm * (l * l)).sqrt() * T::SQRT_2();
        if !new_norm.is_finite() || new_norm > self.guard {
            return Err(ScbfError::BlowUp {
                t: (t + dt).to_f64_lossy(),
                norm_h: new_norm.to_f64_lossy(),
                guard: self.guard.to_f64_lossy(),
            });
        }
        x.swap_amps(&mut self.staged);
        Ok(StepInfo { pairing, ..info })
    }

    /// begin + commit, for runs without variation directions.
    pub fn step<S: NoiseDraws<T>>(
        &mut self,
        t: T,
        x: &mut SpectralField<T>,
        src: &mut S,
        forcing: Option<&SpectralField<T>>,
    ) -> Result<StepInfo<T>> {
        let info = self.step_begin(x);
        self.step_commit(t, x, info, src, forcing)
    }
}

/// Running accumulants of one path: left-endpoint Riemann sums of the energy
/// ledger and the martingale pairing.
#[derive(Clone, Copy, Debug)]
pub struct PathAccum<T: Scalar> {
    pub sum_h2_dt: T,
    pub sum_v2_dt: T,
    pub sum_lr_dt: T,
    pub sum_pairing: T,
}

impl<T: Scalar> PathAccum<T> {
    fn new() -> (Self, [CompSum<T>; 4]) {
        (
            PathAccum {
                sum_h2_dt: T::zero(),
                sum_v2_dt: T::zero(),
                sum_lr_dt: T::zero(),
                sum_pairing: T::zero(),
            },
            [CompSum::new(), CompSum::new(), CompSum::new(), CompSum::new()],
        )
    }

    /// Itô energy-balance residual at time t for a path started at ‖x₀‖²=h20:
    /// ‖X(t)‖² + 2(μ∫‖X‖²_V + α∫‖X‖² + β∫‖X‖^{r+1}) − ‖x₀‖² − t·TrQ − 2∫(√QdW,X).
    pub fn energy_residual(
        &self,
        p: &ModelParams<T>,
        trace_q: T,
        h2_now: T,
        h2_start: T,
        t: T,
    ) -> T {
        h2_now
            + T::two() * (p.mu * self.sum_v2_dt + p.alpha * self.sum_h2_dt + p.beta * self.sum_lr_dt)
            - h2_start
            - t * trace_q
            - T::two() * self.sum_pairing
    }
}

/// Per-step record handed to streaming observers (left state at time t, or
/// the final state on the last call).
pub struct StepRecord<'a, T: Scalar> {
    pub n: usize,
    pub t: T,
    pub state: &'a SpectralField<T>,
    pub norm_h: T,
    pub norm_v: T,
    /// ∫|X|^{r+1} (the L^{r+1} norm to the (r+1)-th power).
    pub lr_pow: T,
    pub energy_residual: T,
}

/// Summary of a completed path.
pub struct PathSummary<T: Scalar> {
    pub final_state: SpectralField<T>,
    pub accum: PathAccum<T>,
    pub h2_start: T,
    pub h2_final: T,
    pub energy_residual: T,
}

/// Drive one trajectory, streaming a record per step (including a final one
/// at t = T). `control` produces the forcing √Q·U from the current state
/// into the provided buffer.
pub fn run_path<T: Scalar>(
    ws: &mut Workspace<T>,
    noise: &NoiseSpec<T>,
    cfg: &SimConfig<T>,
    x0: &SpectralField<T>,
    seed: u64,
    stream_id: u64,
    mut control: Option<&mut dyn FnMut(&SpectralField<T>, &mut SpectralField<T>)>,
    mut on_step: Option<&mut dyn FnMut(StepRecord<'_, T>)>,
) -> Result<PathSummary<T>> {
    let steps = cfg.steps()?;
    let params = *ws.params();
    let lat = ws.lattice().clone();
    let mut x = x0.clone();
    let mut stream = WienerStream::new(seed, stream_id);
    let mut ig = Integrator::new(ws, noise, cfg.dt);
    ig.set_guard(cfg.guard);
    let trace_q = ig.trace_q();
    let (mut accum, mut comps) = PathAccum::new();
    let h2_start = x.energy_norms_sq().0;
    let mut forcing = SpectralField::zero(&lat);

    for n in 0..steps {
        let t = cfg.dt * T::of(n as f64);
        let info = ig.step_begin(&x);
        if let Some(cb) = on_step.as_deref_mut() {
            accum.sync(&comps);
            let res = accum.energy_residual(&params, trace_q, info.h2, h2_start, t);
            cb(StepRecord {
                n,
                t,
                state: &x,
                norm_h: info.h2.sqrt(),
                norm_v: info.v2.sqrt(),
                lr_pow: info.lr_pow,
                energy_residual: res,
            });
        }
        let f = if let Some(ctrl) = control.as_deref_mut() {
            ctrl(&x, &mut forcing);
            Some(&forcing)
        } else {
            None
        };
        let info = ig.step_commit(t, &mut x, info, &mut stream, f)?;
        comps[0].add(info.h2 * cfg.dt);
        comps[1].add(info.v2 * cfg.dt);
        comps[2].add(info.lr_pow * cfg.dt);
        comps[3].add(info.pairing);
    }

    accum.sync(&comps);
    let h2_final = x.energy_norms_sq().0;
    let t_final = cfg.dt * T::of(steps as f64);
    let energy_residual = accum.energy_residual(&params, trace_q, h2_final, h2_start, t_final);
    if let Some(cb) = on_step.as_deref_mut() {
        let (h2, v2) = x.energy_norms_sq();
        let lr_pow = ig.workspace().lr_pow(&x);
        cb(StepRecord {
            n: steps,
            t: t_final,
            state: &x,
            norm_h: h2.sqrt(),
            norm_v: v2.sqrt(),
            lr_pow,
            energy_residual,
        });
    }
    Ok(PathSummary { final_state: x, accum, h2_start, h2_final, energy_residual })
}

impl<T: Scalar> PathAccum<T> {
    fn sync(&mut self, comps: &[CompSum<T>; 4]) {
        self.sum_h2_dt = comps[0].total();
        self.sum_v2_dt = comps[1].total();
        self.sum_lr_dt = comps[2].total();
        self.sum_pairing = comps[3].total();
    }
}

/// Drive one trajectory together with first-variation directions ξ (common
/// randomness; the ξ evolve deterministically around the noisy path).
/// `on_step` sees left states at each step and the finals on the last call.
pub fn run_path_with_variations<T: Scalar>(
    ws: &mut Workspace<T>,
    noise: &NoiseSpec<T>,
    cfg: &SimConfig<T>,
    x0: &SpectralField<T>,
    xi0: &[SpectralField<T>],
    seed: u64,
    stream_id: u64,
    mut on_step: Option<&mut dyn FnMut(usize, T, &SpectralField<T>, &[SpectralField<T>])>,
) -> Result<(SpectralField<T>, Vec<SpectralField<T>>)> {
    let steps = cfg.steps()?;
    let mut x = x0.clone();
    let mut xis: Vec<SpectralField<T>> = xi0.to_vec();
    let mut stream = WienerStream::new(seed, stream_id);
    let mut ig = Integrator::new(ws, noise, cfg.dt);
    ig.set_guard(cfg.guard);

    for n in 0..steps {
        let t = cfg.dt * T::of(n as f64);
        if let Some(cb) = on_step.as_deref_mut() {
            cb(n, t, &x, &xis);
        }
        let info = ig.step_begin(&x);
        for xi in xis.iter_mut() {
            ig.step_variation(xi);
        }
        ig.step_commit(t, &mut x, info, &mut stream, None)?;
    }
    if let Some(cb) = on_step.as_deref_mut() {
        cb(steps, cfg.t_final, &x, &xis);
    }
    Ok((x, xis))
}

/// Recorded trajectory: states and diagnostics at a fixed cadence (always
/// including t = 0 and t = T), plus the full-resolution energy accumulants.
pub struct Trajectory<T: Scalar> {
    pub params: ModelParams<T>,
    pub trace_q: T,
    pub times: Vec<T>,
    pub states: Vec<SpectralField<T>>,
    pub diagnostics: Vec<DiagRow<T>>,
    pub accum: PathAccum<T>,
    pub h2_start: T,
    pub energy_residual: T,
}

/// One diagnostics row, mirroring the CSV schema.
#[derive(Clone, Copy, Debug)]
pub struct DiagRow<T: Scalar> {
    pub t: T,
    pub norm_h: T,
    pub norm_v: T,
    /// L^{r+1} norm (not its power).
    pub norm_lr: T,
    pub energy_residual: T,
}

/// Simulate and record every `record_every`-th step (0 ⇒ endpoints only).
/// Deterministic: the same (seed, stream_id) reproduces the trajectory
/// bit-for-bit.
pub fn simulate<T: Scalar>(
    ws: &mut Workspace<T>,
    noise: &NoiseSpec<T>,
    cfg: &SimConfig<T>,
    x0: &SpectralField<T>,
    seed: u64,
    stream_id: u64,
    record_every: usize,
) -> Result<Trajectory<T>> {
    let steps = cfg.steps()?;
    let params = *ws.params();
    let rinv = T::one() / T::of((params.r + 1) as f64);
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut diagnostics = Vec::new();
    let summary = run_path(
        ws,
        noise,
        cfg,
        x0,
        seed,
        stream_id,
        None,
        Some(&mut |rec: StepRecord<'_, T>| {
            let take = rec.n == 0
                || rec.n == steps
                || (record_every != 0 && rec.n % record_every == 0);
            if take {
                times.push(rec.t);
                states.push(rec.state.clone());
                diagnostics.push(DiagRow {
                    t: rec.t,
                    norm_h: rec.norm_h,
                    norm_v: rec.norm_v,
                    norm_lr: rec.lr_pow.powf(rinv),
                    energy_residual: rec.energy_residual,
                });
            }
        }),
    )?;
    Ok(Trajectory {
        params,
        trace_q: noise.trace(),
        times,
        states,
        diagnostics,
        accum: summary.accum,
        h2_start: summary.h2_start,
        energy_residual: summary.energy_residual,
    })
}

/// exp(σ·Z(T)) for Z(T) = ‖X(T)‖² + μ∫₀ᵀ‖X‖²_V + β∫₀ᵀ‖X‖^{r+1}: the
/// quantity whose expectation is bounded by e^{σ(‖x₀‖² + TrQ·T)} whenever
/// 0 ≤ σ ≤ (2α + μλ₁)/(2·TrQ).
pub struct ExpFunctional<T: Scalar> {
    pub value: T,
    pub sigma_admissible: bool,
}

pub fn exp_functional<T: Scalar>(
    traj: &Trajectory<T>,
    lat: &Arc<Lattice<T>>,
    sigma: T,
) -> ExpFunctional<T> {
    let p = &traj.params;
    let last = traj
        .states
        .last()
        .expect("trajectory always records its final state");
    let h2 = last.energy_norms_sq().0;
    let z = h2 + p.mu * traj.accum.sum_v2_dt + p.beta * traj.accum.sum_lr_dt;
    let bound = if traj.trace_q > T::zero() {
        (T::two() * p.alpha + p.mu * lat.lambda_1()) / (T::two() * traj.trace_q)
    } else {
        T::infinity()
    };
    ExpFunctional {
        value: (sigma * z).exp(),
        sigma_admissible: sigma >= T::zero() && sigma <= bound,
    }
}

/// Run `f` once per path index on a rayon pool, each worker reusing one
/// workspace; results come back in index order so downstream sequential
/// reductions are order-stable.
pub fn par_paths<T, R, F>(
    lat: &Arc<Lattice<T>>,
    params: ModelParams<T>,
    n_paths: usize,
    f: F,
) -> Result<Vec<R>>
where
    T: Scalar,
    R: Send,
    F: Fn(&mut Workspace<T>, usize) -> Result<R> + Sync,
{
    (0..n_paths)
        .into_par_iter()
        .map_init(|| Workspace::new(lat, params), |ws, i| f(ws, i))
        .collect()
}
