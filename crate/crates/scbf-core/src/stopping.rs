//! Optimal stopping on a low-dimensional Galerkin reduction: the obstacle
//! problem (variational inequality) is time-stepped implicitly with a
//! normal-cone projection, and cross-checked against an independent
//! dynamic-programming oracle plus Monte-Carlo stopped costs.
//!
//! The reduction keeps 1–2 eigenmodes with every other coefficient frozen
//! at zero, so the state is a point y in a box of mode-coefficient space,
//! the drift is the full nonlinear drift projected onto the retained modes,
//! and the diffusion is the per-mode noise eigenvalue.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, ScbfError};
use crate::functional::Functional;
use crate::kolmogorov::{semigroup_eval, McConfig};
use crate::operators::{ModelParams, NoiseSpec, Workspace};
use crate::scalar::Scalar;
use crate::spectral::{Lattice, SpectralField};
use crate::stats::{CompSum, Welford};

/// Tensor grid over the retained mode coefficients. One- and two-dimensional
/// only; the second axis collapses to a single node in 1D.
#[derive(Clone, Debug)]
pub struct ModeGrid<T: Scalar> {
    pub dims: usize,
    pub shape: [usize; 2],
    pub lo: [T; 2],
    pub hi: [T; 2],
}

impl<T: Scalar> ModeGrid<T> {
    pub fn line(lo: T, hi: T, n: usize) -> Self {
        assert!(n >= 3 && hi > lo, "need an interval with at least 3 nodes");
        ModeGrid { dims: 1, shape: [n, 1], lo: [lo, T::zero()], hi: [hi, T::zero()] }
    }

    pub fn plane(lo: [T; 2], hi: [T; 2], shape: [usize; 2]) -> Self {
        assert!(
            shape[0] >= 3 && shape[1] >= 3 && hi[0] > lo[0] && hi[1] > lo[1],
            "need a box with at least 3 nodes per axis"
        );
        ModeGrid { dims: 2, shape, lo, hi }
    }

    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, d: usize) -> T {
        if d >= self.dims {
            return T::one();
        }
        (self.hi[d] - self.lo[d]) / T::of((self.shape[d] - 1) as f64)
    }

    pub fn index(&self, i0: usize, i1: usize) -> usize {
        i0 * self.shape[1] + i1
    }

    pub fn node(&self, idx: usize) -> [T; 2] {
        let i0 = idx / self.shape[1];
        let i1 = idx % self.shape[1];
        let y0 = self.lo[0] + self.spacing(0) * T::of(i0 as f64);
        let y1 = if self.dims == 2 {
            self.lo[1] + self.spacing(1) * T::of(i1 as f64)
        } else {
            T::zero()
        };
        [y0, y1]
    }

    /// Clamped cell coordinate on axis d: (lower node index, fraction).
    fn locate(&self, d: usize, y: T) -> (usize, T) {
        let n = self.shape[d];
        let h = self.spacing(d);
        let s = (y - self.lo[d]) / h;
        if s <= T::zero() {
            return (0, T::zero());
        }
        let max = T::of((n - 2) as f64);
        if s >= T::of((n - 1) as f64) {
            return (n - 2, T::one());
        }
        let i = s.min(max).to_f64_lossy().floor() as usize;
        (i.min(n - 2), s - T::of(i as f64))
    }

    /// Multilinear interpolation of nodal values, clamped to the box.
    pub fn interp(&self, vals: &[T], y: [T; 2]) -> T {
        debug_assert_eq!(vals.len(), self.len());
        let (i0, f0) = self.locate(0, y[0]);
        if self.dims == 1 {
            return vals[i0] * (T::one() - f0) + vals[i0 + 1] * f0;
        }
        let (i1, f1) = self.locate(1, y[1]);
        let v00 = vals[self.index(i0, i1)];
        let v01 = vals[self.index(i0, i1 + 1)];
        let v10 = vals[self.index(i0 + 1, i1)];
        let v11 = vals[self.index(i0 + 1, i1 + 1)];
        let a = v00 * (T::one() - f1) + v01 * f1;
        let b = v10 * (T::one() - f1) + v11 * f1;
        a * (T::one() - f0) + b * f0
    }
}

/// Finite-difference discretization of the reduced generator
/// ½Σ_d μ_d ∂²_d + Σ_d b_d(y) ∂_d with upwinded advection, central
/// diffusion, and reflecting (ghost-node) diffusion rows at the box edge;
/// advection at the edge falls back to the inward one-sided difference.
pub struct ReducedGenerator<T: Scalar> {
    pub grid: ModeGrid<T>,
    /// Linear basis indices of the retained modes (empty for `from_drift`).
    pub modes: Vec<usize>,
    pub mu: [T; 2],
    /// Projected drift per node and retained dimension.
    pub drift: Vec<[T; 2]>,
    rows: Vec<Vec<(usize, T)>>,
    /// Largest cell Péclet number |b|h/μ_d encountered.
    pub peclet: T,
    /// Set when the advection dominates the resolved diffusion (Pe > 2).
    pub peclet_warning: Option<String>,
    embedding: Option<(Arc<Lattice<T>>, Vec<SpectralField<T>>)>,
}

impl<T: Scalar> ReducedGenerator<T> {
    /// Drift by projection of the full Galerkin drift onto the retained
    /// modes, remaining modes frozen at zero: b_d(y) = −(F(Σy_e e), e_d).
    pub fn build(
        lat: &Arc<Lattice<T>>,
        params: &ModelParams<T>,
        noise: &NoiseSpec<T>,
        modes: &[usize],
        grid: ModeGrid<T>,
    ) -> Result<Self> {
        if modes.len() != grid.dims || grid.dims == 0 || grid.dims > 2 {
            return Err(ScbfError::InvalidParam(
                "retained modes must match grid dimension (1 or 2)".into(),
            ));
        }
        for &j in modes {
            if j >= lat.basis_len() {
                return Err(ScbfError::InvalidParam(format!(
                    "mode index {j} outside the basis (len {})",
                    lat.basis_len()
                )));
            }
        }
        let fields: Vec<SpectralField<T>> =
            modes.iter().map(|&j| SpectralField::basis_field(lat, lat.basis(j))).collect();
        let mut mu = [T::zero(); 2];
        for (d, &j) in modes.iter().enumerate() {
            mu[d] = noise.mu(j);
        }
        let mut ws = Workspace::new(lat, *params);
        let mut x = SpectralField::zero(lat);
        let mut fx = SpectralField::zero(lat);
        let mut drift = Vec::with_capacity(grid.len());
        for idx in 0..grid.len() {
            let y = grid.node(idx);
            x.set_zero();
            for (d, e) in fields.iter().enumerate() {
                x.axpy(y[d], e);
            }
            ws.full_drift(&x, &mut fx);
            let mut b = [T::zero(); 2];
            for (d, e) in fields.iter().enumerate() {
                b[d] = -fx.inner_h(e);
            }
            drift.push(b);
        }
        Ok(Self::assemble(grid, mu, drift, modes.to_vec(), Some((lat.clone(), fields))))
    }

    /// Assemble from an explicit reduced drift — for analytic reductions
    /// and tests. No embedding, so `tabulate` is unavailable.
    pub fn from_drift(
        grid: ModeGrid<T>,
        mu: [T; 2],
        drift_fn: impl Fn([T; 2], usize) -> T,
    ) -> Self {
        let drift = (0..grid.len())
            .map(|idx| {
                let y = grid.node(idx);
                let mut b = [T::zero(); 2];
                for d in 0..grid.dims {
                    b[d] = drift_fn(y, d);
                }
                b
            })
            .collect();
        Self::assemble(grid, mu, drift, Vec::new(), None)
    }

    fn assemble(
        grid: ModeGrid<T>,
        mu: [T; 2],
        drift: Vec<[T; 2]>,
        modes: Vec<usize>,
        embedding: Option<(Arc<Lattice<T>>, Vec<SpectralField<T>>)>,
    ) -> Self {
        let n = grid.len();
        let mut rows: Vec<Vec<(usize, T)>> = vec![Vec::new(); n];
        let mut peclet = T::zero();
        for idx in 0..n {
            let i = [idx / grid.shape[1], idx % grid.shape[1]];
            let mut row: Vec<(usize, T)> = Vec::with_capacity(2 * grid.dims + 1);
            let mut push = |col: usize, v: T| {
                if v != T::zero() {
                    if let Some(e) = row.iter_mut().find(|(c, _)| *c == col) {
                        e.1 += v;
                    } else {
                        row.push((col, v));
                    }
                }
            };
            for d in 0..grid.dims {
                let nd = grid.shape[d];
                let stride = if d == 0 { grid.shape[1] } else { 1 };
                let h = grid.spacing(d);
                let dcoef = T::half() * mu[d] / (h * h);
                if mu[d] > T::zero() {
                    if i[d] == 0 {
                        push(idx, -dcoef);
                        push(idx + stride, dcoef);
                    } else if i[d] == nd - 1 {
                        push(idx, -dcoef);
                        push(idx - stride, dcoef);
                    } else {
                        push(idx - stride, dcoef);
                        push(idx, -T::two() * dcoef);
                        push(idx + stride, dcoef);
                    }
                }
                let b = drift[idx][d];
                if b != T::zero() {
                    if mu[d] > T::zero() {
                        peclet = peclet.max(b.abs() * h / mu[d]);
                    }
                    let forward = if i[d] == 0 {
                        true
                    } else if i[d] == nd - 1 {
                        false
                    } else {
                        b > T::zero()
                    };
                    if forward {
                        push(idx + stride, b / h);
                        push(idx, -b / h);
                    } else {
                        push(idx, b / h);
                        push(idx - stride, -b / h);
                    }
                }
            }
            rows[idx] = row;
        }
        let peclet_warning = if peclet > T::two() {
            Some(format!(
                "cell Péclet number {:.2} > 2: upwinding stays stable but loses accuracy; \
                 refine the grid by a factor of ~{:.1}",
                peclet.to_f64_lossy(),
                (peclet / T::two()).to_f64_lossy().ceil()
            ))
        } else {
            None
        };
        ReducedGenerator { grid, modes, mu, drift, rows, peclet, peclet_warning, embedding }
    }

    pub fn rows(&self) -> &[Vec<(usize, T)>] {
        &self.rows
    }

    /// out = Lφ.
    pub fn apply(&self, phi: &[T], out: &mut [T]) {
        for (o, row) in out.iter_mut().zip(&self.rows) {
            let mut acc = T::zero();
            for &(c, v) in row {
                acc += v * phi[c];
            }
            *o = acc;
        }
    }

    /// The full state Σ y_d e_d the grid point stands for.
    pub fn embed(&self, y: [T; 2]) -> Result<SpectralField<T>> {
        let (lat, fields) = self
            .embedding
            .as_ref()
            .ok_or_else(|| ScbfError::InvalidParam("generator has no embedding".into()))?;
        let mut x = SpectralField::zero(lat);
        for (d, e) in fields.iter().enumerate() {
            x.axpy(y[d], e);
        }
        Ok(x)
    }

    /// Nodal values of a state functional through the embedding.
    pub fn tabulate(&self, f: &dyn Functional<T>) -> Result<Vec<T>> {
        let (lat, fields) = self
            .embedding
            .as_ref()
            .ok_or_else(|| ScbfError::InvalidParam("generator has no embedding".into()))?;
        let mut x = SpectralField::zero(lat);
        let mut out = Vec::with_capacity(self.grid.len());
        for idx in 0..self.grid.len() {
            let y = self.grid.node(idx);
            x.set_zero();
            for (d, e) in fields.iter().enumerate() {
                x.axpy(y[d], e);
            }
            out.push(f.eval(&x));
        }
        Ok(out)
    }

    /// Solve (I − dt·L)x = rhs. Thomas elimination in 1D (the stencil is
    /// tridiagonal there), damped Gauss–Seidel warm-started from `warm` in
    /// 2D; both exploit the M-matrix structure of the upwinded operator.
    pub fn implicit_solve(&self, dt: T, rhs: &[T], warm: &[T]) -> Result<Vec<T>> {
        let n = self.grid.len();
        if self.grid.dims == 1 {
            let mut sub = vec![T::zero(); n];
            let mut diag = vec![T::one(); n];
            let mut sup = vec![T::zero(); n];
            for (i, row) in self.rows.iter().enumerate() {
                for &(c, v) in row {
                    if c == i {
                        diag[i] -= dt * v;
                    } else if c + 1 == i {
                        sub[i] = -dt * v;
                    } else if c == i + 1 {
                        sup[i] = -dt * v;
                    } else {
                        return Err(ScbfError::LinearSolve(format!(
                            "unexpected band entry ({i},{c}) in 1D stencil"
                        )));
                    }
                }
            }
            let mut c_star = vec![T::zero(); n];
            let mut d_star = vec![T::zero(); n];
            let mut den = diag[0];
            if den == T::zero() {
                return Err(ScbfError::LinearSolve("zero pivot".into()));
            }
            c_star[0] = sup[0] / den;
            d_star[0] = rhs[0] / den;
            for i in 1..n {
                den = diag[i] - sub[i] * c_star[i - 1];
                if den == T::zero() {
                    return Err(ScbfError::LinearSolve("zero pivot".into()));
                }
                c_star[i] = sup[i] / den;
                d_star[i] = (rhs[i] - sub[i] * d_star[i - 1]) / den;
            }
            let mut x = vec![T::zero(); n];
            x[n - 1] = d_star[n - 1];
            for i in (0..n - 1).rev() {
                x[i] = d_star[i] - c_star[i] * x[i + 1];
            }
            return Ok(x);
        }

        let mut x = warm.to_vec();
        let scale = rhs.iter().fold(T::one(), |m, v| m.max(v.abs()));
        let tol = T::of(1e-13) * scale;
        for _sweep in 0..20_000 {
            let mut max_delta = T::zero();
            for i in 0..n {
                let mut diag = T::one();
                let mut acc = rhs[i];
                for &(c, v) in &self.rows[i] {
                    if c == i {
                        diag -= dt * v;
                    } else {
                        acc += dt * v * x[c];
                    }
                }
                if diag == T::zero() {
                    return Err(ScbfError::LinearSolve("zero pivot".into()));
                }
                let new = acc / diag;
                max_delta = max_delta.max((new - x[i]).abs());
                x[i] = new;
            }
            if max_delta <= tol {
                return Ok(x);
            }
        }
        Err(ScbfError::LinearSolve("Gauss–Seidel did not converge".into()))
    }
}

/// One implicit step of the projected scheme: solve (I − dt·L)φ* = φ + dt·F
/// unconstrained, then φ⁺ = min(φ*, G) and ζ = (φ* − φ⁺)/dt. ζ ≥ 0 and the
/// complementarity ζ·(G − φ⁺) = 0 hold exactly by construction.
pub fn vi_step<T: Scalar>(
    gen: &ReducedGenerator<T>,
    phi: &[T],
    dt: T,
    f_vals: &[T],
    g_vals: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let n = gen.grid.len();
    if phi.len() != n || f_vals.len() != n || g_vals.len() != n {
        return Err(ScbfError::InvalidParam("grid-function length mismatch".into()));
    }
    if dt <= T::zero() {
        return Err(ScbfError::InvalidParam("vi_step needs dt > 0".into()));
    }
    let rhs: Vec<T> = phi.iter().zip(f_vals).map(|(&p, &f)| p + dt * f).collect();
    let star = gen.implicit_solve(dt, &rhs, phi)?;
    let mut next = Vec::with_capacity(n);
    let mut zeta = Vec::with_capacity(n);
    for (s, &g) in star.iter().zip(g_vals) {
        let p = s.min(g);
        next.push(p);
        zeta.push((*s - p) / dt);
    }
    Ok((next, zeta))
}

/// The obstacle problem marched from φ(0) = min(φ₀, G) up to the horizon.
/// `phi` frames index remaining horizon: frame n is the value with n·dt of
/// time left, so the last frame prices the full problem.
pub struct ObstacleProblem<'a, T: Scalar> {
    pub f: &'a dyn Functional<T>,
    pub g: &'a dyn Functional<T>,
    pub horizon: T,
    /// Default horizon/200.
    pub dt: Option<T>,
    /// Seed for φ(0); default G (stop immediately at zero horizon).
    pub phi0: Option<Vec<T>>,
}

pub struct ViSolution<T: Scalar> {
    pub times: Vec<T>,
    /// One frame per time, φ ≤ G everywhere.
    pub phi: Vec<Vec<T>>,
    /// Multiplier frames; zeta[n] was produced stepping frame n → n+1.
    pub zeta: Vec<Vec<T>>,
    pub f_vals: Vec<T>,
    pub g_vals: Vec<T>,
    pub dt: T,
}

impl<T: Scalar> ViSolution<T> {
    /// The full-horizon value function.
    pub fn final_phi(&self) -> &[T] {
        self.phi.last().expect("at least the initial frame")
    }

    pub fn steps(&self) -> usize {
        self.zeta.len()
    }
}

pub fn solve_obstacle<T: Scalar>(
    gen: &ReducedGenerator<T>,
    prob: &ObstacleProblem<'_, T>,
) -> Result<ViSolution<T>> {
    if prob.horizon <= T::zero() {
        return Err(ScbfError::InvalidParam("horizon must be positive".into()));
    }
    let f_vals = gen.tabulate(prob.f)?;
    let g_vals = gen.tabulate(prob.g)?;
    let dt = match prob.dt {
        Some(d) if d > T::zero() => d,
        Some(_) => return Err(ScbfError::InvalidParam("dt must be positive".into())),
        None => prob.horizon / T::of(200.0),
    };
    let steps = ((prob.horizon / dt).to_f64_lossy().round() as usize).max(1);
    let n = gen.grid.len();
    let mut phi0 = match &prob.phi0 {
        Some(v) => {
            if v.len() != n {
                return Err(ScbfError::InvalidParam("phi0 length mismatch".into()));
            }
            v.clone()
        }
        None => g_vals.clone(),
    };
    for (p, &g) in phi0.iter_mut().zip(&g_vals) {
        *p = p.min(g);
    }
    let mut phi = Vec::with_capacity(steps + 1);
    let mut zeta = Vec::with_capacity(steps);
    let mut times = Vec::with_capacity(steps + 1);
    times.push(T::zero());
    phi.push(phi0);
    for k in 0..steps {
        let (next, z) = vi_step(gen, phi.last().unwrap(), dt, &f_vals, &g_vals)?;
        phi.push(next);
        zeta.push(z);
        times.push(dt * T::of((k + 1) as f64));
    }
    Ok(ViSolution { times, phi, zeta, f_vals, g_vals, dt })
}

/// Per-frame stopping-set masks S = {φ ≥ G − tol}; the complement is the
/// continuation set.
pub struct Regions {
    pub stopping: Vec<Vec<bool>>,
}

pub fn extract_regions<T: Scalar>(sol: &ViSolution<T>, tol: T) -> Regions {
    let stopping = sol
        .phi
        .iter()
        .map(|frame| {
            frame
                .iter()
                .zip(&sol.g_vals)
                .map(|(&p, &g)| p >= g - tol)
                .collect()
        })
        .collect();
    Regions { stopping }
}

/// Empirical check of the stopping rule: simulate the reduced SDE, stop at
/// the first time the state enters the stopping region of the matching
/// remaining-horizon frame, pay ∫F along the way plus G at the stop, and
/// compare with the grid value at the start point.
pub struct StoppedCostReport<T: Scalar> {
    pub value: T,
    pub se: T,
    /// Interpolated φ(T, y₀) from the solved grid.
    pub grid_value: T,
    pub mean_tau: T,
}

pub fn stopped_cost_mc<T: Scalar>(
    gen: &ReducedGenerator<T>,
    sol: &ViSolution<T>,
    region_tol: T,
    y0: [T; 2],
    n_paths: usize,
    substeps: usize,
    seed: u64,
) -> Result<StoppedCostReport<T>> {
    if n_paths == 0 || substeps == 0 {
        return Err(ScbfError::InvalidParam("need paths and substeps".into()));
    }
    let steps = sol.steps();
    let dt_path = sol.dt / T::of(substeps as f64);
    let grid = &gen.grid;
    let dims = grid.dims;
    // Paths see exactly the drift field the generator discretized,
    // interpolated from its node table.
    let drift_tables: Vec<Vec<T>> =
        (0..dims).map(|d| gen.drift.iter().map(|b| b[d]).collect()).collect();

    let results: Vec<(T, T)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let mut y = y0;
            let mut cost = CompSum::new();
            let mut tau = T::zero();
            'walk: for nw in 0..=(steps * substeps) {
                if nw % substeps == 0 {
                    let rem = steps - nw / substeps;
                    let phi_here = grid.interp(&sol.phi[rem], y);
                    let g_here = grid.interp(&sol.g_vals, y);
                    if phi_here >= g_here - region_tol || rem == 0 {
                        cost.add(g_here);
                        tau = dt_path * T::of(nw as f64);
                        break 'walk;
                    }
                }
                cost.add(dt_path * grid.interp(&sol.f_vals, y));
                for d in 0..dims {
                    let b = grid.interp(&drift_tables[d], y);
                    let z = T::standard_normal(&mut rng);
                    y[d] = y[d] + dt_path * b + (gen.mu[d] * dt_path).sqrt() * z;
                }
            }
            (cost.total(), tau)
        })
        .collect();
    let mut wc = Welford::new();
    let mut wt = Welford::new();
    for (c, t) in results {
        wc.push(c);
        wt.push(t);
    }
    Ok(StoppedCostReport {
        value: wc.mean(),
        se: wc.se(),
        grid_value: grid.interp(sol.final_phi(), y0),
        mean_tau: wt.mean(),
    })
}

/// Gauss–Hermite nodes/weights in the physicists' convention:
/// ∫ e^{−x²} f(x) dx ≈ Σ wᵢ f(xᵢ), nodes in ascending order. Newton
/// iteration on the normalized recurrence; exact for degree < 2n.
pub fn gauss_hermite<T: Scalar>(n: usize) -> (Vec<T>, Vec<T>) {
    assert!(n >= 1);
    let mut x = vec![0.0f64; n];
    let mut w = vec![0.0f64; n];
    let pim4 = 0.751_125_544_464_942_5_f64; // π^{−1/4}
    let m = (n + 1) / 2;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => {
                let a = (2 * n + 1) as f64;
                a.sqrt() - 1.85575 * a.powf(-1.0 / 6.0)
            }
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0f64;
        for _ in 0..200 {
            let mut p1 = pim4;
            let mut p2 = 0.0f64;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / j as f64).sqrt() * p2
                    - (((j - 1) as f64) / j as f64).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() < 1e-15 {
                break;
            }
        }
        // descending fill: the warm starts above read x[0], x[1], x[i-2]
        // as the previously found positive roots
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    x.reverse();
    w.reverse();
    (x.into_iter().map(T::of).collect(), w.into_iter().map(T::of).collect())
}

#[derive(Clone, Copy, Debug)]
pub struct DpConfig {
    pub n_steps: usize,
    pub gh_points: usize,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig { n_steps: 200, gh_points: 20 }
    }
}

/// Dynamic-programming value function on the same grid: backward induction
/// V ← min(G, F·dt + E V(y + b(y)dt + √(μdt)·Z)) with the one-step Gaussian
/// integrated by Gauss–Hermite quadrature and off-grid values by its own
/// multilinear lookup. Written independently of the variational stepper —
/// it shares the problem data but none of the discretization machinery.
pub fn dp_oracle<T: Scalar>(
    grid: &ModeGrid<T>,
    drift: &dyn Fn([T; 2], usize) -> T,
    mu: [T; 2],
    f_vals: &[T],
    g_vals: &[T],
    horizon: T,
    cfg: &DpConfig,
) -> Result<Vec<T>> {
    let n = grid.len();
    if f_vals.len() != n || g_vals.len() != n {
        return Err(ScbfError::InvalidParam("grid-function length mismatch".into()));
    }
    if horizon < T::zero() {
        return Err(ScbfError::InvalidParam("horizon must be >= 0".into()));
    }
    let mut v = g_vals.to_vec();
    if horizon == T::zero() || cfg.n_steps == 0 {
        return Ok(v);
    }
    let dt = horizon / T::of(cfg.n_steps as f64);
    let (gh_x, gh_w) = gauss_hermite::<T>(cfg.gh_points.max(1));
    // Probabilists' rescaling: E f(Z) = π^{−1/2} Σ w f(√2 x).
    let norm = T::one() / T::PI().sqrt();
    let sqrt2 = T::SQRT_2();

    // Local lookup, deliberately written against raw strides rather than
    // the grid helper.
    let shape = grid.shape;
    let h0 = grid.spacing(0);
    let lo0 = grid.lo[0];
    let (h1, lo1) = (grid.spacing(1), grid.lo[1]);
    let fetch = |tab: &[T], y: [T; 2]| -> T {
        let clampf = |s: T, nmax: usize| -> (usize, T) {
            if s <= T::zero() {
                (0, T::zero())
            } else if s >= T::of((nmax - 1) as f64) {
                (nmax - 2, T::one())
            } else {
                let i = s.to_f64_lossy().floor() as usize;
                (i.min(nmax - 2), s - T::of(i as f64))
            }
        };
        let (i0, a0) = clampf((y[0] - lo0) / h0, shape[0]);
        if grid.dims == 1 {
            tab[i0] + a0 * (tab[i0 + 1] - tab[i0])
        } else {
            let (i1, a1) = clampf((y[1] - lo1) / h1, shape[1]);
            let base = i0 * shape[1] + i1;
            let lowr = tab[base] + a1 * (tab[base + 1] - tab[base]);
            let upr = tab[base + shape[1]] + a1 * (tab[base + shape[1] + 1] - tab[base + shape[1]]);
            lowr + a0 * (upr - lowr)
        }
    };

    let s0 = (mu[0] * dt).sqrt();
    let s1 = (mu[1] * dt).sqrt();
    let mut next = vec![T::zero(); n];
    for _ in 0..cfg.n_steps {
        for idx in 0..n {
            let y = grid.node(idx);
            let m0 = y[0] + dt * drift(y, 0);
            let ev = if grid.dims == 1 {
                let mut acc = T::zero();
                for (xq, wq) in gh_x.iter().zip(&gh_w) {
                    acc += *wq * fetch(&v, [m0 + s0 * sqrt2 * *xq, T::zero()]);
                }
                acc * norm
            } else {
                let m1 = y[1] + dt * drift(y, 1);
                let mut acc = T::zero();
                for (x0, w0) in gh_x.iter().zip(&gh_w) {
                    let yy0 = m0 + s0 * sqrt2 * *x0;
                    let mut inner = T::zero();
                    for (x1, w1) in gh_x.iter().zip(&gh_w) {
                        inner += *w1 * fetch(&v, [yy0, m1 + s1 * sqrt2 * *x1]);
                    }
                    acc += *w0 * inner;
                }
                acc * norm * norm
            };
            next[idx] = g_vals[idx].min(f_vals[idx] * dt + ev);
        }
        std::mem::swap(&mut v, &mut next);
    }
    Ok(v)
}

/// Monte-Carlo probe of (P_t G)(x) ≤ G(x) over a (t, x) sample. Entries
/// report in f64 since they are terminal diagnostics.
#[derive(Clone, Debug, serde::Serialize)]
pub struct SupermartingaleEntry {
    pub t: f64,
    pub sample: usize,
    pub pt_g: f64,
    pub g_x: f64,
    pub se: f64,
    pub violation: bool,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct SupermartingaleReport {
    pub entries: Vec<SupermartingaleEntry>,
    pub violations: usize,
}

pub fn check_supermartingale_g<T: Scalar>(
    lat: &Arc<Lattice<T>>,
    params: &ModelParams<T>,
    noise: &NoiseSpec<T>,
    g: &dyn Functional<T>,
    times: &[T],
    x_samples: &[SpectralField<T>],
    mc: &McConfig<T>,
) -> Result<SupermartingaleReport> {
    let mut entries = Vec::with_capacity(times.len() * x_samples.len());
    let mut violations = 0;
    let mut block = 0u64;
    for &t in times {
        for (si, x) in x_samples.iter().enumerate() {
            let mc_e = mc.with_stream_base(mc.stream_base + block * mc.n_paths as u64);
            block += 1;
            let (pt_g, se) = semigroup_eval(lat, params, noise, g, x, t, &mc_e)?;
            let g_x = g.eval(x);
            let violation = pt_g - g_x > T::of(3.0) * se;
            if violation {
                violations += 1;
            }
            entries.push(SupermartingaleEntry {
                t: t.to_f64_lossy(),
                sample: si,
                pt_g: pt_g.to_f64_lossy(),
                g_x: g_x.to_f64_lossy(),
                se: se.to_f64_lossy(),
                violation,
            });
        }
    }
    Ok(SupermartingaleReport { entries, violations })
}
