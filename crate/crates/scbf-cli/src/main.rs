//! `scbf` — drive the simulation and verification suites from a JSON run
//! configuration. One experiment per process; artifacts (CSV tables, JSON
//! reports, binary checkpoints) land in the configured output directory
//! together with the resolved config and a run manifest.
//!
//! Exit codes: 0 all checks passed, 1 at least one check failed,
//! 2 runtime or configuration error.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use config::{
    CheckSummary, ExperimentConfig, ModeSpec, RunConfig, RunManifest, X0Config,
};
use scbf_core::error::{Result, ScbfError};
use scbf_core::functional::{Functional, TestFunctional};
use scbf_core::hjb::{
    cost_tournament, solve_hjb, verification_residual, ConstantPolicy, ControlPolicy,
    Hamiltonian, HjbConfig, ZeroPolicy,
};
use scbf_core::io::{
    region_boundary_rows, save_field, save_measure, save_trajectory, vi_grid_rows, write_csv,
    write_json, CheckRow, DiagnosticsRow, MomentRow,
};
use scbf_core::kolmogorov::{
    carre_du_champ_residual, dissipativity_check, invariance_residual, resolvent_eval,
    resolvent_sqrtq_gradient, truncation_residuals, McConfig, ResolventConfig,
};
use scbf_core::measure::{
    check_conditions, ergodicity_gap, kb_estimate, moment, sigma_star, EmpiricalMeasure,
    KbConfig, MomentKind,
};
use scbf_core::operators::{ModelParams, NoiseSpec};
use scbf_core::sim::{simulate, SimConfig};
use scbf_core::spectral::{Lattice, Phase, SpectralField, WaveIndex};
use scbf_core::stopping::{
    check_supermartingale_g, dp_oracle, extract_regions, solve_obstacle, stopped_cost_mc,
    DpConfig, ModeGrid, ObstacleProblem, ReducedGenerator,
};

#[derive(Parser)]
#[command(name = "scbf", version, about = "Spectral SCBF simulation and verification toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration JSON.
    #[arg(long)]
    config: PathBuf,
    /// Override sim.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Cap worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Evaluate the parameter predicates gating the theory.
    Check(Common),
    /// Record one trajectory with per-step diagnostics.
    Simulate(Common),
    /// Sample the invariant measure; moment and energy-trace checks.
    Invariant(Common),
    /// Generator, carré-du-champ, resolvent, and truncation checks.
    Kolmogorov(Common),
    /// Solve the discounted-control fixed point and race the policies.
    Hjb(Common),
    /// Solve the obstacle problem on a mode reduction.
    Stop(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = match &cli.cmd {
        Cmd::Check(c) => ("check", c),
        Cmd::Simulate(c) => ("simulate", c),
        Cmd::Invariant(c) => ("invariant", c),
        Cmd::Kolmogorov(c) => ("kolmogorov", c),
        Cmd::Hjb(c) => ("hjb", c),
        Cmd::Stop(c) => ("stop", c),
    };
    match run(name, common) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn experiment_kind(e: &ExperimentConfig) -> &'static str {
    match e {
        ExperimentConfig::Check { .. } => "check",
        ExperimentConfig::Simulate { .. } => "simulate",
        ExperimentConfig::Invariant { .. } => "invariant",
        ExperimentConfig::Kolmogorov { .. } => "kolmogorov",
        ExperimentConfig::Hjb { .. } => "hjb",
        ExperimentConfig::Stop { .. } => "stop",
    }
}

fn run(name: &str, common: &Common) -> Result<bool> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.sim.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    if let Some(t) = common.threads {
        // Best-effort: the global pool can only be sized once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let kind = experiment_kind(&cfg.experiment);
    if kind != name {
        return Err(ScbfError::InvalidParam(format!(
            "config describes a '{kind}' experiment but the subcommand is '{name}'"
        )));
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut ctx = Ctx::new(cfg);
    ctx.write_resolved_config()?;
    let res = dispatch(&mut ctx);
    let failed = res.as_ref().err().map(|e| e.to_string());
    let pass = ctx.write_manifest(failed)?;
    res?;
    Ok(pass)
}

fn dispatch(ctx: &mut Ctx) -> Result<()> {
    match ctx.cfg.experiment.clone() {
        ExperimentConfig::Check { require_419, require_439, delta, gamma1 } => {
            run_check(ctx, require_419, require_439, delta, gamma1)
        }
        ExperimentConfig::Simulate { x0, record_every } => run_simulate(ctx, &x0, record_every),
        ExperimentConfig::Invariant { x0, burn_in, stride } => {
            run_invariant(ctx, &x0, burn_in, stride)
        }
        ExperimentConfig::Kolmogorov {
            lambda,
            n_cylinders,
            resolvent_lambdas,
            truncation_eps,
            cloud,
            burn_in,
            stride,
        } => run_kolmogorov(
            ctx,
            lambda,
            n_cylinders,
            &resolvent_lambdas,
            &truncation_eps,
            cloud,
            burn_in,
            stride,
        ),
        ExperimentConfig::Hjb {
            lambda,
            radius,
            cloud,
            tol,
            max_iter,
            cost_mode,
            random_policies,
            burn_in,
            stride,
        } => run_hjb(
            ctx,
            lambda,
            radius,
            cloud,
            tol,
            max_iter,
            cost_mode,
            random_policies,
            burn_in,
            stride,
        ),
        ExperimentConfig::Stop {
            modes,
            grid_lo,
            grid_hi,
            grid_n,
            kappa,
            s0,
            dt,
            region_tol,
            substeps,
            compare_dp,
        } => run_stop(
            ctx, &modes, &grid_lo, &grid_hi, &grid_n, kappa, s0, dt, region_tol, substeps,
            compare_dp,
        ),
    }
}

struct Ctx {
    cfg: RunConfig,
    started: Instant,
    artifacts: Vec<String>,
    checks: Vec<CheckSummary>,
}

impl Ctx {
    fn new(cfg: RunConfig) -> Self {
        Ctx { cfg, started: Instant::now(), artifacts: Vec::new(), checks: Vec::new() }
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.cfg.output_dir.join(name)
    }

    fn check(&mut self, name: &str, pass: bool, detail: String) {
        println!("{}: {} ({detail})", name, if pass { "PASS" } else { "FAIL" });
        self.checks.push(CheckSummary { name: name.to_string(), pass });
    }

    fn write_resolved_config(&mut self) -> Result<()> {
        let p = self.path("resolved_config.json");
        std::fs::write(&p, self.cfg.canonical_json())?;
        Ok(())
    }

    fn write_manifest(&mut self, failed: Option<String>) -> Result<bool> {
        let pass = failed.is_none() && self.checks.iter().all(|c| c.pass);
        let manifest = RunManifest {
            config_hash: self.cfg.hash(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
            artifacts: self.artifacts.clone(),
            checks: self.checks.clone(),
            failed,
        };
        let p = self.cfg.output_dir.join("manifest.json");
        write_json(&p, &manifest)?;
        Ok(pass)
    }

    fn build(&self) -> Result<(Arc<Lattice<f64>>, ModelParams<f64>, NoiseSpec<f64>)> {
        let lat = self.cfg.build_lattice();
        let noise = self.cfg.build_noise(&lat)?;
        Ok((lat, self.cfg.model_params(), noise))
    }

    fn sample_measure(
        &self,
        lat: &Arc<Lattice<f64>>,
        params: &ModelParams<f64>,
        noise: &NoiseSpec<f64>,
        x0: &SpectralField<f64>,
        burn_in: Option<f64>,
        stride: Option<f64>,
    ) -> Result<EmpiricalMeasure<f64>> {
        let kb = KbConfig {
            horizon: self.cfg.sim.t,
            burn_in,
            stride,
            dt: self.cfg.sim.dt,
            n_streams: self.cfg.sim.n_paths,
            seed: self.cfg.sim.seed,
        };
        kb_estimate(lat, params, noise, x0, &kb)
    }
}

fn run_check(
    ctx: &mut Ctx,
    require_419: bool,
    require_439: bool,
    delta: f64,
    gamma1: Option<f64>,
) -> Result<()> {
    let (lat, params, noise) = ctx.build()?;
    let report = check_conditions(&params, &noise, &lat, delta, gamma1);
    println!(
        "cond419 (uniqueness):    {}  [{:.6e} > {:.6e}]",
        if report.cond419 { "holds" } else { "violated" },
        report.cond419_lhs,
        report.cond419_rhs
    );
    println!(
        "cond439 (truncation):    {}  [{:.6e} > {:.6e}]",
        if report.cond439 { "holds" } else { "violated" },
        report.cond439_lhs,
        report.cond439_rhs
    );
    match report.improve_bound {
        Some(b) => println!("sigma* (exp. moments):   {b:.6e}"),
        None => println!("sigma* (exp. moments):   unbounded (zero noise)"),
    }
    println!(
        "Tr(Q) = {:.6e}, Tr(A^2dQ) = {:.6e}, Tr(AQ) = {:.6e}",
        report.trace_q, report.trace_a2delta_q, report.trace_aq
    );
    let p = ctx.path("conditions.json");
    write_json(&p, &report)?;
    ctx.check(
        "trace(AQ) finite",
        report.trace_aq.is_finite(),
        format!("{:.6e}", report.trace_aq),
    );
    if require_419 {
        ctx.check(
            "cond419 required",
            report.cond419,
            format!("{:.4e} > {:.4e}", report.cond419_lhs, report.cond419_rhs),
        );
    }
    if require_439 {
        ctx.check(
            "cond439 required",
            report.cond439,
            format!("{:.4e} > {:.4e}", report.cond439_lhs, report.cond439_rhs),
        );
    }
    Ok(())
}

fn run_simulate(ctx: &mut Ctx, x0: &X0Config, record_every: usize) -> Result<()> {
    let (lat, params, noise) = ctx.build()?;
    let x0 = ctx.cfg.build_x0(&lat, x0)?;
    let sim = SimConfig::new(ctx.cfg.sim.t, ctx.cfg.sim.dt);
    let mut ws = scbf_core::operators::Workspace::new(&lat, params);
    let traj = simulate(&mut ws, &noise, &sim, &x0, ctx.cfg.sim.seed, 0, record_every)?;
    println!(
        "simulated T = {} in {} recorded frames; final |X|_H = {:.6e}, energy residual {:.3e}",
        ctx.cfg.sim.t,
        traj.states.len(),
        traj.states.last().map(|s| s.norm_h()).unwrap_or(0.0),
        traj.energy_residual
    );
    let rows: Vec<DiagnosticsRow> = traj
        .diagnostics
        .iter()
        .map(|d| DiagnosticsRow {
            t: d.t,
            norm_h: d.norm_h,
            norm_v: d.norm_v,
            norm_lr: d.norm_lr,
            energy_residual: d.energy_residual,
        })
        .collect();
    let p = ctx.path("diagnostics.csv");
    write_csv(&p, &rows)?;
    let frames: Vec<(f64, SpectralField<f64>)> = traj
        .times
        .iter()
        .cloned()
        .zip(traj.states.iter().cloned())
        .collect();
    let p = ctx.path("trajectory.bin");
    save_trajectory(&p, &lat, &frames)?;
    let p = ctx.path("final_state.json");
    save_field(&p, traj.states.last().expect("at least the initial state"))?;
    Ok(())
}

fn run_invariant(
    ctx: &mut Ctx,
    x0s: &[X0Config],
    burn_in: Option<f64>,
    stride: Option<f64>,
) -> Result<()> {
    let (lat, params, noise) = ctx.build()?;
    if x0s.is_empty() {
        return Err(ScbfError::InvalidParam("invariant needs at least one x0".into()));
    }
    let sigma = sigma_star(&params, noise.trace(), lat.lambda_1())
        .map(|s| 0.5 * s)
        .unwrap_or(0.1);
    let mut moment_rows: Vec<MomentRow> = Vec::new();
    let mut measures = Vec::new();
    for (i, spec) in x0s.iter().enumerate() {
        let x0 = ctx.cfg.build_x0(&lat, spec)?;
        let m = ctx.sample_measure(&lat, &params, &noise, &x0, burn_in, stride)?;
        println!(
            "measure {i}: {} snapshots over {} streams",
            m.len(),
            m.blocks.len()
        );
        let p = ctx.path(&format!("measure_{i}.json"));
        save_measure(&p, &m)?;
        for kind in [
            MomentKind::ExpH { sigma },
            MomentKind::V2ExpH { sigma },
            MomentKind::LrExpH { sigma },
            MomentKind::A2,
        ] {
            let rep = moment(&m, &kind, &params, &noise)?;
            let name = format!("{} (x0 {i})", rep.name);
            if let (Some(bound), Some(pass)) = (rep.paper_bound, rep.pass) {
                ctx.check(
                    &format!("moment {name}"),
                    pass,
                    format!("{:.6e} vs bound {:.6e}, se {:.2e}", rep.value, bound, rep.se),
                );
            }
            moment_rows.push(MomentRow {
                functional: name,
                value: rep.value,
                se: rep.se,
                bound: rep.paper_bound.unwrap_or(f64::NAN),
                pass: rep.pass.unwrap_or(true),
            });
        }
        let tr = scbf_core::measure::energy_trace_residual(&m, &params, &noise);
        ctx.check(
            &format!("energy trace (x0 {i})"),
            tr.residual.abs() <= 3.0 * tr.se + 0.1 * tr.trace_q,
            format!("lhs {:.6e} vs TrQ {:.6e}, se {:.2e}", tr.lhs, tr.trace_q, tr.se),
        );
        measures.push((x0, m));
    }
    let p = ctx.path("moments.csv");
    write_csv(&p, &moment_rows)?;

    if measures.len() >= 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.sim.seed ^ 0x6761_70);
        let mut tests: Vec<TestFunctional<f64>> = Vec::new();
        for i in 0..3 {
            let mut h = SpectralField::random(&lat, &mut rng, 1.5);
            let n = h.norm_h();
            if n > 0.0 {
                h.scale(1.0 / n);
            }
            tests.push(if i % 2 == 0 {
                TestFunctional::CylinderCos { h }
            } else {
                TestFunctional::CylinderSin { h }
            });
        }
        let refs: Vec<&dyn Functional<f64>> =
            tests.iter().map(|t| t as &dyn Functional<f64>).collect();
        let gap = ergodicity_gap(
            &lat,
            &params,
            &noise,
            &measures[0].0,
            &measures[1].0,
            &refs,
            ctx.cfg.sim.t,
            ctx.cfg.sim.dt,
            ctx.cfg.sim.n_paths,
            ctx.cfg.sim.seed ^ 0x6d69_78,
        )?;
        #[derive(serde::Serialize)]
        struct GapJson {
            gap: f64,
            se: f64,
            envelope: f64,
            rate: f64,
            prefactor: f64,
        }
        let p = ctx.path("ergodicity_gap.json");
        write_json(
            &p,
            &GapJson {
                gap: gap.gap,
                se: gap.se,
                envelope: gap.envelope,
                rate: gap.rate,
                prefactor: gap.prefactor,
            },
        )?;
        ctx.check(
            "ergodicity gap",
            gap.gap <= gap.envelope + 3.0 * gap.se,
            format!("gap {:.6e} vs envelope {:.6e}, se {:.2e}", gap.gap, gap.envelope, gap.se),
        );
    }
    Ok(())
}

fn random_cylinders(
    lat: &Arc<Lattice<f64>>,
    count: usize,
    seed: u64,
) -> Vec<TestFunctional<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let mut h = SpectralField::random(lat, &mut rng, 1.5);
            let n = h.norm_h();
            if n > 0.0 {
                h.scale(1.0 / n);
            }
            if i % 2 == 0 {
                TestFunctional::CylinderCos { h }
            } else {
                TestFunctional::CylinderSin { h }
            }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_kolmogorov(
    ctx: &mut Ctx,
    lambda: f64,
    n_cylinders: usize,
    resolvent_lambdas: &[f64],
    truncation_eps: &[f64],
    cloud: usize,
    burn_in: Option<f64>,
    stride: Option<f64>,
) -> Result<()> {
    let (lat, params, noise) = ctx.build()?;
    let x0 = SpectralField::zero(&lat);
    let m = ctx.sample_measure(&lat, &params, &noise, &x0, burn_in, stride)?;
    println!("measure: {} snapshots over {} streams", m.len(), m.blocks.len());
    let dt = ctx.cfg.sim.dt;
    let seed = ctx.cfg.sim.seed;
    let mut rows: Vec<CheckRow> = Vec::new();
    let add = |ctx: &mut Ctx, rows: &mut Vec<CheckRow>, name: String, value: f64, target: f64, se: f64, pass: bool| {
        ctx.check(&name, pass, format!("value {value:.6e}, target {target:.6e}, se {se:.2e}"));
        rows.push(CheckRow { check: name, value, target, se, pass });
    };

    // Invariance residuals on random cylinder functions: |∫N₀ψ dη| should
    // vanish within sampling error plus the O(dt) sampler bias.
    let cylinders = random_cylinders(&lat, n_cylinders, seed ^ 0x6379_6c);
    for (i, f) in cylinders.iter().enumerate() {
        let (val, se) = invariance_residual(&m, &params, &noise, f)?;
        let target = 3.0 * se + dt;
        add(ctx, &mut rows, format!("invariance cyl{i}"), val.abs(), target, se, val.abs() <= target);
    }

    // Carré du champ on a gradient-carrying family.
    let carre_fams = random_cylinders(&lat, 4, seed ^ 0x6361_72);
    let mut carre: Vec<&dyn Functional<f64>> =
        carre_fams.iter().map(|f| f as &dyn Functional<f64>).collect();
    let coord = TestFunctional::coordinate(&lat, lat.basis(0));
    carre.push(&coord);
    for (i, f) in carre.iter().enumerate() {
        let rep = carre_du_champ_residual(&m, &params, &noise, *f)?;
        let se = rep.pairing_se + rep.energy_se;
        let target = 3.0 * se + dt;
        add(ctx, &mut rows, format!("carre f{i}"), rep.residual, target, se, rep.residual <= target);
    }

    // Dissipativity of the generator in L²(η).
    let diss = dissipativity_check(&m, &params, &noise, &cylinders[0], lambda)?;
    add(
        ctx,
        &mut rows,
        format!("dissipativity lambda={lambda}"),
        diss.lhs,
        diss.rhs,
        diss.lhs_se + diss.rhs_se,
        diss.pass,
    );

    // Resolvent sup-norm and gradient bounds on a subsampled cloud.
    let f = &cylinders[0];
    let sup_f = 1.0; // |cos| and |sin| are bounded by one
    let points = m.subsample(cloud.min(8), seed ^ 0x7265_73).points;
    for &lam in resolvent_lambdas {
        let rc = ResolventConfig::new(lam, McConfig::new(ctx.cfg.sim.n_paths, dt, seed));
        let mut worst_phi = 0.0f64;
        let mut worst_grad = 0.0f64;
        let mut max_se = 0.0f64;
        for x in &points {
            let (phi, se) = resolvent_eval(&lat, &params, &noise, f, x, &rc)?;
            worst_phi = worst_phi.max(phi.abs());
            max_se = max_se.max(se);
            let (g, gse) = resolvent_sqrtq_gradient(&lat, &params, &noise, f, x, &rc)?;
            worst_grad = worst_grad.max(g.norm_h());
            max_se = max_se.max(gse);
        }
        let sup_target = sup_f / lam * 1.05 + 3.0 * max_se;
        add(ctx, &mut rows, format!("resolvent sup lambda={lam}"), worst_phi, sup_target, max_se, worst_phi <= sup_target);
        let grad_target = (2.0 / lam).sqrt() * sup_f * 1.05 + 3.0 * max_se;
        add(ctx, &mut rows, format!("resolvent grad lambda={lam}"), worst_grad, grad_target, max_se, worst_grad <= grad_target);
    }

    // Truncation residual ladder: tighter truncation ⇒ smaller residuals.
    if !truncation_eps.is_empty() {
        let rc = ResolventConfig::new(lambda, McConfig::new(ctx.cfg.sim.n_paths, dt, seed));
        let levels = truncation_residuals(&m, &params, &noise, f, &rc, truncation_eps, cloud.min(8))?;
        let mut monotone = true;
        for w in levels.windows(2) {
            // Config lists ε from loosest to tightest.
            if w[1].b_resid > w[0].b_resid * (1.0 + 1e-9)
                || w[1].c_resid > w[0].c_resid * (1.0 + 1e-9)
            {
                monotone = false;
            }
        }
        for l in &levels {
            println!(
                "truncation eps={}: b {:.6e}, c {:.6e}, saturated {:.2}%",
                l.eps,
                l.b_resid,
                l.c_resid,
                100.0 * l.saturated_fraction
            );
        }
        let total: f64 = levels.iter().map(|l| l.b_resid + l.c_resid).sum();
        add(ctx, &mut rows, "truncation ladder monotone".into(), total, f64::NAN, 0.0, monotone);
    }

    let p = ctx.path("checks.csv");
    write_csv(&p, &rows)?;
    Ok(())
}

/// Bounded, nonnegative running cost 1 − cos((e, x)) built on a single
/// basis mode: sup 2, smooth, vanishing at the origin.
struct BumpCost {
    inner: TestFunctional<f64>,
}

impl Functional<f64> for BumpCost {
    fn eval(&self, x: &SpectralField<f64>) -> f64 {
        1.0 - self.inner.eval(x)
    }

    fn grad(&self, x: &SpectralField<f64>, out: &mut SpectralField<f64>) -> Result<()> {
        self.inner.grad(x, out)?;
        out.scale(-1.0);
        Ok(())
    }

    fn has_grad(&self) -> bool {
        true
    }

    fn sup_bound(&self) -> Option<f64> {
        Some(2.0)
    }

    fn lip_bound(&self) -> Option<f64> {
        self.inner.lip_bound()
    }
}

#[allow(clippy::too_many_arguments)]
fn run_hjb(
    ctx: &mut Ctx,
    lambda: f64,
    radius: f64,
    cloud: usize,
    tol: f64,
    max_iter: usize,
    cost_mode: [i32; 2],
    random_policies: usize,
    burn_in: Option<f64>,
    stride: Option<f64>,
) -> Result<()> {
    let (lat, params, noise) = ctx.build()?;
    let x0 = SpectralField::zero(&lat);
    let m = ctx.sample_measure(&lat, &params, &noise, &x0, burn_in, stride)?;
    let sample = m.subsample(cloud, ctx.cfg.sim.seed ^ 0x686a_62);
    println!("cloud: {} points from {} snapshots", sample.points.len(), m.len());

    let k = WaveIndex::new(cost_mode[0], cost_mode[1]).canonical();
    if !lat.contains(k) {
        return Err(ScbfError::InvalidParam(format!(
            "cost mode ({}, {}) is outside the lattice",
            cost_mode[0], cost_mode[1]
        )));
    }
    let e = SpectralField::basis_field(
        &lat,
        scbf_core::spectral::BasisIndex { k, phase: Phase::Cos },
    );
    let f = BumpCost { inner: TestFunctional::CylinderCos { h: e } };
    let h = Hamiltonian::truncated(radius);
    let mc = McConfig::new(ctx.cfg.sim.n_paths, ctx.cfg.sim.dt, ctx.cfg.sim.seed);
    let hjb_cfg = HjbConfig { resolvent: ResolventConfig::new(lambda, mc), tol, max_iter };

    let sol = match solve_hjb(&lat, &params, &noise, &f, &h, &sample.points, &hjb_cfg) {
        Ok(s) => s,
        Err(ScbfError::NoConvergence { iterations, history }) => {
            #[derive(serde::Serialize)]
            struct FailJson {
                lambda: f64,
                lip: f64,
                iterations: usize,
                residuals: Vec<f64>,
                converged: bool,
            }
            let p = ctx.path("hjb_report.json");
            write_json(
                &p,
                &FailJson { lambda, lip: radius, iterations, residuals: history.clone(), converged: false },
            )?;
            ctx.check(
                "hjb converged",
                false,
                format!("no fixed point in {iterations} iterations"),
            );
            return Ok(());
        }
        Err(e) => return Err(e),
    };
    ctx.check(
        "hjb converged",
        true,
        format!(
            "{} iterations, final residual {:.3e}",
            sol.iterations,
            sol.residuals.last().copied().unwrap_or(0.0)
        ),
    );

    // Tournament under common random numbers: the synthesized feedback
    // against no control and a few random constant policies.
    let fb = sol.feedback_policy(&h);
    let zero = ZeroPolicy;
    let mut constants = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.sim.seed ^ 0x706f_6c);
    for _ in 0..random_policies {
        let mut u = SpectralField::random(&lat, &mut rng, 1.0);
        let n = u.norm_h();
        if n > 0.0 {
            u.scale(radius / n);
        }
        constants.push(ConstantPolicy(u));
    }
    let mut entries: Vec<(&str, &dyn ControlPolicy<f64>)> =
        vec![("feedback", &fb), ("zero", &zero)];
    let names: Vec<String> = (0..constants.len()).map(|i| format!("const{i}")).collect();
    for (n, c) in names.iter().zip(&constants) {
        entries.push((n.as_str(), c));
    }
    let rc = ResolventConfig::new(lambda, mc);
    let costs = cost_tournament(&lat, &params, &noise, &f, &h, &entries, &x0, &rc)?;
    for c in &costs {
        println!("policy {:10} cost {:.6e} (se {:.2e})", c.name, c.cost, c.se);
    }
    let fb_cost = &costs[0];
    let mut beats_all = true;
    for c in costs.iter().skip(1) {
        if !(c.cost - fb_cost.cost >= 3.0 * (c.se + fb_cost.se)) {
            beats_all = false;
        }
    }
    ctx.check(
        "feedback beats alternatives",
        beats_all,
        format!("feedback {:.6e} vs best rival {:.6e}", fb_cost.cost, costs[1..].iter().map(|c| c.cost).fold(f64::INFINITY, f64::min)),
    );

    // Verification identity at the first cloud point.
    let probe = &sample.points[0];
    let ver = verification_residual(&lat, &params, &noise, &sol, &h, &fb, &f, probe, &rc)?;
    let combined = 3.0 * (ver.se + sol.phi_se);
    ctx.check(
        "verification identity",
        ver.residual <= combined,
        format!("residual {:.6e} vs 3se {:.6e}", ver.residual, combined),
    );

    #[derive(serde::Serialize)]
    struct HjbJson {
        lambda: f64,
        lip: f64,
        iterations: usize,
        residuals: Vec<f64>,
        converged: bool,
        grad_se: f64,
        phi_se: f64,
        phi_at_origin: f64,
        tournament: Vec<TournamentJson>,
        verification: VerificationJson,
    }
    #[derive(serde::Serialize)]
    struct TournamentJson {
        name: String,
        cost: f64,
        se: f64,
    }
    #[derive(serde::Serialize)]
    struct VerificationJson {
        phi_x0: f64,
        correction: f64,
        cost: f64,
        residual: f64,
        se: f64,
    }
    let report = HjbJson {
        lambda,
        lip: radius,
        iterations: sol.iterations,
        residuals: sol.residuals.clone(),
        converged: true,
        grad_se: sol.grad_se,
        phi_se: sol.phi_se,
        phi_at_origin: sol.phi_at(&x0),
        tournament: costs
            .iter()
            .map(|c| TournamentJson { name: c.name.clone(), cost: c.cost, se: c.se })
            .collect(),
        verification: VerificationJson {
            phi_x0: ver.phi_x0,
            correction: ver.correction,
            cost: ver.cost,
            residual: ver.residual,
            se: ver.se,
        },
    };
    let p = ctx.path("hjb_report.json");
    write_json(&p, &report)?;
    Ok(())
}

fn parse_phase(s: &str) -> Result<Phase> {
    match s {
        "cos" => Ok(Phase::Cos),
        "sin" => Ok(Phase::Sin),
        other => Err(ScbfError::InvalidParam(format!("phase must be cos|sin, got {other}"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_stop(
    ctx: &mut Ctx,
    modes: &[ModeSpec],
    grid_lo: &[f64],
    grid_hi: &[f64],
    grid_n: &[usize],
    kappa: f64,
    s0: f64,
    dt: Option<f64>,
    region_tol: f64,
    substeps: usize,
    compare_dp: bool,
) -> Result<()> {
    let (lat, params, noise) = ctx.build()?;
    let mut indices = Vec::with_capacity(modes.len());
    for spec in modes {
        let k = WaveIndex::new(spec.k1, spec.k2).canonical();
        let phase = parse_phase(&spec.phase)?;
        let j = (0..lat.basis_len())
            .find(|&j| {
                let b = lat.basis(j);
                b.k == k && b.phase == phase
            })
            .ok_or_else(|| {
                ScbfError::InvalidParam(format!(
                    "mode ({}, {}, {}) is outside the lattice",
                    spec.k1, spec.k2, spec.phase
                ))
            })?;
        indices.push(j);
    }
    let grid = if modes.len() == 1 {
        ModeGrid::line(grid_lo[0], grid_hi[0], grid_n[0])
    } else {
        ModeGrid::plane(
            [grid_lo[0], grid_lo[1]],
            [grid_hi[0], grid_hi[1]],
            [grid_n[0], grid_n[1]],
        )
    };
    let gen = ReducedGenerator::build(&lat, &params, &noise, &indices, grid.clone())?;
    if let Some(w) = &gen.peclet_warning {
        eprintln!("warning: {w}");
    }

    // Default problem data: enstrophy running cost against the saturating
    // obstacle gain.
    let f = TestFunctional::NormV2;
    let g = TestFunctional::SaturatedNorm { kappa, s0 };
    let prob = ObstacleProblem { f: &f, g: &g, horizon: ctx.cfg.sim.t, dt, phi0: None };
    let sol = solve_obstacle(&gen, &prob)?;
    println!(
        "obstacle problem: {} nodes, {} steps of dt = {:.4e}",
        grid.len(),
        sol.steps(),
        sol.dt
    );
    let regions = extract_regions(&sol, region_tol);
    let p = ctx.path("vi_grid.csv");
    write_csv(&p, &vi_grid_rows(&grid, &sol, &regions))?;
    let p = ctx.path("region_boundary.csv");
    write_csv(&p, &region_boundary_rows(&grid, &sol, &regions))?;

    // Exact structural invariants — cheap enough to assert on every run.
    let mut exact = true;
    for frame in &sol.phi {
        for (p, gv) in frame.iter().zip(&sol.g_vals) {
            if p > gv {
                exact = false;
            }
        }
    }
    for (zf, frame) in sol.zeta.iter().zip(sol.phi.iter().skip(1)) {
        for ((z, p), gv) in zf.iter().zip(frame).zip(&sol.g_vals) {
            if *z < 0.0 || z * (gv - p) != 0.0 {
                exact = false;
            }
        }
    }
    ctx.check("obstacle invariants", exact, "phi <= G, zeta >= 0, complementarity".into());

    // Stopped paths against the grid value at the box center.
    let y0 = [0.5 * (grid.lo[0] + grid.hi[0]), 0.5 * (grid.lo[1] + grid.hi[1])];
    let rep = stopped_cost_mc(
        &gen,
        &sol,
        region_tol,
        y0,
        ctx.cfg.sim.n_paths,
        substeps,
        ctx.cfg.sim.seed ^ 0x7374_6f,
    )?;
    println!(
        "stopped cost {:.6e} (se {:.2e}), grid value {:.6e}, mean tau {:.4}",
        rep.value, rep.se, rep.grid_value, rep.mean_tau
    );
    ctx.check(
        "stopped cost matches grid value",
        (rep.value - rep.grid_value).abs() <= 3.0 * rep.se,
        format!("gap {:.6e} vs 3se {:.6e}", (rep.value - rep.grid_value).abs(), 3.0 * rep.se),
    );

    // Supermartingale probe of the obstacle along the full dynamics —
    // reported, not asserted: the admissible (mu, kappa) regime is located
    // empirically.
    let times = [0.25 * ctx.cfg.sim.t, 0.5 * ctx.cfg.sim.t];
    let mut xs = Vec::new();
    for frac in [0.25, 0.5, 0.75] {
        let mut y = [0.0; 2];
        for d in 0..grid.dims {
            y[d] = grid.lo[d] + frac * (grid.hi[d] - grid.lo[d]);
        }
        xs.push(gen.embed(y)?);
    }
    let smg = check_supermartingale_g(
        &lat,
        &params,
        &noise,
        &g,
        &times,
        &xs,
        &McConfig::new(ctx.cfg.sim.n_paths.min(64), ctx.cfg.sim.dt, ctx.cfg.sim.seed ^ 0x736d_67),
    )?;
    println!(
        "supermartingale probe: {} violations across {} entries",
        smg.violations,
        smg.entries.len()
    );
    let p = ctx.path("supermartingale.json");
    write_json(&p, &smg)?;

    #[derive(serde::Serialize)]
    struct StopJson {
        nodes: usize,
        steps: usize,
        dt: f64,
        peclet: f64,
        peclet_warning: Option<String>,
        stopped_cost: f64,
        stopped_cost_se: f64,
        grid_value: f64,
        mean_tau: f64,
        dp_sup_gap: Option<f64>,
    }
    let mut dp_sup_gap = None;
    if compare_dp {
        if grid.dims != 1 {
            return Err(ScbfError::InvalidParam("compare_dp supports 1D grids only".into()));
        }
        let f_vals = gen.tabulate(&f)?;
        let g_vals = gen.tabulate(&g)?;
        let tables: Vec<f64> = gen.drift.iter().map(|b| b[0]).collect();
        let gref = &grid;
        let drift = move |y: [f64; 2], _: usize| gref.interp(&tables, y);
        let v = dp_oracle(
            &grid,
            &drift,
            gen.mu,
            &f_vals,
            &g_vals,
            ctx.cfg.sim.t,
            &DpConfig { n_steps: sol.steps(), gh_points: 20 },
        )?;
        let vi = sol.final_phi();
        let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
        let gap = vi
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let rel = gap / scale;
        dp_sup_gap = Some(rel);
        ctx.check(
            "vi matches dp oracle",
            rel <= 0.05,
            format!("relative sup gap {rel:.4}"),
        );
    }
    let report = StopJson {
        nodes: grid.len(),
        steps: sol.steps(),
        dt: sol.dt,
        peclet: gen.peclet,
        peclet_warning: gen.peclet_warning.clone(),
        stopped_cost: rep.value,
        stopped_cost_se: rep.se,
        grid_value: rep.grid_value,
        mean_tau: rep.mean_tau,
        dp_sup_gap,
    };
    let p = ctx.path("stop_report.json");
    write_json(&p, &report)?;
    Ok(())
}
