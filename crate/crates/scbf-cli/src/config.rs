//! Run configuration: a single JSON document describing the model, the
//! noise, the time stepping, and one experiment. Every run re-serializes
//! the fully resolved config beside its outputs so any artifact can be
//! reproduced from (config, seed, version) alone.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use scbf_core::error::{Result, ScbfError};
use scbf_core::operators::{ModelParams, NoiseSpec};
use scbf_core::spectral::{Lattice, SpectralField};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub lattice: LatticeConfig,
    pub model: ModelConfig,
    pub noise: NoiseConfig,
    pub sim: SimSection,
    pub experiment: ExperimentConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub cutoff: usize,
    #[serde(default = "default_period")]
    pub period: f64,
}

fn default_period() -> f64 {
    std::f64::consts::TAU
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub r: u32,
    #[serde(default = "default_true")]
    pub convection: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseConfig {
    /// μ_j = amplitude · λ_j^{−decay} on the lowest `cutoff` pair shells.
    PowerLaw { decay: f64, amplitude: f64, cutoff: usize },
    /// Explicit per-basis-element eigenvalues (length must match).
    Eigenvalues { values: Vec<f64> },
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    /// Horizon (uppercase in the schema by convention).
    #[serde(rename = "T")]
    pub t: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
}

/// Initial condition specification.
#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum X0Config {
    Zero,
    /// Random field with the given spectral decay, rescaled to `norm_h`.
    Random { seed: u64, decay: f64, norm_h: f64 },
    /// A field saved by a previous run.
    File { path: PathBuf },
}

impl Default for X0Config {
    fn default() -> Self {
        X0Config::Zero
    }
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExperimentConfig {
    /// Evaluate the parameter predicates; optionally fail the run when a
    /// required condition does not hold.
    Check {
        #[serde(default)]
        require_419: bool,
        #[serde(default)]
        require_439: bool,
        #[serde(default = "default_delta")]
        delta: f64,
        #[serde(default)]
        gamma1: Option<f64>,
    },
    /// One recorded trajectory plus diagnostics.
    Simulate {
        #[serde(default)]
        x0: X0Config,
        /// Record every k-th step (0 ⇒ endpoints only).
        #[serde(default)]
        record_every: usize,
    },
    /// Invariant-measure sampling, moment checks, and (with two or more
    /// starts) the two-start ergodicity gap.
    Invariant {
        #[serde(default = "default_starts")]
        x0: Vec<X0Config>,
        #[serde(default)]
        burn_in: Option<f64>,
        #[serde(default)]
        stride: Option<f64>,
    },
    /// Generator identities on the sampled measure: invariance residuals,
    /// carré du champ, dissipativity, resolvent bounds, truncation ladder.
    Kolmogorov {
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default = "default_n_cylinders")]
        n_cylinders: usize,
        #[serde(default = "default_resolvent_lambdas")]
        resolvent_lambdas: Vec<f64>,
        #[serde(default = "default_truncation_eps")]
        truncation_eps: Vec<f64>,
        #[serde(default = "default_cloud")]
        cloud: usize,
        #[serde(default)]
        burn_in: Option<f64>,
        #[serde(default)]
        stride: Option<f64>,
    },
    /// Discounted-control fixed point, feedback synthesis, tournament,
    /// verification identity.
    Hjb {
        lambda: f64,
        /// Hamiltonian truncation radius = its Lipschitz constant.
        radius: f64,
        #[serde(default = "default_cloud")]
        cloud: usize,
        #[serde(default = "default_tol")]
        tol: f64,
        #[serde(default = "default_max_iter")]
        max_iter: usize,
        /// Wave index of the bounded cylinder cost 1 − cos((e, x)).
        #[serde(default = "default_cost_mode")]
        cost_mode: [i32; 2],
        #[serde(default = "default_n_random")]
        random_policies: usize,
        #[serde(default)]
        burn_in: Option<f64>,
        #[serde(default)]
        stride: Option<f64>,
    },
    /// Obstacle problem on a 1–2 mode reduction with stopped-cost and
    /// supermartingale diagnostics.
    Stop {
        /// Retained modes as (k1, k2, phase) with phase "cos" | "sin".
        modes: Vec<ModeSpec>,
        grid_lo: Vec<f64>,
        grid_hi: Vec<f64>,
        grid_n: Vec<usize>,
        /// Obstacle gain G(x) = k(‖x‖²)‖x‖², k(s) = κs₀(1 − e^{−s/s₀}).
        kappa: f64,
        s0: f64,
        #[serde(default)]
        dt: Option<f64>,
        #[serde(default = "default_region_tol")]
        region_tol: f64,
        #[serde(default = "default_substeps")]
        substeps: usize,
        /// Also run the dynamic-programming oracle and report the gap
        /// (1D only; quadratic in grid size).
        #[serde(default)]
        compare_dp: bool,
    },
}

fn default_delta() -> f64 {
    0.25
}
fn default_starts() -> Vec<X0Config> {
    vec![X0Config::Zero]
}
fn default_lambda() -> f64 {
    4.0
}
fn default_n_cylinders() -> usize {
    10
}
fn default_resolvent_lambdas() -> Vec<f64> {
    vec![1.0, 4.0, 16.0]
}
fn default_truncation_eps() -> Vec<f64> {
    vec![0.5, 0.25, 0.125]
}
fn default_cloud() -> usize {
    32
}
fn default_tol() -> f64 {
    1e-3
}
fn default_max_iter() -> usize {
    30
}
fn default_cost_mode() -> [i32; 2] {
    [1, 0]
}
fn default_n_random() -> usize {
    3
}
fn default_region_tol() -> f64 {
    1e-9
}
fn default_substeps() -> usize {
    4
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    pub k1: i32,
    pub k2: i32,
    pub phase: String,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ScbfError::InvalidParam(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.lattice.cutoff == 0 {
            return Err(ScbfError::InvalidParam("lattice cutoff must be >= 1".into()));
        }
        if !(self.lattice.period > 0.0) {
            return Err(ScbfError::InvalidParam("period must be positive".into()));
        }
        self.model_params().validate()?;
        if !(self.sim.dt > 0.0) || self.sim.t < 0.0 {
            return Err(ScbfError::InvalidParam("sim needs dt > 0 and T >= 0".into()));
        }
        if self.sim.n_paths == 0 {
            return Err(ScbfError::InvalidParam("n_paths must be positive".into()));
        }
        if let ExperimentConfig::Stop { modes, grid_lo, grid_hi, grid_n, .. } =
            &self.experiment
        {
            let d = modes.len();
            if d == 0 || d > 2 {
                return Err(ScbfError::InvalidParam("stop keeps 1 or 2 modes".into()));
            }
            if grid_lo.len() != d || grid_hi.len() != d || grid_n.len() != d {
                return Err(ScbfError::InvalidParam(
                    "grid_lo/grid_hi/grid_n must match the mode count".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn model_params(&self) -> ModelParams<f64> {
        ModelParams {
            mu: self.model.mu,
            alpha: self.model.alpha,
            beta: self.model.beta,
            r: self.model.r,
            convection: self.model.convection,
        }
    }

    pub fn build_lattice(&self) -> Arc<Lattice<f64>> {
        Lattice::new(self.lattice.cutoff, self.lattice.period)
    }

    pub fn build_noise(&self, lat: &Arc<Lattice<f64>>) -> Result<NoiseSpec<f64>> {
        match &self.noise {
            NoiseConfig::PowerLaw { decay, amplitude, cutoff } => {
                Ok(NoiseSpec::power_law(lat, *decay, *amplitude, *cutoff))
            }
            NoiseConfig::Eigenvalues { values } => {
                NoiseSpec::from_eigenvalues(lat, values.clone())
            }
        }
    }

    pub fn build_x0(&self, lat: &Arc<Lattice<f64>>, spec: &X0Config) -> Result<SpectralField<f64>> {
        match spec {
            X0Config::Zero => Ok(SpectralField::zero(lat)),
            X0Config::Random { seed, decay, norm_h } => {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
                let mut x = SpectralField::random(lat, &mut rng, *decay);
                let n = x.norm_h();
                if n > 0.0 {
                    x.scale(norm_h / n);
                }
                Ok(x)
            }
            X0Config::File { path } => {
                let x: SpectralField<f64> = scbf_core::io::load_field(path)?;
                if !lat.same_geometry(x.lattice()) {
                    return Err(ScbfError::InvalidParam(format!(
                        "field in {} does not match the configured lattice",
                        path.display()
                    )));
                }
                Ok(x)
            }
        }
    }

    /// Canonical serialized form (resolved defaults included).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Stable FNV-1a hash of the canonical form, hex-encoded.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.canonical_json().as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

/// Written beside every run's artifacts.
#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub wall_time_s: f64,
    pub artifacts: Vec<String>,
    pub checks: Vec<CheckSummary>,
    pub failed: Option<String>,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct CheckSummary {
    pub name: String,
    pub pass: bool,
}
