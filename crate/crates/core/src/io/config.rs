//! TOML run configuration.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cost::CostSpec;
use crate::digest::{self, Digest};
use crate::error::{Error, Result};
use crate::evaluation::ALLOWANCE_COEFFICIENT;
use crate::hjb::SolverGrids;
use crate::lifted::{Model, ModelParams};
use crate::linalg;
use crate::path::ControlPath;
use crate::simulator::{InitialState, SimConfig};

/// Delay density `b1` on `[-d, 0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Zero,
    Constant {
        matrix: Vec<Vec<f64>>,
    },
    /// `matrix·e^{rate·ξ}`
    Exponential {
        matrix: Vec<Vec<f64>>,
        rate: f64,
    },
    /// One row-major `n·m` row per delay node.
    Samples {
        values: Vec<Vec<f64>>,
    },
    /// Dirac delays; accepted by the parser only to be refused with a clear message.
    Pointwise {
        #[serde(default)]
        lag: Option<f64>,
        #[serde(default)]
        matrix: Option<Vec<Vec<f64>>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub a0: Vec<Vec<f64>>,
    pub b0: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub b1: KernelSpec,
    pub delay: f64,
    pub horizon: f64,
    pub delay_grid_points: usize,
}

/// Control history on `[t0 - d, t0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HistorySpec {
    Constant { value: Vec<f64> },
    /// Oldest first, each held for `step`.
    Samples { step: f64, values: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationBlock {
    /// Defaults to the delay grid step.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub t0: f64,
    /// Defaults to the origin.
    #[serde(default)]
    pub y0: Option<Vec<f64>>,
    /// Defaults to the zero history.
    #[serde(default)]
    pub u0: Option<HistorySpec>,
}

fn default_paths() -> usize {
    10_000
}

impl Default for SimulationBlock {
    fn default() -> Self {
        Self {
            dt: None,
            n_paths: default_paths(),
            seed: 0,
            t0: 0.0,
            y0: None,
            u0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationBlock {
    #[serde(default = "default_allowance")]
    pub allowance_coefficient: f64,
    #[serde(default = "default_probe_seed")]
    pub probe_seed: u64,
    #[serde(default = "default_constants")]
    pub constants_per_axis: usize,
    #[serde(default = "default_five")]
    pub bang_bang: usize,
    #[serde(default = "default_bang_cells")]
    pub bang_bang_cells: usize,
    #[serde(default = "default_five")]
    pub random_piecewise: usize,
    #[serde(default = "default_piecewise_cells")]
    pub piecewise_cells: usize,
}

fn default_allowance() -> f64 {
    ALLOWANCE_COEFFICIENT
}
fn default_probe_seed() -> u64 {
    1
}
fn default_constants() -> usize {
    7
}
fn default_five() -> usize {
    5
}
fn default_bang_cells() -> usize {
    20
}
fn default_piecewise_cells() -> usize {
    10
}

impl Default for VerificationBlock {
    fn default() -> Self {
        Self {
            allowance_coefficient: default_allowance(),
            probe_seed: default_probe_seed(),
            constants_per_axis: default_constants(),
            bang_bang: default_five(),
            bang_bang_cells: default_bang_cells(),
            random_piecewise: default_five(),
            piecewise_cells: default_piecewise_cells(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleBlock {
    #[serde(default = "default_riccati_steps")]
    pub riccati_steps: usize,
    /// Heads at which the two values are compared; defaults to `-e1, 0, e1`.
    #[serde(default)]
    pub points: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_riccati_steps() -> usize {
    4000
}
fn default_tolerance() -> f64 {
    0.02
}

impl Default for OracleBlock {
    fn default() -> Self {
        Self {
            riccati_steps: default_riccati_steps(),
            points: None,
            tolerance: default_tolerance(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_dir")]
    pub dir: String,
}

fn default_dir() -> String {
    "out".into()
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { dir: default_dir() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelBlock,
    pub cost: CostSpec,
    pub grids: SolverGrids,
    #[serde(default)]
    pub simulation: SimulationBlock,
    #[serde(default)]
    pub verification: VerificationBlock,
    #[serde(default)]
    pub oracle: OracleBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

fn matrix(rows: &[Vec<f64>], key: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 {
        return Err(Error::config(key, "matrix must be non-empty"));
    }
    linalg::matrix_from_rows(rows, r, c).ok_or_else(|| Error::config(key, "rows have unequal lengths"))
}

impl RunConfig {
    /// Parses and validates; syntax errors carry line and column.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.build_model()?;
        self.cost.validate(model.n(), model.m())?;
        self.grids
            .quadrature
            .validate()
            .map_err(|e| Error::config("grids.quadrature", e.to_string()))?;
        if self.grids.tau_levels < 1 {
            return Err(Error::config("grids.tau_levels", "need at least one level"));
        }
        self.grids.resolve_grid(&model)?;
        let sim = &self.simulation;
        if sim.n_paths == 0 {
            return Err(Error::config("simulation.n_paths", "must be positive"));
        }
        if let Some(dt) = sim.dt {
            if !(dt > 0.0) {
                return Err(Error::config("simulation.dt", "must be positive"));
            }
        }
        if sim.y0.as_ref().is_some_and(|y| y.len() != model.n()) {
            return Err(Error::config("simulation.y0", format!("expected {} entries", model.n())));
        }
        self.initial_state(&model)?;
        if !(self.verification.allowance_coefficient >= 0.0) {
            return Err(Error::config("verification.allowance_coefficient", "must be non-negative"));
        }
        Ok(())
    }

    pub fn model_params(&self) -> Result<ModelParams> {
        let mb = &self.model;
        let a0 = matrix(&mb.a0, "model.a0")?;
        let b0 = matrix(&mb.b0, "model.b0")?;
        let sigma = matrix(&mb.sigma, "model.sigma")?;
        let (n, m) = (a0.nrows(), b0.ncols());
        if mb.delay_grid_points < 2 {
            return Err(Error::config("model.delay_grid_points", "need at least 2 nodes"));
        }
        let points = mb.delay_grid_points;
        let from_fn = |f: &dyn Fn(f64) -> DMatrix<f64>| {
            ModelParams::from_matrices(a0.clone(), b0.clone(), sigma.clone(), f, mb.delay, mb.horizon, points)
        };
        let params = match &mb.b1 {
            KernelSpec::Zero => from_fn(&|_| DMatrix::zeros(n, m)),
            KernelSpec::Constant { matrix: rows } => {
                let b = matrix(rows, "model.b1.matrix")?;
                from_fn(&|_| b.clone())
            }
            KernelSpec::Exponential { matrix: rows, rate } => {
                let b = matrix(rows, "model.b1.matrix")?;
                let rate = *rate;
                from_fn(&|s| &b * (rate * s).exp())
            }
            KernelSpec::Samples { values } => {
                if values.len() != points {
                    return Err(Error::config(
                        "model.b1.values",
                        format!("expected {points} rows, one per delay node"),
                    ));
                }
                let mut p = from_fn(&|_| DMatrix::zeros(n, m));
                p.b1_samples = values.clone();
                p
            }
            KernelSpec::Pointwise { .. } => {
                return Err(Error::config(
                    "model.b1",
                    "pointwise delays are not supported; give a distributed density (zero, constant, exponential or samples)",
                ))
            }
        };
        Ok(params)
    }

    pub fn build_model(&self) -> Result<Model> {
        Model::new(self.model_params()?).map_err(|e| match e {
            Error::InvalidModel(reason) | Error::InvalidArgument(reason) => Error::config("model", reason),
            Error::DimensionMismatch { what, expected, got } => {
                Error::config("model", format!("{what}: expected {expected}, got {got}"))
            }
            other => other,
        })
    }

    /// Hash of the model, cost and solver grids; embedded in every output.
    pub fn setup_hash(&self) -> Result<Digest> {
        Ok(digest::hash_json(&serde_json::json!({
            "model": self.model_params()?,
            "cost": self.cost,
            "grids": self.grids,
        })))
    }

    pub fn sim_config(&self, model: &Model) -> SimConfig {
        let s = &self.simulation;
        SimConfig {
            t0: s.t0,
            dt: s.dt.unwrap_or(model.grid_step()),
            n_paths: s.n_paths,
            seed: s.seed,
            noise_substeps: 1,
            record_paths: true,
        }
    }

    pub fn initial_state(&self, model: &Model) -> Result<InitialState> {
        let s = &self.simulation;
        let y0 = s.y0.clone().unwrap_or_else(|| vec![0.0; model.n()]);
        let u0 = match &s.u0 {
            None => ControlPath::constant(s.t0 - model.delay(), s.t0, model.grid_step(), &vec![0.0; model.m()])?,
            Some(HistorySpec::Constant { value }) => {
                if value.len() != model.m() {
                    return Err(Error::config("simulation.u0.value", format!("expected {} entries", model.m())));
                }
                ControlPath::constant(s.t0 - model.delay(), s.t0, model.grid_step(), value)?
            }
            Some(HistorySpec::Samples { step, values }) => {
                if values.iter().any(|v| v.len() != model.m()) {
                    return Err(Error::config("simulation.u0.values", format!("every sample needs {} entries", model.m())));
                }
                let start = s.t0 - values.len() as f64 * step;
                let path = ControlPath::from_samples(start, *step, values)
                    .map_err(|e| Error::config("simulation.u0", e.to_string()))?;
                path.require_window(s.t0 - model.delay(), s.t0)
                    .map_err(|_| Error::config("simulation.u0.values", "history must cover one full delay"))?;
                path
            }
        };
        Ok(InitialState { y0, u0 })
    }

    /// Comparison heads for the oracle: configured points or `-e1, 0, e1`.
    pub fn oracle_points(&self, n: usize) -> Vec<Vec<f64>> {
        self.oracle.points.clone().unwrap_or_else(|| {
            [-1.0, 0.0, 1.0]
                .iter()
                .map(|&v| {
                    let mut y = vec![0.0; n];
                    y[0] = v;
                    y
                })
                .collect()
        })
    }
}
