use std::path::{Path, PathBuf};

use morrey_lab::fields::VectorFieldSpec;
use morrey_lab::lattice::{LatticeGrid, SampleMode};
use morrey_lab::morrey::CylinderSampling;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// One run, selected by `command`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum ExperimentConfig {
    Classify(ClassifyConfig),
    Solve(SolveConfig),
    Propagate(PropagateConfig),
    Simulate(SimulateConfig),
    Verify(VerifyConfig),
    Report(ReportConfig),
}

impl ExperimentConfig {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Classify(_) => "classify",
            Self::Solve(_) => "solve",
            Self::Propagate(_) => "propagate",
            Self::Simulate(_) => "simulate",
            Self::Verify(_) => "verify",
            Self::Report(_) => "report",
        }
    }

    pub fn output(&self) -> &Path {
        match self {
            Self::Classify(c) => &c.output,
            Self::Solve(c) => &c.output,
            Self::Propagate(c) => &c.output,
            Self::Simulate(c) => &c.output,
            Self::Verify(c) => &c.output,
            Self::Report(c) => &c.run_dir,
        }
    }

    pub fn set_output(&mut self, dir: PathBuf) {
        match self {
            Self::Classify(c) => c.output = dir,
            Self::Solve(c) => c.output = dir,
            Self::Propagate(c) => c.output = dir,
            Self::Simulate(c) => c.output = dir,
            Self::Verify(c) => c.output = dir,
            Self::Report(c) => c.run_dir = dir,
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        match self {
            Self::Classify(c) => vec![c.sampling.seed],
            Self::Solve(c) => vec![c.seed],
            Self::Propagate(c) => vec![c.seed],
            Self::Simulate(c) => vec![c.seed],
            Self::Verify(_) | Self::Report(_) => Vec::new(),
        }
    }

    /// Resolves lattice-file fields against the config's directory and checks ranges.
    pub fn prepare(&mut self, base: &Path) -> Result<(), CliError> {
        let field = match self {
            Self::Classify(c) => Some(&mut c.field),
            Self::Solve(c) => Some(&mut c.field),
            Self::Propagate(c) => Some(&mut c.field),
            Self::Simulate(c) => Some(&mut c.field),
            Self::Verify(_) | Self::Report(_) => None,
        };
        if let Some(f) = field {
            f.resolve(base)?;
            f.validate()?;
        }
        match self {
            Self::Classify(c) => {
                if c.q.is_empty() {
                    return Err(CliError::Schema("classify needs at least one q".into()));
                }
            }
            Self::Solve(c) => {
                c.grid.validate()?;
                if c.lambda.is_empty() {
                    return Err(CliError::Schema("solve needs at least one lambda".into()));
                }
            }
            Self::Propagate(c) => c.grid.validate()?,
            Self::Simulate(c) => {
                if c.x0.len() != c.field.dim() {
                    return Err(CliError::Schema("x0 and field dimensions differ".into()));
                }
            }
            Self::Verify(_) | Self::Report(_) => {}
        }
        Ok(())
    }
}

fn default_p() -> f64 {
    2.0
}

fn default_max_terms() -> usize {
    60
}

fn default_tol() -> f64 {
    1e-10
}

fn default_probes() -> usize {
    64
}

fn default_sample_mode() -> SampleMode {
    SampleMode::CellAverage { order: 4 }
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

/// Scalar data `A · t^k · exp(−|x − c|²/(2w²))`, or a constant.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarSpec {
    Gaussian {
        amplitude: f64,
        width: f64,
        #[serde(default)]
        center: Option<Vec<f64>>,
        #[serde(default)]
        time_power: i32,
    },
    Constant {
        value: f64,
    },
}

impl ScalarSpec {
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            Self::Constant { value } => *value,
            Self::Gaussian { amplitude, width, center, time_power } => {
                let r2: f64 = match center {
                    Some(c) => x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum(),
                    None => x.iter().map(|a| a * a).sum(),
                };
                amplitude * t.powi(*time_power) * (-r2 / (2.0 * width * width)).exp()
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSpec {
    pub r_min: f64,
    pub levels: usize,
    /// Anchors on `{−k..k}^d · step` at time `anchor_time`.
    #[serde(default)]
    pub anchor_extent: usize,
    #[serde(default)]
    pub anchor_step: f64,
    #[serde(default)]
    pub anchor_time: f64,
    #[serde(default)]
    pub nodes: Option<usize>,
    #[serde(default)]
    pub directions: Option<usize>,
    #[serde(default)]
    pub replicas: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl SamplingSpec {
    pub fn build(&self, dim: usize) -> CylinderSampling {
        let anchors = CylinderSampling::cube_anchors(dim, self.anchor_time, self.anchor_extent, self.anchor_step);
        let base = CylinderSampling::new(self.r_min, self.levels, anchors);
        CylinderSampling {
            nodes: self.nodes.unwrap_or(base.nodes),
            directions: self.directions.unwrap_or(base.directions),
            replicas: self.replicas.unwrap_or(base.replicas),
            seed: self.seed,
            ..base
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpsSpec {
    pub p: f64,
    pub l: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    pub field: VectorFieldSpec,
    pub q: Vec<f64>,
    pub sampling: SamplingSpec,
    #[serde(default)]
    pub elliptic: bool,
    #[serde(default)]
    pub lps: Option<LpsSpec>,
    pub output: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    pub field: VectorFieldSpec,
    pub grid: LatticeGrid,
    #[serde(default = "default_sample_mode")]
    pub sample_mode: SampleMode,
    pub source: ScalarSpec,
    #[serde(default = "default_p")]
    pub p: f64,
    /// Gate sweep; the solve runs at the last value.
    pub lambda: Vec<f64>,
    /// Regularization level `n` applied before sampling.
    #[serde(default)]
    pub level: Option<f64>,
    /// Regularization levels for the approximation table.
    #[serde(default)]
    pub levels: Vec<f64>,
    #[serde(default = "default_max_terms")]
    pub max_terms: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub force: bool,
    pub output: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagateConfig {
    pub field: VectorFieldSpec,
    pub grid: LatticeGrid,
    #[serde(default = "default_sample_mode")]
    pub sample_mode: SampleMode,
    /// Spatial data; a `time_power` is ignored.
    pub initial: ScalarSpec,
    #[serde(default)]
    pub r: f64,
    #[serde(default)]
    pub source: Option<ScalarSpec>,
    #[serde(default = "default_p")]
    pub p: f64,
    pub lambda: f64,
    #[serde(default = "default_true")]
    pub rescale_to_zero_lambda: bool,
    #[serde(default)]
    pub level: Option<f64>,
    #[serde(default)]
    pub levels: Vec<f64>,
    #[serde(default = "default_max_terms")]
    pub max_terms: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub force: bool,
    pub output: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KrylovSpec {
    pub level: f64,
    pub windows: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub field: VectorFieldSpec,
    pub x0: Vec<f64>,
    pub t_end: f64,
    pub dt: f64,
    pub paths: usize,
    #[serde(default)]
    pub seed: u64,
    /// Drift level `n`.
    pub level: f64,
    #[serde(default = "default_one")]
    pub noise_substeps: usize,
    #[serde(default)]
    pub krylov: Option<KrylovSpec>,
    /// Checkpoints for the martingale residuals of the stock test functions.
    #[serde(default)]
    pub martingale_checkpoints: Vec<f64>,
    #[serde(default)]
    pub tail_radii: Vec<f64>,
    /// Exponent for the box-dictionary Krylov ratio.
    #[serde(default)]
    pub nu: Option<f64>,
    pub output: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Kernels,
    Morrey,
    Solver,
    Sde,
    All,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub suite: Suite,
    pub output: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub run_dir: PathBuf,
}
