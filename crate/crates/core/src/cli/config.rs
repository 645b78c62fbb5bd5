//! JSON run configuration.
//!
//! Matrices are row-major nested arrays. Omitted reset fields default to the
//! identity map (`J = I`, `R = 0`, `Q = D = E = 0`); `initial_state` defaults to
//! zeros. Unknown keys are rejected.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::{
    LinearDynamics, MemorylessResetFamily, RenewalLaw, ResetMap, TimerResetFamily, TimingLaw,
    TtshsModel, ValidationReport,
};
use crate::phase_type::{ErlangBranch, PhaseTypeMixture};
use crate::simulator::{BurstSize, ResetSampler, SamplerSet};

#[derive(Debug)]
pub enum ConfigError {
    Io(String),
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    Schema(String),
    Validation(ValidationReport),
}

impl ConfigError {
    pub fn code(&self) -> &'static str {
        match self {
            ConfigError::Io(_) => "IO_ERROR",
            ConfigError::Parse { .. } => "PARSE_ERROR",
            ConfigError::Schema(_) => "SCHEMA_ERROR",
            ConfigError::Validation(_) => "VALIDATION_ERROR",
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(m) => write!(f, "IO_ERROR: {m}"),
            ConfigError::Parse {
                line,
                column,
                message,
            } => write!(f, "PARSE_ERROR at line {line}, column {column}: {message}"),
            ConfigError::Schema(m) => write!(f, "SCHEMA_ERROR: {m}"),
            ConfigError::Validation(r) => write!(f, "VALIDATION_ERROR: {r}"),
        }
    }
}

impl std::error::Error for ConfigError {}

type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dynamics: DynamicsConfig,
    pub timer_reset: TimerResetConfig,
    #[serde(default)]
    pub memoryless_resets: Vec<MemorylessResetConfig>,
    #[serde(default)]
    pub initial_state: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub drift_offset: Vec<f64>,
    pub drift_matrix: Matrix,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResetConfig {
    #[serde(default)]
    pub mean_gain: Option<Matrix>,
    #[serde(default)]
    pub mean_offset: Option<Vec<f64>>,
    #[serde(default)]
    pub cov_quadratic: Option<Matrix>,
    #[serde(default)]
    pub cov_linear: Option<Matrix>,
    #[serde(default)]
    pub cov_constant: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimerResetConfig {
    #[serde(flatten)]
    pub reset: ResetConfig,
    pub timing: TimingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemorylessResetConfig {
    pub rate: f64,
    #[serde(flatten)]
    pub reset: ResetConfig,
    /// Simulate as an additive scalar burst with this size law.
    #[serde(default)]
    pub burst: Option<BurstSize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimingConfig {
    PhaseType { branches: Vec<ErlangBranch> },
    Deterministic { mean: f64 },
    Gamma { mean: f64, cv2: f64 },
    Lognormal { mean: f64, cv2: f64 },
}

impl TimingConfig {
    pub fn to_timing(&self) -> TimingLaw {
        match self {
            TimingConfig::PhaseType { branches } => TimingLaw::PhaseType(PhaseTypeMixture {
                branches: branches.clone(),
            }),
            TimingConfig::Deterministic { mean } => {
                TimingLaw::Renewal(RenewalLaw::Deterministic { mean: *mean })
            }
            TimingConfig::Gamma { mean, cv2 } => TimingLaw::Renewal(RenewalLaw::Gamma {
                mean: *mean,
                cv2: *cv2,
            }),
            TimingConfig::Lognormal { mean, cv2 } => TimingLaw::Renewal(RenewalLaw::Lognormal {
                mean: *mean,
                cv2: *cv2,
            }),
        }
    }

    pub fn from_mixture(mix: &PhaseTypeMixture) -> Self {
        TimingConfig::PhaseType {
            branches: mix.branches.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Gaussian,
    Deterministic,
    Binomial,
}

impl SamplerKind {
    pub fn to_sampler(self) -> ResetSampler {
        match self {
            SamplerKind::Gaussian => ResetSampler::Gaussian,
            SamplerKind::Deterministic => ResetSampler::Deterministic,
            SamplerKind::Binomial => ResetSampler::ScaledBinomial,
        }
    }
}

/// Command parameters. Every field has a default; command-line flags override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub t_end: f64,
    pub grid_points: usize,
    pub paths: usize,
    pub seed: u64,
    pub format: OutputFormat,
    pub sampler: SamplerKind,
    pub out: Option<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            t_end: 10.0,
            grid_points: 101,
            paths: 10_000,
            seed: 0,
            format: OutputFormat::Csv,
            sampler: SamplerKind::Gaussian,
            out: None,
        }
    }
}

impl RunSection {
    /// `grid_points` equally spaced times on `[0, t_end]`.
    pub fn grid(&self) -> Vec<f64> {
        let g = self.grid_points.max(1);
        if g == 1 {
            return vec![self.t_end];
        }
        (0..g)
            .map(|i| self.t_end * i as f64 / (g - 1) as f64)
            .collect()
    }
}

/// Reads, parses, shape-checks and validates a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
        use serde_json::error::Category;
        match e.classify() {
            Category::Data => ConfigError::Schema(e.to_string()),
            _ => ConfigError::Parse {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            },
        }
    })?;
    cfg.apply_defaults()?;
    let model = cfg.to_model()?;
    let report = model.validate(false);
    if !report.is_valid() {
        return Err(ConfigError::Validation(report));
    }
    Ok(cfg)
}

fn check_vector(name: &str, v: &[f64], n: usize) -> Result<(), ConfigError> {
    if v.len() != n {
        return Err(ConfigError::Schema(format!(
            "{name}: expected a vector of length {n}, got length {}",
            v.len()
        )));
    }
    Ok(())
}

fn check_matrix(name: &str, m: &Matrix, n: usize) -> Result<(), ConfigError> {
    let cols = m.first().map_or(0, |r| r.len());
    if m.len() != n || m.iter().any(|r| r.len() != n) {
        let ragged = m.iter().any(|r| r.len() != cols);
        let shape = if ragged {
            "a ragged array".to_string()
        } else {
            format!("{}x{cols}", m.len())
        };
        return Err(ConfigError::Schema(format!(
            "{name}: expected a {n}x{n} matrix, got {shape}"
        )));
    }
    Ok(())
}

fn identity(n: usize) -> Matrix {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn zeros(n: usize) -> Matrix {
    vec![vec![0.0; n]; n]
}

fn to_matrix(m: &Matrix) -> DMatrix<f64> {
    let n = m.len();
    let c = m.first().map_or(0, |r| r.len());
    DMatrix::from_fn(n, c, |i, j| m[i][j])
}

impl ResetConfig {
    fn fill(&mut self, n: usize, owner: &str) -> Result<(), ConfigError> {
        let gain = self.mean_gain.get_or_insert_with(|| identity(n));
        check_matrix(&format!("{owner}.mean_gain"), gain, n)?;
        let offset = self.mean_offset.get_or_insert_with(|| vec![0.0; n]);
        check_vector(&format!("{owner}.mean_offset"), offset, n)?;
        for (name, m) in [
            ("cov_quadratic", &mut self.cov_quadratic),
            ("cov_linear", &mut self.cov_linear),
            ("cov_constant", &mut self.cov_constant),
        ] {
            let m = m.get_or_insert_with(|| zeros(n));
            check_matrix(&format!("{owner}.{name}"), m, n)?;
        }
        Ok(())
    }

    fn to_reset(&self) -> ResetMap {
        let m = |o: &Option<Matrix>| to_matrix(o.as_ref().expect("defaults applied"));
        ResetMap {
            mean_gain: m(&self.mean_gain),
            mean_offset: DVector::from_vec(self.mean_offset.clone().expect("defaults applied")),
            cov_quadratic: m(&self.cov_quadratic),
            cov_linear: m(&self.cov_linear),
            cov_constant: m(&self.cov_constant),
        }
    }
}

impl RunConfig {
    /// Fills every optional model field and checks all shapes against
    /// `n = len(drift_offset)`.
    pub fn apply_defaults(&mut self) -> Result<(), ConfigError> {
        let model = &mut self.model;
        let n = model.dynamics.drift_offset.len();
        if n == 0 {
            return Err(ConfigError::Schema(
                "model.dynamics.drift_offset: state dimension must be at least 1".into(),
            ));
        }
        check_matrix(
            "model.dynamics.drift_matrix",
            &model.dynamics.drift_matrix,
            n,
        )?;
        model.timer_reset.reset.fill(n, "model.timer_reset")?;
        for (i, fam) in model.memoryless_resets.iter_mut().enumerate() {
            fam.reset
                .fill(n, &format!("model.memoryless_resets[{i}]"))?;
        }
        let x0 = model.initial_state.get_or_insert_with(|| vec![0.0; n]);
        check_vector("model.initial_state", x0, n)?;
        Ok(())
    }

    pub fn to_model(&self) -> Result<TtshsModel, ConfigError> {
        let m = &self.model;
        let x0 = m
            .initial_state
            .clone()
            .ok_or_else(|| ConfigError::Schema("model.initial_state missing".into()))?;
        Ok(TtshsModel {
            dynamics: LinearDynamics::new(
                DVector::from_vec(m.dynamics.drift_offset.clone()),
                to_matrix(&m.dynamics.drift_matrix),
            ),
            timer_reset: TimerResetFamily {
                reset: m.timer_reset.reset.to_reset(),
                timing: m.timer_reset.timing.to_timing(),
            },
            memoryless_resets: m
                .memoryless_resets
                .iter()
                .map(|f| MemorylessResetFamily {
                    rate: f.rate,
                    reset: f.reset.to_reset(),
                })
                .collect(),
            initial_state: DVector::from_vec(x0),
        })
    }

    /// Timer family from `kind`; constant-rate families use their `burst` law
    /// when given, Gaussian otherwise.
    pub fn samplers(&self, kind: SamplerKind) -> SamplerSet {
        SamplerSet {
            timer: kind.to_sampler(),
            memoryless: self
                .model
                .memoryless_resets
                .iter()
                .map(|f| f.burst.map_or(ResetSampler::Gaussian, ResetSampler::Burst))
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
