//! The linear time-triggered stochastic hybrid system: affine flow between
//! events, a timer-driven reset family, optional constant-rate reset families,
//! and the law of the inter-event interval.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TtshsError};
use crate::linalg::{self, HURWITZ_TOL, PRIMES};
use crate::phase_type::PhaseTypeMixture;

/// Tolerance on the minimum eigenvalue of a probed reset covariance.
pub const PSD_TOL: f64 = 1e-8;
/// Number of probe points used for the reset-covariance PSD check.
pub const PSD_PROBES: usize = 64;
/// Tolerance for the `J = I, R = 0, Q = 0` noise-imparting test.
pub const NOISE_IMPARTING_TOL: f64 = 1e-12;

/// `ẋ = â + A x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    pub drift_offset: DVector<f64>,
    pub drift_matrix: DMatrix<f64>,
}

impl LinearDynamics {
    pub fn new(drift_offset: DVector<f64>, drift_matrix: DMatrix<f64>) -> Self {
        Self {
            drift_offset,
            drift_matrix,
        }
    }

    pub fn scalar(offset: f64, rate: f64) -> Self {
        Self::new(
            DVector::from_element(1, offset),
            DMatrix::from_element(1, 1, rate),
        )
    }

    pub fn dim(&self) -> usize {
        self.drift_offset.len()
    }
}

/// Conditional statistics of the post-event state:
/// `⟨x₊⟩ = J x + R`, `cov(x₊) = Q x xᵀ + D x 𝟙ₙ + E`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResetMap {
    pub mean_gain: DMatrix<f64>,
    pub mean_offset: DVector<f64>,
    pub cov_quadratic: DMatrix<f64>,
    pub cov_linear: DMatrix<f64>,
    pub cov_constant: DMatrix<f64>,
}

impl ResetMap {
    /// `x₊ = x` with probability one.
    pub fn identity(n: usize) -> Self {
        Self {
            mean_gain: DMatrix::identity(n, n),
            mean_offset: DVector::zeros(n),
            cov_quadratic: DMatrix::zeros(n, n),
            cov_linear: DMatrix::zeros(n, n),
            cov_constant: DMatrix::zeros(n, n),
        }
    }

    /// Zero-mean noise with covariance `D x 𝟙ₙ + E`.
    pub fn noise_imparting(cov_linear: DMatrix<f64>, cov_constant: DMatrix<f64>) -> Self {
        let n = cov_linear.nrows();
        Self {
            cov_linear,
            cov_constant,
            ..Self::identity(n)
        }
    }

    pub fn conditional_mean(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.mean_gain * x + &self.mean_offset
    }

    /// Symmetrized conditional covariance of `x₊` (not projected).
    pub fn conditional_covariance(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let raw = &self.cov_quadratic * (x * x.transpose())
            + linalg::outer_with_ones(&self.cov_linear, x)
            + &self.cov_constant;
        linalg::sym(&raw)
    }

    pub fn is_noise_imparting(&self) -> bool {
        let n = self.mean_gain.nrows();
        let id = DMatrix::<f64>::identity(n, n);
        linalg::max_abs(&(&self.mean_gain - id)) <= NOISE_IMPARTING_TOL
            && linalg::max_abs_vec(&self.mean_offset) <= NOISE_IMPARTING_TOL
            && linalg::max_abs(&self.cov_quadratic) <= NOISE_IMPARTING_TOL
    }

    pub fn has_zero_covariance(&self) -> bool {
        linalg::max_abs(&self.cov_quadratic) == 0.0
            && linalg::max_abs(&self.cov_linear) == 0.0
            && linalg::max_abs(&self.cov_constant) == 0.0
    }

    fn dimension_violations(&self, n: usize, owner: &str, out: &mut Vec<Violation>) {
        let mats = [
            ("mean_gain", &self.mean_gain),
            ("cov_quadratic", &self.cov_quadratic),
            ("cov_linear", &self.cov_linear),
            ("cov_constant", &self.cov_constant),
        ];
        for (name, m) in mats {
            if m.nrows() != n || m.ncols() != n {
                out.push(Violation::error(
                    ViolationCode::DimensionMismatch,
                    format!(
                        "{owner}.{name} is {}x{}, expected {n}x{n}",
                        m.nrows(),
                        m.ncols()
                    ),
                ));
            }
        }
        if self.mean_offset.len() != n {
            out.push(Violation::error(
                ViolationCode::DimensionMismatch,
                format!(
                    "{owner}.mean_offset has length {}, expected {n}",
                    self.mean_offset.len()
                ),
            ));
        }
    }

    fn all_finite(&self) -> bool {
        self.mean_gain.iter().all(|v| v.is_finite())
            && self.mean_offset.iter().all(|v| v.is_finite())
            && self.cov_quadratic.iter().all(|v| v.is_finite())
            && self.cov_linear.iter().all(|v| v.is_finite())
            && self.cov_constant.iter().all(|v| v.is_finite())
    }
}

/// Interval laws simulated directly, without a phase-type embedding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RenewalLaw {
    Deterministic { mean: f64 },
    Gamma { mean: f64, cv2: f64 },
    Lognormal { mean: f64, cv2: f64 },
}

impl RenewalLaw {
    pub fn mean(&self) -> f64 {
        match *self {
            RenewalLaw::Deterministic { mean }
            | RenewalLaw::Gamma { mean, .. }
            | RenewalLaw::Lognormal { mean, .. } => mean,
        }
    }

    pub fn cv2(&self) -> f64 {
        match *self {
            RenewalLaw::Deterministic { .. } => 0.0,
            RenewalLaw::Gamma { cv2, .. } | RenewalLaw::Lognormal { cv2, .. } => cv2,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            RenewalLaw::Deterministic { mean } => mean,
            RenewalLaw::Gamma { mean, cv2 } => {
                let shape = 1.0 / cv2;
                Gamma::new(shape, mean / shape)
                    .expect("validated gamma parameters")
                    .sample(rng)
            }
            RenewalLaw::Lognormal { mean, cv2 } => {
                let sigma2 = cv2.ln_1p();
                LogNormal::new(mean.ln() - 0.5 * sigma2, sigma2.sqrt())
                    .expect("validated lognormal parameters")
                    .sample(rng)
            }
        }
    }
}

/// Law of the interval between timer-triggered events.
#[derive(Debug, Clone, PartialEq)]
pub enum TimingLaw {
    PhaseType(PhaseTypeMixture),
    Renewal(RenewalLaw),
}

impl TimingLaw {
    pub fn mean(&self) -> f64 {
        match self {
            TimingLaw::PhaseType(mix) => mix.mean(),
            TimingLaw::Renewal(law) => law.mean(),
        }
    }

    pub fn cv2(&self) -> f64 {
        match self {
            TimingLaw::PhaseType(mix) => mix.mean_and_cv2().1,
            TimingLaw::Renewal(law) => law.cv2(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            TimingLaw::PhaseType(mix) => mix.sample_interval(rng),
            TimingLaw::Renewal(law) => law.sample(rng),
        }
    }

    pub fn as_phase_type(&self) -> Option<&PhaseTypeMixture> {
        match self {
            TimingLaw::PhaseType(mix) => Some(mix),
            TimingLaw::Renewal(_) => None,
        }
    }

    fn violations(&self) -> Vec<Violation> {
        match self {
            TimingLaw::PhaseType(mix) => mix.violations(),
            TimingLaw::Renewal(law) => {
                let mut out = Vec::new();
                let mean = law.mean();
                if !mean.is_finite() || mean <= 0.0 {
                    out.push(Violation::error(
                        ViolationCode::NonPositiveMean,
                        format!("interval mean {mean} must be positive and finite"),
                    ));
                }
                if let RenewalLaw::Gamma { cv2, .. } | RenewalLaw::Lognormal { cv2, .. } = law {
                    if !cv2.is_finite() || *cv2 <= 0.0 {
                        out.push(Violation::error(
                            ViolationCode::NonPositiveCv2,
                            format!("interval cv2 {cv2} must be positive and finite"),
                        ));
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimerResetFamily {
    pub reset: ResetMap,
    pub timing: TimingLaw,
}

/// Resets firing at a constant rate, independent of the timer.
#[derive(Debug, Clone, PartialEq)]
pub struct MemorylessResetFamily {
    pub rate: f64,
    pub reset: ResetMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtshsModel {
    pub dynamics: LinearDynamics,
    pub timer_reset: TimerResetFamily,
    pub memoryless_resets: Vec<MemorylessResetFamily>,
    pub initial_state: DVector<f64>,
}

impl TtshsModel {
    pub fn dim(&self) -> usize {
        self.dynamics.dim()
    }

    pub fn is_noise_imparting(&self) -> bool {
        self.timer_reset.reset.is_noise_imparting()
    }

    /// Every constraint violation. Warnings do not make the model invalid.
    pub fn validate(&self, require_hurwitz: bool) -> ValidationReport {
        validate_model(self, require_hurwitz)
    }

    /// Fails with `VALIDATION_ERROR` unless the report has no errors.
    pub fn ensure_valid(&self, require_hurwitz: bool) -> Result<()> {
        let report = self.validate(require_hurwitz);
        if report.is_valid() {
            Ok(())
        } else {
            Err(TtshsError::InvalidModel(report.to_string()))
        }
    }

    /// Drift of the mean once the constant-rate families are averaged in:
    /// `(â + Σ λ R_b, A + Σ λ (J_b − I))`.
    pub fn effective_mean_drift(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.dim();
        let id = DMatrix::<f64>::identity(n, n);
        let mut offset = self.dynamics.drift_offset.clone();
        let mut matrix = self.dynamics.drift_matrix.clone();
        for fam in &self.memoryless_resets {
            offset += &fam.reset.mean_offset * fam.rate;
            matrix += (&fam.reset.mean_gain - &id) * fam.rate;
        }
        (offset, matrix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    EmptyState,
    DimensionMismatch,
    NonFinite,
    NotHurwitz,
    AsymmetricCovConstant,
    ResetCovNotPsd,
    NonPositiveRate,
    EmptyMixture,
    ProbabilitySum,
    ProbabilityRange,
    ZeroStages,
    NonPositiveMean,
    NonPositiveCv2,
}

impl ViolationCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ViolationCode::EmptyState => "EMPTY_STATE",
            ViolationCode::DimensionMismatch => "DIMENSION_MISMATCH",
            ViolationCode::NonFinite => "NON_FINITE",
            ViolationCode::NotHurwitz => "NOT_HURWITZ",
            ViolationCode::AsymmetricCovConstant => "ASYMMETRIC_COV_CONSTANT",
            ViolationCode::ResetCovNotPsd => "RESET_COV_NOT_PSD",
            ViolationCode::NonPositiveRate => "NONPOSITIVE_RATE",
            ViolationCode::EmptyMixture => "EMPTY_MIXTURE",
            ViolationCode::ProbabilitySum => "PROBABILITY_SUM",
            ViolationCode::ProbabilityRange => "PROBABILITY_RANGE",
            ViolationCode::ZeroStages => "ZERO_STAGES",
            ViolationCode::NonPositiveMean => "NONPOSITIVE_MEAN",
            ViolationCode::NonPositiveCv2 => "NONPOSITIVE_CV2",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub severity: Severity,
    pub message: String,
}

impl Violation {
    pub fn error(code: ViolationCode, message: impl Into<String>) -> Self {
        Self {
            code,
            severity: Severity::Error,
            message: message.into(),
        }
    }

    pub fn warning(code: ViolationCode, message: impl Into<String>) -> Self {
        Self {
            code,
            severity: Severity::Warning,
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{} [{tag}]: {}", self.code, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    /// No error-severity violations (warnings allowed).
    pub fn is_valid(&self) -> bool {
        self.violations
            .iter()
            .all(|v| v.severity == Severity::Warning)
    }

    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }

    pub fn errors(&self) -> impl Iterator<Item = &Violation> {
        self.violations
            .iter()
            .filter(|v| v.severity == Severity::Error)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("valid");
        }
        let lines: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&lines.join("; "))
    }
}

/// Checks every model invariant and returns the violations found.
pub fn validate_model(model: &TtshsModel, require_hurwitz: bool) -> ValidationReport {
    let mut out = Vec::new();
    let n = model.dynamics.drift_offset.len();
    if n == 0 {
        out.push(Violation::error(
            ViolationCode::EmptyState,
            "state dimension must be at least 1",
        ));
        return ValidationReport { violations: out };
    }

    let a = &model.dynamics.drift_matrix;
    if a.nrows() != n || a.ncols() != n {
        out.push(Violation::error(
            ViolationCode::DimensionMismatch,
            format!(
                "dynamics.drift_matrix is {}x{}, expected {n}x{n}",
                a.nrows(),
                a.ncols()
            ),
        ));
    }
    if model.initial_state.len() != n {
        out.push(Violation::error(
            ViolationCode::DimensionMismatch,
            format!(
                "initial_state has length {}, expected {n}",
                model.initial_state.len()
            ),
        ));
    }
    model
        .timer_reset
        .reset
        .dimension_violations(n, "timer_reset", &mut out);
    for (i, fam) in model.memoryless_resets.iter().enumerate() {
        fam.reset
            .dimension_violations(n, &format!("memoryless_resets[{i}]"), &mut out);
        if !fam.rate.is_finite() || fam.rate <= 0.0 {
            out.push(Violation::error(
                ViolationCode::NonPositiveRate,
                format!("memoryless_resets[{i}].rate {} must be positive", fam.rate),
            ));
        }
    }
    out.extend(model.timer_reset.timing.violations());

    let dims_ok = !out
        .iter()
        .any(|v| v.code == ViolationCode::DimensionMismatch);
    let finite = model.dynamics.drift_offset.iter().all(|v| v.is_finite())
        && a.iter().all(|v| v.is_finite())
        && model.initial_state.iter().all(|v| v.is_finite())
        && model.timer_reset.reset.all_finite()
        && model.memoryless_resets.iter().all(|f| f.reset.all_finite());
    if !finite {
        out.push(Violation::error(
            ViolationCode::NonFinite,
            "model contains non-finite entries",
        ));
    }
    if !dims_ok || !finite {
        return ValidationReport { violations: out };
    }

    let hurwitz = linalg::is_hurwitz(a);
    if require_hurwitz && !hurwitz {
        out.push(Violation::error(
            ViolationCode::NotHurwitz,
            format!(
                "drift matrix spectral abscissa {:.3e} is not below -{HURWITZ_TOL:e}",
                linalg::spectral_abscissa(a)
            ),
        ));
    }

    let families = std::iter::once(("timer_reset".to_string(), &model.timer_reset.reset)).chain(
        model
            .memoryless_resets
            .iter()
            .enumerate()
            .map(|(i, f)| (format!("memoryless_resets[{i}]"), &f.reset)),
    );
    let scale = probe_scale(model, hurwitz);
    let probes = probe_points(n, scale);
    for (name, reset) in families {
        let e = &reset.cov_constant;
        if linalg::max_abs(&(e - e.transpose())) > 1e-12 * (1.0 + linalg::max_abs(e)) {
            out.push(Violation::error(
                ViolationCode::AsymmetricCovConstant,
                format!("{name}.cov_constant is not symmetric"),
            ));
        }
        let worst = probes
            .iter()
            .map(|x| {
                (
                    linalg::min_symmetric_eigenvalue(&reset.conditional_covariance(x)),
                    x,
                )
            })
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((lmin, x)) = worst {
            if lmin < -PSD_TOL {
                out.push(Violation::warning(
                    ViolationCode::ResetCovNotPsd,
                    format!(
                        "{name}: reset covariance has eigenvalue {lmin:.3e} at probe x = {:?}",
                        x.as_slice()
                    ),
                ));
            }
        }
    }

    ValidationReport { violations: out }
}

/// Half-width of the probe box `10‖x̄‖ + 1`.
fn probe_scale(model: &TtshsModel, hurwitz: bool) -> f64 {
    let reference = if hurwitz {
        steady_state_mean(&model.dynamics)
            .map(|m| m.norm())
            .unwrap_or_else(|_| model.initial_state.norm())
    } else {
        model.initial_state.norm()
    };
    10.0 * reference + 1.0
}

/// Deterministic probe points in `[-scale, scale]ⁿ`: corners, the centre and
/// face midpoints for n ≤ 3, topped up with Halton points to [`PSD_PROBES`].
pub(crate) fn probe_points(n: usize, scale: f64) -> Vec<DVector<f64>> {
    let mut pts = Vec::with_capacity(PSD_PROBES);
    if n <= 3 {
        for mask in 0..(1usize << n) {
            pts.push(DVector::from_fn(n, |i, _| {
                if mask >> i & 1 == 1 {
                    scale
                } else {
                    -scale
                }
            }));
        }
        pts.push(DVector::zeros(n));
        for i in 0..n {
            for sign in [-1.0, 1.0] {
                let mut v = DVector::zeros(n);
                v[i] = sign * scale;
                pts.push(v);
            }
        }
    }
    let mut k = 1;
    while pts.len() < PSD_PROBES {
        pts.push(DVector::from_fn(n, |i, _| {
            let base = PRIMES[i % PRIMES.len()];
            (2.0 * linalg::halton(k, base) - 1.0) * scale
        }));
        k += 1;
    }
    pts
}

/// Fixed point of the mean flow, `x̄ = −A⁻¹ â`.
pub fn steady_state_mean(dynamics: &LinearDynamics) -> Result<DVector<f64>> {
    linalg::ensure_hurwitz(&dynamics.drift_matrix)?;
    solve_affine_fixed_point(&dynamics.drift_offset, &dynamics.drift_matrix)
}

/// Solves `offset + matrix · x = 0`.
pub(crate) fn solve_affine_fixed_point(
    offset: &DVector<f64>,
    matrix: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    matrix
        .clone()
        .lu()
        .solve(&(-offset))
        .ok_or_else(|| TtshsError::SingularSystem("drift matrix is singular".into()))
}
