//! Protein concentration in a growing, dividing cell.
//!
//! Production is either a deterministic rate `kₓ⟨B⟩` or bursts of size `B`
//! at rate `kₓ`; dilution is `−γₓ x`; division is a timer-triggered reset with
//! `⟨x₊⟩ = x` and `var(x₊) = β x` (binomial partitioning).

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, TtshsError};
use crate::model::{
    LinearDynamics, MemorylessResetFamily, ResetMap, TimerResetFamily, TimingLaw, TtshsModel,
};
use crate::phase_type::{self, PhaseTypeMixture};
use crate::simulator::{BurstSize, ResetSampler, SamplerSet};

/// Mean division interval tied to the dilution rate: `⟨T⟩ = ln 2 / (2γₓ)`.
///
/// This is the relation the model is calibrated with; note it differs by a
/// factor of two from the doubling-time relation `ln 2 / γₓ`.
pub fn division_interval_mean(dilution_rate: f64) -> f64 {
    std::f64::consts::LN_2 / (2.0 * dilution_rate)
}

/// Inverse of [`division_interval_mean`].
pub fn dilution_rate_for_interval(mean_interval: f64) -> f64 {
    std::f64::consts::LN_2 / (2.0 * mean_interval)
}

/// Erlang(`stages`) division timing with the mean implied by `dilution_rate`.
pub fn erlang_division_timing(dilution_rate: f64, stages: u32) -> TimingLaw {
    let mean = division_interval_mean(dilution_rate);
    TimingLaw::PhaseType(PhaseTypeMixture::erlang(stages, stages as f64 / mean))
}

/// Two-moment-matched phase-type division timing.
pub fn fitted_division_timing(dilution_rate: f64, cv2: f64) -> Result<TimingLaw> {
    Ok(TimingLaw::PhaseType(phase_type::fit_mixture(
        division_interval_mean(dilution_rate),
        cv2,
    )?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneModelParams {
    /// `kₓ`, bursts per unit time.
    pub burst_rate: f64,
    /// Law of `B`; the engines only use `⟨B⟩` and `⟨B²⟩`.
    pub burst_size: BurstSize,
    /// `γₓ`.
    pub dilution_rate: f64,
    /// `β`.
    pub partition_noise: f64,
    pub division_timing: TimingLaw,
    /// Starting concentration; the deterministic steady state when `None`.
    pub initial_level: Option<f64>,
}

impl GeneModelParams {
    /// Parameters with Erlang(`stages`) division timing at the implied mean.
    pub fn with_erlang_division(
        burst_rate: f64,
        burst_size: BurstSize,
        dilution_rate: f64,
        partition_noise: f64,
        stages: u32,
    ) -> Self {
        Self {
            burst_rate,
            burst_size,
            dilution_rate,
            partition_noise,
            division_timing: erlang_division_timing(dilution_rate, stages),
            initial_level: None,
        }
    }

    pub fn burst_mean(&self) -> f64 {
        self.burst_size.mean()
    }

    pub fn burst_second_moment(&self) -> f64 {
        self.burst_size.second_moment()
    }

    pub fn mean_interval(&self) -> f64 {
        division_interval_mean(self.dilution_rate)
    }

    /// `x̄ = kₓ⟨B⟩/γₓ`.
    pub fn mean_level(&self) -> f64 {
        self.burst_rate * self.burst_mean() / self.dilution_rate
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(TtshsError::InvalidArgument(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        positive(self.burst_rate, "burst rate")?;
        positive(self.dilution_rate, "dilution rate")?;
        positive(self.partition_noise, "partition noise")?;
        self.burst_size.validate()?;
        positive(self.burst_mean(), "burst mean")?;
        if self.burst_second_moment() < self.burst_mean().powi(2) * (1.0 - 1e-12) {
            return Err(TtshsError::InvalidArgument(
                "burst law has <B²> < <B>²".into(),
            ));
        }
        let expected = self.mean_interval();
        let actual = self.division_timing.mean();
        if (actual - expected).abs() > 1e-9 * expected {
            return Err(TtshsError::InvalidArgument(format!(
                "division interval mean {actual} does not match ln2/(2γ) = {expected}"
            )));
        }
        Ok(())
    }
}

/// The scalar TTSHS for the preset.
///
/// Without bursts: `â = kₓ⟨B⟩`, `A = −γₓ`, division `J = 1, D = β`.
/// With bursts: `â = 0`, and one constant-rate family `x ↦ x + B` at rate `kₓ`.
pub fn build_ttshs(params: &GeneModelParams, with_bursts: bool) -> Result<TtshsModel> {
    params.validate()?;
    let division = ResetMap::noise_imparting(
        DMatrix::from_element(1, 1, params.partition_noise),
        DMatrix::zeros(1, 1),
    );
    let production = params.burst_rate * params.burst_mean();
    let (offset, memoryless) = if with_bursts {
        let mut burst = ResetMap::identity(1);
        burst.mean_offset[0] = params.burst_mean();
        burst.cov_constant[(0, 0)] = params.burst_size.variance();
        (
            0.0,
            vec![MemorylessResetFamily {
                rate: params.burst_rate,
                reset: burst,
            }],
        )
    } else {
        (production, Vec::new())
    };
    let model = TtshsModel {
        dynamics: LinearDynamics::scalar(offset, -params.dilution_rate),
        timer_reset: TimerResetFamily {
            reset: division,
            timing: params.division_timing.clone(),
        },
        memoryless_resets: memoryless,
        initial_state: DVector::from_element(
            1,
            params.initial_level.unwrap_or_else(|| params.mean_level()),
        ),
    };
    model.ensure_valid(true)?;
    Ok(model)
}

/// Binomial partitioning at division and the configured burst law.
pub fn sampler_set(params: &GeneModelParams, with_bursts: bool) -> SamplerSet {
    SamplerSet {
        timer: ResetSampler::ScaledBinomial,
        memoryless: if with_bursts {
            vec![ResetSampler::Burst(params.burst_size)]
        } else {
            Vec::new()
        },
    }
}

/// Mean and CV² as printed in closed form for this example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormStats {
    pub mean: f64,
    pub cv2: f64,
}

/// The reference closed forms: `x̄ = kₓ⟨B⟩/γₓ`, `CV² = ln2·β/(2x̄)`, plus
/// `⟨B²⟩/(2⟨B⟩x̄)` with bursts.
///
/// These are reported for comparison only. Substituting `⟨T⟩ = ln2/(2γₓ)` into
/// the stationary Lyapunov relation instead gives a partitioning term of
/// `β/(ln2·x̄)`, a factor `(ln 2)²/2` apart.
pub fn closed_form_stats(params: &GeneModelParams, with_bursts: bool) -> ClosedFormStats {
    let mean = params.mean_level();
    let mut cv2 = std::f64::consts::LN_2 * params.partition_noise / (2.0 * mean);
    if with_bursts {
        cv2 += 0.5 * params.burst_second_moment() / (params.burst_mean() * mean);
    }
    ClosedFormStats { mean, cv2 }
}

/// CV² from the stationary Lyapunov relation with `⟨T⟩ = ln2/(2γₓ)`:
/// `β/(2γₓ⟨T⟩x̄)` plus `⟨B²⟩/(2⟨B⟩x̄)` with bursts.
pub fn lyapunov_cv2(params: &GeneModelParams, with_bursts: bool) -> f64 {
    let mean = params.mean_level();
    let mut cv2 =
        params.partition_noise / (2.0 * params.dilution_rate * params.mean_interval() * mean);
    if with_bursts {
        cv2 += 0.5 * params.burst_second_moment() / (params.burst_mean() * mean);
    }
    cv2
}
