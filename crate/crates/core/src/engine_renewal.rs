//! Moments for models whose timer reset only imparts noise (`J = I`, `R = 0`, `Q = 0`).
//!
//! The mean obeys the plain affine flow and, at steady state, the covariance
//! solves a Lyapunov equation in which the timing law enters only through the
//! mean interval `⟨T⟩` (the stationary mean hazard is `1/⟨T⟩`).

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, TtshsError};
use crate::linalg;
use crate::model::{self, LinearDynamics, TtshsModel};
use crate::ode::{self, OdeTolerances};
use crate::simulator;

/// Above this dimension the mean is integrated numerically instead of
/// propagated with matrix exponentials.
const EXACT_FLOW_MAX_DIM: usize = 64;

/// First and second raw moments of `x` at one time point.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub time: f64,
    pub mean: DVector<f64>,
    pub second_moment: DMatrix<f64>,
}

impl MomentState {
    pub fn covariance(&self) -> DMatrix<f64> {
        linalg::sym(&(&self.second_moment - &self.mean * self.mean.transpose()))
    }

    /// Per-component `variance / mean²`.
    pub fn cv2(&self) -> DVector<f64> {
        let cov = self.covariance();
        DVector::from_fn(self.mean.len(), |i, _| {
            cov[(i, i)] / (self.mean[i] * self.mean[i])
        })
    }
}

pub fn ensure_noise_imparting(model: &TtshsModel) -> Result<()> {
    if model.is_noise_imparting() {
        Ok(())
    } else {
        Err(TtshsError::NotNoiseImparting(
            "timer reset must have J = I, R = 0 and Q = 0".into(),
        ))
    }
}

/// Mean trajectory `d⟨x⟩/dt = â + A⟨x⟩` (plus the averaged constant-rate
/// families), sampled on `t_grid`. The timing law plays no part.
///
/// The flow is stepped exactly between grid points; `tol` only applies to very
/// large systems, which fall back to the Runge–Kutta integrator.
pub fn transient_mean(model: &TtshsModel, t_grid: &[f64]) -> Result<Vec<(f64, DVector<f64>)>> {
    transient_mean_with(model, t_grid, OdeTolerances::default())
}

pub fn transient_mean_with(
    model: &TtshsModel,
    t_grid: &[f64],
    tol: OdeTolerances,
) -> Result<Vec<(f64, DVector<f64>)>> {
    model.ensure_valid(false)?;
    ensure_noise_imparting(model)?;
    let (offset, matrix) = model.effective_mean_drift();
    if model.dim() <= EXACT_FLOW_MAX_DIM {
        // the mean ODE is affine with constant coefficients, so step it exactly
        ode::check_grid(0.0, t_grid)?;
        let flow = LinearDynamics::new(offset, matrix);
        let mut out = Vec::with_capacity(t_grid.len());
        let (mut t, mut x) = (0.0, model.initial_state.clone());
        for &tg in t_grid {
            x = simulator::flow_propagate(&flow, &x, tg - t);
            t = tg;
            out.push((tg, x.clone()));
        }
        return Ok(out);
    }
    let ys = ode::integrate_affine(&offset, &matrix, 0.0, &model.initial_state, t_grid, tol)?;
    Ok(t_grid.iter().copied().zip(ys).collect())
}

/// Stationary mean, including the constant-rate families' affine drift.
pub fn steady_state_mean(model: &TtshsModel) -> Result<DVector<f64>> {
    linalg::ensure_hurwitz(&model.dynamics.drift_matrix)?;
    if model.memoryless_resets.is_empty() {
        return model::steady_state_mean(&model.dynamics);
    }
    let (offset, matrix) = model.effective_mean_drift();
    linalg::ensure_hurwitz(&matrix)?;
    model::solve_affine_fixed_point(&offset, &matrix)
}

/// Stationary covariance `C`.
///
/// Without constant-rate families this solves
/// `A C + C Aᵀ = −(1/⟨T⟩) sym(D x̄ 𝟙ₙ + E)`; with them, the full stationary
/// second-moment equation is solved by vectorization and `C = ⟨xxᵀ⟩ − x̄ x̄ᵀ`.
pub fn steady_state_covariance(model: &TtshsModel) -> Result<DMatrix<f64>> {
    Ok(steady_state(model)?.covariance())
}

/// Stationary mean and second moment.
pub fn steady_state(model: &TtshsModel) -> Result<MomentState> {
    model.ensure_valid(false)?;
    linalg::ensure_hurwitz(&model.dynamics.drift_matrix)?;
    ensure_noise_imparting(model)?;
    let mean = steady_state_mean(model)?;
    let hazard = 1.0 / model.timer_reset.timing.mean();
    let a = &model.dynamics.drift_matrix;
    let timer = &model.timer_reset.reset;
    let timer_noise =
        linalg::sym(&(linalg::outer_with_ones(&timer.cov_linear, &mean) + &timer.cov_constant))
            * hazard;

    let outer = &mean * mean.transpose();
    if model.memoryless_resets.is_empty() {
        let cov = linalg::sym(&linalg::solve_lyapunov(a, &(-timer_noise))?);
        return Ok(MomentState {
            time: f64::INFINITY,
            second_moment: &cov + outer,
            mean,
        });
    }

    let n = model.dim();
    let ahat = &model.dynamics.drift_offset;
    let mut forcing = ahat * mean.transpose() + &mean * ahat.transpose() + timer_noise;
    for fam in &model.memoryless_resets {
        let r = &fam.reset;
        let jm = &r.mean_gain * &mean;
        forcing += (&jm * r.mean_offset.transpose()
            + &r.mean_offset * jm.transpose()
            + &r.mean_offset * r.mean_offset.transpose()
            + linalg::sym(&linalg::outer_with_ones(&r.cov_linear, &mean))
            + linalg::sym(&r.cov_constant))
            * fam.rate;
    }
    let families = &model.memoryless_resets;
    let op = |s: &DMatrix<f64>| {
        let mut out = a * s + s * a.transpose();
        for fam in families {
            let r = &fam.reset;
            out += (&r.mean_gain * s * r.mean_gain.transpose()
                + linalg::sym(&(&r.cov_quadratic * s))
                - s)
                * fam.rate;
        }
        out
    };
    let second = linalg::sym(&linalg::solve_matrix_operator(n, op, &(-forcing))?);
    Ok(MomentState {
        time: f64::INFINITY,
        mean,
        second_moment: second,
    })
}
