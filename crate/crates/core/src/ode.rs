//! Adaptive Dormand–Prince 5(4) integrator for the moment ODEs.
//!
//! Steps are clipped so that every requested output time is hit exactly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, TtshsError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeTolerances {
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for OdeTolerances {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
        }
    }
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// 5th-order weights are the last row of A; the error weights are b5 − b4.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const MAX_STEPS: usize = 10_000_000;

/// Integrates `y' = f(t, y)` from `(t0, y0)` and returns the state at each
/// time in `grid` (non-decreasing, all `>= t0`).
pub fn integrate<F>(
    f: F,
    t0: f64,
    y0: &DVector<f64>,
    grid: &[f64],
    tol: OdeTolerances,
) -> Result<Vec<DVector<f64>>>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    check_grid(t0, grid)?;
    let dim = y0.len();
    let mut out = Vec::with_capacity(grid.len());
    let mut t = t0;
    let mut y = y0.clone();
    let mut k: Vec<DVector<f64>> = vec![DVector::zeros(dim); 7];
    k[0] = f(t, &y);
    let mut h = initial_step(&f, t, &y, &k[0], tol);
    let mut steps = 0usize;

    for &target in grid {
        while t < target {
            steps += 1;
            if steps > MAX_STEPS {
                return Err(TtshsError::SingularSystem(
                    "ODE integrator exceeded its step budget".into(),
                ));
            }
            let last = target - t <= h;
            let step = if last { target - t } else { h };
            for s in 1..7 {
                let mut ys = y.clone();
                for (j, kj) in k.iter().enumerate().take(s) {
                    if A[s][j] != 0.0 {
                        ys.axpy(step * A[s][j], kj, 1.0);
                    }
                }
                k[s] = f(t + C[s] * step, &ys);
            }
            let mut y_new = y.clone();
            for (j, kj) in k.iter().enumerate().take(6) {
                if A[6][j] != 0.0 {
                    y_new.axpy(step * A[6][j], kj, 1.0);
                }
            }
            let mut err_sq = 0.0;
            for i in 0..dim {
                let e: f64 = (0..7).map(|j| E[j] * k[j][i]).sum::<f64>() * step;
                let sc = tol.abs_tol + tol.rel_tol * y[i].abs().max(y_new[i].abs());
                err_sq += (e / sc) * (e / sc);
            }
            let err = if dim == 0 {
                0.0
            } else {
                (err_sq / dim as f64).sqrt()
            };
            if err <= 1.0 || step <= 1e-14 * t.abs().max(1.0) {
                t = if last { target } else { t + step };
                y = y_new;
                // FSAL: the 7th stage was evaluated at the accepted point
                k[0] = k[6].clone();
                let factor = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                };
                if !last || factor < 1.0 {
                    h = step * factor;
                }
            } else {
                h = step * (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

/// Integrates the affine system `y' = offset + matrix · y`.
pub fn integrate_affine(
    offset: &DVector<f64>,
    matrix: &DMatrix<f64>,
    t0: f64,
    y0: &DVector<f64>,
    grid: &[f64],
    tol: OdeTolerances,
) -> Result<Vec<DVector<f64>>> {
    if matrix.nrows() != y0.len() || matrix.ncols() != y0.len() || offset.len() != y0.len() {
        return Err(TtshsError::DimensionMismatch(format!(
            "affine system of size {}x{} with offset {} cannot act on a state of length {}",
            matrix.nrows(),
            matrix.ncols(),
            offset.len(),
            y0.len()
        )));
    }
    integrate(|_, y| matrix * y + offset, t0, y0, grid, tol)
}

pub(crate) fn check_grid(t0: f64, grid: &[f64]) -> Result<()> {
    let mut prev = t0;
    for &t in grid {
        if !t.is_finite() || t < prev {
            return Err(TtshsError::InvalidArgument(format!(
                "time grid must be non-decreasing from {t0}; got {t} after {prev}"
            )));
        }
        prev = t;
    }
    Ok(())
}

fn initial_step<F>(f: &F, t: f64, y: &DVector<f64>, dy: &DVector<f64>, tol: OdeTolerances) -> f64
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let scale = |i: usize| tol.abs_tol + tol.rel_tol * y[i].abs();
    let n = y.len().max(1) as f64;
    let d0 = ((0..y.len()).map(|i| (y[i] / scale(i)).powi(2)).sum::<f64>() / n).sqrt();
    let d1 = ((0..y.len())
        .map(|i| (dy[i] / scale(i)).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let y1 = y + dy * h0;
    let dy1 = f(t + h0, &y1);
    let d2 = ((0..y.len())
        .map(|i| ((dy1[i] - dy[i]) / scale(i)).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
        / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1)
}
