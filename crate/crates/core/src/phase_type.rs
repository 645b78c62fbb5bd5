//! Mixtures of Erlang distributions used as event-interval laws.
//!
//! A mixture picks branch `i` with probability `pᵢ` and then waits through `mᵢ`
//! exponential stages of rate `kᵢ`. The stages `(i, j)` are the states of the
//! embedded Markov chain the phase-type moment engine tracks.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TtshsError};
use crate::model::{Violation, ViolationCode};

/// Tolerance on `Σ pᵢ = 1`.
pub const PROBABILITY_SUM_TOL: f64 = 1e-12;

/// Survival below this is reported as a certain event (hazard `+∞`).
pub const SURVIVAL_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErlangBranch {
    #[serde(rename = "p")]
    pub probability: f64,
    #[serde(rename = "m")]
    pub stages: u32,
    #[serde(rename = "k")]
    pub rate: f64,
}

impl ErlangBranch {
    pub fn new(probability: f64, stages: u32, rate: f64) -> Self {
        Self {
            probability,
            stages,
            rate,
        }
    }

    fn log_density(&self, tau: f64) -> f64 {
        let m = self.stages as f64;
        m * self.rate.ln() + (m - 1.0) * tau.ln() - self.rate * tau - ln_factorial(self.stages - 1)
    }

    /// `ln P(T > τ)` for this branch alone.
    fn log_survival(&self, tau: f64) -> f64 {
        let x = self.rate * tau;
        if x == 0.0 {
            return 0.0;
        }
        let lx = x.ln();
        let logs: Vec<f64> = (0..self.stages)
            .map(|r| -x + r as f64 * lx - ln_factorial(r))
            .collect();
        log_sum_exp(&logs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTypeMixture {
    pub branches: Vec<ErlangBranch>,
}

impl PhaseTypeMixture {
    /// Builds a mixture and rejects it if any invariant fails.
    pub fn new(branches: Vec<ErlangBranch>) -> Result<Self> {
        let mix = Self { branches };
        let violations = mix.violations();
        if violations.is_empty() {
            Ok(mix)
        } else {
            Err(TtshsError::InvalidArgument(
                violations
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join("; "),
            ))
        }
    }

    pub fn erlang(stages: u32, rate: f64) -> Self {
        Self {
            branches: vec![ErlangBranch::new(1.0, stages, rate)],
        }
    }

    pub fn exponential(rate: f64) -> Self {
        Self::erlang(1, rate)
    }

    /// Every invariant violation, empty when the mixture is valid.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.branches.is_empty() {
            out.push(Violation::error(
                ViolationCode::EmptyMixture,
                "phase-type mixture has no branches",
            ));
            return out;
        }
        let mut sum = 0.0;
        for (i, b) in self.branches.iter().enumerate() {
            if !(0.0..=1.0).contains(&b.probability) || !b.probability.is_finite() {
                out.push(Violation::error(
                    ViolationCode::ProbabilityRange,
                    format!("branch {i}: probability {} outside [0, 1]", b.probability),
                ));
            }
            if b.stages < 1 {
                out.push(Violation::error(
                    ViolationCode::ZeroStages,
                    format!("branch {i}: stage count must be >= 1"),
                ));
            }
            if !b.rate.is_finite() || b.rate <= 0.0 {
                out.push(Violation::error(
                    ViolationCode::NonPositiveRate,
                    format!("branch {i}: rate {} must be positive", b.rate),
                ));
            }
            sum += b.probability;
        }
        if (sum - 1.0).abs() > PROBABILITY_SUM_TOL {
            out.push(Violation::error(
                ViolationCode::ProbabilitySum,
                format!("branch probabilities sum to {sum}, expected 1"),
            ));
        }
        out
    }

    /// Total number of chain states `M = Σ mᵢ`.
    pub fn stage_count(&self) -> usize {
        self.branches.iter().map(|b| b.stages as usize).sum()
    }

    /// Raw moment `⟨Tᵠ⟩ = Σᵢ pᵢ (mᵢ+q−1)! / ((mᵢ−1)! kᵢᵠ)`.
    pub fn interval_moment(&self, q: u32) -> f64 {
        self.branches
            .iter()
            .map(|b| {
                // rising factorial m(m+1)…(m+q−1) divided by kᵠ, one factor at a time
                let mut term = b.probability;
                for r in 0..q {
                    term *= (b.stages + r) as f64 / b.rate;
                }
                term
            })
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.interval_moment(1)
    }

    /// `(⟨T⟩, CV²)`.
    pub fn mean_and_cv2(&self) -> (f64, f64) {
        let m1 = self.interval_moment(1);
        let m2 = self.interval_moment(2);
        (m1, (m2 - m1 * m1) / (m1 * m1))
    }

    pub fn density(&self, tau: f64) -> f64 {
        if tau < 0.0 {
            return 0.0;
        }
        if tau == 0.0 {
            return self
                .branches
                .iter()
                .filter(|b| b.stages == 1)
                .map(|b| b.probability * b.rate)
                .sum();
        }
        self.branches
            .iter()
            .map(|b| b.probability * b.log_density(tau).exp())
            .sum()
    }

    pub fn survival(&self, tau: f64) -> f64 {
        if tau <= 0.0 {
            return 1.0;
        }
        self.branches
            .iter()
            .map(|b| b.probability * b.log_survival(tau).exp())
            .sum()
    }

    /// Hazard `h(τ) = f(τ) / (1 − F(τ))`.
    ///
    /// Returns `f64::INFINITY` ("event certain") once the survival probability
    /// drops below [`SURVIVAL_FLOOR`].
    pub fn hazard_at(&self, tau: f64) -> f64 {
        let surv = self.survival(tau);
        if surv < SURVIVAL_FLOOR {
            return f64::INFINITY;
        }
        self.density(tau) / surv
    }

    /// Draws an interval: pick a branch, then sum its exponential stage times.
    pub fn sample_interval<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let branch = self.pick_branch(rng.random::<f64>());
        let mut t = 0.0;
        for _ in 0..branch.stages {
            let e: f64 = rng.sample(Exp1);
            t += e;
        }
        t / branch.rate
    }

    fn pick_branch(&self, u: f64) -> &ErlangBranch {
        let mut acc = 0.0;
        for b in &self.branches {
            acc += b.probability;
            if u < acc {
                return b;
            }
        }
        self.branches
            .iter()
            .rev()
            .find(|b| b.probability > 0.0)
            .unwrap_or(&self.branches[self.branches.len() - 1])
    }
}

/// Two-moment matching with at most two Erlang branches.
///
/// * `1/cv2` integral: a single Erlang.
/// * `cv2 > 1`: two exponential branches with balanced means `p₁/k₁ = p₂/k₂`.
/// * otherwise: Erlang(m) and Erlang(m+1) sharing one rate, `m = ⌊1/cv2⌋`.
pub fn fit_mixture(target_mean: f64, target_cv2: f64) -> Result<PhaseTypeMixture> {
    if !target_mean.is_finite() || target_mean <= 0.0 {
        return Err(TtshsError::InvalidArgument(format!(
            "target mean {target_mean} must be positive"
        )));
    }
    if !target_cv2.is_finite() || target_cv2 <= 0.0 {
        return Err(TtshsError::InvalidArgument(format!(
            "target cv2 {target_cv2} must be positive"
        )));
    }
    let inv = 1.0 / target_cv2;
    let nearest = inv.round();
    if nearest >= 1.0 && (inv - nearest).abs() <= 1e-12 * inv {
        let m = nearest as u32;
        return Ok(PhaseTypeMixture::erlang(m, m as f64 / target_mean));
    }
    if target_cv2 > 1.0 {
        let p1 = 0.5 * (1.0 + ((target_cv2 - 1.0) / (target_cv2 + 1.0)).sqrt());
        let p2 = 1.0 - p1;
        return Ok(PhaseTypeMixture {
            branches: vec![
                ErlangBranch::new(p1, 1, 2.0 * p1 / target_mean),
                ErlangBranch::new(p2, 1, 2.0 * p2 / target_mean),
            ],
        });
    }
    // 1/(m+1) < cv2 < 1/m; with K = m + 1 the Erlang(K−1) weight is
    // p = (K c² − √(K(1+c²) − K²c²)) / (1+c²) and the shared rate (K − p)/mean.
    let m = inv.floor() as u32;
    let big_k = (m + 1) as f64;
    let c2 = target_cv2;
    let p = (big_k * c2 - (big_k * (1.0 + c2) - big_k * big_k * c2).sqrt()) / (1.0 + c2);
    let rate = (big_k - p) / target_mean;
    Ok(PhaseTypeMixture {
        branches: vec![
            ErlangBranch::new(p, m, rate),
            ErlangBranch::new(1.0 - p, m + 1, rate),
        ],
    })
}

fn ln_factorial(n: u32) -> f64 {
    (2..=n).map(|r| (r as f64).ln()).sum()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn exponential_moments() {
        let mix = PhaseTypeMixture::exponential(2.0);
        assert!((mix.interval_moment(1) - 0.5).abs() < 1e-15);
        assert!((mix.interval_moment(2) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn erlang_second_moment() {
        let mix = PhaseTypeMixture::erlang(3, 3.0);
        assert!(rel(mix.interval_moment(2), 4.0 / 3.0) < 1e-14);
    }

    #[test]
    fn two_branch_mean() {
        let mix = PhaseTypeMixture::new(vec![
            ErlangBranch::new(0.5, 1, 1.0),
            ErlangBranch::new(0.5, 2, 2.0),
        ])
        .unwrap();
        assert!((mix.interval_moment(1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mean_and_cv2_examples() {
        let (m, c) = PhaseTypeMixture::exponential(1.0).mean_and_cv2();
        assert_eq!((m, c), (1.0, 1.0));
        let (m, c) = PhaseTypeMixture::erlang(3, 3.0).mean_and_cv2();
        assert!((m - 1.0).abs() < 1e-15 && (c - 1.0 / 3.0).abs() < 1e-14);
        let (m, c) = PhaseTypeMixture::exponential(4.0).mean_and_cv2();
        assert!((m - 0.25).abs() < 1e-15 && (c - 1.0).abs() < 1e-14);
    }

    #[test]
    fn mean_is_first_moment_exactly() {
        let mix = PhaseTypeMixture::new(vec![
            ErlangBranch::new(0.3, 4, 1.7),
            ErlangBranch::new(0.7, 2, 0.4),
        ])
        .unwrap();
        assert_eq!(mix.mean_and_cv2().0, mix.interval_moment(1));
    }

    #[test]
    fn hazard_examples() {
        let exp = PhaseTypeMixture::exponential(3.0);
        for tau in [0.0, 0.1, 1.0, 7.5] {
            assert!((exp.hazard_at(tau) - 3.0).abs() < 1e-12);
        }
        let e2 = PhaseTypeMixture::erlang(2, 1.0);
        assert!((e2.hazard_at(1.0) - 0.5).abs() < 1e-14);
        let mix = PhaseTypeMixture::new(vec![
            ErlangBranch::new(0.4, 2, 1.0),
            ErlangBranch::new(0.6, 3, 5.0),
        ])
        .unwrap();
        assert_eq!(mix.hazard_at(0.0), 0.0);
    }

    #[test]
    fn hazard_underflow_sentinel() {
        let e = PhaseTypeMixture::erlang(2, 10.0);
        assert_eq!(e.hazard_at(1e5), f64::INFINITY);
    }

    #[test]
    fn invalid_probability_sum() {
        let mix = PhaseTypeMixture {
            branches: vec![
                ErlangBranch::new(0.5, 1, 1.0),
                ErlangBranch::new(0.4, 2, 1.0),
            ],
        };
        let v = mix.violations();
        assert!(v.iter().any(|v| v.code == ViolationCode::ProbabilitySum));
        assert!(PhaseTypeMixture::new(mix.branches).is_err());
    }

    #[test]
    fn fit_examples() {
        let f = fit_mixture(1.0, 1.0).unwrap();
        assert_eq!(f, PhaseTypeMixture::exponential(1.0));
        let f = fit_mixture(1.0, 1.0 / 3.0).unwrap();
        assert_eq!(f.branches.len(), 1);
        assert_eq!(f.branches[0].stages, 3);
        assert!((f.branches[0].rate - 3.0).abs() < 1e-12);
        let f = fit_mixture(1.0, 0.4).unwrap();
        assert_eq!(f.branches.len(), 2);
        assert_eq!((f.branches[0].stages, f.branches[1].stages), (2, 3));
        assert_eq!(f.branches[0].rate, f.branches[1].rate);
        let (m, c) = f.mean_and_cv2();
        assert!(rel(m, 1.0) < 1e-9 && rel(c, 0.4) < 1e-9);
    }

    #[test]
    fn fit_rejects_nonpositive() {
        assert!(fit_mixture(0.0, 1.0).is_err());
        assert!(fit_mixture(1.0, 0.0).is_err());
    }

    #[test]
    fn sampling_is_deterministic_for_a_seed() {
        let mix = fit_mixture(2.0, 0.4).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let xa: Vec<f64> = (0..100).map(|_| mix.sample_interval(&mut a)).collect();
        let xb: Vec<f64> = (0..100).map(|_| mix.sample_interval(&mut b)).collect();
        assert_eq!(xa, xb);
        assert!(xa.iter().all(|&t| t > 0.0));
    }
}
