//! Closed moment system for phase-type event timing.
//!
//! The timer is replaced by the Erlang-mixture Markov chain with Bernoulli stage
//! indicators `s_ij`. Because at most one indicator is 1 and `s² = s`, the
//! stage-conditioned moments `⟨s⟩`, `⟨x s⟩`, `⟨x xᵀ s⟩` evolve under a finite
//! linear system `μ̇ = a₁ + A₁ μ` for the full reset map. Marginal moments of
//! `x` are sums over stages.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::engine_renewal::MomentState;
use crate::error::{Result, TtshsError};
use crate::linalg;
use crate::model::{ResetMap, TtshsModel};
use crate::ode::{self, OdeTolerances};
use crate::phase_type::PhaseTypeMixture;

/// One stage `(branch, stage)` of the embedded chain, both 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Stage {
    pub branch: usize,
    pub stage: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MomentLabel {
    /// `⟨s_ij⟩`
    StageMean(Stage),
    /// `⟨x_a s_ij⟩`
    Cross(Stage, usize),
    /// `⟨x_a x_b s_ij⟩` with `a ≤ b`
    SecondCross(Stage, usize, usize),
}

impl fmt::Display for MomentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MomentLabel::StageMean(s) => write!(f, "s[{},{}]", s.branch, s.stage),
            MomentLabel::Cross(s, a) => write!(f, "x{a}*s[{},{}]", s.branch, s.stage),
            MomentLabel::SecondCross(s, a, b) => {
                write!(f, "x{a}*x{b}*s[{},{}]", s.branch, s.stage)
            }
        }
    }
}

/// Layout of `μ`: stage means, then stage-major cross moments, then
/// stage-major upper-triangular second cross moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentIndexMap {
    dim: usize,
    stages: Vec<Stage>,
    branch_offsets: Vec<usize>,
}

impl MomentIndexMap {
    pub fn new(mix: &PhaseTypeMixture, dim: usize) -> Self {
        let mut stages = Vec::with_capacity(mix.stage_count());
        let mut branch_offsets = Vec::with_capacity(mix.branches.len());
        for (i, b) in mix.branches.iter().enumerate() {
            branch_offsets.push(stages.len());
            for j in 0..b.stages as usize {
                stages.push(Stage {
                    branch: i,
                    stage: j,
                });
            }
        }
        Self {
            dim,
            stages,
            branch_offsets,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `M = Σ mᵢ`.
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    fn tri_len(&self) -> usize {
        self.dim * (self.dim + 1) / 2
    }

    /// `M + M·n + M·n(n+1)/2`.
    pub fn len(&self) -> usize {
        self.stage_count() * (1 + self.dim + self.tri_len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat position of a stage.
    pub fn stage_position(&self, stage: Stage) -> usize {
        self.branch_offsets[stage.branch] + stage.stage
    }

    pub fn s(&self, l: usize) -> usize {
        l
    }

    pub fn x(&self, l: usize, a: usize) -> usize {
        self.stage_count() + l * self.dim + a
    }

    /// Symmetric: `xx(l, a, b) == xx(l, b, a)`.
    pub fn xx(&self, l: usize, a: usize, b: usize) -> usize {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        self.stage_count() * (1 + self.dim) + l * self.tri_len() + tri_index(self.dim, a, b)
    }

    pub fn label(&self, index: usize) -> MomentLabel {
        let m = self.stage_count();
        if index < m {
            return MomentLabel::StageMean(self.stages[index]);
        }
        let rest = index - m;
        if rest < m * self.dim {
            return MomentLabel::Cross(self.stages[rest / self.dim], rest % self.dim);
        }
        let rest = rest - m * self.dim;
        let t = self.tri_len();
        let (a, b) = tri_pair(self.dim, rest % t);
        MomentLabel::SecondCross(self.stages[rest / t], a, b)
    }

    pub fn index(&self, label: MomentLabel) -> usize {
        match label {
            MomentLabel::StageMean(s) => self.s(self.stage_position(s)),
            MomentLabel::Cross(s, a) => self.x(self.stage_position(s), a),
            MomentLabel::SecondCross(s, a, b) => self.xx(self.stage_position(s), a, b),
        }
    }
}

/// Position of `(a, b)`, `a ≤ b`, in row-major upper-triangular storage.
fn tri_index(n: usize, a: usize, b: usize) -> usize {
    a * n - a * (a + 1) / 2 + a + (b - a)
}

fn tri_pair(n: usize, mut idx: usize) -> (usize, usize) {
    for a in 0..n {
        let row = n - a;
        if idx < row {
            return (a, a + idx);
        }
        idx -= row;
    }
    unreachable!("triangular index out of range")
}

/// `μ̇ = a₁ + A₁ μ` together with its index layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedMomentSystem {
    pub index_map: MomentIndexMap,
    pub offset: DVector<f64>,
    pub generator: DMatrix<f64>,
}

struct Assembler<'a> {
    map: &'a MomentIndexMap,
    gen: DMatrix<f64>,
}

impl Assembler<'_> {
    fn add(&mut self, row: usize, col: usize, v: f64) {
        if v != 0.0 {
            self.gen[(row, col)] += v;
        }
    }

    /// Adds `w · ⟨(J x + R) s_src⟩_a` to `row`.
    fn first_moment_image(&mut self, row: usize, a: usize, src: usize, w: f64, reset: &ResetMap) {
        let n = self.map.dim();
        for c in 0..n {
            self.add(row, self.map.x(src, c), w * reset.mean_gain[(a, c)]);
        }
        self.add(row, self.map.s(src), w * reset.mean_offset[a]);
    }

    /// Adds `w · ⟨x₊ x₊ᵀ s_src⟩_ab` to `row`, with the conditional covariance
    /// symmetrized.
    fn second_moment_image(
        &mut self,
        row: usize,
        (a, b): (usize, usize),
        src: usize,
        w: f64,
        reset: &ResetMap,
    ) {
        let n = self.map.dim();
        let m = self.map;
        let j = &reset.mean_gain;
        let r = &reset.mean_offset;
        let q = &reset.cov_quadratic;
        let d = &reset.cov_linear;
        let e = &reset.cov_constant;
        // J S Jᵀ
        for c in 0..n {
            for dd in 0..n {
                self.add(row, m.xx(src, c, dd), w * j[(a, c)] * j[(b, dd)]);
            }
        }
        // J m Rᵀ + R mᵀ Jᵀ and sym(D m 𝟙ₙ)
        for c in 0..n {
            let coeff = j[(a, c)] * r[b] + r[a] * j[(b, c)] + 0.5 * (d[(a, c)] + d[(b, c)]);
            self.add(row, m.x(src, c), w * coeff);
        }
        // R Rᵀ s and sym(E) s
        self.add(
            row,
            m.s(src),
            w * (r[a] * r[b] + 0.5 * (e[(a, b)] + e[(b, a)])),
        );
        // sym(Q S)
        for c in 0..n {
            self.add(row, m.xx(src, c, b), w * 0.5 * q[(a, c)]);
            self.add(row, m.xx(src, c, a), w * 0.5 * q[(b, c)]);
        }
    }
}

/// Assembles `(a₁, A₁)` for a model with phase-type timing.
pub fn build_augmented_system(model: &TtshsModel) -> Result<AugmentedMomentSystem> {
    model.ensure_valid(false)?;
    let mix = model
        .timer_reset
        .timing
        .as_phase_type()
        .ok_or(TtshsError::TimingNotPhaseType)?;
    let n = model.dim();
    let map = MomentIndexMap::new(mix, n);
    let len = map.len();
    let mut asm = Assembler {
        map: &map,
        gen: DMatrix::zeros(len, len),
    };

    let a_mat = &model.dynamics.drift_matrix;
    let a_hat = &model.dynamics.drift_offset;
    let timer = &model.timer_reset.reset;

    // exit stages (i, mᵢ − 1) and their completion rates
    let exits: Vec<(usize, f64)> = mix
        .branches
        .iter()
        .enumerate()
        .map(|(i, b)| {
            (
                map.stage_position(Stage {
                    branch: i,
                    stage: b.stages as usize - 1,
                }),
                b.rate,
            )
        })
        .collect();

    for (l, stage) in map.stages().iter().enumerate() {
        let branch = &mix.branches[stage.branch];
        let k = branch.rate;
        let pred = (stage.stage > 0).then(|| l - 1);
        let entry_prob = (stage.stage == 0).then_some(branch.probability);

        // ⟨s⟩
        let row = map.s(l);
        asm.add(row, map.s(l), -k);
        if let Some(p) = pred {
            asm.add(row, map.s(p), k);
        }
        if let Some(p_i) = entry_prob {
            for &(e, k_e) in &exits {
                asm.add(row, map.s(e), p_i * k_e);
            }
        }

        // ⟨x s⟩
        for a in 0..n {
            let row = map.x(l, a);
            asm.add(row, map.s(l), a_hat[a]);
            for c in 0..n {
                asm.add(row, map.x(l, c), a_mat[(a, c)]);
            }
            asm.add(row, map.x(l, a), -k);
            if let Some(p) = pred {
                asm.add(row, map.x(p, a), k);
            }
            if let Some(p_i) = entry_prob {
                for &(e, k_e) in &exits {
                    asm.first_moment_image(row, a, e, p_i * k_e, timer);
                }
            }
            for fam in &model.memoryless_resets {
                asm.first_moment_image(row, a, l, fam.rate, &fam.reset);
                asm.add(row, map.x(l, a), -fam.rate);
            }
        }

        // ⟨x xᵀ s⟩
        for a in 0..n {
            for b in a..n {
                let row = map.xx(l, a, b);
                for c in 0..n {
                    asm.add(row, map.xx(l, c, b), a_mat[(a, c)]);
                    asm.add(row, map.xx(l, a, c), a_mat[(b, c)]);
                }
                asm.add(row, map.x(l, b), a_hat[a]);
                asm.add(row, map.x(l, a), a_hat[b]);
                asm.add(row, row, -k);
                if let Some(p) = pred {
                    asm.add(row, map.xx(p, a, b), k);
                }
                if let Some(p_i) = entry_prob {
                    for &(e, k_e) in &exits {
                        asm.second_moment_image(row, (a, b), e, p_i * k_e, timer);
                    }
                }
                for fam in &model.memoryless_resets {
                    asm.second_moment_image(row, (a, b), l, fam.rate, &fam.reset);
                    asm.add(row, row, -fam.rate);
                }
            }
        }
    }

    let generator = asm.gen;
    Ok(AugmentedMomentSystem {
        offset: DVector::zeros(len),
        generator,
        index_map: map,
    })
}

impl AugmentedMomentSystem {
    pub fn len(&self) -> usize {
        self.index_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `a₁ + A₁ μ`.
    pub fn rhs(&self, mu: &DVector<f64>) -> DVector<f64> {
        &self.generator * mu + &self.offset
    }

    /// Largest absolute column sum of the stage-mean block; zero when
    /// probability is conserved.
    pub fn conservation_defect(&self) -> f64 {
        let m = self.index_map.stage_count();
        let mut worst: f64 = 0.0;
        for col in 0..self.len() {
            let sum: f64 = (0..m).map(|r| self.generator[(r, col)]).sum();
            worst = worst.max(sum.abs());
        }
        let offset_sum: f64 = (0..m).map(|r| self.offset[r]).sum();
        worst.max(offset_sum.abs())
    }

    /// Initial condition for a deterministic `x₀` with an event at `t = 0`:
    /// stage `(i, 1)` holds probability `pᵢ`.
    pub fn initial_moments(
        &self,
        mix: &PhaseTypeMixture,
        x0: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let map = &self.index_map;
        if x0.len() != map.dim() {
            return Err(TtshsError::DimensionMismatch(format!(
                "initial state has length {}, system expects {}",
                x0.len(),
                map.dim()
            )));
        }
        if mix.stage_count() != map.stage_count() {
            return Err(TtshsError::DimensionMismatch(
                "mixture does not match the system's stage layout".into(),
            ));
        }
        let mut mu = DVector::zeros(map.len());
        for (i, b) in mix.branches.iter().enumerate() {
            let l = map.stage_position(Stage {
                branch: i,
                stage: 0,
            });
            mu[map.s(l)] = b.probability;
            for a in 0..map.dim() {
                mu[map.x(l, a)] = b.probability * x0[a];
                for c in a..map.dim() {
                    mu[map.xx(l, a, c)] = b.probability * x0[a] * x0[c];
                }
            }
        }
        Ok(mu)
    }
}

/// Integrates the moment system on `t_grid` starting from `mu0` at `t = 0`.
pub fn integrate_moments(
    system: &AugmentedMomentSystem,
    mu0: &DVector<f64>,
    t_grid: &[f64],
) -> Result<Vec<(f64, DVector<f64>)>> {
    integrate_moments_with(system, mu0, t_grid, OdeTolerances::default())
}

pub fn integrate_moments_with(
    system: &AugmentedMomentSystem,
    mu0: &DVector<f64>,
    t_grid: &[f64],
    tol: OdeTolerances,
) -> Result<Vec<(f64, DVector<f64>)>> {
    let ys = ode::integrate_affine(&system.offset, &system.generator, 0.0, mu0, t_grid, tol)?;
    Ok(t_grid.iter().copied().zip(ys).collect())
}

/// Stationary `μ`: one stage-mean row is swapped for `Σ⟨s⟩ = 1`, the system is
/// solved by LU and the unmodified residual is checked.
pub fn steady_state_moments(system: &AugmentedMomentSystem) -> Result<DVector<f64>> {
    let len = system.len();
    let m = system.index_map.stage_count();
    ensure_stable(system)?;

    let mut lhs = system.generator.clone();
    let mut rhs = -system.offset.clone();
    for c in 0..len {
        lhs[(0, c)] = if c < m { 1.0 } else { 0.0 };
    }
    rhs[0] = 1.0;
    let mu = lhs.lu().solve(&rhs).ok_or_else(|| {
        TtshsError::SingularSystem("constrained steady-state solve is rank-deficient".into())
    })?;

    let residual = linalg::max_abs_vec(&system.rhs(&mu));
    let scale = 1.0 + linalg::inf_norm(&system.generator) * linalg::max_abs_vec(&mu);
    if !residual.is_finite() || residual > 1e-10 * scale {
        return Err(TtshsError::SingularSystem(format!(
            "steady-state residual {residual:.3e} exceeds tolerance"
        )));
    }
    Ok(mu)
}

/// Every eigenvalue of `A₁` except the conserved direction must be stable.
fn ensure_stable(system: &AugmentedMomentSystem) -> Result<()> {
    let eig = system.generator.complex_eigenvalues();
    let mut near_zero = 0usize;
    let mut worst = f64::NEG_INFINITY;
    for z in eig.iter() {
        if z.re > -linalg::HURWITZ_TOL {
            if z.norm() < 1e-8 * (1.0 + linalg::inf_norm(&system.generator)) {
                near_zero += 1;
            } else {
                worst = worst.max(z.re);
            }
        }
    }
    if near_zero > 1 || worst > -linalg::HURWITZ_TOL && worst.is_finite() {
        return Err(TtshsError::SingularSystem(format!(
            "moment dynamics are not stable (unstable eigenvalue real part {worst:.3e}, {near_zero} near-zero eigenvalues)"
        )));
    }
    Ok(())
}

/// Marginal `⟨x⟩ = Σ ⟨x s⟩`, `⟨x xᵀ⟩ = Σ ⟨x xᵀ s⟩`.
pub fn marginal_moments(
    system: &AugmentedMomentSystem,
    time: f64,
    mu: &DVector<f64>,
) -> Result<MomentState> {
    let map = &system.index_map;
    if mu.len() != map.len() {
        return Err(TtshsError::DimensionMismatch(format!(
            "moment vector has length {}, system expects {}",
            mu.len(),
            map.len()
        )));
    }
    let n = map.dim();
    let mut mean = DVector::zeros(n);
    let mut second = DMatrix::zeros(n, n);
    for l in 0..map.stage_count() {
        for a in 0..n {
            mean[a] += mu[map.x(l, a)];
            for b in 0..n {
                second[(a, b)] += mu[map.xx(l, a, b)];
            }
        }
    }
    Ok(MomentState {
        time,
        mean,
        second_moment: linalg::sym(&second),
    })
}

/// Stage occupancy probabilities `⟨s_ij⟩` in layout order.
pub fn stage_occupancy(system: &AugmentedMomentSystem, mu: &DVector<f64>) -> DVector<f64> {
    let m = system.index_map.stage_count();
    DVector::from_fn(m, |l, _| mu[system.index_map.s(l)])
}

/// Marginal moment trajectory for a phase-type model on `t_grid`.
pub fn transient_moments(model: &TtshsModel, t_grid: &[f64]) -> Result<Vec<MomentState>> {
    let system = build_augmented_system(model)?;
    let mix = model
        .timer_reset
        .timing
        .as_phase_type()
        .ok_or(TtshsError::TimingNotPhaseType)?;
    let mu0 = system.initial_moments(mix, &model.initial_state)?;
    integrate_moments(&system, &mu0, t_grid)?
        .into_iter()
        .map(|(t, mu)| marginal_moments(&system, t, &mu))
        .collect()
}

/// Stationary marginal moments for a phase-type model. Requires a Hurwitz
/// drift matrix.
pub fn steady_state(model: &TtshsModel) -> Result<MomentState> {
    let system = build_augmented_system(model)?;
    linalg::ensure_hurwitz(&model.dynamics.drift_matrix)?;
    let mu = steady_state_moments(&system)?;
    marginal_moments(&system, f64::INFINITY, &mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine_renewal;
    use crate::model::{LinearDynamics, TimerResetFamily, TimingLaw};
    use crate::phase_type::ErlangBranch;

    fn scalar_model(a: f64, ahat: f64, reset: ResetMap, mix: PhaseTypeMixture) -> TtshsModel {
        TtshsModel {
            dynamics: LinearDynamics::scalar(ahat, a),
            timer_reset: TimerResetFamily {
                reset,
                timing: TimingLaw::PhaseType(mix),
            },
            memoryless_resets: vec![],
            initial_state: DVector::zeros(1),
        }
    }

    fn scalar_reset(j: f64, r: f64, q: f64, d: f64, e: f64) -> ResetMap {
        let m = |v| DMatrix::from_element(1, 1, v);
        ResetMap {
            mean_gain: m(j),
            mean_offset: DVector::from_element(1, r),
            cov_quadratic: m(q),
            cov_linear: m(d),
            cov_constant: m(e),
        }
    }

    fn mixture() -> PhaseTypeMixture {
        PhaseTypeMixture::new(vec![
            ErlangBranch::new(0.3, 2, 1.5),
            ErlangBranch::new(0.7, 3, 2.0),
        ])
        .unwrap()
    }

    #[test]
    fn index_map_is_bijective() {
        for n in 1..4 {
            let map = MomentIndexMap::new(&mixture(), n);
            assert_eq!(map.len(), 5 + 5 * n + 5 * n * (n + 1) / 2);
            for i in 0..map.len() {
                assert_eq!(map.index(map.label(i)), i);
            }
            for l in 0..5 {
                for a in 0..n {
                    for b in 0..n {
                        assert_eq!(map.xx(l, a, b), map.xx(l, b, a));
                    }
                }
            }
        }
    }

    #[test]
    fn erlang3_scalar_has_nine_moments() {
        let m = scalar_model(
            -1.0,
            1.0,
            ResetMap::identity(1),
            PhaseTypeMixture::erlang(3, 3.0),
        );
        assert_eq!(build_augmented_system(&m).unwrap().len(), 9);
    }

    #[test]
    fn conservation_holds() {
        let m = scalar_model(-1.0, 1.0, scalar_reset(0.5, 0.3, 0.1, 0.2, 0.4), mixture());
        let sys = build_augmented_system(&m).unwrap();
        assert!(sys.conservation_defect() < 1e-12);
        let mu0 = sys
            .initial_moments(&mixture(), &DVector::from_element(1, 2.0))
            .unwrap();
        let grid: Vec<f64> = (1..=20).map(|i| i as f64 * 0.5).collect();
        for (_, mu) in integrate_moments(&sys, &mu0, &grid).unwrap() {
            let total: f64 = stage_occupancy(&sys, &mu).iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!(stage_occupancy(&sys, &mu)
                .iter()
                .all(|&p| p > -1e-9 && p <= 1.0 + 1e-9));
        }
    }

    #[test]
    fn exponential_timing_reduces_to_jump_linear_mean() {
        // d⟨x⟩/dt = â + A⟨x⟩ + k((J − 1)⟨x⟩ + R)
        let (a, ahat, k, j, r) = (-0.7, 1.2, 2.0, 0.4, 0.5);
        let m = scalar_model(
            a,
            ahat,
            scalar_reset(j, r, 0.0, 0.0, 0.0),
            PhaseTypeMixture::exponential(k),
        );
        let sys = build_augmented_system(&m).unwrap();
        let (s, x) = (sys.index_map.s(0), sys.index_map.x(0, 0));
        assert!((sys.generator[(x, x)] - (a + k * (j - 1.0))).abs() < 1e-12);
        assert!((sys.generator[(x, s)] - (ahat + k * r)).abs() < 1e-12);
        assert_eq!(sys.generator[(s, s)], 0.0);
    }

    #[test]
    fn noise_imparting_x_rows_sum_to_plain_flow() {
        let m = scalar_model(-0.8, 2.0, ResetMap::identity(1), mixture());
        let sys = build_augmented_system(&m).unwrap();
        let map = &sys.index_map;
        // with ⟨x s⟩ = c_l and ⟨s⟩ = p_l arbitrary, Σ_l d⟨x s_l⟩/dt = â Σp + A Σc
        let mu = DVector::from_fn(sys.len(), |i, _| 0.1 + 0.37 * i as f64);
        let d = sys.rhs(&mu);
        let total: f64 = (0..5).map(|l| d[map.x(l, 0)]).sum();
        let sp: f64 = (0..5).map(|l| mu[map.s(l)]).sum();
        let sc: f64 = (0..5).map(|l| mu[map.x(l, 0)]).sum();
        assert!((total - (2.0 * sp - 0.8 * sc)).abs() < 1e-12);
    }

    #[test]
    fn reset_to_constant_steady_mean() {
        // J = 0, R = r, â = 0, A = −γ: ⟨x⟩ = k r / (γ + k)
        let (g, k, r) = (0.5, 2.0, 3.0);
        let m = scalar_model(
            -g,
            0.0,
            scalar_reset(0.0, r, 0.0, 0.0, 0.0),
            PhaseTypeMixture::exponential(k),
        );
        let st = steady_state(&m).unwrap();
        assert!((st.mean[0] - k * r / (g + k)).abs() < 1e-12);
    }

    #[test]
    fn erlang_occupancy_is_uniform() {
        let m = scalar_model(
            -1.0,
            1.0,
            scalar_reset(1.0, 0.0, 0.0, 0.5, 0.0),
            PhaseTypeMixture::erlang(4, 4.0),
        );
        let sys = build_augmented_system(&m).unwrap();
        let mu = steady_state_moments(&sys).unwrap();
        for p in stage_occupancy(&sys, &mu).iter() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn steady_state_is_fixed_point_of_integration() {
        let m = scalar_model(-1.0, 1.0, scalar_reset(0.5, 0.3, 0.1, 0.2, 0.4), mixture());
        let sys = build_augmented_system(&m).unwrap();
        let mu = steady_state_moments(&sys).unwrap();
        for (_, y) in integrate_moments(&sys, &mu, &[1.0, 5.0]).unwrap() {
            assert!(linalg::max_abs_vec(&(&y - &mu)) < 1e-8);
        }
    }

    #[test]
    fn agrees_with_renewal_engine() {
        let m = scalar_model(-1.0, 1.0, scalar_reset(1.0, 0.0, 0.0, 0.5, 0.2), mixture());
        let p = steady_state(&m).unwrap();
        let r = engine_renewal::steady_state(&m).unwrap();
        assert!((p.mean[0] - r.mean[0]).abs() < 1e-10);
        let (cp, cr) = (p.covariance()[(0, 0)], r.covariance()[(0, 0)]);
        assert!(((cp - cr) / cr).abs() < 1e-8, "{cp} vs {cr}");
    }

    #[test]
    fn transient_mean_matches_affine_solution() {
        let m = scalar_model(-1.0, 1.0, scalar_reset(1.0, 0.0, 0.0, 0.5, 0.0), mixture());
        for st in transient_moments(&m, &[0.3, std::f64::consts::LN_2, 3.0]).unwrap() {
            assert!((st.mean[0] - (1.0 - (-st.time).exp())).abs() < 1e-8);
        }
    }

    #[test]
    fn marginals_sum_stage_moments() {
        let m = scalar_model(
            -1.0,
            1.0,
            ResetMap::identity(1),
            PhaseTypeMixture::erlang(3, 3.0),
        );
        let sys = build_augmented_system(&m).unwrap();
        let map = &sys.index_map;
        let mut mu = DVector::zeros(sys.len());
        for (l, (p, x)) in [(0.2, 0.1), (0.3, 0.2), (0.5, 0.3)].into_iter().enumerate() {
            mu[map.s(l)] = p;
            mu[map.x(l, 0)] = x;
        }
        assert!((marginal_moments(&sys, 0.0, &mu).unwrap().mean[0] - 0.6).abs() < 1e-15);

        let mut mu = DVector::zeros(sys.len());
        mu[map.s(1)] = 1.0;
        mu[map.x(1, 0)] = 2.5;
        mu[map.xx(1, 0, 0)] = 7.0;
        let st = marginal_moments(&sys, 0.0, &mu).unwrap();
        assert_eq!((st.mean[0], st.second_moment[(0, 0)]), (2.5, 7.0));
    }

    #[test]
    fn renewal_timing_is_rejected() {
        let mut m = scalar_model(-1.0, 1.0, ResetMap::identity(1), mixture());
        m.timer_reset.timing =
            TimingLaw::Renewal(crate::model::RenewalLaw::Deterministic { mean: 1.0 });
        assert!(matches!(
            build_augmented_system(&m),
            Err(TtshsError::TimingNotPhaseType)
        ));
    }
}
