//! Monte Carlo of the piecewise-deterministic process.
//!
//! Between events the state follows the exact affine flow; timer intervals are
//! drawn directly from the timing law, constant-rate families from exponential
//! clocks, and post-event states from a [`ResetSampler`]. Each path owns a
//! ChaCha stream selected by `(master_seed, path_index)` and partial sums are
//! reduced in a fixed chunk order, so results do not depend on thread count.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Exp1, Geometric, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TtshsError};
use crate::linalg;
use crate::model::{LinearDynamics, ResetMap, TtshsModel};

/// Paths per reduction chunk. Part of the reproducibility contract.
pub const CHUNK_PATHS: usize = 512;

/// Projections moving the covariance by more than this fraction of its norm are counted.
pub const PROJECTION_WARN_RATIO: f64 = 1e-6;

/// Exact solution of `ẋ = â + A x` after `dt`, via the exponential of the
/// augmented matrix `[[A, â], [0, 0]]`. Works for singular `A`.
pub fn flow_propagate(dynamics: &LinearDynamics, x: &DVector<f64>, dt: f64) -> DVector<f64> {
    let n = x.len();
    if dt == 0.0 {
        return x.clone();
    }
    if n == 1 {
        let a = dynamics.drift_matrix[(0, 0)];
        let b = dynamics.drift_offset[0];
        return DVector::from_element(1, scalar_flow(a, b, x[0], dt));
    }
    let mut aug = DMatrix::<f64>::zeros(n + 1, n + 1);
    aug.view_mut((0, 0), (n, n))
        .copy_from(&(&dynamics.drift_matrix * dt));
    aug.view_mut((0, n), (n, 1))
        .copy_from(&(&dynamics.drift_offset * dt));
    let e = aug.exp();
    let phi = e.view((0, 0), (n, n));
    let shift = e.view((0, n), (n, 1));
    phi * x + shift
}

fn scalar_flow(a: f64, b: f64, x: f64, dt: f64) -> f64 {
    let z = a * dt;
    if z == 0.0 {
        return x + b * dt;
    }
    // (e^{a dt} − 1)/a written through expm1 to stay exact as a → 0
    let growth = z.exp_m1();
    x + growth * x + b * growth / a
}

/// Law of the burst added by an additive constant-rate family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum BurstSize {
    Constant {
        size: f64,
    },
    Exponential {
        mean: f64,
    },
    /// Shifted geometric on `{1, 2, …}` with the given mean (≥ 1).
    Geometric {
        mean: f64,
    },
}

impl BurstSize {
    pub fn mean(&self) -> f64 {
        match *self {
            BurstSize::Constant { size } => size,
            BurstSize::Exponential { mean } | BurstSize::Geometric { mean } => mean,
        }
    }

    pub fn second_moment(&self) -> f64 {
        match *self {
            BurstSize::Constant { size } => size * size,
            BurstSize::Exponential { mean } => 2.0 * mean * mean,
            BurstSize::Geometric { mean } => {
                let p = 1.0 / mean;
                (2.0 - p) / (p * p)
            }
        }
    }

    pub fn variance(&self) -> f64 {
        self.second_moment() - self.mean() * self.mean()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            BurstSize::Constant { size } => size.is_finite() && size >= 0.0,
            BurstSize::Exponential { mean } => mean.is_finite() && mean > 0.0,
            BurstSize::Geometric { mean } => mean.is_finite() && mean >= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(TtshsError::InvalidArgument(format!(
                "invalid burst size law {self:?}"
            )))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            BurstSize::Constant { size } => size,
            BurstSize::Exponential { mean } => {
                let e: f64 = rng.sample(Exp1);
                mean * e
            }
            BurstSize::Geometric { mean } => {
                if mean == 1.0 {
                    return 1.0;
                }
                let failures = Geometric::new(1.0 / mean)
                    .expect("validated geometric mean")
                    .sample(rng);
                (failures + 1) as f64
            }
        }
    }
}

/// How a post-event state is drawn given its first two conditional moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ResetSampler {
    /// Normal law with mean `J x + R` and the PSD-projected conditional covariance.
    Gaussian,
    /// `x₊ = J x + R`; requires a zero covariance specification.
    Deterministic,
    /// Binomial partitioning for scalar `x₊` with mean `x` and variance `β x`,
    /// where `β` is the family's `cov_linear`. The `⌊x/β⌋` whole molecules are
    /// split binomially between two halves; the fractional remainder `f` goes
    /// along with probability ½, either whole (`2βf·Bernoulli(½)`) or as a
    /// lattice unit (`2β·Bernoulli(f/2)`), which keeps the variance at exactly `βx`.
    ScaledBinomial,
    /// Scalar additive burst `x₊ = x + B`; the family must have `J = 1`,
    /// `R = ⟨B⟩`, `E = Var(B)`, `Q = D = 0`.
    Burst(BurstSize),
}

impl ResetSampler {
    /// Fails with `SAMPLER_MISMATCH` when the sampler cannot realise `reset`.
    pub fn check_compatible(&self, reset: &ResetMap) -> Result<()> {
        let n = reset.mean_offset.len();
        let mismatch = |why: &str| Err(TtshsError::SamplerMismatch(format!("{self:?}: {why}")));
        match self {
            ResetSampler::Gaussian => Ok(()),
            ResetSampler::Deterministic => {
                if reset.has_zero_covariance() {
                    Ok(())
                } else {
                    mismatch("requires Q = D = E = 0")
                }
            }
            ResetSampler::ScaledBinomial => {
                if n != 1 {
                    return mismatch("scalar state only");
                }
                if reset.mean_gain[(0, 0)] != 1.0
                    || reset.mean_offset[0] != 0.0
                    || reset.cov_quadratic[(0, 0)] != 0.0
                    || reset.cov_constant[(0, 0)] != 0.0
                {
                    return mismatch("requires J = 1, R = 0, Q = 0, E = 0");
                }
                if !reset.cov_linear[(0, 0)].is_finite() || reset.cov_linear[(0, 0)] <= 0.0 {
                    return mismatch("requires D = β > 0");
                }
                Ok(())
            }
            ResetSampler::Burst(law) => {
                law.validate()?;
                if n != 1 {
                    return mismatch("scalar state only");
                }
                let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + b.abs());
                if reset.mean_gain[(0, 0)] != 1.0
                    || reset.cov_quadratic[(0, 0)] != 0.0
                    || reset.cov_linear[(0, 0)] != 0.0
                {
                    return mismatch("requires J = 1, Q = D = 0");
                }
                if !close(reset.mean_offset[0], law.mean())
                    || !close(reset.cov_constant[(0, 0)], law.variance())
                {
                    return mismatch("R and E must equal the burst mean and variance");
                }
                Ok(())
            }
        }
    }
}

/// One sampler per reset family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSet {
    pub timer: ResetSampler,
    pub memoryless: Vec<ResetSampler>,
}

impl SamplerSet {
    /// The same sampler for the timer family; Gaussian for constant-rate families.
    pub fn for_model(model: &TtshsModel, timer: ResetSampler) -> Self {
        Self {
            timer,
            memoryless: vec![ResetSampler::Gaussian; model.memoryless_resets.len()],
        }
    }

    pub fn gaussian(model: &TtshsModel) -> Self {
        Self::for_model(model, ResetSampler::Gaussian)
    }

    pub fn check(&self, model: &TtshsModel) -> Result<()> {
        if self.memoryless.len() != model.memoryless_resets.len() {
            return Err(TtshsError::SamplerMismatch(format!(
                "{} samplers for {} constant-rate families",
                self.memoryless.len(),
                model.memoryless_resets.len()
            )));
        }
        self.timer.check_compatible(&model.timer_reset.reset)?;
        for (s, f) in self.memoryless.iter().zip(&model.memoryless_resets) {
            s.check_compatible(&f.reset)?;
        }
        Ok(())
    }
}

/// A drawn post-event state and the Frobenius distance of the PSD projection
/// applied to its conditional covariance (zero when none was needed).
#[derive(Debug, Clone, PartialEq)]
pub struct ResetDraw {
    pub state: DVector<f64>,
    pub projection_distance: f64,
    pub covariance_norm: f64,
}

/// Draws `x₊` given the pre-event state `x`.
pub fn sample_reset<R: Rng + ?Sized>(
    reset: &ResetMap,
    sampler: &ResetSampler,
    x: &DVector<f64>,
    rng: &mut R,
) -> Result<ResetDraw> {
    sampler.check_compatible(reset)?;
    draw(reset, sampler, x, rng)
}

fn draw<R: Rng + ?Sized>(
    reset: &ResetMap,
    sampler: &ResetSampler,
    x: &DVector<f64>,
    rng: &mut R,
) -> Result<ResetDraw> {
    match sampler {
        ResetSampler::Deterministic => Ok(ResetDraw {
            state: reset.conditional_mean(x),
            projection_distance: 0.0,
            covariance_norm: 0.0,
        }),
        ResetSampler::Gaussian => {
            let mean = reset.conditional_mean(x);
            if x.len() == 1 {
                let var = reset.cov_quadratic[(0, 0)] * x[0] * x[0]
                    + reset.cov_linear[(0, 0)] * x[0]
                    + reset.cov_constant[(0, 0)];
                let z: f64 = rng.sample(StandardNormal);
                return Ok(ResetDraw {
                    state: DVector::from_element(1, mean[0] + var.max(0.0).sqrt() * z),
                    projection_distance: (-var).max(0.0),
                    covariance_norm: var.abs(),
                });
            }
            let cov = reset.conditional_covariance(x);
            let (proj, dist) = linalg::project_psd(&cov);
            let factor = linalg::psd_sqrt(&proj);
            let z = DVector::from_fn(x.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
            Ok(ResetDraw {
                state: mean + factor * z,
                projection_distance: dist,
                covariance_norm: cov.norm(),
            })
        }
        ResetSampler::ScaledBinomial => {
            let beta = reset.cov_linear[(0, 0)];
            let v = x[0];
            if v.is_nan() || v < 0.0 {
                return Err(TtshsError::SamplerMismatch(format!(
                    "binomial partitioning needs a nonnegative state, got {v}"
                )));
            }
            let units = v / beta;
            let whole = units.floor();
            let frac = units - whole;
            let kept = if whole > 0.0 {
                Binomial::new(whole as u64, 0.5)
                    .expect("valid binomial parameters")
                    .sample(rng) as f64
            } else {
                0.0
            };
            let remnant = if frac > 0.0 {
                if rng.random::<bool>() {
                    if rng.random::<bool>() {
                        frac
                    } else {
                        0.0
                    }
                } else if rng.random::<f64>() < 0.5 * frac {
                    1.0
                } else {
                    0.0
                }
            } else {
                0.0
            };
            Ok(ResetDraw {
                state: DVector::from_element(1, 2.0 * beta * (kept + remnant)),
                projection_distance: 0.0,
                covariance_norm: beta * v,
            })
        }
        ResetSampler::Burst(law) => Ok(ResetDraw {
            state: DVector::from_element(1, x[0] + law.sample(rng)),
            projection_distance: 0.0,
            covariance_norm: law.variance(),
        }),
    }
}

/// The random stream for one path.
pub fn path_rng(master_seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(path_index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Timer,
    Memoryless(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub kind: EventKind,
    pub before: DVector<f64>,
    pub after: DVector<f64>,
}

struct PathContext<'a> {
    model: &'a TtshsModel,
    samplers: &'a SamplerSet,
}

/// Running state of one sample path.
struct Path {
    t: f64,
    x: DVector<f64>,
    last_timer_event: f64,
    next_timer: f64,
    next_memoryless: Vec<f64>,
    projection_warnings: u64,
}

impl Path {
    fn start<R: Rng>(ctx: &PathContext<'_>, rng: &mut R) -> Self {
        let model = ctx.model;
        let next_timer = model.timer_reset.timing.sample(rng);
        let next_memoryless = model
            .memoryless_resets
            .iter()
            .map(|f| exp_clock(rng, f.rate))
            .collect();
        Self {
            t: 0.0,
            x: model.initial_state.clone(),
            last_timer_event: 0.0,
            next_timer,
            next_memoryless,
            projection_warnings: 0,
        }
    }

    fn timer_age(&self) -> f64 {
        self.t - self.last_timer_event
    }

    /// Advances to `target`, applying every event strictly before it.
    fn advance<R: Rng>(
        &mut self,
        ctx: &PathContext<'_>,
        target: f64,
        rng: &mut R,
        mut log: Option<&mut Vec<EventRecord>>,
    ) -> Result<()> {
        let model = ctx.model;
        loop {
            let mut next = self.next_timer;
            let mut kind = EventKind::Timer;
            for (i, &t) in self.next_memoryless.iter().enumerate() {
                if t < next {
                    next = t;
                    kind = EventKind::Memoryless(i);
                }
            }
            if next >= target {
                self.x = flow_propagate(&model.dynamics, &self.x, target - self.t);
                self.t = target;
                return Ok(());
            }
            self.x = flow_propagate(&model.dynamics, &self.x, next - self.t);
            self.t = next;
            let (reset, sampler) = match kind {
                EventKind::Timer => (&model.timer_reset.reset, &ctx.samplers.timer),
                EventKind::Memoryless(i) => (
                    &model.memoryless_resets[i].reset,
                    &ctx.samplers.memoryless[i],
                ),
            };
            let drawn = draw(reset, sampler, &self.x, rng)?;
            if drawn.projection_distance > PROJECTION_WARN_RATIO * drawn.covariance_norm {
                self.projection_warnings += 1;
            }
            if let Some(log) = log.as_deref_mut() {
                log.push(EventRecord {
                    time: self.t,
                    kind,
                    before: self.x.clone(),
                    after: drawn.state.clone(),
                });
            }
            self.x = drawn.state;
            match kind {
                EventKind::Timer => {
                    self.last_timer_event = self.t;
                    self.next_timer = self.t + model.timer_reset.timing.sample(rng);
                }
                EventKind::Memoryless(i) => {
                    self.next_memoryless[i] =
                        self.t + exp_clock(rng, model.memoryless_resets[i].rate);
                }
            }
        }
    }
}

fn exp_clock<R: Rng>(rng: &mut R, rate: f64) -> f64 {
    let e: f64 = rng.sample(Exp1);
    e / rate
}

fn prepare(model: &TtshsModel, samplers: &SamplerSet) -> Result<()> {
    model.ensure_valid(false)?;
    samplers.check(model)
}

fn with_threads<T: Send>(threads: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(job()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| TtshsError::InvalidArgument(format!("thread pool: {e}")))?;
            Ok(pool.install(job))
        }
    }
}

fn chunk_ranges(paths: usize) -> Vec<(usize, usize)> {
    (0..paths)
        .step_by(CHUNK_PATHS)
        .map(|start| (start, (start + CHUNK_PATHS).min(paths)))
        .collect()
}

/// Per-time ensemble statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSummary {
    pub times: Vec<f64>,
    pub mean: Vec<DVector<f64>>,
    pub second_moment: Vec<DMatrix<f64>>,
    pub covariance: Vec<DMatrix<f64>>,
    pub se_mean: Vec<DVector<f64>>,
    pub se_covariance: Vec<DMatrix<f64>>,
    pub paths: usize,
    pub master_seed: u64,
    pub projection_warnings: u64,
}

/// Shifted power sums for one grid time: with `u = x − shift`,
/// `Σu`, `Σu_a u_b`, `Σu_a² u_b`, `Σu_a u_b²`, `Σu_a² u_b²`.
#[derive(Debug, Clone)]
struct PowerSums {
    s1: DVector<f64>,
    s2: DMatrix<f64>,
    s21: DMatrix<f64>,
    s22: DMatrix<f64>,
}

impl PowerSums {
    fn zeros(n: usize) -> Self {
        Self {
            s1: DVector::zeros(n),
            s2: DMatrix::zeros(n, n),
            s21: DMatrix::zeros(n, n),
            s22: DMatrix::zeros(n, n),
        }
    }

    fn push(&mut self, u: &DVector<f64>) {
        let n = u.len();
        self.s1 += u;
        for a in 0..n {
            for b in 0..n {
                let ua = u[a];
                let ub = u[b];
                self.s2[(a, b)] += ua * ub;
                self.s21[(a, b)] += ua * ua * ub;
                self.s22[(a, b)] += ua * ua * ub * ub;
            }
        }
    }

    fn merge(&mut self, other: &PowerSums) {
        self.s1 += &other.s1;
        self.s2 += &other.s2;
        self.s21 += &other.s21;
        self.s22 += &other.s22;
    }
}

struct ChunkResult {
    sums: Vec<PowerSums>,
    warnings: u64,
}

/// Simulates `paths` independent paths and summarises them at each grid time.
pub fn run_ensemble(
    model: &TtshsModel,
    samplers: &SamplerSet,
    paths: usize,
    t_grid: &[f64],
    master_seed: u64,
    threads: Option<usize>,
) -> Result<EnsembleSummary> {
    prepare(model, samplers)?;
    if paths < 2 {
        return Err(TtshsError::InvalidArgument(
            "at least two paths are required".into(),
        ));
    }
    check_grid(t_grid)?;
    let n = model.dim();
    let ctx = PathContext { model, samplers };

    let simulate_path = |index: usize| -> Result<(Vec<DVector<f64>>, u64)> {
        let mut rng = path_rng(master_seed, index as u64);
        let mut path = Path::start(&ctx, &mut rng);
        let mut states = Vec::with_capacity(t_grid.len());
        for &t in t_grid {
            path.advance(&ctx, t, &mut rng, None)?;
            states.push(path.x.clone());
        }
        Ok((states, path.projection_warnings))
    };

    // shift: the mean of the first chunk at each grid time
    let ranges = chunk_ranges(paths);
    let first: Vec<(Vec<DVector<f64>>, u64)> = (ranges[0].0..ranges[0].1)
        .map(simulate_path)
        .collect::<Result<_>>()?;
    let shift: Vec<DVector<f64>> = (0..t_grid.len())
        .map(|g| {
            let mut s = DVector::zeros(n);
            for (states, _) in &first {
                s += &states[g];
            }
            s / first.len() as f64
        })
        .collect();

    let accumulate = |records: &[(Vec<DVector<f64>>, u64)]| -> ChunkResult {
        let mut sums: Vec<PowerSums> = (0..t_grid.len()).map(|_| PowerSums::zeros(n)).collect();
        let mut warnings = 0;
        for (states, w) in records {
            warnings += w;
            for (g, x) in states.iter().enumerate() {
                sums[g].push(&(x - &shift[g]));
            }
        }
        ChunkResult { sums, warnings }
    };

    let rest = &ranges[1..];
    let chunks: Vec<ChunkResult> = with_threads(threads, || {
        rest.par_iter()
            .map(|&(start, end)| {
                let records: Vec<_> = (start..end).map(simulate_path).collect::<Result<_>>()?;
                Ok(accumulate(&records))
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let mut total = accumulate(&first);
    for c in &chunks {
        for (acc, s) in total.sums.iter_mut().zip(&c.sums) {
            acc.merge(s);
        }
        total.warnings += c.warnings;
    }

    let count = paths as f64;
    let mut summary = EnsembleSummary {
        times: t_grid.to_vec(),
        mean: Vec::new(),
        second_moment: Vec::new(),
        covariance: Vec::new(),
        se_mean: Vec::new(),
        se_covariance: Vec::new(),
        paths,
        master_seed,
        projection_warnings: total.warnings,
    };
    for (g, sums) in total.sums.iter().enumerate() {
        let du = &sums.s1 / count;
        let mean = &shift[g] + &du;
        let eu2 = &sums.s2 / count;
        // covariance with the unbiased n−1 normalisation
        let cov_biased = &eu2 - &du * du.transpose();
        let cov = linalg::sym(&(&cov_biased * (count / (count - 1.0))));
        let se_mean = DVector::from_fn(n, |a, _| (cov[(a, a)].max(0.0) / count).sqrt());
        let se_cov = DMatrix::from_fn(n, n, |a, b| {
            // Var((u_a − ū_a)(u_b − ū_b)) from the shifted power sums
            let (al, be) = (du[a], du[b]);
            let e = |m: &DMatrix<f64>| m[(a, b)] / count;
            let e22 = e(&sums.s22);
            let e21 = sums.s21[(a, b)] / count; // E[u_a² u_b]
            let e12 = sums.s21[(b, a)] / count; // E[u_b² u_a]
            let eab = eu2[(a, b)];
            let eaa = eu2[(a, a)];
            let ebb = eu2[(b, b)];
            let fourth = e22 - 2.0 * be * e21 - 2.0 * al * e12
                + be * be * eaa
                + 4.0 * al * be * eab
                + al * al * ebb
                - 3.0 * al * al * be * be;
            let var = fourth - cov_biased[(a, b)] * cov_biased[(a, b)];
            (var.max(0.0) / count).sqrt()
        });
        summary
            .second_moment
            .push(linalg::sym(&(&cov_biased + &mean * mean.transpose())));
        summary.mean.push(mean);
        summary.covariance.push(cov);
        summary.se_mean.push(se_mean);
        summary.se_covariance.push(linalg::sym(&se_cov));
    }
    Ok(summary)
}

fn check_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.is_empty() {
        return Err(TtshsError::InvalidArgument("time grid is empty".into()));
    }
    let mut prev = 0.0;
    for &t in t_grid {
        if !t.is_finite() || t < prev {
            return Err(TtshsError::InvalidArgument(
                "time grid must be non-decreasing and start at t >= 0".into(),
            ));
        }
        prev = t;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyOptions {
    /// Overrides `20·max(⟨T⟩, 1/|Re λ_max(A)|)`.
    pub burn_in: Option<f64>,
    /// Equally spaced samples per path over `(burn_in, 2·burn_in]`.
    pub samples_per_path: usize,
}

impl Default for SteadyOptions {
    fn default() -> Self {
        Self {
            burn_in: None,
            samples_per_path: 200,
        }
    }
}

/// Stationary moments estimated from time averages over the second half of
/// each path, then across paths.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyEstimate {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub se_mean: DVector<f64>,
    pub se_covariance: DMatrix<f64>,
    pub paths: usize,
    pub burn_in: f64,
    pub horizon: f64,
    pub master_seed: u64,
    pub projection_warnings: u64,
}

impl SteadyEstimate {
    /// Per-component CV² and its delta-method standard error.
    pub fn cv2(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.mean.len();
        let cv2 = DVector::from_fn(n, |a, _| self.covariance[(a, a)] / self.mean[a].powi(2));
        // relative errors added in quadrature; the mean and variance estimates
        // are treated as independent, which slightly overstates the error
        let se = DVector::from_fn(n, |a, _| {
            let v = self.covariance[(a, a)];
            let m = self.mean[a];
            let rel_v = self.se_covariance[(a, a)] / v;
            let rel_m = 2.0 * self.se_mean[a] / m.abs();
            cv2[a].abs() * (rel_v * rel_v + rel_m * rel_m).sqrt()
        });
        (cv2, se)
    }
}

/// Default burn-in `20·max(⟨T⟩, 1/|Re λ_max|)` using the drift averaged over
/// the constant-rate families.
pub fn default_burn_in(model: &TtshsModel) -> Result<f64> {
    let (_, matrix) = model.effective_mean_drift();
    let abscissa = linalg::spectral_abscissa(&matrix)
        .max(linalg::spectral_abscissa(&model.dynamics.drift_matrix));
    if abscissa >= -linalg::HURWITZ_TOL {
        return Err(TtshsError::InvalidArgument(
            "drift is not Hurwitz; supply an explicit burn-in".into(),
        ));
    }
    Ok(20.0 * model.timer_reset.timing.mean().max(1.0 / abscissa.abs()))
}

pub fn steady_state_estimate(
    model: &TtshsModel,
    samplers: &SamplerSet,
    paths: usize,
    master_seed: u64,
    options: SteadyOptions,
    threads: Option<usize>,
) -> Result<SteadyEstimate> {
    prepare(model, samplers)?;
    if paths < 2 {
        return Err(TtshsError::InvalidArgument(
            "at least two paths are required".into(),
        ));
    }
    let burn_in = match options.burn_in {
        Some(b) => b,
        None => default_burn_in(model)?,
    };
    let k = options.samples_per_path.max(1);
    let horizon = 2.0 * burn_in;
    let n = model.dim();
    let ctx = PathContext { model, samplers };

    let simulate_path = |index: usize| -> Result<(DVector<f64>, DMatrix<f64>, u64)> {
        let mut rng = path_rng(master_seed, index as u64);
        let mut path = Path::start(&ctx, &mut rng);
        let mut sx = DVector::zeros(n);
        let mut sxx = DMatrix::zeros(n, n);
        for s in 1..=k {
            let t = burn_in + burn_in * s as f64 / k as f64;
            path.advance(&ctx, t, &mut rng, None)?;
            sx += &path.x;
            sxx += &path.x * path.x.transpose();
        }
        Ok((sx / k as f64, sxx / k as f64, path.projection_warnings))
    };

    let ranges = chunk_ranges(paths);
    let per_path: Vec<(DVector<f64>, DMatrix<f64>, u64)> = with_threads(threads, || {
        ranges
            .par_iter()
            .map(|&(start, end)| (start..end).map(simulate_path).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()
    })??
    .into_iter()
    .flatten()
    .collect();

    let count = paths as f64;
    let mut mean = DVector::zeros(n);
    let mut second = DMatrix::zeros(n, n);
    let mut warnings = 0;
    for (x, xx, w) in &per_path {
        mean += x;
        second += xx;
        warnings += w;
    }
    mean /= count;
    second /= count;
    let covariance = linalg::sym(&(&second - &mean * mean.transpose()));

    // second pass: sample variances of the per-path averages and of the
    // covariance influence values S_ab − m_a X_b − m_b X_a
    let mut var_mean = DVector::<f64>::zeros(n);
    let mut var_cov = DMatrix::<f64>::zeros(n, n);
    for (x, xx, _) in &per_path {
        let dx = x - &mean;
        for a in 0..n {
            var_mean[a] += dx[a] * dx[a];
            for b in 0..n {
                let psi = (xx[(a, b)] - second[(a, b)]) - mean[a] * dx[b] - mean[b] * dx[a];
                var_cov[(a, b)] += psi * psi;
            }
        }
    }
    let denom = count - 1.0;
    let se_mean = var_mean.map(|v| (v / denom / count).sqrt());
    let se_covariance = var_cov.map(|v| (v / denom / count).sqrt());

    Ok(SteadyEstimate {
        mean,
        covariance,
        se_mean,
        se_covariance,
        paths,
        burn_in,
        horizon,
        master_seed,
        projection_warnings: warnings,
    })
}

/// Conditional mean of `x` within one timer-age bin.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeBin {
    pub tau_lo: f64,
    pub tau_hi: f64,
    pub center: f64,
    pub count: usize,
    pub mean: DVector<f64>,
    /// Half-width of the 95% normal confidence interval.
    pub ci_half_width: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slope {
    pub value: f64,
    pub se: f64,
    pub ci_half_width: f64,
}

impl Slope {
    pub fn ci_contains(&self, v: f64) -> bool {
        (self.value - v).abs() <= self.ci_half_width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimerConditionalStats {
    pub t_probe: f64,
    pub paths: usize,
    pub global_mean: DVector<f64>,
    pub bins: Vec<AgeBin>,
    /// Weighted least-squares slope of the bin means against bin centres,
    /// per component; `None` with fewer than two bins.
    pub slopes: Option<Vec<Slope>>,
}

pub const Z95: f64 = 1.959963984540054;

/// Bins the states at `t_probe` by the age of the timer and reports the
/// conditional means and their trend in the age.
pub fn timer_conditional_stats(
    model: &TtshsModel,
    samplers: &SamplerSet,
    paths: usize,
    t_probe: f64,
    bins: usize,
    master_seed: u64,
    threads: Option<usize>,
) -> Result<TimerConditionalStats> {
    prepare(model, samplers)?;
    if bins == 0 || paths < 2 {
        return Err(TtshsError::InvalidArgument(
            "need at least one bin and two paths".into(),
        ));
    }
    if !t_probe.is_finite() || t_probe <= 0.0 {
        return Err(TtshsError::InvalidArgument(
            "t_probe must be positive".into(),
        ));
    }
    let n = model.dim();
    let ctx = PathContext { model, samplers };
    let simulate_path = |index: usize| -> Result<(f64, DVector<f64>)> {
        let mut rng = path_rng(master_seed, index as u64);
        let mut path = Path::start(&ctx, &mut rng);
        path.advance(&ctx, t_probe, &mut rng, None)?;
        Ok((path.timer_age(), path.x))
    };
    let ranges = chunk_ranges(paths);
    let samples: Vec<(f64, DVector<f64>)> = with_threads(threads, || {
        ranges
            .par_iter()
            .map(|&(start, end)| (start..end).map(simulate_path).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()
    })??
    .into_iter()
    .flatten()
    .collect();

    let all: Vec<usize> = (0..samples.len()).collect();
    let global_mean = group_mean(&samples, &all, n);

    let tau_max = samples.iter().map(|s| s.0).fold(0.0, f64::max);
    let width = if tau_max > 0.0 {
        tau_max / bins as f64
    } else {
        1.0
    };
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bins];
    for (i, (tau, _)) in samples.iter().enumerate() {
        let b = ((tau / width) as usize).min(bins - 1);
        members[b].push(i);
    }
    // merge bins holding fewer than two samples into their right neighbour
    // (the last one into its left neighbour)
    let mut edges: Vec<(f64, f64, Vec<usize>)> = Vec::new();
    let mut pending: Option<(f64, Vec<usize>)> = None;
    for (b, m) in members.into_iter().enumerate() {
        let lo = b as f64 * width;
        let hi = if b + 1 == bins {
            tau_max.max(lo)
        } else {
            lo + width
        };
        let (start, mut acc) = pending.take().unwrap_or((lo, Vec::new()));
        acc.extend(m);
        if acc.len() >= 2 {
            edges.push((start, hi, acc));
        } else {
            pending = Some((start, acc));
        }
    }
    if let Some((_, rest)) = pending {
        match edges.last_mut() {
            Some(last) => {
                last.1 = tau_max;
                last.2.extend(rest);
            }
            None => edges.push((0.0, tau_max, rest)),
        }
    }

    let bins_out: Vec<AgeBin> = if edges.len() == 1 {
        // a single bin is the whole ensemble
        let (lo, hi, idx) = &edges[0];
        let ci = group_ci(&samples, idx, &global_mean, n);
        vec![AgeBin {
            tau_lo: *lo,
            tau_hi: *hi,
            center: bin_center(&samples, idx),
            count: idx.len(),
            mean: global_mean.clone(),
            ci_half_width: ci,
        }]
    } else {
        edges
            .iter()
            .map(|(lo, hi, idx)| {
                let mean = group_mean(&samples, idx, n);
                let ci = group_ci(&samples, idx, &mean, n);
                AgeBin {
                    tau_lo: *lo,
                    tau_hi: *hi,
                    center: bin_center(&samples, idx),
                    count: idx.len(),
                    mean,
                    ci_half_width: ci,
                }
            })
            .collect()
    };

    let slopes = (bins_out.len() >= 2).then(|| (0..n).map(|a| wls_slope(&bins_out, a)).collect());

    Ok(TimerConditionalStats {
        t_probe,
        paths,
        global_mean,
        bins: bins_out,
        slopes,
    })
}

fn group_mean(samples: &[(f64, DVector<f64>)], idx: &[usize], n: usize) -> DVector<f64> {
    let mut s = DVector::zeros(n);
    for &i in idx {
        s += &samples[i].1;
    }
    s / idx.len() as f64
}

fn group_ci(
    samples: &[(f64, DVector<f64>)],
    idx: &[usize],
    mean: &DVector<f64>,
    n: usize,
) -> DVector<f64> {
    let c = idx.len() as f64;
    DVector::from_fn(n, |a, _| {
        let ss: f64 = idx
            .iter()
            .map(|&i| (samples[i].1[a] - mean[a]).powi(2))
            .sum();
        let var = if c > 1.0 { ss / (c - 1.0) } else { 0.0 };
        Z95 * (var / c).sqrt()
    })
}

/// Mean timer age of the bin's members.
fn bin_center(samples: &[(f64, DVector<f64>)], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| samples[i].0).sum::<f64>() / idx.len() as f64
}

/// WLS fit `mean_b ≈ α + slope·center_b` with weights `1/se_b²`.
fn wls_slope(bins: &[AgeBin], a: usize) -> Slope {
    let ses: Vec<f64> = bins.iter().map(|b| b.ci_half_width[a] / Z95).collect();
    let positive: Vec<f64> = ses.iter().copied().filter(|s| *s > 0.0).collect();
    let floor = if positive.is_empty() {
        1.0
    } else {
        1e-3 * positive.iter().sum::<f64>() / positive.len() as f64
    };
    let w: Vec<f64> = ses.iter().map(|s| 1.0 / s.max(floor).powi(2)).collect();
    let sw: f64 = w.iter().sum();
    let tbar = bins.iter().zip(&w).map(|(b, w)| w * b.center).sum::<f64>() / sw;
    let ybar = bins.iter().zip(&w).map(|(b, w)| w * b.mean[a]).sum::<f64>() / sw;
    let sxx: f64 = bins
        .iter()
        .zip(&w)
        .map(|(b, w)| w * (b.center - tbar).powi(2))
        .sum();
    let sxy: f64 = bins
        .iter()
        .zip(&w)
        .map(|(b, w)| w * (b.center - tbar) * (b.mean[a] - ybar))
        .sum();
    let value = sxy / sxx;
    let se = (1.0 / sxx).sqrt();
    Slope {
        value,
        se,
        ci_half_width: Z95 * se,
    }
}

/// Event log of a single path up to `t_end` (debugging aid).
pub fn event_log(
    model: &TtshsModel,
    samplers: &SamplerSet,
    master_seed: u64,
    path_index: u64,
    t_end: f64,
) -> Result<Vec<EventRecord>> {
    prepare(model, samplers)?;
    let ctx = PathContext { model, samplers };
    let mut rng = path_rng(master_seed, path_index);
    let mut path = Path::start(&ctx, &mut rng);
    let mut log = Vec::new();
    path.advance(&ctx, t_end, &mut rng, Some(&mut log))?;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TimerResetFamily, TimingLaw};
    use crate::phase_type::PhaseTypeMixture;

    fn scalar_reset(j: f64, r: f64, d: f64, e: f64) -> ResetMap {
        let m = |v| DMatrix::from_element(1, 1, v);
        ResetMap {
            mean_gain: m(j),
            mean_offset: DVector::from_element(1, r),
            cov_quadratic: m(0.0),
            cov_linear: m(d),
            cov_constant: m(e),
        }
    }

    fn reference(reset: ResetMap) -> TtshsModel {
        TtshsModel {
            dynamics: LinearDynamics::scalar(1.0, -1.0),
            timer_reset: TimerResetFamily {
                reset,
                timing: TimingLaw::PhaseType(PhaseTypeMixture::erlang(3, 3.0)),
            },
            memoryless_resets: vec![],
            initial_state: DVector::from_element(1, 1.0),
        }
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn scalar_flows() {
        let ln2 = std::f64::consts::LN_2;
        let decay = LinearDynamics::scalar(0.0, -1.0);
        assert!((flow_propagate(&decay, &v1(1.0), ln2)[0] - 0.5).abs() < 1e-15);
        let relax = LinearDynamics::scalar(1.0, -1.0);
        assert!((flow_propagate(&relax, &v1(0.0), ln2)[0] - 0.5).abs() < 1e-15);
        let drift = LinearDynamics::scalar(3.0, 0.0);
        assert_eq!(flow_propagate(&drift, &v1(1.0), 2.0)[0], 7.0);
    }

    #[test]
    fn matrix_flow_handles_singular_drift_and_semigroup() {
        let d = LinearDynamics::new(
            DVector::from_vec(vec![1.0, -0.5]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        );
        // ẋ₂ = −0.5 → x₂(t) = 1 − t/2; ẋ₁ = 1 + x₂ → x₁(t) = 2t − t²/4
        let x = flow_propagate(&d, &DVector::from_vec(vec![0.0, 1.0]), 2.0);
        assert!((x[0] - 3.0).abs() < 1e-12 && x[1].abs() < 1e-12);

        let d = LinearDynamics::new(
            DVector::from_vec(vec![0.3, 1.0]),
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.4, -0.2, -0.5]),
        );
        let x0 = DVector::from_vec(vec![2.0, -1.0]);
        let two_step = flow_propagate(&d, &flow_propagate(&d, &x0, 0.7), 1.3);
        let one_step = flow_propagate(&d, &x0, 2.0);
        assert!(linalg::max_abs_vec(&(two_step - one_step)) < 1e-12);
    }

    #[test]
    fn deterministic_reset() {
        let mut rng = path_rng(1, 0);
        let r = scalar_reset(0.5, 1.0, 0.0, 0.0);
        for _ in 0..10 {
            let d = sample_reset(&r, &ResetSampler::Deterministic, &v1(4.0), &mut rng).unwrap();
            assert_eq!(d.state[0], 3.0);
        }
        let noisy = scalar_reset(1.0, 0.0, 1.0, 0.0);
        assert!(matches!(
            sample_reset(&noisy, &ResetSampler::Deterministic, &v1(4.0), &mut rng),
            Err(TtshsError::SamplerMismatch(_))
        ));
    }

    /// Sample mean and variance of `n` draws with their standard errors.
    fn moments(draws: &[f64]) -> (f64, f64, f64, f64) {
        let n = draws.len() as f64;
        let m = draws.iter().sum::<f64>() / n;
        let m2 = draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        let m4 = draws.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
        (m, (m2 / n).sqrt(), m2, ((m4 - m2 * m2) / n).sqrt())
    }

    fn draws(reset: &ResetMap, sampler: ResetSampler, x: f64, n: usize) -> Vec<f64> {
        let mut rng = path_rng(7, 3);
        (0..n)
            .map(|_| {
                sample_reset(reset, &sampler, &v1(x), &mut rng)
                    .unwrap()
                    .state[0]
            })
            .collect()
    }

    #[test]
    fn gaussian_reset_moments() {
        let d = draws(
            &scalar_reset(1.0, 0.0, 1.0, 0.0),
            ResetSampler::Gaussian,
            10.0,
            1_000_000,
        );
        let (m, se_m, v, se_v) = moments(&d);
        assert!((m - 10.0).abs() < 3.0 * se_m, "{m}");
        assert!((v - 10.0).abs() < 3.0 * se_v, "{v}");
    }

    #[test]
    fn binomial_reset_moments() {
        for (x, beta) in [(10.0, 1.0), (7.3, 1.0), (10.0, 0.7)] {
            let d = draws(
                &scalar_reset(1.0, 0.0, beta, 0.0),
                ResetSampler::ScaledBinomial,
                x,
                1_000_000,
            );
            let (m, se_m, v, se_v) = moments(&d);
            assert!((m - x).abs() < 3.0 * se_m, "{x} {beta}: mean {m}");
            assert!((v - beta * x).abs() < 4.0 * se_v, "{x} {beta}: var {v}");
            assert!((v - beta * x).abs() < 0.05 * beta * x);
        }
    }

    #[test]
    fn burst_sizes() {
        let mut rng = path_rng(11, 0);
        for law in [
            BurstSize::Exponential { mean: 2.0 },
            BurstSize::Geometric { mean: 3.0 },
            BurstSize::Constant { size: 1.5 },
        ] {
            let d: Vec<f64> = (0..400_000).map(|_| law.sample(&mut rng)).collect();
            let (m, se_m, v, se_v) = moments(&d);
            assert!((m - law.mean()).abs() <= 4.0 * se_m, "{law:?} mean {m}");
            assert!(
                (v - law.variance()).abs() <= 4.0 * se_v + 1e-12,
                "{law:?} var {v}"
            );
        }
    }

    #[test]
    fn binomial_needs_scalar_division_reset() {
        let r = scalar_reset(0.5, 0.0, 1.0, 0.0);
        assert!(ResetSampler::ScaledBinomial.check_compatible(&r).is_err());
    }

    #[test]
    fn noiseless_ensemble_has_zero_variance() {
        let m = reference(ResetMap::identity(1));
        let s = run_ensemble(
            &m,
            &SamplerSet::gaussian(&m),
            600,
            &[0.0, 1.0, 5.0],
            3,
            None,
        )
        .unwrap();
        for g in 0..3 {
            assert!(s.covariance[g][(0, 0)].abs() < 1e-24);
            assert!(s.se_covariance[g][(0, 0)].abs() < 1e-12);
            assert!((s.mean[g][0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_is_reproducible_across_thread_counts() {
        let m = reference(scalar_reset(1.0, 0.0, 0.5, 0.0));
        let samplers = SamplerSet::gaussian(&m);
        let grid = [0.5, 2.0, 4.0];
        let a = run_ensemble(&m, &samplers, 1500, &grid, 42, Some(1)).unwrap();
        let b = run_ensemble(&m, &samplers, 1500, &grid, 42, Some(3)).unwrap();
        let c = run_ensemble(&m, &samplers, 1500, &grid, 43, Some(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn event_log_interval_statistics() {
        let m = reference(scalar_reset(1.0, 0.0, 0.5, 0.0));
        let log = event_log(&m, &SamplerSet::gaussian(&m), 5, 0, 40_000.0).unwrap();
        let mut prev = 0.0;
        let gaps: Vec<f64> = log
            .iter()
            .map(|e| {
                let g = e.time - prev;
                prev = e.time;
                g
            })
            .collect();
        let (mean, se, var, se_var) = moments(&gaps);
        assert!((mean - 1.0).abs() < 4.0 * se);
        // CV² = 1/3 for Erlang(3)
        assert!((var - 1.0 / 3.0).abs() < 4.0 * se_var + 4.0 * se);
    }

    #[test]
    fn single_bin_is_global_mean() {
        let m = reference(scalar_reset(1.0, 0.0, 0.5, 0.0));
        let st =
            timer_conditional_stats(&m, &SamplerSet::gaussian(&m), 2000, 10.0, 1, 9, None).unwrap();
        assert_eq!(st.bins.len(), 1);
        assert_eq!(st.bins[0].mean, st.global_mean);
        assert!(st.slopes.is_none());
    }

    #[test]
    fn steady_estimate_is_deterministic() {
        let m = reference(scalar_reset(1.0, 0.0, 0.5, 0.0));
        let s = SamplerSet::gaussian(&m);
        let opts = SteadyOptions {
            burn_in: Some(5.0),
            samples_per_path: 20,
        };
        let a = steady_state_estimate(&m, &s, 700, 1, opts, Some(1)).unwrap();
        let b = steady_state_estimate(&m, &s, 700, 1, opts, Some(2)).unwrap();
        assert_eq!(a, b);
        assert!((a.mean[0] - 1.0).abs() < 5.0 * a.se_mean[0]);
    }
}
