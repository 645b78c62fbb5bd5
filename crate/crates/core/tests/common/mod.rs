//! Models shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use ttshs::gene_expression::{self, GeneModelParams};
use ttshs::simulator::{BurstSize, ResetSampler, SamplerSet};
use ttshs::{
    linalg, ErlangBranch, LinearDynamics, MemorylessResetFamily, PhaseTypeMixture, ResetMap,
    TimerResetFamily, TimingLaw, TtshsModel,
};

pub fn m1(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

pub fn v1(v: f64) -> DVector<f64> {
    DVector::from_element(1, v)
}

/// `ẋ = 1 − x`, Erlang(3, 3) timing, timer reset `x₊` with variance `x/2`.
/// Stationary mean 1, variance 0.25.
pub fn reference_model() -> TtshsModel {
    reference_with_timing(TimingLaw::PhaseType(PhaseTypeMixture::erlang(3, 3.0)))
}

pub fn reference_with_timing(timing: TimingLaw) -> TtshsModel {
    TtshsModel {
        dynamics: LinearDynamics::scalar(1.0, -1.0),
        timer_reset: TimerResetFamily {
            reset: ResetMap::noise_imparting(m1(0.5), m1(0.0)),
            timing,
        },
        memoryless_resets: vec![],
        initial_state: v1(1.0),
    }
}

/// Same flow and timing, but each event halves the state on average.
pub fn halving_control() -> TtshsModel {
    let mut m = reference_model();
    m.timer_reset.reset.mean_gain = m1(0.5);
    m
}

pub fn gene_params() -> GeneModelParams {
    GeneModelParams {
        burst_rate: 10.0,
        burst_size: BurstSize::Exponential { mean: 1.0 },
        dilution_rate: 1.0,
        partition_noise: 1.0,
        division_timing: gene_expression::erlang_division_timing(1.0, 4),
        initial_level: None,
    }
}

/// Two-dimensional model exercising every reset coefficient.
pub fn full_reset_2d() -> TtshsModel {
    TtshsModel {
        dynamics: LinearDynamics::new(
            DVector::from_vec(vec![1.0, 0.5]),
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.0, -1.2]),
        ),
        timer_reset: TimerResetFamily {
            reset: ResetMap {
                mean_gain: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.8]),
                mean_offset: DVector::from_vec(vec![0.2, -0.1]),
                cov_quadratic: DMatrix::identity(2, 2) * 0.1,
                cov_linear: DMatrix::zeros(2, 2),
                cov_constant: DMatrix::from_row_slice(2, 2, &[0.2, 0.05, 0.05, 0.1]),
            },
            timing: TimingLaw::PhaseType(
                PhaseTypeMixture::new(vec![
                    ErlangBranch::new(0.4, 1, 1.0),
                    ErlangBranch::new(0.6, 2, 3.0),
                ])
                .unwrap(),
            ),
        },
        memoryless_resets: vec![],
        initial_state: DVector::from_vec(vec![0.5, 0.5]),
    }
}

/// Two-dimensional noise-imparting model with a constant-rate family.
pub fn noise_imparting_2d() -> TtshsModel {
    TtshsModel {
        dynamics: LinearDynamics::new(
            DVector::from_vec(vec![2.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.2, 0.1, -1.5]),
        ),
        timer_reset: TimerResetFamily {
            reset: ResetMap::noise_imparting(
                DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.05]),
                DMatrix::from_row_slice(2, 2, &[0.3, 0.05, 0.05, 0.2]),
            ),
            timing: TimingLaw::PhaseType(PhaseTypeMixture::erlang(2, 2.0)),
        },
        memoryless_resets: vec![MemorylessResetFamily {
            rate: 0.5,
            reset: ResetMap {
                mean_gain: DMatrix::identity(2, 2) * 0.9,
                mean_offset: DVector::from_vec(vec![0.2, 0.0]),
                cov_quadratic: DMatrix::zeros(2, 2),
                cov_linear: DMatrix::zeros(2, 2),
                cov_constant: DMatrix::identity(2, 2) * 0.01,
            },
        }],
        initial_state: DVector::from_vec(vec![2.0, 1.0]),
    }
}

/// A named model with the sampler set used to simulate it.
pub struct Reference {
    pub name: &'static str,
    pub model: TtshsModel,
    pub samplers: SamplerSet,
}

pub fn reference_models() -> Vec<Reference> {
    let params = gene_params();
    let gaussian = |name, model: TtshsModel| Reference {
        name,
        samplers: SamplerSet::gaussian(&model),
        model,
    };
    vec![
        gaussian("reference 1-D, Erlang(3)", reference_model()),
        Reference {
            name: "gene, deterministic production",
            model: gene_expression::build_ttshs(&params, false).unwrap(),
            samplers: gene_expression::sampler_set(&params, false),
        },
        Reference {
            name: "gene, exponential bursts",
            model: gene_expression::build_ttshs(&params, true).unwrap(),
            samplers: gene_expression::sampler_set(&params, true),
        },
        gaussian("2-D full reset, mixture timing", full_reset_2d()),
        gaussian(
            "2-D noise-imparting + constant-rate family",
            noise_imparting_2d(),
        ),
    ]
}

/// Random matrix with standard normal entries.
pub fn normal_matrix(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random Hurwitz matrix with spectral abscissa in `[-1.5, -0.3]`.
pub fn random_hurwitz(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g = normal_matrix(rng, n) * 0.7;
    let shift = linalg::spectral_abscissa(&g) + rng.random_range(0.3..1.5);
    g - DMatrix::identity(n, n) * shift
}

/// Random PSD matrix `G Gᵀ · scale`.
pub fn random_psd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let g = normal_matrix(rng, n);
    &g * g.transpose() * scale
}

/// Random Erlang mixture with at most `max_stages` stages in total.
pub fn random_mixture(rng: &mut ChaCha8Rng, max_stages: u32) -> PhaseTypeMixture {
    let branches = if max_stages >= 2 && rng.random::<bool>() {
        2
    } else {
        1
    };
    if branches == 1 {
        let m = rng.random_range(1..=max_stages);
        return PhaseTypeMixture::erlang(m, m as f64 * rng.random_range(0.5..2.0));
    }
    let m1 = rng.random_range(1..max_stages);
    let m2 = rng.random_range(1..=max_stages - m1);
    let p = rng.random_range(0.1..0.9);
    PhaseTypeMixture::new(vec![
        ErlangBranch::new(p, m1, rng.random_range(0.5..4.0)),
        ErlangBranch::new(1.0 - p, m2, rng.random_range(0.5..4.0)),
    ])
    .unwrap()
}

/// Random valid noise-imparting model. `D = c·𝟙𝟙ᵀ/n` makes `sym(D x 𝟙ₙ)` a
/// nonnegative multiple of `𝟙𝟙ᵀ` whenever `Σx ≥ 0` (the mean stays at its
/// positive stationary value); a general `D` would give an indefinite reset
/// covariance for `n ≥ 2`. `E` is PSD.
pub fn random_noise_imparting(rng: &mut ChaCha8Rng, n: usize, max_stages: u32) -> TtshsModel {
    let a = random_hurwitz(rng, n);
    let target = DVector::from_fn(n, |_, _| rng.random_range(0.5..3.0));
    let ahat = -(&a * &target);
    let d = DMatrix::from_element(n, n, rng.random_range(0.0..0.3) / n as f64);
    let e = random_psd(rng, n, 0.1);
    TtshsModel {
        dynamics: LinearDynamics::new(ahat, a),
        timer_reset: TimerResetFamily {
            reset: ResetMap::noise_imparting(d, e),
            timing: TimingLaw::PhaseType(random_mixture(rng, max_stages)),
        },
        memoryless_resets: vec![],
        initial_state: target,
    }
}

pub fn rel_gap(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / scale.max(f64::MIN_POSITIVE)
}

pub fn binomial_sampler_set(model: &TtshsModel) -> SamplerSet {
    SamplerSet::for_model(model, ResetSampler::ScaledBinomial)
}
