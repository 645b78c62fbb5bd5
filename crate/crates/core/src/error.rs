use thiserror::Error;

/// Failures raised by the moment engines, the simulator and the model constructors.
///
/// Every variant carries a stable machine-readable code (see [`TtshsError::code`]).
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TtshsError {
    #[error("drift matrix is not Hurwitz (spectral abscissa {0:.3e})")]
    NotHurwitz(f64),
    #[error("timer reset is not noise-imparting: {0}")]
    NotNoiseImparting(String),
    #[error("timing law is not phase-type; fit one with `fit-timing` first")]
    TimingNotPhaseType,
    #[error("linear system is singular: {0}")]
    SingularSystem(String),
    #[error("Lyapunov operator is singular")]
    SingularLyapunov,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("model failed validation: {0}")]
    InvalidModel(String),
    #[error("reset sampler incompatible with reset family: {0}")]
    SamplerMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl TtshsError {
    pub fn code(&self) -> &'static str {
        match self {
            TtshsError::NotHurwitz(_) => "NOT_HURWITZ",
            TtshsError::NotNoiseImparting(_) => "NOT_NOISE_IMPARTING",
            TtshsError::TimingNotPhaseType => "TIMING_NOT_PHASE_TYPE",
            TtshsError::SingularSystem(_) => "SINGULAR_SYSTEM",
            TtshsError::SingularLyapunov => "SINGULAR_LYAPUNOV",
            TtshsError::DimensionMismatch(_) => "DIMENSION_MISMATCH",
            TtshsError::InvalidModel(_) => "VALIDATION_ERROR",
            TtshsError::SamplerMismatch(_) => "SAMPLER_MISMATCH",
            TtshsError::InvalidArgument(_) => "INVALID_ARGUMENT",
        }
    }
}

pub type Result<T, E = TtshsError> = std::result::Result<T, E>;
