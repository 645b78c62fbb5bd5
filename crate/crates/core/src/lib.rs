//! Exact first- and second-order moments of linear time-triggered stochastic
//! hybrid systems, with a Monte Carlo simulator used to cross-check them.
//!
//! * [`engine_renewal`] handles noise-imparting timer resets under any renewal
//!   timing law (stationary covariance through a Lyapunov equation).
//! * [`engine_phase`] handles the full reset map under phase-type timing via a
//!   closed linear system of stage-conditioned moments.
//! * [`simulator`] samples the process exactly.

pub mod cli;
pub mod engine_phase;
pub mod engine_renewal;
pub mod error;
pub mod gene_expression;
pub mod linalg;
pub mod model;
pub mod ode;
pub mod phase_type;
pub mod simulator;

pub use engine_renewal::MomentState;
pub use error::{Result, TtshsError};
pub use model::{
    validate_model, LinearDynamics, MemorylessResetFamily, RenewalLaw, ResetMap, TimerResetFamily,
    TimingLaw, TtshsModel, ValidationReport, ViolationCode,
};
pub use phase_type::{fit_mixture, ErlangBranch, PhaseTypeMixture};
