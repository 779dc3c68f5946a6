//! Simulation and identification of non-causal switching linear state-space
//! systems.
//!
//! The model superposes two hidden linear chains driving a common output:
//! a *causal* chain running forward in time and an *anti-causal* chain
//! running backward, each switching its parameters at every step according
//! to an i.i.d. categorical draw:
//!
//! ```text
//! x_c(t) = A_c(s_c(t)) x_c(t-1) + v_c(t)         (forward recursion)
//! x_a(t) = A_a(s_a(t)) x_a(t+1) + v_a(t)         (backward recursion)
//! y(t)   = C_c(s_c(t)) x_c(t) + C_a(s_a(t)) x_a(t) + v_m(t)
//! ```
//!
//! Identification runs a hard-assignment EM loop: the E-step couples two
//! modified Kalman filters (one per chain, sharing a single innovation)
//! with a per-step mode search, and the M-step refits all parameters by
//! closed-form least squares under the selected mode sequences.
//!
//! Module map:
//! - [`model`]: parameter containers, validation, reference systems;
//! - [`simulate`]: forward/backward trajectory generation;
//! - [`estep`]: coupled filters, mode classification, surrogate objective;
//! - [`mstep`]: closed-form parameter refits from labeled states;
//! - [`em`]: initialization, the outer loop, stopping rules, mode alignment;
//! - [`diagnostics`]: match rates, error metrics, excitation spectra,
//!   residual checks, and the convergence-rate probe;
//! - [`io`]: JSON/CSV readers and writers for all artifacts.

pub mod diagnostics;
pub mod em;
pub mod error;
pub mod estep;
pub mod io;
pub mod model;
pub mod mstep;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{
    benchmark_system, example1, validate_theta, AntiCausalModeParams, CausalModeParams, Dims,
    ModeSequence, ThetaBundle, Trajectory,
};
pub use simulate::{simulate, SimConfig};
pub use estep::{run_estep, run_estep_with_labels, EStepConfig, EStepOutput, FilterState};
pub use mstep::{run_mstep, MStepReport};
pub use em::{
    align_modes, fit, AbortInfo, Aligned, EmConfig, EmReport, InitStrategy, IterateRecord,
    MonotoneQPolicy, StopReason,
};
pub use diagnostics::{
    gram_spectra, mode_match_rate, output_reconstruction_error, rate_probe,
    reconstruct_outputs, relative_state_error, residual_boundedness, GramSpectrum, RateProbe,
    ResidualCurves,
};
