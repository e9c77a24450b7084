//! Error type shared by the simulation and learning stages.

use alloc::string::String;

/// Errors produced by the laboratory and learner stages.
///
/// Messages carry the indices needed to locate a failing experiment
/// (anchor, input) so a pipeline failure can be traced to a single run.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A vector or matrix argument had the wrong dimension.
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        /// Name of the offending argument or dimension.
        what: &'static str,
        /// Expected size.
        expected: usize,
        /// Actual size.
        got: usize,
    },

    /// A scalar argument was outside its legal range.
    #[error("invalid argument {what}: {details}")]
    InvalidArgument {
        /// Name of the offending argument.
        what: &'static str,
        /// Human-readable constraint that was violated.
        details: String,
    },

    /// The integrator produced a non-finite state.
    #[error("integration diverged: non-finite state after t = {last_time} s")]
    IntegrationDiverged {
        /// Last time at which the state was still finite.
        last_time: f64,
    },

    /// A state lies outside the system's state domain.
    #[error("state outside domain: component {component} = {value} not in [{lower}, {upper}]")]
    OutsideDomain {
        /// Index of the violating state component.
        component: usize,
        /// Offending value.
        value: f64,
        /// Domain lower bound for that component.
        lower: f64,
        /// Domain upper bound for that component.
        upper: f64,
    },

    /// Records fed to a difference or regression stage violate the protocol.
    #[error("protocol violation: {details}")]
    ProtocolViolation {
        /// What was violated.
        details: String,
    },

    /// Too few records or samples to proceed.
    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData {
        /// Minimum count required.
        needed: usize,
        /// Count supplied.
        got: usize,
    },

    /// An input design cannot reach the required rank.
    #[error("infeasible input design: {perturbations} perturbations cannot span {input_dim} input directions")]
    InfeasibleDesign {
        /// Number of input directions that must be excited.
        input_dim: usize,
        /// Number of perturbation experiments requested.
        perturbations: usize,
    },

    /// The assembled design matrix cannot identify the unknowns.
    #[error("degenerate design: rank {rank} < required {required} ({details})")]
    DegenerateDesign {
        /// Numerical rank of the design.
        rank: usize,
        /// Rank required for identifiability.
        required: usize,
        /// Which directions are unexcited.
        details: String,
    },

    /// A matrix or vector contained NaN or infinite entries.
    #[error("non-finite value encountered in {location}")]
    NonFinite {
        /// Stage or object holding the bad value.
        location: &'static str,
    },

    /// A scenario name was not recognised.
    #[error("unknown scenario '{name}' (expected linear_2x2, bloch, prc or prc_noise)")]
    UnknownScenario {
        /// The unrecognised name.
        name: String,
    },

    /// A scenario override had an invalid key or value.
    #[error("invalid override {key}: {details}")]
    InvalidOverride {
        /// Override key.
        key: String,
        /// Why the value was rejected.
        details: String,
    },

    /// A pipeline stage failed; wraps the cause with experiment coordinates.
    #[error("experiment (anchor {anchor}, input {input}) failed: {source}")]
    ExperimentFailed {
        /// Anchor index within the plan.
        anchor: usize,
        /// Input index within the anchor's input set.
        input: usize,
        /// Underlying error.
        #[source]
        source: alloc::boxed::Box<Error>,
    },
}

impl Error {
    /// Attach (anchor, input) coordinates to an upstream error.
    pub fn at_experiment(self, anchor: usize, input: usize) -> Self {
        Error::ExperimentFailed {
            anchor,
            input,
            source: alloc::boxed::Box::new(self),
        }
    }
}
