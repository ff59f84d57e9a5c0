//! Simulation library for dephasing-protected transverse-field magnetometry
//! with spin qudits.
//!
//! The library covers the full pipeline of a qudit quantum-sensing protocol:
//!
//! - [`spinops`] — dense complex linear algebra: spin matrices, Hermitian
//!   eigendecomposition, matrix exponentials, tensor products, partial traces.
//! - [`model`] — physical Hamiltonians (two-level baseline and zero-field-split
//!   qudit), unit handling, eigenframes, rotating-frame reductions.
//! - [`dynamics`] — Lindblad superoperators for pure dephasing and
//!   zero-temperature relaxation, piecewise-constant and explicit
//!   time-dependent propagation.
//! - [`code`] — process tomography of the dephasing channel, Knill–Laflamme
//!   codeword optimization on disjoint eigenstate supports, error-word bases.
//! - [`compiler`] — resonant multi-tone pulse synthesis, Trotter grouping,
//!   fault-tolerant gate synthesis from matrix logarithms, fidelity scoring.
//! - [`protocol`] — end-to-end sensing runs (plain Rabi and QEC-interleaved
//!   logical Rabi), crossing-time extraction, calibration curves, sensitivity
//!   and repetition-interval sweeps.
//!
//! All frequencies and energies are stored internally as angular frequencies
//! in rad/s with hbar = 1; conversions from laboratory units (GHz, cm^-1,
//! meV, tesla) live in [`model::units`]. All operators are dense: the largest
//! object in the pipeline is a 32x32 joint unitary (8-level qudit with a
//! 4-level ancilla), far below any size where sparsity would pay.

pub mod code;
pub mod compiler;
pub mod dynamics;
pub mod model;
pub mod protocol;
pub mod spinops;

/// Library version, recorded in output manifests for provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Unified error type for the whole pipeline.
///
/// Variants mirror the failure classes of the individual stages so a caller
/// (in particular the CLI) can distinguish configuration mistakes from
/// genuine numerical breakdowns.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violates a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A constructed model fails one of its own consistency checks
    /// (e.g. a selection rule that the Hamiltonian form guarantees).
    #[error("model consistency violation: {0}")]
    ModelConsistency(String),
    /// A noise model that cannot generate a valid channel.
    #[error("invalid noise model: {0}")]
    InvalidModel(String),
    /// Loss of trace, positivity, convergence or finiteness during numerics.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    /// Codeword search ended above the acceptance residual.
    #[error("code optimization failed: {0}")]
    OptimizationFailure(String),
    /// Error words are linearly dependent and cannot be orthonormalized.
    #[error("degenerate code: {0}")]
    DegenerateCode(String),
    /// A pulse schedule cannot be realized within its constraints.
    #[error("compile error: {0}")]
    Compile(String),
    /// A calibration curve violates monotonicity or is missing crossings.
    #[error("calibration error: {0}")]
    Calibration(String),
    /// Bundled reference data failed its checksum.
    #[error("data corruption: {0}")]
    DataCorruption(String),
}

pub type Result<T> = std::result::Result<T, Error>;
