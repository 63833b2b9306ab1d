//! Crate-wide error types.

use thiserror::Error;

/// Errors arising from case files and grid construction.
#[derive(Debug, Error)]
pub enum CaseError {
    #[error("failed to read case file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse case JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate bus id {0}")]
    DuplicateBus(u32),
    #[error("branch references unknown bus id {0}")]
    UnknownBus(u32),
    #[error("generator references unknown bus id {0}")]
    UnknownGenBus(u32),
    #[error("case must contain exactly one slack bus, found {0}")]
    SlackCount(usize),
    #[error("branch {from}-{to} has zero series impedance")]
    ZeroImpedance { from: u32, to: u32 },
    #[error("base MVA must be positive, got {0}")]
    BadBaseMva(f64),
    #[error("case has no buses")]
    Empty,
}

/// Errors from the Newton-Raphson solver.
///
/// A singular Jacobian is reported distinctly from plain non-convergence:
/// the former indicates an ill-conditioned operating point (e.g. voltage
/// collapse), the latter an iteration budget that ran out.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("did not converge in {iterations} iterations (mismatch {mismatch:.3e} p.u.)")]
    NotConverged { iterations: u32, mismatch: f64 },
    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: u32 },
    #[error("injection vectors have wrong length: expected {expected}, got {got}")]
    BadInjections { expected: usize, got: usize },
}

/// Errors from sampling and dataset assembly.
#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("failed to read uncertainty spec: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse uncertainty spec JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("uncertainty spec references unknown bus id {0}")]
    UnknownBus(u32),
    #[error("invalid distribution parameters: {0}")]
    BadDistribution(String),
    #[error("sample count must be positive")]
    EmptySample,
    #[error("split sizes {requested} exceed the {available} converged samples")]
    SplitTooLarge { requested: usize, available: usize },
    #[error("{failed} of {total} samples failed to converge (> 1%); the uncertainty spec is ill-posed")]
    TooManyFailures { failed: usize, total: usize },
}

/// Errors from dataset and model file round-trips.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("header JSON error: {0}")]
    Header(#[from] serde_json::Error),
    #[error("parameter block size mismatch: expected {expected} doubles, got {got}")]
    BlockSize { expected: usize, got: usize },
}

/// Errors from training.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset/case mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at epoch {epoch}: training diverged")]
    Diverged { epoch: usize },
    #[error("invalid training config: {0}")]
    BadConfig(String),
}
