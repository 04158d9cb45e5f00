use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the simulation, differentiation and task layers.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("tetrahedron {tet} is degenerate (volume {volume:e} m^3)")]
    DegenerateElement { tet: usize, volume: f64 },
    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("tetrahedron {tet} is inverted (det F = {det:e})")]
    InvertedElement { tet: usize, det: f64 },
    #[error("factorization failed: non-positive pivot at row {row}")]
    FactorizationFailure { row: usize },
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("actuator {actuator}: degenerate segment {segment}")]
    DegenerateSegment { actuator: usize, segment: usize },
    #[error("GJK did not converge within {iterations} iterations")]
    MaxIterations { iterations: usize },
    #[error("singular system: {0}")]
    SingularSystem(&'static str),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },
    #[error("implicit NCP system is rank deficient at a contact-mode boundary")]
    SingularAtModeBoundary,
    #[error("optimization diverged after {rejections} consecutive rejected steps")]
    Diverged { rejections: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no feasible contact-mode pattern")]
    NoFeasiblePattern,
}

pub type Result<T> = core::result::Result<T, Error>;
