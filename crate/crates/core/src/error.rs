use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point is {distance:.3e} from dipole {index}, closer than the minimum {min_distance:.1e}")]
    TooCloseToSource {
        index: usize,
        distance: f64,
        min_distance: f64,
    },

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("time {t} lies outside [0, {final_time}]")]
    TimeOutOfRange { t: f64, final_time: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("objective returned a non-finite value ({value}) at iteration {iteration}")]
    NonFiniteObjective { iteration: usize, value: f64 },

    #[error("initialization failed at step {step}: {source}")]
    HorizonStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("linear solver did not converge after {iterations} iterations (relative residual {final_residual:.3e})")]
    SolverDiverged {
        iterations: usize,
        final_residual: f64,
        residual_history: Vec<f64>,
    },

    #[error("explicit step {dt:.3e} exceeds the stability limit {limit:.3e}")]
    Unstable { dt: f64, limit: f64 },

    #[error("triangle {index} is degenerate (signed area {area:.3e})")]
    DegenerateTriangle { index: usize, area: f64 },

    #[error("mesh format error at line {line}: {message}")]
    MeshFormat { line: usize, message: String },

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("controls do not cover the simulation interval: {0}")]
    Coverage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
