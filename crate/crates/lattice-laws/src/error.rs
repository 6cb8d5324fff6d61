use thiserror::Error;

/// Errors shared across the lattice models and the linear-algebra layer.
#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("matrix is singular (pivot {pivot:.3e} below threshold {threshold:.3e})")]
    SingularMatrix { pivot: f64, threshold: f64 },

    #[error("trace-log series diverges: Hilbert-Schmidt norm {hs_norm:.3e} >= 1")]
    SeriesDivergence { hs_norm: f64 },

    #[error("state lies outside the admissible ball ({detail})")]
    OutOfBall { detail: String },

    #[error("Green's function degenerate at site {site}: {detail}")]
    DegenerateGreen { site: i64, detail: String },

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("integrator step size underflow (h = {h:.3e} at t = {t:.6})")]
    StepUnderflow { h: f64, t: f64 },

    #[error("no amplitude satisfies the ball constraint: {0}")]
    BallUnreachable(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LatticeError>;
