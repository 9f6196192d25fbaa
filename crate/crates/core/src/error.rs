use thiserror::Error;

/// Errors raised by the simulation and verification routines.
#[derive(Debug, Error)]
pub enum LabError {
    /// A parameter lies outside the domain where the quantity is defined
    /// (for example `alpha` outside `(0, 2)` or a point on the boundary of
    /// the ball).
    #[error("parameter out of domain: {0}")]
    Domain(String),

    /// A configuration gate was violated (for example `alpha >= 2/3` for the
    /// moment pipelines, or an initial measure not supported in `B(0, R/2)`).
    #[error("configuration gate violated: {0}")]
    Gate(String),

    /// Malformed configuration input (unknown keys, unparsable values).
    #[error("configuration parse error: {0}")]
    Parse(String),

    /// Non-finite or otherwise unusable numeric input.
    #[error("invalid input: {0}")]
    Input(String),

    /// A structural invariant was found broken at runtime.
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// Particle population outgrew the configured cap.
    #[error("population cap exceeded: {count} particles > cap {cap}")]
    CapExceeded { count: usize, cap: usize },

    /// The configured wall-clock budget ran out.
    #[error("runtime cap of {0} s exceeded")]
    TimeLimit(f64),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl LabError {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Parse(_) => 2,
            LabError::Domain(_) | LabError::Gate(_) | LabError::Input(_) => 3,
            LabError::CapExceeded { .. } | LabError::TimeLimit(_) => 4,
            LabError::Invariant(_) => 5,
            LabError::Io(_) | LabError::Csv(_) => 6,
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        LabError::Domain(msg.into())
    }

    pub(crate) fn gate(msg: impl Into<String>) -> Self {
        LabError::Gate(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
