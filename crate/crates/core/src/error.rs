use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Filter-loop phase, used to give numeric failures some context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Simulate,
    Train,
    Forecast,
    Fusion,
    MeasurementUpdate,
    Feedback,
    Calibration,
    Evaluate,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Simulate => "simulate",
            Phase::Train => "train",
            Phase::Forecast => "forecast",
            Phase::Fusion => "fusion",
            Phase::MeasurementUpdate => "measurement-update",
            Phase::Feedback => "feedback",
            Phase::Calibration => "calibration",
            Phase::Evaluate => "evaluate",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("incompatible training matrices: {0}")]
    IncompatibleTraining(String),

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("longitudinal velocity {vx} m/s is inside the kinematic-singularity regime")]
    KinematicSingularity { vx: f64 },

    #[error("rank-deficient regression: block `{block}` has no usable excitation")]
    RankDeficient { block: &'static str },

    #[error("degenerate training data: {0}")]
    DegenerateData(String),

    #[error("ensemble needs at least 2 members, got {0}")]
    EnsembleTooSmall(usize),

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("ensemble member {index}: {source}")]
    Member {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("need at least 2 innovations, have {0}")]
    InsufficientInnovations(usize),

    #[error("fusion needs at least one model belief")]
    EmptyFusion,

    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("scenario `{scenario}` infeasible at mu={mu}: yaw rate {yaw_rate:.3} rad/s, vx {vx:.3} m/s at t={time:.3} s")]
    Infeasible {
        scenario: String,
        mu: f64,
        yaw_rate: f64,
        vx: f64,
        time: f64,
    },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("csv line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{phase} failed at step {step}: {source}")]
    Pipeline {
        phase: Phase,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("model file: {0}")]
    Serialization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at(self, phase: Phase, step: usize) -> Error {
        Error::Pipeline {
            phase,
            step,
            source: Box::new(self),
        }
    }

    /// Innermost error, looking through pipeline and member context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Pipeline { source, .. } | Error::Member { source, .. } => source.root(),
            other => other,
        }
    }
}
