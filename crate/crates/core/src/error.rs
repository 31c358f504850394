use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("line {line}: demographics for patient `{patient_id}` differ from its first row")]
    InconsistentDemographics { patient_id: String, line: u64 },

    #[error("{biomarker} value {value} is outside its plausible range")]
    OutOfRange { biomarker: &'static str, value: f64 },

    #[error("need at least 5 patients to split, got {0}")]
    TooFewPatients(usize),

    #[error("patient `{0}` has no visits before the pandemic onset")]
    NoPreOnsetVisits(String),

    #[error("patient `{0}` has no visits on or after the pandemic onset")]
    NoPostOnsetVisits(String),

    #[error("sequence has {visits} visits but the positional table holds {max}")]
    SequenceTooLong { visits: usize, max: usize },

    #[error("example has no input visits")]
    EmptySequence,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("attention row {0} is fully masked")]
    FullyMaskedRow(usize),

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("need at least {needed} Monte-Carlo samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("correlation matrix is not positive semi-definite")]
    NotPositiveSemiDefinite,

    #[error("data: {0}")]
    Data(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown patient `{0}`")]
    UnknownPatient(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
