use thiserror::Error;

/// Errors shared across the simulator library.
#[derive(Debug, Error)]
pub enum FedSimError {
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("stale model: update built against round version {update} but round distributed version {expected}")]
    StaleModel { update: u32, expected: u32 },

    #[error("empty training set: client must not report an update")]
    EmptyTrainingSet,

    #[error("model updates disagree on round version")]
    VersionMismatch,

    #[error("unknown population {0:?}")]
    UnknownPopulation(String),

    #[error("population {0:?} contains no devices")]
    EmptyPopulation(String),

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("malformed stats file: {0}")]
    MalformedStats(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FedSimError>;
