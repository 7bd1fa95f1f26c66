use std::path::PathBuf;

use crate::types::{RequestId, Slot, Tokens};

/// Errors raised anywhere in the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid length: {0}")]
    InvalidLength(String),

    #[error("invalid rate: {0}")]
    InvalidRate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("workload has no request classes")]
    EmptyClasses,

    #[error("request {id} has unknown class {class:?}")]
    UnknownClass { id: RequestId, class: Option<u32> },

    #[error("policy `{policy}` needs known output lengths")]
    OutputsUnknown { policy: &'static str },

    #[error("duplicate request id {0}")]
    DuplicateRequest(RequestId),

    #[error("request {id} arrives at slot {arrival} but the clock is at {clock}")]
    ArrivalOutOfOrder { id: RequestId, arrival: Slot, clock: Slot },

    #[error(
        "request {id} needs {needed} tokens in its first slot but the KV capacity is {capacity}"
    )]
    OversizedRequest {
        id: RequestId,
        needed: Tokens,
        capacity: Tokens,
    },

    #[error("policy bug: {0}")]
    PolicyBug(String),

    #[error("eviction required ({required} tokens) but the active set is empty")]
    NothingToEvict { required: Tokens },

    #[error("stability condition violated: {0}")]
    ConditionViolated(String),

    #[error("oracle refuses instance: {0}")]
    OracleLimits(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input rather than a failure during a run.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidLength(_)
                | Error::InvalidRate(_)
                | Error::Config(_)
                | Error::EmptyClasses
                | Error::OutputsUnknown { .. }
                | Error::Json(_)
                | Error::Empty(_)
                | Error::OracleLimits(_)
        )
    }
}
