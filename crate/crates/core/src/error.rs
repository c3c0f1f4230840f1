use thiserror::Error;

use crate::cohort::TissueClass;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid IVIM parameters: {0}")]
    InvalidParams(String),

    #[error("invalid scanner configuration: {0}")]
    InvalidScanner(String),

    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),

    #[error("no tissue distribution configured for class {0}")]
    MissingDistribution(TissueClass),

    #[error("invalid tissue distribution for {class}: {reason}")]
    InvalidDistribution { class: TissueClass, reason: String },

    #[error("fewer than 2 distinct b-values >= {threshold} s/mm^2 with positive signal")]
    HighBDeficient { threshold: f64 },

    #[error("protocol has no b = 0 acquisition")]
    NoB0,

    #[error("class {class} has {count} subjects, need at least {needed} for {needed}-fold cross-validation")]
    InsufficientSubjects { class: usize, count: usize, needed: usize },

    #[error("invalid evaluation config: {0}")]
    InvalidEvalConfig(String),

    #[error("environment step called after the episode finished")]
    StepAfterDone,

    #[error("non-finite value during PPO update: {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema mismatch: file has version {found}, expected {expected}")]
    SchemaMismatch { found: u32, expected: u32 },

    #[error("empty report: {0}")]
    EmptyReport(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
