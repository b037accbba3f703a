use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("action {action} out of range 0..={max}")]
    ActionOutOfRange { action: usize, max: usize },

    #[error("volume must be positive, got {0}")]
    NonPositiveVolume(f64),

    #[error("episode already finished at t = {0}")]
    EpisodeOver(usize),

    #[error("non-finite gradient: {0}")]
    NonFinite(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("unsupported {kind} version {found} (expected {expected})")]
    Version {
        kind: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("missing artifact for seed {seed}: {what}")]
    MissingArtifact { seed: u64, what: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
