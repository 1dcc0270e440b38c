use std::path::PathBuf;

/// Errors produced anywhere in the imitation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },

    #[error("episode already finished (t = {t}, horizon = {horizon})")]
    EpisodeDone { t: usize, horizon: usize },

    #[error("state pair not reachable in one step (residual norm {residual:e})")]
    Unreachable { residual: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid configuration key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("missing artifact `{what}` (looked in {path})")]
    MissingArtifact { what: String, path: PathBuf },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
