use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch { context: String, expected: String, found: String },

    #[error("manifest field `{field}` disagrees with payload: manifest says {manifest}, payload has {payload}")]
    ManifestMismatch { field: String, manifest: String, payload: String },

    #[error("corrupt manifest {path}: {reason}")]
    CorruptManifest { path: PathBuf, reason: String },

    #[error("checksum mismatch for {path}")]
    Checksum { path: PathBuf },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("missing component: {0}")]
    MissingComponent(String),

    #[error("zero denominator for paradigm {0}: the raw-data baseline is degenerate")]
    ZeroDenominator(String),

    #[error("paradigm {0} missing from the declared paradigm set")]
    MissingParadigm(String),

    #[error("inconsistent provenance: {0}")]
    Provenance(String),

    #[error("no reports found in {0}")]
    NoReports(PathBuf),

    #[error("config validation failed:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("output directory {0} already exists (pass --resume to continue it)")]
    OutputExists(PathBuf),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
