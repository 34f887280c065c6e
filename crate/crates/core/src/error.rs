use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer}: {detail}")]
    LayerShape { layer: usize, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported layer kind `{kind}` at index {layer}")]
    UnsupportedLayer { layer: usize, kind: String },

    #[error("forward cache does not match network: {0}")]
    CacheMismatch(String),

    #[error("training diverged: {report}")]
    Diverged {
        report: Box<crate::engine::StepReport>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed IDX file {path:?} at byte offset {offset}: {detail}")]
    Idx {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("config error at line {line}: {detail}")]
    Config { line: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("csv parse error: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
