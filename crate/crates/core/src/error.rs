use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("index {id} out of range (bound {bound})")]
    Index { id: usize, bound: usize },
    #[error("all positions are padding; nothing to average")]
    EmptyBatch,
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("coverage error: {0}")]
    Coverage(String),
    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("misaligned bitext: {src_lines} source lines vs {tgt_lines} target lines")]
    Alignment { src_lines: usize, tgt_lines: usize },
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error("config fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    Fingerprint { expected: u64, found: u64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
