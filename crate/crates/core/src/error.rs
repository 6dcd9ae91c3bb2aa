use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PierError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PierError {
    /// Operand shapes do not line up.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error in parameter `{param}`: {detail}")]
    Numeric { param: String, detail: String },

    #[error("embedding lookup error: field {field} id {id} out of vocabulary (size {vocab})")]
    Lookup { field: usize, id: u32, vocab: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("training diverged at step {step}: non-finite loss on example {example}")]
    Diverged { step: u64, example: String },

    #[error("parse error at line {line}, field `{field}`: {detail}")]
    Parse {
        line: usize,
        field: String,
        detail: String,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint integrity error: expected {expected} payload bytes, found {actual}")]
    Integrity { expected: u64, actual: u64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PierError {
    pub(crate) fn dim(op: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        PierError::Dimension {
            op: op.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Short stable name of the variant, for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            PierError::Dimension { .. } => "dimension",
            PierError::Contract(_) => "contract",
            PierError::Numeric { .. } => "numeric",
            PierError::Lookup { .. } => "lookup",
            PierError::UndefinedMetric(_) => "undefined_metric",
            PierError::Diverged { .. } => "diverged",
            PierError::Parse { .. } => "parse",
            PierError::Format(_) => "format",
            PierError::Integrity { .. } => "integrity",
            PierError::Config(_) => "config",
            PierError::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PierError::Io {
            path: path.into(),
            source,
        }
    }
}
