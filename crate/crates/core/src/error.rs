use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("truncated archive: {0}")]
    Truncated(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("payload overrun: tensor `{name}` extent {begin}..{end} exceeds payload of {payload} bytes")]
    PayloadOverrun {
        name: String,
        begin: u64,
        end: u64,
        payload: u64,
    },

    #[error("bad extent layout: {0}")]
    ExtentLayout(String),

    #[error("unknown dtype tag `{0}`")]
    UnknownDtype(String),

    #[error("duplicate tensor name `{0}`")]
    DuplicateTensor(String),

    #[error("invalid tensor `{name}`: {detail}")]
    InvalidTensor { name: String, detail: String },

    #[error("tensor name sets differ: {0}")]
    NameMismatch(String),

    #[error("shape mismatch for `{name}`: {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),

    #[error("invalid parameter `{name}`: {detail}")]
    InvalidParameter { name: &'static str, detail: String },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("task vectors disagree on anchor: `{expected}` vs `{found}`")]
    AnchorMismatch { expected: String, found: String },

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("source dimension {source_dim} is smaller than target dimension {target_dim}")]
    DimensionTooSmall { source_dim: usize, target_dim: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("positive log-probability {value} in trajectory `{prompt_id}`")]
    PositiveLogProb { prompt_id: String, value: f64 },

    #[error("distribution error: {0}")]
    Distribution(String),

    #[error("duplicate trajectory group for expert `{expert}` on domain `{domain}`")]
    DuplicateGroup { expert: String, domain: String },

    #[error("missing KL cell: {0}")]
    MissingCell(String),

    #[error("mismatched inputs: {0}")]
    Mismatch(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Stable machine-readable name for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Truncated(_) => "truncated",
            Error::Header(_) => "malformed_header",
            Error::PayloadOverrun { .. } => "payload_overrun",
            Error::ExtentLayout(_) => "extent_layout",
            Error::UnknownDtype(_) => "unknown_dtype",
            Error::DuplicateTensor(_) => "duplicate_tensor",
            Error::InvalidTensor { .. } => "invalid_tensor",
            Error::NameMismatch(_) => "name_mismatch",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::UnknownTensor(_) => "unknown_tensor",
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::EmptyInput(_) => "empty_input",
            Error::AnchorMismatch { .. } => "anchor_mismatch",
            Error::ZeroVector => "zero_vector",
            Error::DimensionTooSmall { .. } => "dimension_too_small",
            Error::Numerical(_) => "numerical",
            Error::PositiveLogProb { .. } => "positive_logprob",
            Error::Distribution(_) => "distribution",
            Error::DuplicateGroup { .. } => "duplicate_group",
            Error::MissingCell(_) => "missing_cell",
            Error::Mismatch(_) => "mismatch",
            Error::Undefined(_) => "undefined",
            Error::Parse(_) => "parse",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(name: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            detail: detail.into(),
        }
    }
}
