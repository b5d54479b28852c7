use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{channels} channels cannot be divided into {divisor} equal parts")]
    NonDivisibleChannels { channels: usize, divisor: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("pooling over an empty spatial extent")]
    EmptySpatial,

    #[error("loss value must be a scalar, got shape {0:?}")]
    NotScalarLoss([usize; 4]),

    #[error("invalid template: {0}")]
    InvalidTemplate(String),

    #[error("invalid block config: {0}")]
    InvalidConfig(String),

    #[error("empty search range")]
    EmptyRange,

    #[error("invalid sweep dimension: {0}")]
    InvalidDimension(String),

    #[error("precondition violated: {0}")]
    PreconditionViolation(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("file length {len} is not a multiple of the {record}-byte record size")]
    BadRecordLength { len: u64, record: usize },

    #[error("bad magic bytes in weight file")]
    BadMagic,

    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),

    #[error("weight file is truncated")]
    TruncatedFile,

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
