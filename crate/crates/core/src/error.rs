use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss function is nondeterministic: {first} != {second}")]
    Nondeterministic { first: f64, second: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("degenerate embedding: zero vector before normalization")]
    DegenerateEmbedding,

    #[error("duplicate item id {0:?}")]
    DuplicateId(String),

    #[error("unknown item id {0:?}")]
    UnknownId(String),

    #[error("corpus {0} has no entries")]
    EmptyCorpus(usize),

    #[error("requested top-{k} from a memory of {total} entries")]
    KTooLarge { k: usize, total: usize },

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported snapshot format version {0}")]
    UnsupportedFormat(u32),

    #[error("dimension mismatch: {what} expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("truncated file: {0}")]
    Truncated(&'static str),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
