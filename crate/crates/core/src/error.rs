use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("infeasible quantization constraints: {0}")]
    Infeasible(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("IDX: wrong magic number 0x{found:08x}, expected 0x{expected:08x}")]
    IdxMagic { expected: u32, found: u32 },

    #[error("IDX: file truncated, expected {expected} bytes, found {found}")]
    IdxTruncated { expected: usize, found: usize },

    #[error("IDX: {images} images but {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("packed layer truncated at byte {position}: payload needs {needed} bytes, found {found}")]
    PackedTruncated {
        position: usize,
        needed: usize,
        found: usize,
    },

    #[error("packed layer header: {0}")]
    PackedHeader(String),

    #[error("format version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },

    #[error("malformed file at `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            message: message.into(),
        }
    }
}
