use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Variants carry enough context to name the offending
/// dimension, file, frame, or training step in the message.
#[derive(Error, Debug)]
pub enum Error {
    /// Shape or dimension contract violated by an operation input.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A value-domain contract violated (range, divisibility, count, ...).
    #[error("{context}: {detail}")]
    Invalid { context: String, detail: String },

    /// Entropy-coded payload failed its CRC32 check.
    #[error("payload checksum mismatch in {payload}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum {
        payload: String,
        stored: u32,
        computed: u32,
    },

    /// Bitstream ended inside a record.
    #[error("bitstream truncated while reading frame {frame_index}: {detail}")]
    Truncated { frame_index: usize, detail: String },

    /// Loaded weights or bitstream disagree with the model they claim to fit.
    #[error("model mismatch: expected {expected}, found {actual}")]
    ModelMismatch { expected: String, actual: String },

    /// A serialized container carried an unknown magic or version.
    #[error("{context}: bad {what} (found {found})")]
    Format {
        context: String,
        what: String,
        found: String,
    },

    /// Training produced a non-finite loss.
    #[error("training diverged: non-finite loss in stage {stage} at step {step}")]
    Diverged { stage: &'static str, step: usize },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Invalid {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
