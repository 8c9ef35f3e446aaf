//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes, naming the offending operation and both shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Parse failure in a text file, with 1-based line position.
    #[error("parse error in {path} at line {line}: {msg}")]
    TextParse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Parse failure in a binary file, with byte position.
    #[error("parse error in {path} at byte {offset}: {msg}")]
    BinaryParse {
        path: String,
        offset: usize,
        msg: String,
    },

    /// A gradient turned NaN during optimization.
    #[error("NaN gradient in parameter `{name}`")]
    NanGradient { name: String },

    /// Non-finite value encountered where finite data is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::NanGradient { .. } | Error::NonFinite(_) => 3,
            _ => 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_class() {
        assert_eq!(Error::invalid("x").exit_code(), 1);
        assert_eq!(
            Error::TextParse {
                path: "f".into(),
                line: 1,
                msg: "m".into()
            }
            .exit_code(),
            2
        );
        assert_eq!(Error::NanGradient { name: "w".into() }.exit_code(), 3);
        assert_eq!(Error::NonFinite("loss".into()).exit_code(), 3);
    }
}
