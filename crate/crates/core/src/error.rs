use std::fmt;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A token id is outside the vocabulary.
    Vocabulary { id: usize, vocab_size: usize },
    /// Sequence does not fit in the positional table.
    Length { len: usize, max: usize },
    Config(String),
    Usage(String),
    Io { path: PathBuf, source: std::io::Error },
    Parse { line: usize, message: String },
    Numerical(String),
    /// A training invariant was violated (e.g. a frozen tensor received a gradient).
    Invariant(String),
}

impl Error {
    pub fn dimension(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Vocabulary { id, vocab_size } => {
                write!(f, "token id {id} out of range for vocabulary of {vocab_size}")
            }
            Error::Length { len, max } => {
                write!(f, "sequence length {len} exceeds maximum {max}")
            }
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Parse { line, message } => write!(f, "line {line}: {message}"),
            Error::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            Error::Invariant(msg) => write!(f, "invariant violated: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
