//! Error type shared across the crate.
//!
//! Variants partition into the exit-code classes the CLI reports:
//! configuration (2), data/layout (3), and numerical/contract failures (4).

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes or dimensions do not satisfy an operation's contract.
    #[error("{op}: dimension error: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Input outside an operation's mathematical domain (e.g. log of a
    /// non-positive value).
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    /// An API contract was violated by the caller.
    #[error("{op}: contract error: {detail}")]
    Contract { op: &'static str, detail: String },

    /// Invalid configuration (bad key, out-of-bounds value, illegal rank...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Missing or malformed on-disk data.
    #[error("data error: {0}")]
    Data(String),

    /// A rendering layout cannot be satisfied on the given canvas.
    #[error("layout error: {0}")]
    Layout(String),

    /// Episode sampling cannot satisfy the request.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// A class required by an operation has no labeled pixels.
    #[error("missing class {class}: {detail}")]
    MissingClass { class: usize, detail: String },

    /// Non-finite values, NaN gradients, training divergence.
    #[error("numerical failure in {op}: {detail}")]
    Numerical { op: String, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code class for the CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Layout(_) | Error::Sampling(_) | Error::Io(_) => 3,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
