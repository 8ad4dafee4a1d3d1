//! Error type shared by the whole library.

/// Convenience alias used by every fallible operation in this crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All the ways library operations can fail.
///
/// Parse-facing variants carry enough position information to point a user
/// at the offending spot in their input; numeric variants carry the values
/// that broke the invariant so failures are diagnosable from the message
/// alone.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A fractal-code document failed to parse (syntax or type error).
    #[error("invalid fractal code document at line {line}, column {column}: {message}")]
    CodeDocument {
        line: usize,
        column: usize,
        message: String,
    },

    /// A fractal-code document parsed but violated the schema; the message
    /// names the offending field.
    #[error("invalid fractal code document: {0}")]
    CodeSchema(String),

    /// An unsupported document format version.
    #[error("unsupported fractal code version {found} (this build reads version {supported})")]
    CodeVersion { found: u32, supported: u32 },

    /// A run-configuration file failed to parse.
    #[error("invalid config at line {line}: {message}")]
    Config { line: usize, message: String },

    /// A binary point dump was truncated or malformed.
    #[error("invalid point dump: {0}")]
    PointDump(String),

    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two buffers that must agree in shape did not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A registered perceptual-loss plugin reported a failure.
    #[error("perceptual plugin failed: {0}")]
    PerceptualPlugin(String),

    /// The optimizer hit a non-finite loss and cannot continue.
    #[error("optimization diverged at iteration {iteration}: {message}")]
    Diverged { iteration: usize, message: String },

    /// Rejection sampling failed to find an acceptable candidate.
    #[error("rejection sampling exhausted after {attempts} attempts: {message}")]
    RejectionExhausted { attempts: usize, message: String },

    /// Underlying file or image I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// PNG encode/decode failure.
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}
