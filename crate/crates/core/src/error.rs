//! Error type shared by every module in the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes the toolkit can report.
///
/// Variants are grouped by how callers are expected to react: data problems
/// (alignment, contamination, empty inputs) are recoverable by fixing inputs,
/// `Numeric` signals a diverged or non-finite computation, and `Io`/`Format`
/// wrap filesystem trouble.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two paired sequences (file lines, hypothesis/reference lists, ...)
    /// do not have the same length.
    #[error("alignment mismatch: {left} vs {right}")]
    Alignment { left: usize, right: usize },

    /// A text file contained a line that is not valid UTF-8.
    #[error("{path}: line {line}: invalid UTF-8")]
    Utf8 { path: PathBuf, line: usize },

    /// Dev or test pairs reappear in the training pool.
    #[error("dev/test contamination: {count} held-out pair(s) also in training, first: {first}")]
    Contamination { count: usize, first: String },

    /// A parameter combination the toolkit refuses to run with.
    #[error("configuration: {0}")]
    Config(String),

    /// An operation that needs data received none.
    #[error("empty data: {0}")]
    EmptyData(String),

    /// A loss, score, or parameter became NaN or infinite.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A metric has no defined value on the given inputs.
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    /// A subword id fell outside the model vocabulary.
    #[error("vocab id {id} out of range (vocab size {vocab})")]
    VocabId { id: u32, vocab: usize },

    /// A sequence is too long for the model's position budget.
    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    /// A variety token was prepended to a source that already carries one.
    #[error("source already begins with a variety token")]
    DoubleTag,

    /// The classifier's training sentences overlap the translation
    /// training data in a regime where they must be disjoint.
    #[error("classifier training data overlaps translation training data: {count} shared sentence(s)")]
    ClassifierOverlap { count: usize },

    /// Filesystem error, tagged with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A model or dataset file does not parse as the expected format.
    #[error("{path}: unsupported format: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    /// Io error constructor that records the offending path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Format error constructor.
    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    /// True for errors that indicate a numeric breakdown rather than bad
    /// inputs; the CLI maps these to a distinct exit code.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}
