//! Error type shared across the crate.
//!
//! Variants are deliberately fine-grained so callers (and the CLI exit-code
//! mapping) can distinguish a missing file from a syntactically broken one
//! from a semantically invalid one without string matching.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An API contract was violated (non-scalar backward root, empty mask,
    /// degenerate segment, out-of-range argument, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity reached a point where it cannot be meaningful.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// File does not exist (split from `Io` so it can get its own exit code).
    #[error("file not found: {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Binary file does not start with the expected magic bytes.
    #[error("bad magic in {}: expected {expected:?}, found {found:?}", path.display())]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported format version {found} in {}", path.display())]
    UnsupportedVersion { path: PathBuf, found: u32 },

    /// File ended before the header-declared payload was complete.
    #[error("truncated file {}: {detail}", path.display())]
    Truncated { path: PathBuf, detail: String },

    /// File is structurally complete but internally inconsistent
    /// (dimension lies, trailing bytes, impossible field values).
    #[error("corrupt file {}: {detail}", path.display())]
    Corrupt { path: PathBuf, detail: String },

    /// Text document (config, annotations, predictions) failed to parse.
    #[error("parse error: {0}")]
    Parse(String),

    /// Parsed fine but the contents violate a semantic rule.
    #[error("validation error: {0}")]
    Validation(String),

    /// A checkpoint's stored config disagrees with the expected one.
    #[error("config mismatch on `{field}`: checkpoint has {stored}, expected {expected}")]
    ConfigMismatch {
        field: &'static str,
        stored: String,
        expected: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}

/// Open a file for reading, mapping `NotFound` to the dedicated variant.
pub(crate) fn open_file(path: &std::path::Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile {
                path: path.to_path_buf(),
            }
        } else {
            Error::Io(e)
        }
    })
}
