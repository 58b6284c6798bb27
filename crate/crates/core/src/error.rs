use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed image header: {0}")]
    MalformedHeader(String),

    #[error("truncated pixel payload: expected {expected} bytes, found {found}")]
    TruncatedPixels { expected: usize, found: usize },

    #[error("unsupported depth: maxval {0} (at most 255 is supported)")]
    UnsupportedDepth(u32),

    #[error("insufficient frames in {}: found {found}, need at least 2", dir.display())]
    InsufficientFrames { dir: PathBuf, found: usize },

    #[error("cannot decode frame {}: {source}", file.display())]
    FrameDecode {
        file: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("duplicate video key {0:?}")]
    DuplicateKey(String),

    #[error("manifest lists no videos")]
    EmptyManifest,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "video too short for temporal pyramid: series length {len}, deepest level needs {needed}"
    )]
    VideoTooShort { len: usize, needed: usize },

    #[error("corpus has fewer than 2 videos")]
    TooFewVideos,

    #[error("negative kernel distance {0}")]
    NegativeDistance(f64),

    #[error("{}: not a feature archive", path.display())]
    NotAnArchive { path: PathBuf },

    #[error("{}: unsupported archive version {version}", path.display())]
    UnsupportedVersion { path: PathBuf, version: u16 },

    #[error("{}: record {index}: {msg}", path.display())]
    BadRecord {
        path: PathBuf,
        index: usize,
        msg: String,
    },

    #[error("records must have unique keys in ascending order: {0:?}")]
    UnsortedKeys(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("{}:{line}: {msg}", path.display())]
    Csv {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("similarity table has no entry for pair ({0}, {1})")]
    MissingPair(String, String),

    #[error("state dir {} belongs to a run with a different configuration ({changed}); remove it or choose another state dir", state_dir.display())]
    FingerprintMismatch { state_dir: PathBuf, changed: String },

    #[error("{stage} stage failed: {} task(s) failed: {}", failures.len(), failures.join("; "))]
    TaskFailures {
        stage: &'static str,
        failures: Vec<String>,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// True for errors caused by bad invocation or configuration rather than
    /// by a failure while computing.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Manifest { .. }
                | Error::DuplicateKey(_)
                | Error::EmptyManifest
                | Error::InvalidParameter(_)
                | Error::MissingInput(_)
                | Error::FingerprintMismatch { .. }
        )
    }
}
