use thiserror::Error;

/// Errors raised while reading or writing the binary file formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported {kind} version {found} (expected {expected})")]
    UnsupportedVersion {
        kind: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("truncated {what}: needed {needed} bytes, {available} available")]
    Truncated {
        what: String,
        needed: usize,
        available: usize,
    },
    #[error("manifest disagrees with payload: {0}")]
    ManifestMismatch(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("calibration file holds no samples")]
    EmptyCalibration,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum GrailError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("matrix not positive definite after ridge {ridge:e} (pivot {pivot} = {value:e}); increase the ridge coefficient")]
    Singular { ridge: f64, pivot: usize, value: f64 },
    #[error("degenerate calibration statistics: {0}")]
    DegenerateStats(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("grouped-query constraint violated: {0}")]
    Gqa(String),
    #[error("calibration batch is empty")]
    EmptyBatch,
    #[error("block {block}: {source}")]
    Block {
        block: usize,
        #[source]
        source: Box<GrailError>,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
}

impl GrailError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        GrailError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn at_block(self, block: usize) -> Self {
        match self {
            e @ GrailError::Block { .. } => e,
            other => GrailError::Block {
                block,
                source: Box::new(other),
            },
        }
    }

    /// The innermost error, skipping block-index wrappers.
    pub fn root(&self) -> &GrailError {
        match self {
            GrailError::Block { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of the numerical stages (factorization, degenerate statistics).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            GrailError::Singular { .. } | GrailError::DegenerateStats(_)
        )
    }

    pub fn is_format(&self) -> bool {
        matches!(self.root(), GrailError::Format(_))
    }

    /// Index of the block the error was raised in, when known.
    pub fn block(&self) -> Option<usize> {
        match self {
            GrailError::Block { block, .. } => Some(*block),
            _ => None,
        }
    }

    /// Process exit status used by the command-line tool: 3 for unreadable or
    /// malformed files, 4 for numerical failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.is_format() {
            3
        } else if self.is_numerical() {
            4
        } else {
            2
        }
    }
}

impl From<std::io::Error> for GrailError {
    fn from(e: std::io::Error) -> Self {
        GrailError::Format(FormatError::Io(e))
    }
}

pub type Result<T, E = GrailError> = std::result::Result<T, E>;
