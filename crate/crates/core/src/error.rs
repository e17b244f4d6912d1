use std::io;

/// Errors produced by the simulation, estimation and regression pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid room: {0}")]
    InvalidRoom(String),

    #[error("{what} at {position:?} lies outside the room")]
    OutOfBounds { what: &'static str, position: [f64; 3] },

    #[error("response length {got} samples is shorter than the direct-path delay ({needed} samples)")]
    InsufficientLength { needed: usize, got: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("sample-rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(f64, f64),

    #[error("degenerate power: {0}")]
    DegeneratePower(String),

    #[error("reference channel is identically zero")]
    DegenerateReference,

    #[error("normalizer has a zero bin at index {0}")]
    DegenerateNormalizer(usize),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("region {region} received {count} training pairs (needs {needed}); refit with a smaller K")]
    EmptyRegion { region: usize, count: usize, needed: usize },

    #[error("extrapolation: {0}")]
    Extrapolation(String),

    #[error("grid escapes the room: {0}")]
    Bounds(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("pose {index}: {source}")]
    AtPose {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_pose(index: usize, source: Error) -> Self {
        Error::AtPose {
            index,
            source: Box::new(source),
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// True for errors that stem from caller input rather than runtime numerics.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Numeric(_) | Error::EmptyRegion { .. } | Error::Io(_) => false,
            Error::AtPose { source, .. } => source.is_validation(),
            _ => true,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
