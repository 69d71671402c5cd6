use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the tracker, its I/O layer and the evaluation code.
#[derive(Debug, Error)]
pub enum HispError {
    #[error("numerical failure in {context}")]
    Numerical { context: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("no appearance feature for frame {frame}, detection {index}")]
    MissingFeature { frame: u32, index: u32 },

    #[error("feature length mismatch: {left} vs {right}")]
    FeatureLength { left: usize, right: usize },

    #[error("zero-norm feature vector")]
    ZeroNorm,

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("empty crop for frame {frame}")]
    EmptyCrop { frame: u32 },

    #[error("extraction problem is infeasible: {0}")]
    Infeasible(String),

    #[error("frame range mismatch: {0}")]
    FrameRange(String),

    #[error("frame {frame}: {source}")]
    AtFrame {
        frame: u32,
        #[source]
        source: Box<HispError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HispError {
    pub(crate) fn at_frame(self, frame: u32) -> Self {
        match self {
            e @ HispError::AtFrame { .. } => e,
            e => HispError::AtFrame {
                frame,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn numerical(context: impl Into<String>) -> Self {
        HispError::Numerical {
            context: context.into(),
        }
    }
}

pub type Result<T, E = HispError> = std::result::Result<T, E>;
