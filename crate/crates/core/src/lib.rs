//! Multi-target tracking with the HISP filter.
//!
//! The crate holds the filter recursion ([`filter`]), hypothesis management,
//! sliding-window track extraction, appearance features, a scenario
//! simulator, MOT file handling, CLEAR-MOT metrics and the frame-loop
//! pipeline used by the `hisp` command-line tool.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod appearance;
pub mod error;
pub mod extraction;
pub mod filter;
pub mod io;
pub mod lingauss;
pub mod management;
pub mod metrics;
pub mod pipeline;
pub mod simulator;

pub use error::{HispError, Result};
pub use extraction::{BoxEstimate, TrackSet};
pub use filter::{Hypothesis, MeasurementId, MultiTargetConfiguration};
pub use io::{BBox, Detection, DetectionFile};
