//! Multi-view registration, region-wise label fusion and teacher-student
//! adaptation for 2D class-probability maps.

// `!(a < b)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod config;
pub mod error;
pub mod geometry;
pub mod integration;
pub mod io;
pub mod map;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod registration;
pub mod subject;
pub mod synth;

pub use error::{Error, Result};
pub use map::{Class, LabelMap, ProbabilityMap, NUM_CLASSES};
