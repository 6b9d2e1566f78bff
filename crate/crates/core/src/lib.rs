//! Cow lameness detection from walk-through videos.
//!
//! The pipeline turns depth into hue-encoded color video, splits fragments
//! so that no cow appears on both sides, segments the cow, builds masked
//! inputs, extracts a two-pathway clip descriptor, trains a small softmax
//! classifier and reports accuracy, precision and recall for the lame class.

pub mod classifier;
pub mod corpus;
pub mod depth_codec;
pub mod error;
pub mod evaluation;
pub mod frame;
pub mod optim;
pub mod pipeline;
pub mod segmentation;
pub mod synthgen;
pub mod video_features;
pub mod weights;

pub use error::{Error, Result};
