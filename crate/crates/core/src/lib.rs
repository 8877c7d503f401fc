//! Egocentric video object segmentation with RGB + depth feature fusion.
//!
//! Frames are encoded by a visual stream and a geometric (depth) stream
//! into multi-scale pyramids, fused per scale by a pointwise perceptron,
//! and segmented by a memory-based mask propagator seeded with the first
//! annotated frame. Inference may ensemble several scaled/flipped passes.

pub mod archive;
pub mod autograd;
pub mod config;
pub mod dataio;
pub mod encoders;
pub mod error;
pub mod inference;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod segmenter;
pub mod tensor;
pub mod training;
pub mod tta;
pub mod types;

pub use error::{Error, Result};
pub use model::{FrameInput, Model, ModelConfig, SequenceSegmenter};
pub use tensor::Tensor;
pub use types::{argmax_decode, pad_to_multiple, FeaturePyramid, Frame, MaskMap, ProbabilityVolume};
