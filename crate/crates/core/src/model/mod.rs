//! The detector, its parameter store and the layer primitives.

pub mod detector;
pub mod layers;
pub mod params;

pub use detector::{
    decode_box, location_center, prepare_input, DetectionOutput, Detector, DetectorCache, Embedding, FeaturePyramid,
    LevelGrad, LevelOutput, ModelConfig, OutputGrad, STRIDES,
};
pub use layers::FeatureMap;
pub use params::{kaiming_init, DetectorParams, Group, TensorKind, TensorSpec};
