#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x >= 0)` also rejects NaN

//! Feature-sharing cooperative object detection over simulated 2D LIDAR.
//!
//! Two vehicles each turn their point cloud into a bird's-eye-view image and
//! run a shared convolutional feature extractor. The transmitter sends its
//! feature map, the receiver shifts it into its own grid, adds it to its own
//! features and runs the detection head on the sum.

pub mod detect_eval;
pub mod error;
pub mod experiment;
pub mod fscod;
pub mod geometry;
pub mod nn;
pub mod scalar;
pub mod scene_sim;
pub mod transport;

pub use scalar::Scalar;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Network32 = nn::Network<f32>;
pub type Network64 = nn::Network<f64>;
pub type FeatureMap32 = geometry::FeatureMap<f32>;
pub type FeatureMap64 = geometry::FeatureMap<f64>;
pub type BevImage32 = geometry::BevImage<f32>;
pub type OrientedBox32 = detect_eval::OrientedBox<f32>;
pub type OrientedBox64 = detect_eval::OrientedBox<f64>;
pub type CoopDetector32 = fscod::CoopDetector<f32>;
pub type CoopDetector64 = fscod::CoopDetector<f64>;
