//! Feature-sharing cooperative detection: a shared feature extractor runs on
//! each vehicle's BEV image, the coop map is translated onto the ego grid and
//! summed with the ego map, and one detection head decodes the sum.

mod config;
mod head;
mod model;

pub use config::{
    default_anchors, reference_detector, reference_extractor, scaled, PipelineConfig, Preset, BASELINE_BOTTLENECK, VALUES_PER_ANCHOR,
};
pub use head::{assign_targets, canonical_yaw, detection_loss, sigmoid, size_iou, Assignment, DetectionGrid, HeadLayout, LOG_SIZE_CLAMP};
pub use model::{bev_from_cloud, fuse, BranchOrder, CoopDetector, CoopRun, Trainer, TrainingSample};
