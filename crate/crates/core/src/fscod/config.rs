use serde::{Deserialize, Serialize};

use crate::error::PipelineError;
use crate::geometry::BevGrid;
use crate::nn::LayerSpec;

/// Values per anchor in the detection head: tx, ty, tw, tl, sin, cos, conf.
pub const VALUES_PER_ANCHOR: usize = 7;

/// Resolution regime. `Hi` keeps all four pools of the reference layout,
/// `Lo` drops the last one, so `Hi` uses stride 16 and `Lo` stride 8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Hi,
    Lo,
}

impl Preset {
    pub fn maxpools(self) -> usize {
        match self {
            Preset::Hi => 4,
            Preset::Lo => 3,
        }
    }

    /// BEV grid at 128 px. Lo runs at the full-size setup's 4.16 ppm
    /// (1.92 m feature cells); hi covers a 10 m radius at 6.4 ppm, since
    /// 10.4 ppm at 128 px leaves too little room for an occlusion scene.
    pub fn grid(self) -> BevGrid {
        let extent = match self {
            Preset::Hi => 10.0,
            Preset::Lo => 64.0 / 4.16,
        };
        BevGrid::new(extent, 128).expect("preset grid")
    }

    pub fn lidar_range(self) -> f64 {
        self.grid().extent_m
    }
}

/// Width of the extractor's last layer in the reference single-vehicle
/// detector, before scaling.
pub const BASELINE_BOTTLENECK: usize = 64;

pub fn scaled(width: usize, divisor: usize) -> usize {
    (width / divisor.max(1)).max(1)
}

fn block(out: usize, kernel: usize) -> [LayerSpec; 3] {
    [LayerSpec::conv(kernel, out), LayerSpec::ChannelNorm, LayerSpec::LeakyRelu]
}

/// Feature extractor following the reference layer pattern with widths
/// divided by `divisor`. The last layer is a plain 1x1 conv with
/// `transmitted` output channels.
pub fn reference_extractor(preset: Preset, divisor: usize, transmitted: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let stages: [&[usize]; 4] = [&[24], &[48], &[64, 32, 64], &[128, 64, 128]];
    for (i, widths) in stages.iter().enumerate() {
        for &w in widths.iter() {
            specs.extend(block(scaled(w, divisor), 3));
        }
        if i < 3 || preset == Preset::Hi {
            specs.push(LayerSpec::MaxPool);
        }
    }
    specs.extend(block(scaled(128, divisor), 3));
    specs.push(LayerSpec::conv(1, transmitted));
    specs
}

/// Detection head following the reference layer pattern, widths divided by
/// `divisor`, ending in a plain 1x1 conv with `anchors * 7` outputs.
pub fn reference_detector(divisor: usize, anchors: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for (w, k) in [(128, 1), (256, 3), (512, 1), (1024, 1), (2048, 3), (1024, 1), (2048, 1), (1024, 3)] {
        specs.extend(block(scaled(w, divisor), k));
    }
    specs.push(LayerSpec::conv(1, anchors * VALUES_PER_ANCHOR));
    specs
}

/// Everything needed to build and run one detector pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub grid: BevGrid,
    pub extractor: Vec<LayerSpec>,
    pub detector: Vec<LayerSpec>,
    pub transmitted_channels: usize,
    /// `(width, length)` priors in meters.
    pub anchors: Vec<(f64, f64)>,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
}

impl PipelineConfig {
    pub fn reference(preset: Preset, extractor_divisor: usize, detector_divisor: usize, transmitted: usize) -> Self {
        let anchors = default_anchors();
        Self {
            grid: preset.grid(),
            extractor: reference_extractor(preset, extractor_divisor, transmitted),
            detector: reference_detector(detector_divisor, anchors.len()),
            transmitted_channels: transmitted,
            anchors,
            conf_threshold: 0.4,
            nms_iou: 0.5,
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.extractor.iter().filter(|s| **s == LayerSpec::MaxPool).count()
    }

    pub fn feature_size(&self) -> usize {
        self.grid.size / self.stride()
    }

    /// Feature cell edge in meters.
    pub fn cell_m(&self) -> f64 {
        self.stride() as f64 / self.grid.resolution()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.grid.validate()?;
        match self.extractor.last() {
            Some(LayerSpec::Conv { kernel: 1, out_channels, .. }) if *out_channels == self.transmitted_channels => {}
            other => return bad(format!("extractor must end in a 1x1 conv with {} channels, found {other:?}", self.transmitted_channels)),
        }
        if self.detector.contains(&LayerSpec::MaxPool) {
            return bad("detector must not downsample".into());
        }
        let head = self.anchors.len() * VALUES_PER_ANCHOR;
        match self.detector.last() {
            Some(LayerSpec::Conv { out_channels, .. }) if *out_channels == head => {}
            other => return bad(format!("detector must end in a conv with {head} channels, found {other:?}")),
        }
        if self.anchors.is_empty() || self.anchors.iter().any(|&(w, l)| !(w > 0.0 && l > 0.0)) {
            return bad("anchors must be non-empty and positive".into());
        }
        if !self.grid.size.is_multiple_of(self.stride()) {
            return bad(format!("grid size {} not divisible by stride {}", self.grid.size, self.stride()));
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return bad(format!("conf threshold {}", self.conf_threshold));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return bad(format!("nms iou {}", self.nms_iou));
        }
        Ok(())
    }
}

/// Two car-sized priors of different aspect.
pub fn default_anchors() -> Vec<(f64, f64)> {
    vec![(1.8, 4.5), (2.0, 3.8)]
}
