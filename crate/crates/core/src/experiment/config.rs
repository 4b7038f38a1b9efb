use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::ExperimentError;
use crate::fscod::{default_anchors, reference_detector, reference_extractor, scaled, PipelineConfig, Preset, BASELINE_BOTTLENECK};
use crate::scene_sim::{LidarSpec, SceneParams};
use crate::transport::ChannelModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_frames: usize,
    pub val_frames: usize,
    pub lidar_noise: f64,
    /// Keep only frames where both vehicles get points on some target.
    pub require_shared_view: bool,
    /// Scene layout; the preset's default when absent.
    pub scene: Option<SceneParams>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { train_frames: 500, val_frames: 100, lidar_noise: 0.02, require_shared_view: true, scene: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width divisor applied to the reference extractor layout.
    pub extractor_divisor: usize,
    /// Width divisor applied to the reference detector layout.
    pub detector_divisor: usize,
    /// Transmitted channel counts to train and evaluate.
    pub transmitted_channels: Vec<usize>,
    pub anchors: Vec<(f64, f64)>,
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            extractor_divisor: 4,
            detector_divisor: 16,
            transmitted_channels: vec![8],
            anchors: default_anchors(),
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Floor of the cosine schedule as a fraction of `learning_rate`.
    pub final_lr_fraction: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 8, learning_rate: 0.01, final_lr_fraction: 0.05, momentum: 0.9, grad_clip: 10.0 }
    }
}

impl TrainConfig {
    /// Cosine decay from `learning_rate` to `final_lr_fraction * learning_rate`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let t = if self.epochs <= 1 { 0.0 } else { epoch as f64 / (self.epochs - 1) as f64 };
        let floor = self.final_lr_fraction;
        self.learning_rate * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    /// Ascending IoU thresholds for the precision / recall sweep.
    pub sweep: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            conf_threshold: 0.4,
            nms_iou: 0.5,
            sweep: (1..=9).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_preset")]
    pub preset: Preset,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub channel: ChannelModel,
}

fn default_preset() -> Preset {
    Preset::Lo
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn cfg_err(m: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(m.into())
}

impl ExperimentConfig {
    pub fn new(seed: u64, preset: Preset) -> Self {
        Self {
            seed,
            preset,
            output_dir: default_output(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            channel: ChannelModel { seed, ..ChannelModel::default() },
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(s).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Scene layout sized to the preset's sensing range.
    pub fn scene_params(&self) -> SceneParams {
        if let Some(s) = &self.dataset.scene {
            return s.clone();
        }
        match self.preset {
            Preset::Lo => SceneParams {
                targets: (3, 6),
                obstacles: (2, 5),
                placement_radius: 14.0,
                coop_distance: (4.0, 10.0),
                sensor_clearance: 2.0,
                occluder_gap: (1.5, 4.5),
                ..SceneParams::default()
            },
            Preset::Hi => SceneParams {
                targets: (2, 4),
                obstacles: (1, 3),
                placement_radius: 9.5,
                coop_distance: (3.0, 7.0),
                sensor_clearance: 1.5,
                obstacle_scale: 0.5,
                occluder_gap: (0.5, 2.5),
                ..SceneParams::default()
            },
        }
    }

    pub fn lidar(&self) -> LidarSpec {
        LidarSpec { noise_sigma: self.dataset.lidar_noise, ..LidarSpec::for_range(self.preset.lidar_range()) }
    }

    pub fn pipeline(&self, transmitted: usize) -> PipelineConfig {
        let m = &self.model;
        PipelineConfig {
            grid: self.preset.grid(),
            extractor: reference_extractor(self.preset, m.extractor_divisor, transmitted),
            detector: reference_detector(m.detector_divisor, m.anchors.len()),
            transmitted_channels: transmitted,
            anchors: m.anchors.clone(),
            conf_threshold: self.eval.conf_threshold,
            nms_iou: self.eval.nms_iou,
            lambda_coord: m.lambda_coord,
            lambda_noobj: m.lambda_noobj,
        }
    }

    /// Pipeline of the trained single-vehicle detector: same layout, but the
    /// extractor ends in the scaled reference bottleneck instead of `C_t`.
    pub fn baseline_pipeline(&self) -> PipelineConfig {
        self.pipeline(scaled(BASELINE_BOTTLENECK, self.model.extractor_divisor))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.dataset.train_frames == 0 || self.dataset.val_frames == 0 {
            return Err(cfg_err("frame counts must be positive"));
        }
        if !(self.dataset.lidar_noise >= 0.0) {
            return Err(cfg_err("lidar noise must be non-negative"));
        }
        self.scene_params().validate().map_err(|e| cfg_err(e.to_string()))?;
        self.lidar().validate().map_err(|e| cfg_err(e.to_string()))?;
        if self.model.transmitted_channels.is_empty() {
            return Err(cfg_err("no transmitted channel counts"));
        }
        for &ct in &self.model.transmitted_channels {
            if ct == 0 {
                return Err(cfg_err("transmitted channel count must be positive"));
            }
            let p = self.pipeline(ct);
            p.validate().map_err(|e| cfg_err(e.to_string()))?;
            let n = p.feature_size();
            crate::transport::check_bandwidth([ct, n, n], [3, p.grid.size, p.grid.size]).map_err(|e| cfg_err(e.to_string()))?;
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(cfg_err("epochs and batch size must be positive"));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) || !(0.0..1.0).contains(&t.momentum) {
            return Err(cfg_err("learning rate must be positive and momentum in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&t.final_lr_fraction) {
            return Err(cfg_err("final_lr_fraction must be in [0, 1]"));
        }
        if !(t.grad_clip >= 0.0 && t.grad_clip.is_finite()) {
            return Err(cfg_err("grad_clip must be finite and non-negative"));
        }
        let e = &self.eval;
        if !(e.iou_threshold > 0.0 && e.iou_threshold <= 1.0) {
            return Err(cfg_err("iou threshold must be in (0, 1]"));
        }
        if e.sweep.is_empty() || e.sweep.windows(2).any(|w| w[0] >= w[1]) || e.sweep.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(cfg_err("sweep thresholds must be strictly ascending within (0, 1]"));
        }
        self.channel.validate().map_err(|e| cfg_err(e.to_string()))?;
        Ok(())
    }

    /// Fingerprint of everything that determines the datasets and trained
    /// parameters. Output location, evaluation thresholds and the channel
    /// model are left out so one trained set can be evaluated several ways.
    pub fn hash(&self) -> String {
        let key = ExperimentConfig {
            output_dir: PathBuf::new(),
            eval: EvalConfig::default(),
            channel: ChannelModel::default(),
            ..self.clone()
        };
        format!("{:08x}", crc32fast::hash(key.to_toml_string().as_bytes()))
    }
}
