use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::detect_eval::OrientedBox;
use crate::error::{ExperimentError, SceneError};
use crate::fscod::{bev_from_cloud, TrainingSample};
use crate::geometry::BevGrid;
use crate::scalar::Scalar;
use crate::scene_sim::{generate_scene, simulate_lidar, target_hit_counts, write_dataset, Dataset, Sample, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
        }
    }
}

/// Scene seeds for a split: separate ChaCha streams of the experiment seed.
pub fn split_seeds(seed: u64, split: Split) -> impl Iterator<Item = u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream());
    std::iter::repeat_with(move || rng.next_u64())
}

fn frame_wanted(scene: &Scene, cfg: &ExperimentConfig) -> bool {
    if !cfg.dataset.require_shared_view {
        return true;
    }
    let lidar = cfg.lidar();
    let sees = |pose| target_hit_counts(scene, pose, &lidar).iter().any(|&n| n > 0);
    sees(&scene.ego_pose) && sees(&scene.coop_pose)
}

/// Generate one split. Infeasible or unwanted scenes are skipped, bounded
/// at twenty draws per requested frame.
pub fn generate_split(cfg: &ExperimentConfig, split: Split) -> Result<Dataset, ExperimentError> {
    let want = match split {
        Split::Train => cfg.dataset.train_frames,
        Split::Val => cfg.dataset.val_frames,
    };
    let params = cfg.scene_params();
    let lidar = cfg.lidar();
    let mut samples = Vec::with_capacity(want);
    for (draws, seed) in split_seeds(cfg.seed, split).enumerate() {
        if samples.len() == want {
            break;
        }
        if draws >= want * 20 {
            return Err(ExperimentError::Scene(SceneError::Infeasible { what: "usable frame", attempts: draws }));
        }
        let scene = match generate_scene(&params, seed) {
            Ok(s) => s,
            Err(SceneError::Infeasible { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        if !frame_wanted(&scene, cfg) {
            continue;
        }
        let ego_cloud = simulate_lidar(&scene, &scene.ego_pose, &lidar, seed ^ 0xe90).cast();
        let coop_cloud = simulate_lidar(&scene, &scene.coop_pose, &lidar, seed ^ 0xc00b).cast();
        samples.push(Sample { scene, ego_cloud, coop_cloud });
    }
    Ok(Dataset { lidar, samples })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub seed: u64,
    pub train_file: String,
    pub train_frames: usize,
    pub val_file: String,
    pub val_frames: usize,
}

pub const TRAIN_FILE: &str = "train.fscd";
pub const VAL_FILE: &str = "val.fscd";
pub const DATASET_MANIFEST: &str = "dataset.toml";

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> ExperimentError {
    ExperimentError::Io { path: path.display().to_string(), source }
}

/// Generate both splits into `dir` and write the manifest.
pub fn write_datasets(cfg: &ExperimentConfig, dir: &Path) -> Result<DatasetManifest, ExperimentError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let train = generate_split(cfg, Split::Train)?;
    let val = generate_split(cfg, Split::Val)?;
    write_dataset(&train, dir.join(TRAIN_FILE))?;
    write_dataset(&val, dir.join(VAL_FILE))?;
    let manifest = DatasetManifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        train_file: TRAIN_FILE.into(),
        train_frames: train.samples.len(),
        val_file: VAL_FILE.into(),
        val_frames: val.samples.len(),
    };
    let path = dir.join(DATASET_MANIFEST);
    fs::write(&path, toml::to_string(&manifest).expect("manifest serializes")).map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

/// Targets inside the ego sensor's range and grid, in the ego frame
/// (globally aligned axes, origin at the ego sensor), and the position of
/// the scene's flagged target among them.
pub fn ego_targets(scene: &Scene, range_m: f64, grid: &BevGrid) -> (Vec<OrientedBox<f64>>, Option<usize>) {
    let mut out = Vec::new();
    let mut flagged = None;
    for (i, t) in scene.targets.iter().enumerate() {
        let b = t.footprint.translated(-scene.ego_pose.x, -scene.ego_pose.y);
        if (b.cx * b.cx + b.cy * b.cy).sqrt() > range_m || grid.pixel_of(b.cx, b.cy).is_none() {
            continue;
        }
        if scene.occluded_target == Some(i) {
            flagged = Some(out.len());
        }
        out.push(b);
    }
    (out, flagged)
}

/// BEV images and ego-frame targets for every frame.
pub fn prepare_samples<T: Scalar>(ds: &Dataset, grid: &BevGrid) -> Vec<TrainingSample<T>> {
    ds.samples
        .iter()
        .map(|s| TrainingSample {
            ego_bev: bev_from_cloud(&s.ego_cloud, &s.scene.ego_pose, grid),
            coop_bev: bev_from_cloud(&s.coop_cloud, &s.scene.coop_pose, grid),
            ego_pose: s.scene.ego_pose,
            coop_pose: s.scene.coop_pose,
            targets: ego_targets(&s.scene, ds.lidar.range_m, grid).0,
        })
        .collect()
}
