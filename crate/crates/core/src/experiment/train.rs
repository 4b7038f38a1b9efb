use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::io_err;
use crate::error::{ExperimentError, PipelineError};
use crate::fscod::{CoopDetector, Trainer, TrainingSample};
use crate::nn::{load_params_into, save_params};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub baseline_loss: f64,
    pub fscod_loss: f64,
}

/// Single-vehicle and cooperative detectors trained on the same frames.
#[derive(Debug, Clone)]
pub struct TrainedPair {
    pub transmitted_channels: usize,
    pub baseline: CoopDetector<f32>,
    pub fscod: CoopDetector<f32>,
    pub log: Vec<EpochLog>,
}

fn diverged(model: &str, epoch: usize, batch_seeds: &[u64], e: PipelineError) -> ExperimentError {
    let scene_seed = match &e {
        PipelineError::NonFiniteLoss { sample } => batch_seeds.get(*sample).copied(),
        _ => None,
    }
    .unwrap_or(batch_seeds[0]);
    ExperimentError::Diverged { model: model.into(), epoch, scene_seed, reason: e.to_string() }
}

fn is_divergence(e: &PipelineError) -> bool {
    matches!(e, PipelineError::NonFiniteLoss { .. } | PipelineError::Nn(crate::error::NnError::NonFinite { .. }))
}

/// Train both detectors for one transmitted-channel count. They are
/// initialised from the same seed and see batches in the identical order.
pub fn train_pair(
    cfg: &ExperimentConfig,
    transmitted: usize,
    samples: &[TrainingSample<f32>],
    scene_seeds: &[u64],
) -> Result<TrainedPair, ExperimentError> {
    assert_eq!(samples.len(), scene_seeds.len());
    if samples.is_empty() {
        return Err(ExperimentError::Config("no training samples".into()));
    }
    let init_seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(transmitted as u64);
    let mut baseline = CoopDetector::<f32>::new(cfg.baseline_pipeline(), init_seed)?;
    let mut fscod = CoopDetector::<f32>::new(cfg.pipeline(transmitted), init_seed)?;
    let t = &cfg.train;
    let clip = (t.grad_clip > 0.0).then_some(t.grad_clip);
    let mut base_opt = Trainer::new(t.momentum, clip);
    let mut coop_opt = Trainer::new(t.momentum, clip);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(t.epochs);

    for epoch in 0..t.epochs {
        let lr = t.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
        order.shuffle(&mut rng);
        let (mut base_sum, mut coop_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(t.batch_size) {
            let batch: Vec<&TrainingSample<f32>> = chunk.iter().map(|&i| &samples[i]).collect();
            let seeds: Vec<u64> = chunk.iter().map(|&i| scene_seeds[i]).collect();
            let step = |e: PipelineError, model: &str| if is_divergence(&e) { diverged(model, epoch, &seeds, e) } else { e.into() };
            base_sum += base_opt.train_step_baseline(&mut baseline, &batch, lr).map_err(|e| step(e, "baseline"))?;
            coop_sum += coop_opt.train_step(&mut fscod, &batch, lr).map_err(|e| step(e, "fs-cod"))?;
            batches += 1;
        }
        let entry = EpochLog { epoch, lr, baseline_loss: base_sum / batches as f64, fscod_loss: coop_sum / batches as f64 };
        info!(
            "C_t={transmitted} epoch {}/{}: lr {:.5} baseline loss {:.4} fs-cod loss {:.4}",
            epoch + 1,
            t.epochs,
            lr,
            entry.baseline_loss,
            entry.fscod_loss
        );
        log.push(entry);
    }
    Ok(TrainedPair { transmitted_channels: transmitted, baseline, fscod, log })
}

pub const TRAIN_MANIFEST: &str = "train.toml";
pub const LOSS_LOG: &str = "loss_log.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub config_hash: String,
    pub transmitted_channels: Vec<usize>,
    pub epochs: usize,
    pub train_frames: usize,
}

fn param_path(dir: &Path, ct: usize, model: &str, part: &str) -> PathBuf {
    dir.join(format!("ct{ct}_{model}_{part}.fsnn"))
}

/// Parameter files plus the loss log for every trained pair.
pub fn save_trained(cfg: &ExperimentConfig, dir: &Path, pairs: &[TrainedPair], train_frames: usize) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let hash = cfg.hash();
    let mut csv = format!("# config_hash={hash}\nct,epoch,lr,baseline_loss,fscod_loss\n");
    for p in pairs {
        let ct = p.transmitted_channels;
        for (model, m) in [("baseline", &p.baseline), ("fscod", &p.fscod)] {
            save_params(&m.extractor, param_path(dir, ct, model, "extractor"))?;
            save_params(&m.detector, param_path(dir, ct, model, "detector"))?;
        }
        for e in &p.log {
            let _ = writeln!(csv, "{ct},{},{:?},{:?},{:?}", e.epoch + 1, e.lr, e.baseline_loss, e.fscod_loss);
        }
    }
    let path = dir.join(LOSS_LOG);
    fs::write(&path, csv).map_err(|e| io_err(&path, e))?;
    let manifest = TrainManifest {
        config_hash: hash,
        transmitted_channels: pairs.iter().map(|p| p.transmitted_channels).collect(),
        epochs: cfg.train.epochs,
        train_frames,
    };
    let path = dir.join(TRAIN_MANIFEST);
    fs::write(&path, toml::to_string(&manifest).expect("manifest serializes")).map_err(|e| io_err(&path, e))?;
    Ok(())
}

/// Load the pair for `ct`, refusing parameters trained under another config.
pub fn load_trained(cfg: &ExperimentConfig, dir: &Path, ct: usize) -> Result<(CoopDetector<f32>, CoopDetector<f32>), ExperimentError> {
    let path = dir.join(TRAIN_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let manifest: TrainManifest = toml::from_str(&text).map_err(|e| ExperimentError::Mismatch(format!("{}: {e}", path.display())))?;
    if manifest.config_hash != cfg.hash() {
        return Err(ExperimentError::Mismatch(format!(
            "parameters were trained with config {} but the current config is {}",
            manifest.config_hash,
            cfg.hash()
        )));
    }
    if !manifest.transmitted_channels.contains(&ct) {
        return Err(ExperimentError::Mismatch(format!("no trained parameters for C_t = {ct}")));
    }
    let load = |model: &str, pipeline| -> Result<CoopDetector<f32>, ExperimentError> {
        let mut m = CoopDetector::<f32>::new(pipeline, 0)?;
        load_params_into(&mut m.extractor, param_path(dir, ct, model, "extractor"))?;
        load_params_into(&mut m.detector, param_path(dir, ct, model, "detector"))?;
        Ok(m)
    };
    Ok((load("baseline", cfg.baseline_pipeline())?, load("fscod", cfg.pipeline(ct))?))
}
