use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use super::config::ExperimentConfig;
use super::data::{io_err, prepare_samples, write_datasets, DatasetManifest, DATASET_MANIFEST, TRAIN_FILE, VAL_FILE};
use super::eval::{evaluate_pair, records_from_csv, records_to_csv, summarize, PairSummary};
use super::report::{headline, render_report};
use super::train::{load_trained, save_trained, train_pair, TrainedPair};
use crate::error::ExperimentError;
use crate::scene_sim::read_dataset;

pub fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("data")
}

pub fn params_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("params")
}

pub fn eval_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("eval")
}

fn records_path(cfg: &ExperimentConfig, ct: usize) -> PathBuf {
    eval_dir(cfg).join(format!("records_ct{ct}.csv"))
}

fn write(path: &Path, text: &str) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn check_dataset(cfg: &ExperimentConfig) -> Result<(), ExperimentError> {
    let path = data_dir(cfg).join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let m: DatasetManifest = toml::from_str(&text).map_err(|e| ExperimentError::Mismatch(format!("{}: {e}", path.display())))?;
    if m.config_hash != cfg.hash() {
        return Err(ExperimentError::Mismatch(format!(
            "dataset was generated with config {} but the current config is {}",
            m.config_hash,
            cfg.hash()
        )));
    }
    Ok(())
}

/// Generate both splits and record the effective config next to them.
pub fn cmd_gen_dataset(cfg: &ExperimentConfig) -> Result<DatasetManifest, ExperimentError> {
    let m = write_datasets(cfg, &data_dir(cfg))?;
    write(&cfg.output_dir.join("config.toml"), &cfg.to_toml_string())?;
    info!("wrote {} train and {} validation frames to {}", m.train_frames, m.val_frames, data_dir(cfg).display());
    Ok(m)
}

/// Train the baseline / FS-COD pair for every configured channel count.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<TrainedPair>, ExperimentError> {
    check_dataset(cfg)?;
    let ds = read_dataset(data_dir(cfg).join(TRAIN_FILE))?;
    let samples = prepare_samples::<f32>(&ds, &cfg.preset.grid());
    let seeds: Vec<u64> = ds.samples.iter().map(|s| s.scene.seed).collect();
    let mut pairs = Vec::new();
    for &ct in &cfg.model.transmitted_channels {
        pairs.push(train_pair(cfg, ct, &samples, &seeds)?);
    }
    save_trained(cfg, &params_dir(cfg), &pairs, samples.len())?;
    Ok(pairs)
}

/// Evaluate the trained pairs on the validation split, persist the raw
/// records and write the report.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<(String, String), ExperimentError> {
    check_dataset(cfg)?;
    let val = read_dataset(data_dir(cfg).join(VAL_FILE))?;
    let hash = cfg.hash();
    let mut summaries = Vec::new();
    for &ct in &cfg.model.transmitted_channels {
        let (baseline, fscod) = load_trained(cfg, &params_dir(cfg), ct)?;
        let mut link = cfg.channel.link()?;
        let records = evaluate_pair(cfg, &baseline, &fscod, &val, &mut link)?;
        write(&records_path(cfg, ct), &records_to_csv(&hash, ct, &records))?;
        let s = summarize(ct, &records, &cfg.eval);
        info!("{}", headline(&s));
        summaries.push(s);
    }
    write_report(cfg, &hash, &summaries)
}

/// Rebuild the report from the persisted records only.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<(String, String), ExperimentError> {
    let hash = cfg.hash();
    let mut summaries: Vec<PairSummary> = Vec::new();
    for &ct in &cfg.model.transmitted_channels {
        let path = records_path(cfg, ct);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let (stored, stored_ct, records) = records_from_csv(&text)?;
        if stored != hash || stored_ct != ct {
            return Err(ExperimentError::Mismatch(format!(
                "{} holds config {stored} / C_t {stored_ct}, expected {hash} / C_t {ct}",
                path.display()
            )));
        }
        summaries.push(summarize(ct, &records, &cfg.eval));
    }
    write_report(cfg, &hash, &summaries)
}

fn write_report(cfg: &ExperimentConfig, hash: &str, summaries: &[PairSummary]) -> Result<(String, String), ExperimentError> {
    let (text, csv) = render_report(cfg, hash, summaries);
    write(&eval_dir(cfg).join("report.txt"), &text)?;
    write(&eval_dir(cfg).join("report.csv"), &csv)?;
    Ok((text, csv))
}
