//! End-to-end runs: configuration, dataset generation, training of the
//! baseline / FS-COD pair, evaluation and reports.

mod commands;
mod config;
mod data;
mod eval;
mod report;
mod train;

pub use commands::{cmd_eval, cmd_gen_dataset, cmd_report, cmd_train, data_dir, eval_dir, params_dir};
pub use config::{DatasetConfig, EvalConfig, ExperimentConfig, ModelConfig, TrainConfig};
pub use data::{
    ego_targets, generate_split, prepare_samples, split_seeds, write_datasets, DatasetManifest, Split, DATASET_MANIFEST, TRAIN_FILE, VAL_FILE,
};
pub use eval::{evaluate_pair, records_from_csv, records_to_csv, summarize, FrameRecord, PairSummary};
pub use report::{headline, render_report, report_size_table, FULL_SIZE_GRIDS, SIZE_TABLE_CHANNELS};
pub use train::{load_trained, save_trained, train_pair, EpochLog, TrainManifest, TrainedPair, LOSS_LOG, TRAIN_MANIFEST};
