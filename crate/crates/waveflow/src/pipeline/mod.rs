//! End-to-end orchestration: dataset generation, the three training stages,
//! conditional sampling, evaluation, calibration, and report digestion.
//! Every stage writes into a fixed subdirectory of the run root and leaves
//! a manifest with the config and seeds, so reruns are reproducible and
//! stage dependencies are checkable.

pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod report;
pub mod sample;
pub mod train;

use crate::error::{Error, Result};
use std::path::{Path, PathBuf};

pub const DATASET_DIR: &str = "dataset";
pub const AENO_DIR: &str = "aeno";
pub const SNO_DIR: &str = "sno";
pub const FM_DIR: &str = "fm";
pub const SAMPLES_DIR: &str = "samples";
pub const EVAL_DIR: &str = "eval";
pub const CALIB_DIR: &str = "calib";
pub const REPORT_DIR: &str = "report";

/// Stage output guard: a stage directory is considered occupied once its
/// manifest exists.
pub fn claim_stage_dir(root: &Path, stage: &str, force: bool) -> Result<PathBuf> {
    let dir = root.join(stage);
    let manifest = dir.join("manifest.json");
    if manifest.exists() && !force {
        return Err(Error::Config(format!(
            "stage output {} already exists; pass --force to overwrite",
            dir.display()
        )));
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn require_file(path: &Path, what: &str) -> Result<PathBuf> {
    if !path.exists() {
        return Err(Error::MissingDependency(format!(
            "{what} not found at {}",
            path.display()
        )));
    }
    Ok(path.to_path_buf())
}
