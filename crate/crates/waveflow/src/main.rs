//! Command-line orchestration of the two-stage generation pipeline. Every
//! verb operates on one run root directory; stages communicate only
//! through files under that root, so any stage can be rerun or inspected
//! in isolation.
//!
//! Config resolution: `--config` wins when given; otherwise verbs that
//! consume an existing dataset reuse the config embedded in its manifest,
//! and `gen-data` falls back to the built-in defaults. The effective seed
//! is `--seed` when given, else the config's.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use waveflow::pipeline::config::RunConfig;
use waveflow::pipeline::dataset::{generate, DatasetManifest};
use waveflow::pipeline::evaluate::cmd_evaluate;
use waveflow::pipeline::report::cmd_report;
use waveflow::pipeline::sample::{cmd_calibrate, cmd_sample, SampleOptions};
use waveflow::pipeline::train::{train_aeno, train_fm, train_sno};
use waveflow::pipeline::DATASET_DIR;
use waveflow::Result;

#[derive(Parser)]
#[command(name = "waveflow", version, about = "Conditional seismic wavefield generation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Common {
    /// Run configuration JSON; defaults to the dataset manifest's config
    /// (or built-in defaults for gen-data).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override; defaults to the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run root directory holding every stage's outputs.
    #[arg(long, default_value = "runs/default", global = true)]
    out: PathBuf,
    /// Overwrite an existing stage directory.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Verb {
    /// Simulate the event catalog and write train/test splits.
    GenData,
    /// Train the autoencoding operator on coarse fields.
    TrainAeno,
    /// Train the super-resolution operator on coarse/fine pairs.
    TrainSno,
    /// Train the conditional latent flow (needs the AENO encoder).
    TrainFm,
    /// Generate wavefield ensembles for a set of conditions.
    Sample {
        /// Conditions JSON {"conditions": [...]}; defaults to the test split.
        #[arg(long)]
        conditions: Option<PathBuf>,
        /// Realizations per condition; defaults to the config's value.
        #[arg(short, long)]
        n: Option<usize>,
        /// Apply magnitude-interpolated spectral bias correction.
        #[arg(long)]
        calibrate: bool,
        /// Re-project decoded fields onto the retained band before
        /// super-resolution; overrides the config's flag.
        #[arg(long)]
        band_limit: Option<bool>,
    },
    /// Compare samples against the held-out split and export metrics.
    Evaluate,
    /// Estimate per-magnitude spectral bias curves from the training split.
    Calibrate,
    /// Digest manifests and evaluation results into report.md/report.json.
    Report,
}

/// Loads the effective config: explicit file, then dataset manifest, then
/// defaults. `gen-data` never reads the manifest it is about to write.
fn resolve_config(common: &Common, from_dataset: bool) -> Result<RunConfig> {
    if let Some(path) = &common.config {
        return RunConfig::load(path);
    }
    if from_dataset {
        let manifest = DatasetManifest::load(&common.out.join(DATASET_DIR))?;
        return Ok(manifest.config);
    }
    Ok(RunConfig::default())
}

fn run(cli: &Cli) -> Result<()> {
    let common = &cli.common;
    let root: &Path = &common.out;
    match &cli.verb {
        Verb::GenData => {
            let cfg = resolve_config(common, false)?;
            let seed = common.seed.unwrap_or(cfg.seed);
            generate(&cfg, seed, &root.join(DATASET_DIR), common.force)?;
            let manifest = DatasetManifest::load(&root.join(DATASET_DIR))?;
            println!(
                "dataset: {} events ({} train) at {}",
                manifest.events.len(),
                cfg.dataset.n_train,
                root.join(DATASET_DIR).display()
            );
        }
        Verb::TrainAeno => {
            let cfg = resolve_config(common, true)?;
            let seed = common.seed.unwrap_or(cfg.seed);
            train_aeno(&cfg, seed, root, common.force)?;
            println!("aeno: trained for {} epochs", cfg.aeno_train.epochs);
        }
        Verb::TrainSno => {
            let cfg = resolve_config(common, true)?;
            let seed = common.seed.unwrap_or(cfg.seed);
            train_sno(&cfg, seed, root, common.force)?;
            println!("sno: trained for {} epochs", cfg.sno_train.epochs);
        }
        Verb::TrainFm => {
            let cfg = resolve_config(common, true)?;
            let seed = common.seed.unwrap_or(cfg.seed);
            train_fm(&cfg, seed, root, common.force)?;
            println!("fm: trained for {} epochs", cfg.flow_train.epochs);
        }
        Verb::Sample { conditions, n, calibrate, band_limit } => {
            let cfg = resolve_config(common, true)?;
            let seed = common.seed.unwrap_or(cfg.seed);
            let opts = SampleOptions {
                conditions_path: conditions.clone(),
                n_realizations: *n,
                calibrate: *calibrate,
                band_limit: *band_limit,
            };
            cmd_sample(root, seed, &opts, common.force)?;
            println!("samples: written to {}", root.join("samples").display());
        }
        Verb::Evaluate => {
            let cfg = resolve_config(common, true)?;
            let seed = common.seed.unwrap_or(cfg.seed);
            cmd_evaluate(root, seed, common.force)?;
            println!("evaluation: written to {}", root.join("eval").display());
        }
        Verb::Calibrate => {
            let cfg = resolve_config(common, true)?;
            let seed = common.seed.unwrap_or(cfg.seed);
            cmd_calibrate(root, seed, common.force)?;
            println!("calibration: curves written to {}", root.join("calib").display());
        }
        Verb::Report => {
            cmd_report(root)?;
            println!("report: written to {}", root.join("report").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
