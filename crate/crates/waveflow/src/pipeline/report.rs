//! Report stage: digests the manifests and evaluation summary of a run
//! into one human-readable Markdown page plus a machine-readable JSON
//! mirror. No metrics are recomputed here; the report only reads files
//! earlier stages wrote.

use crate::error::{Error, Result};
use crate::pipeline::dataset::{write_json_atomic, DatasetManifest, Split};
use crate::pipeline::evaluate::EvalSummary;
use crate::pipeline::train::StageManifest;
use crate::pipeline::{
    require_file, AENO_DIR, DATASET_DIR, EVAL_DIR, FM_DIR, REPORT_DIR, SNO_DIR,
};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainDigest {
    pub stage: String,
    pub parameter_count: usize,
    pub epochs: usize,
    pub first_loss: f64,
    pub last_loss: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub n_train_events: usize,
    pub n_test_events: usize,
    pub training: Vec<TrainDigest>,
    pub evaluation: EvalSummary,
}

fn load_stage(root: &Path, dir: &str) -> Result<Option<StageManifest>> {
    let path = root.join(dir).join("manifest.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path)?;
    Ok(Some(serde_json::from_str(&text)?))
}

fn digest(m: StageManifest) -> Result<TrainDigest> {
    let first = *m
        .epoch_losses
        .first()
        .ok_or_else(|| Error::Domain(format!("{} manifest holds no epoch losses", m.stage)))?;
    let last = *m.epoch_losses.last().expect("nonempty by the first() check");
    Ok(TrainDigest {
        stage: m.stage,
        parameter_count: m.parameter_count,
        epochs: m.epoch_losses.len(),
        first_loss: first,
        last_loss: last,
    })
}

pub fn cmd_report(root: &Path) -> Result<()> {
    let data = DatasetManifest::load(&root.join(DATASET_DIR))?;
    let summary_path =
        require_file(&root.join(EVAL_DIR).join("summary.json"), "evaluation summary")?;
    let summary: EvalSummary = serde_json::from_str(&std::fs::read_to_string(summary_path)?)?;

    let mut training = Vec::new();
    for dir in [AENO_DIR, SNO_DIR, FM_DIR] {
        if let Some(m) = load_stage(root, dir)? {
            training.push(digest(m)?);
        }
    }

    let report = Report {
        seed: summary.seed,
        n_train_events: data.events_in(Split::Train).len(),
        n_test_events: data.events_in(Split::Test).len(),
        training,
        evaluation: summary,
    };

    let mut md = String::new();
    let _ = writeln!(md, "# Run report\n");
    let _ = writeln!(md, "- Seed: {}", report.seed);
    let _ = writeln!(
        md,
        "- Events: {} train, {} test",
        report.n_train_events, report.n_test_events
    );
    let ev = &report.evaluation;
    let _ = writeln!(
        md,
        "- Output grid: {}x{}x{} (calibrated: {}, band limit: {})\n",
        ev.out_grid[0], ev.out_grid[1], ev.out_grid[2], ev.calibrated, ev.band_limit
    );

    if !report.training.is_empty() {
        let _ = writeln!(md, "## Training\n");
        let _ = writeln!(md, "| stage | parameters | epochs | first loss | last loss |");
        let _ = writeln!(md, "|---|---|---|---|---|");
        for t in &report.training {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {:.6e} | {:.6e} |",
                t.stage, t.parameter_count, t.epochs, t.first_loss, t.last_loss
            );
        }
        let _ = writeln!(md);
    }

    let _ = writeln!(md, "## Evaluation\n");
    let _ = writeln!(
        md,
        "Mean PGV-map Pearson {:.4} (min {:.4}); mean W1 of log10 PGV {:.4}; \
         worst per-frequency |mean residual| {:.4}.\n",
        ev.mean_pearson_pgv, ev.min_pearson_pgv, ev.mean_w1_log10_pgv, ev.max_residual_mean_abs
    );
    let _ = writeln!(md, "| event | magnitude | n | Pearson PGV | W1 log10 PGV | max |mean residual| |");
    let _ = writeln!(md, "|---|---|---|---|---|---|");
    for e in &ev.per_event {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {:.4} | {:.4} | {:.4} |",
            e.id, e.magnitude, e.ensemble_size, e.pearson_pgv, e.w1_log10_pgv,
            e.residual_mean_abs_max
        );
    }
    let _ = writeln!(md);

    if !ev.mag_sweep.is_empty() {
        let _ = writeln!(md, "## Magnitude scaling\n");
        if let Some(mono) = ev.mag_sweep_monotonic {
            let _ = writeln!(md, "Median PGV monotonic in magnitude: {mono}\n");
        }
        let _ = writeln!(md, "| magnitude | conditions | fields | median PGV | mean PGV |");
        let _ = writeln!(md, "|---|---|---|---|---|");
        for b in &ev.mag_sweep {
            let _ = writeln!(
                md,
                "| {:.2} | {} | {} | {:.6e} | {:.6e} |",
                b.magnitude, b.n_conditions, b.n_fields, b.pgv_median, b.pgv_mean
            );
        }
    }

    let out = root.join(REPORT_DIR);
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("report.md"), md.as_bytes())?;
    write_json_atomic(&out.join("report.json"), &report)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reporting without an evaluation directory names the missing input.
    #[test]
    fn report_requires_evaluation_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let cfg = {
            let mut c = crate::pipeline::config::RunConfig::default();
            c.sim.grid = [16, 8, 12];
            c.dataset.n_train = 1;
            c.dataset.n_test = 1;
            c.dataset.classes.truncate(1);
            // Hypocenter box must fit the shrunken domain.
            c.dataset.classes[0].hypo_x = [4.0, 12.0];
            c.dataset.classes[0].hypo_y = [2.0, 6.0];
            c
        };
        crate::pipeline::dataset::generate(&cfg, 5, &root.join(DATASET_DIR), false).unwrap();
        let err = cmd_report(root).unwrap_err();
        assert!(matches!(err, Error::MissingDependency(_)), "got {err:?}");
    }
}
