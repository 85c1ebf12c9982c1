//! End-to-end exercise of the command-line interface: verb wiring, stage
//! dependency enforcement, overwrite guards, and exit codes.

use std::path::Path;
use std::process::{Command, Output};
use waveflow::operators::{AenoConfig, ConditionRanges, FlowNetConfig, SnoConfig};
use waveflow::pipeline::config::{ClassSpec, RunConfig};

fn run(root: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_waveflow"))
        .arg("--out")
        .arg(root)
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, code: i32, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{what}: expected exit {code}, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

/// A config small enough that every stage finishes in seconds.
fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 5;
    cfg.sim.grid = [16, 8, 12];
    cfg.dataset.n_train = 2;
    cfg.dataset.n_test = 2;
    cfg.dataset.classes = vec![
        ClassSpec { magnitude: 4.4, hypo_x: [4.0, 12.0], hypo_y: [2.0, 6.0], rupture: None },
        ClassSpec { magnitude: 6.0, hypo_x: [4.0, 12.0], hypo_y: [2.0, 6.0], rupture: None },
    ];
    cfg.aeno = AenoConfig {
        in_channels: 2,
        width: 4,
        latent_channels: 1,
        latent_grid: [4, 2, 3],
        field_modes: [3, 2, 2],
        latent_modes: [2, 1, 1],
        blocks_outer: 1,
        blocks_inner: 1,
        norm_channel: true,
    };
    cfg.sno = SnoConfig {
        channels: 2,
        width: 4,
        modes: [3, 2, 2],
        blocks: 1,
        out_grid: [16, 8, 12],
        norm_channel: true,
    };
    cfg.flow_net = FlowNetConfig {
        latent_channels: 1,
        width: 8,
        modes: [2, 1, 1],
        blocks: 1,
        ranges: ConditionRanges {
            magnitude: [4.4, 6.0],
            hypo_x: [4.0, 12.0],
            hypo_y: [2.0, 6.0],
        },
    };
    for t in [&mut cfg.aeno_train, &mut cfg.sno_train, &mut cfg.flow_train] {
        t.epochs = 1;
        t.batch_size = 2;
    }
    cfg.sample.n_realizations = 1;
    cfg.sample.out_grid = [16, 8, 12];
    cfg.eval.fas_bins = vec![1, 2];
    cfg.eval.n_random_refs = 1;
    cfg.eval.mag_sweep.n_per_bin = 0;
    cfg.calibrate.n_realizations = 1;
    cfg
}

#[test]
fn cli_runs_every_stage_and_enforces_dependencies() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    let config = dir.path().join("config.json");
    tiny_config().save(&config).unwrap();

    // The flow stage needs the autoencoder; before any data exists the
    // failure is the missing dataset.
    assert_code(&run(&root, &config, &["train-fm"]), 3, "train-fm without dataset");

    assert_code(&run(&root, &config, &["gen-data"]), 0, "gen-data");
    assert!(root.join("dataset").join("manifest.json").exists());
    assert_code(&run(&root, &config, &["gen-data"]), 2, "gen-data overwrite guard");

    assert_code(&run(&root, &config, &["train-fm"]), 3, "train-fm without aeno");
    assert_code(&run(&root, &config, &["train-aeno"]), 0, "train-aeno");
    assert_code(&run(&root, &config, &["train-sno"]), 0, "train-sno");
    assert_code(&run(&root, &config, &["train-fm"]), 0, "train-fm");
    for stage in ["aeno", "sno", "fm"] {
        assert!(root.join(stage).join("checkpoint.bin").exists(), "{stage} checkpoint");
        assert!(root.join(stage).join("loss.csv").exists(), "{stage} loss curve");
    }

    assert_code(&run(&root, &config, &["evaluate"]), 3, "evaluate before sampling");
    assert_code(&run(&root, &config, &["sample"]), 0, "sample");
    let samples: Vec<_> = std::fs::read_dir(root.join("samples"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "bin"))
        .collect();
    assert_eq!(samples.len(), 2, "one realization per test condition");

    assert_code(&run(&root, &config, &["evaluate"]), 0, "evaluate");
    for file in ["pgv_maps.csv", "fas_maps.csv", "ncc_maps.csv", "profiles.csv",
        "residual_stats.csv", "distributions.csv", "w1.csv", "mag_scaling.csv",
        "summary.json"]
    {
        assert!(root.join("eval").join(file).exists(), "missing {file}");
    }
    assert_code(&run(&root, &config, &["evaluate"]), 2, "evaluate overwrite guard");

    assert_code(&run(&root, &config, &["calibrate"]), 0, "calibrate");
    assert!(root.join("calib").join("bias_m4.4.json").exists());
    assert!(root.join("calib").join("bias_m6.json").exists());
    assert_code(
        &run(&root, &config, &["sample", "--calibrate"]),
        2,
        "calibrated resample overwrite guard",
    );
    assert_code(
        &run(&root, &config, &["--force", "sample", "--calibrate"]),
        0,
        "calibrated resample",
    );

    assert_code(&run(&root, &config, &["report"]), 0, "report");
    assert!(root.join("report").join("report.md").exists());
    assert!(root.join("report").join("report.json").exists());
}

#[test]
fn cli_rejects_bad_inputs_with_config_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    let config = dir.path().join("config.json");
    std::fs::write(&config, b"{ not json").unwrap();
    assert_code(&run(&root, &config, &["gen-data"]), 2, "invalid config json");

    let mut bad = tiny_config();
    bad.dataset.n_test = 3;
    bad.save(&config).unwrap();
    assert_code(&run(&root, &config, &["gen-data"]), 2, "non-stratifiable test split");

    let missing = dir.path().join("nope.json");
    let out = Command::new(env!("CARGO_BIN_EXE_waveflow"))
        .arg("--out")
        .arg(&root)
        .arg("--config")
        .arg(&missing)
        .arg("gen-data")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "missing config file");
}
