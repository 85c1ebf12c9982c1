//! Dataset generation: stratified magnitude classes with Latin hypercube
//! hypocenters, simulated wavefields, per-event normalization, and the
//! coarse/fine training pairs. Everything is derived from (config, seed),
//! so a rerun reproduces every byte.

use crate::error::{Error, Result};
use crate::operators::Condition;
use crate::rng::CounterRng;
use crate::subspace::{make_pair, WaveField};
use crate::toydata::{latin_hypercube, preprocess, simulate, EventSpec, RuptureSpec};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use super::config::RunConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventRecord {
    pub id: String,
    pub split: Split,
    pub class_magnitude: f64,
    pub condition: Condition,
    pub rupture: Option<RuptureSpec>,
    /// Paths relative to the dataset directory.
    pub fine: String,
    pub coarse: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config: RunConfig,
    pub events: Vec<EventRecord>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<DatasetManifest> {
        let path = dir.join("manifest.json");
        let f = std::fs::File::open(&path).map_err(|_| {
            Error::MissingDependency(format!("no dataset manifest at {}", path.display()))
        })?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }

    pub fn events_in(&self, split: Split) -> Vec<&EventRecord> {
        self.events.iter().filter(|e| e.split == split).collect()
    }

    pub fn load_field(&self, dir: &Path, relative: &str) -> Result<WaveField> {
        WaveField::load(&dir.join(relative))
    }
}

fn spec_for(class: &super::config::ClassSpec, condition: Condition) -> EventSpec {
    let rupture = class.rupture.as_ref().map(|r| RuptureSpec {
        end: [condition.hypo_x + r.offset[0], condition.hypo_y + r.offset[1]],
        speed: r.speed,
        segments: r.segments,
    });
    EventSpec { condition, rupture }
}

/// Simulate, normalize, and project one event to its coarse/fine pair.
pub fn build_event(cfg: &RunConfig, spec: &EventSpec) -> Result<(WaveField, WaveField)> {
    let raw = simulate(spec, &cfg.sim)?;
    let fine = preprocess(&raw)?;
    make_pair(&fine, &cfg.subspace)
}

/// Generates the dataset under `dir`: per-class LHS hypocenters for both
/// splits, simulated and preprocessed fields, and a manifest binding the
/// config and seed to every event.
pub fn generate(cfg: &RunConfig, seed: u64, dir: &Path, force: bool) -> Result<()> {
    cfg.validate()?;
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() && !force {
        return Err(Error::Config(format!(
            "dataset already exists at {}; pass --force to overwrite",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir.join("events"))?;

    let train_counts = cfg.train_counts();
    let test_counts = cfg.test_counts();
    let mut events = Vec::new();
    let mut train_idx = 0usize;
    let mut test_idx = 0usize;
    for (ci, class) in cfg.dataset.classes.iter().enumerate() {
        for (split, count, idx) in [
            (Split::Train, train_counts[ci], &mut train_idx),
            (Split::Test, test_counts[ci], &mut test_idx),
        ] {
            let label = match split {
                Split::Train => format!("lhs-train-{ci}"),
                Split::Test => format!("lhs-test-{ci}"),
            };
            let mut rng = CounterRng::fork(seed, &label, 0);
            let points =
                latin_hypercube(count, &[class.hypo_x, class.hypo_y], &mut rng)?;
            for p in points {
                let condition = Condition {
                    magnitude: class.magnitude,
                    hypo_x: p[0],
                    hypo_y: p[1],
                };
                let spec = spec_for(class, condition);
                let (coarse, fine) = build_event(cfg, &spec)?;
                let id = match split {
                    Split::Train => format!("train_{:03}", *idx),
                    Split::Test => format!("test_{:03}", *idx),
                };
                *idx += 1;
                let fine_rel = format!("events/{id}.fine.bin");
                let coarse_rel = format!("events/{id}.coarse.bin");
                fine.save(&dir.join(&fine_rel))?;
                coarse.save(&dir.join(&coarse_rel))?;
                events.push(EventRecord {
                    id,
                    split: split.clone(),
                    class_magnitude: class.magnitude,
                    condition,
                    rupture: spec.rupture,
                    fine: fine_rel,
                    coarse: coarse_rel,
                });
            }
        }
    }

    let manifest = DatasetManifest { seed, config: cfg.clone(), events };
    write_json_atomic(&manifest_path, &manifest)
}

/// Serializes to a byte-stable pretty JSON file.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)?;
    let tmp: PathBuf = path.with_extension("json.tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.dataset.n_train = 6;
        cfg.dataset.n_test = 3;
        // Shrink the simulation so the test stays quick.
        cfg.sim.grid = [16, 8, 24];
        cfg.dataset.classes[2].hypo_x = [4.0, 8.0];
        for c in cfg.dataset.classes.iter_mut() {
            c.hypo_x = [4.0, 8.0];
            c.hypo_y = [3.0, 5.0];
        }
        cfg
    }

    #[test]
    fn generation_is_stratified_and_deterministic() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        generate(&cfg, 42, &a, false).unwrap();
        generate(&cfg, 42, &b, false).unwrap();

        let manifest = DatasetManifest::load(&a).unwrap();
        assert_eq!(manifest.events.len(), 9);
        for class in &cfg.dataset.classes {
            let train = manifest
                .events
                .iter()
                .filter(|e| e.split == Split::Train && e.class_magnitude == class.magnitude)
                .count();
            let test = manifest
                .events
                .iter()
                .filter(|e| e.split == Split::Test && e.class_magnitude == class.magnitude)
                .count();
            assert_eq!(train, 2);
            assert_eq!(test, 1);
        }

        // Reruns with the same seed are byte-identical, manifest and fields.
        let ma = std::fs::read(a.join("manifest.json")).unwrap();
        let mb = std::fs::read(b.join("manifest.json")).unwrap();
        assert_eq!(ma, mb);
        for ev in &manifest.events {
            let fa = std::fs::read(a.join(&ev.fine)).unwrap();
            let fb = std::fs::read(b.join(&ev.fine)).unwrap();
            assert_eq!(fa, fb, "fine field differs for {}", ev.id);
        }

        // Overwrite without force is refused; with force it succeeds.
        assert!(generate(&cfg, 42, &a, false).is_err());
        generate(&cfg, 43, &a, true).unwrap();
        let mc = std::fs::read(a.join("manifest.json")).unwrap();
        assert_ne!(ma, mc);
    }

    #[test]
    fn events_carry_normalized_pairs_with_rupture_metadata() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        generate(&cfg, 1, dir.path(), false).unwrap();
        let manifest = DatasetManifest::load(dir.path()).unwrap();

        let ev = &manifest.events_in(Split::Train)[0];
        let fine = manifest.load_field(dir.path(), &ev.fine).unwrap();
        let coarse = manifest.load_field(dir.path(), &ev.coarse).unwrap();
        assert_eq!(fine.grid(), [16, 8, 24]);
        assert_eq!(coarse.grid(), [8, 4, 12]);
        assert_eq!(fine.channels(), 2);
        assert!(fine.norm_channel().is_some());

        // The largest class carries rupture geometry; the others are points.
        let big = manifest
            .events
            .iter()
            .find(|e| e.class_magnitude == 7.0)
            .unwrap();
        assert!(big.rupture.is_some());
        let small = manifest
            .events
            .iter()
            .find(|e| e.class_magnitude == 4.4)
            .unwrap();
        assert!(small.rupture.is_none());

        // Hypocenters respect the class sampling boxes.
        for e in &manifest.events {
            assert!((4.0..=8.0).contains(&e.condition.hypo_x));
            assert!((3.0..=5.0).contains(&e.condition.hypo_y));
        }
    }
}
