//! Conditional generation: load the three trained stages, run the latent
//! flow from noise, decode, optionally re-project onto the retained band,
//! super-resolve, and optionally calibrate. Every sample is a pure function
//! of (checkpoints, condition, fork of the run seed).

use crate::calibration::{apply_calibration, interp_bias, BiasCurve};
use crate::error::{Error, Result};
use crate::flowmatch::{euler_sample, FlowConfig};
use crate::operators::{
    load_checkpoint_config, load_checkpoint_into, Aeno, AenoConfig, Condition, FlowNet,
    FlowNetConfig, FlowSampler, Sno, SnoConfig,
};
use crate::rng::CounterRng;
use crate::specops::{Bindings, Fwd, ParamStore};
use crate::subspace::{lowpass, ChannelRole, WaveField};
use crate::tape::Tape;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::config::RunConfig;
use super::dataset::{write_json_atomic, DatasetManifest, Split};
use super::{claim_stage_dir, require_file, AENO_DIR, CALIB_DIR, DATASET_DIR, FM_DIR, SAMPLES_DIR, SNO_DIR};

// ── Frozen-parameter model wrappers ─────────────────────────────────────

pub struct LoadedAeno {
    pub model: Aeno,
    pub store: ParamStore,
}

impl LoadedAeno {
    pub fn load(path: &Path) -> Result<LoadedAeno> {
        let cfg: AenoConfig = load_checkpoint_config(path)?;
        let mut store = ParamStore::new();
        let model = Aeno::new(cfg, &mut store, &mut CounterRng::new(0));
        load_checkpoint_into(path, &mut store)?;
        Ok(LoadedAeno { model, store })
    }

    pub fn encode(&self, field: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut bind = Bindings::new(&self.store);
        let x = tape.constant(field.clone());
        let z = {
            let mut f = Fwd::new(&mut tape, &self.store, &mut bind);
            self.model.encode(&mut f, x)?
        };
        Ok(tape.value(z).clone())
    }

    pub fn decode(&self, latent: &Tensor, grid: [usize; 3]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut bind = Bindings::new(&self.store);
        let z = tape.constant(latent.clone());
        let x = {
            let mut f = Fwd::new(&mut tape, &self.store, &mut bind);
            self.model.decode(&mut f, z, grid)?
        };
        Ok(tape.value(x).clone())
    }
}

pub struct LoadedSno {
    pub model: Sno,
    pub store: ParamStore,
}

impl LoadedSno {
    pub fn load(path: &Path) -> Result<LoadedSno> {
        let cfg: SnoConfig = load_checkpoint_config(path)?;
        let mut store = ParamStore::new();
        let model = Sno::new(cfg, &mut store, &mut CounterRng::new(0));
        load_checkpoint_into(path, &mut store)?;
        Ok(LoadedSno { model, store })
    }

    pub fn apply(&self, field: &Tensor, out_grid: [usize; 3]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut bind = Bindings::new(&self.store);
        let x = tape.constant(field.clone());
        let y = {
            let mut f = Fwd::new(&mut tape, &self.store, &mut bind);
            self.model.apply(&mut f, x, out_grid)?
        };
        Ok(tape.value(y).clone())
    }
}

pub struct LoadedFlow {
    pub model: FlowNet,
    pub store: ParamStore,
}

impl LoadedFlow {
    pub fn load(path: &Path) -> Result<LoadedFlow> {
        let cfg: FlowNetConfig = load_checkpoint_config(path)?;
        let mut store = ParamStore::new();
        let model = FlowNet::new(cfg, &mut store, &mut CounterRng::new(0));
        load_checkpoint_into(path, &mut store)?;
        Ok(LoadedFlow { model, store })
    }

    pub fn sample_latent(
        &self,
        cond: &Condition,
        z0: &Tensor,
        flow: &FlowConfig,
    ) -> Result<Tensor> {
        let sampler = FlowSampler { net: &self.model, store: &self.store, cond: *cond };
        euler_sample(&sampler, z0, flow)
    }
}

// ── Generator ───────────────────────────────────────────────────────────

/// The full inference chain with all stage parameters resident.
pub struct Generator {
    pub aeno: LoadedAeno,
    pub sno: LoadedSno,
    pub flow: LoadedFlow,
    pub cfg: RunConfig,
    coarse_grid: [usize; 3],
    coarse_spacing: [f64; 3],
}

impl Generator {
    /// Loads every stage from the run root; the config comes from the
    /// dataset manifest so generation matches the data it was trained on.
    pub fn load(root: &Path) -> Result<Generator> {
        let manifest = DatasetManifest::load(&root.join(DATASET_DIR))?;
        let cfg = manifest.config.clone();
        let aeno = LoadedAeno::load(&require_file(
            &root.join(AENO_DIR).join("checkpoint.bin"),
            "AENO checkpoint",
        )?)?;
        let sno = LoadedSno::load(&require_file(
            &root.join(SNO_DIR).join("checkpoint.bin"),
            "SNO checkpoint",
        )?)?;
        let flow = LoadedFlow::load(&require_file(
            &root.join(FM_DIR).join("checkpoint.bin"),
            "flow checkpoint",
        )?)?;

        let g = cfg.sim.grid;
        let f = cfg.subspace.factors;
        let coarse_grid = [g[0] / f[0], g[1] / f[1], g[2] / f[2]];
        let coarse_spacing = [
            cfg.sim.dx * f[0] as f64,
            cfg.sim.dy * f[1] as f64,
            cfg.sim.dt * f[2] as f64,
        ];
        Ok(Generator { aeno, sno, flow, cfg, coarse_grid, coarse_spacing })
    }

    fn roles(&self) -> Vec<ChannelRole> {
        let mut roles = vec![ChannelRole::Physical; self.cfg.aeno.in_channels];
        if self.cfg.aeno.norm_channel {
            let last = roles.len() - 1;
            roles[last] = ChannelRole::Norm;
        }
        roles
    }

    /// Noise to normalized wavefield on `out_grid`. The optional bias curve
    /// is interpolated to the condition's magnitude and applied after
    /// super-resolution.
    pub fn generate(
        &self,
        cond: &Condition,
        rng: &mut CounterRng,
        out_grid: [usize; 3],
        band_limit: bool,
        calibration: Option<&[BiasCurve]>,
    ) -> Result<WaveField> {
        let latent_shape = self.aeno.model.latent_shape();
        let z0 = Tensor::randn(&latent_shape, 1.0, rng);
        let z1 = self.flow.sample_latent(cond, &z0, &self.cfg.flow)?;
        let coarse = self.aeno.decode(&z1, self.coarse_grid)?;
        let [sx, sy, st] = self.coarse_spacing;
        let mut coarse_field = WaveField::new(coarse, sx, sy, st, self.roles())?;
        if band_limit {
            // The retained band sits at fraction * time-factor of the
            // coarse Nyquist.
            let fraction =
                (self.cfg.subspace.fraction * self.cfg.subspace.factors[2] as f64).min(1.0);
            coarse_field = lowpass(&coarse_field, fraction)?;
        }
        let fine = self.sno.apply(&coarse_field.data, out_grid)?;
        let spacing_out = [
            sx * self.coarse_grid[0] as f64 / out_grid[0] as f64,
            sy * self.coarse_grid[1] as f64 / out_grid[1] as f64,
            st * self.coarse_grid[2] as f64 / out_grid[2] as f64,
        ];
        let mut field =
            WaveField::new(fine, spacing_out[0], spacing_out[1], spacing_out[2], self.roles())?;
        if let Some(curves) = calibration {
            let curve = interp_bias(cond.magnitude, curves)?;
            field = apply_calibration(&field, &curve)?;
        }
        if !field.data.all_finite() {
            return Err(Error::Numeric("generated field holds non-finite values".into()));
        }
        Ok(field)
    }
}

/// Loads the anchor bias curves produced by the calibrate stage, sorted by
/// magnitude, erroring with the magnitude name when one is missing.
pub fn load_bias_curves(root: &Path, cfg: &RunConfig) -> Result<Vec<BiasCurve>> {
    let dir = root.join(CALIB_DIR);
    let mut curves = Vec::new();
    for class in &cfg.dataset.classes {
        let path = dir.join(format!("bias_m{}.json", class.magnitude));
        if !path.exists() {
            return Err(Error::MissingDependency(format!(
                "bias curve for magnitude {} not found at {}",
                class.magnitude,
                path.display()
            )));
        }
        curves.push(BiasCurve::load(&path)?);
    }
    Ok(curves)
}

// ── Sampling stage ──────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleEntry {
    pub condition_index: usize,
    pub realization: usize,
    pub condition: Condition,
    pub file: String,
    pub rng_label: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SamplesManifest {
    pub seed: u64,
    pub config: RunConfig,
    pub calibrated: bool,
    pub band_limit: bool,
    pub out_grid: [usize; 3],
    pub n_realizations: usize,
    pub entries: Vec<SampleEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ConditionsFile {
    pub conditions: Vec<Condition>,
}

pub struct SampleOptions {
    /// Conditions JSON override; defaults to the dataset's test split.
    pub conditions_path: Option<std::path::PathBuf>,
    pub n_realizations: Option<usize>,
    pub calibrate: bool,
    pub band_limit: Option<bool>,
}

pub fn sample_rng(seed: u64, condition_index: usize, realization: usize) -> (CounterRng, String) {
    let label = format!("sample-c{condition_index}-r{realization}");
    (CounterRng::fork(seed, &label, 0), label)
}

pub fn cmd_sample(root: &Path, seed: u64, opts: &SampleOptions, force: bool) -> Result<()> {
    let generator = Generator::load(root)?;
    let cfg = generator.cfg.clone();
    let conditions: Vec<Condition> = match &opts.conditions_path {
        Some(path) => {
            let f = std::fs::File::open(path).map_err(|_| {
                Error::MissingDependency(format!("conditions file {} not found", path.display()))
            })?;
            let parsed: ConditionsFile = serde_json::from_reader(std::io::BufReader::new(f))
                .map_err(|e| Error::Config(format!("invalid conditions file: {e}")))?;
            parsed.conditions
        }
        None => {
            let manifest = DatasetManifest::load(&root.join(DATASET_DIR))?;
            manifest.events_in(Split::Test).iter().map(|e| e.condition).collect()
        }
    };
    if conditions.is_empty() {
        return Err(Error::Config("no conditions to sample".into()));
    }
    let curves = if opts.calibrate { Some(load_bias_curves(root, &cfg)?) } else { None };
    let dir = claim_stage_dir(root, SAMPLES_DIR, force)?;

    let n_real = opts.n_realizations.unwrap_or(cfg.sample.n_realizations);
    let band_limit = opts.band_limit.unwrap_or(cfg.sample.band_limit);
    let out_grid = cfg.sample.out_grid;
    let mut entries = Vec::new();
    for (ci, cond) in conditions.iter().enumerate() {
        for ri in 0..n_real {
            let (mut rng, label) = sample_rng(seed, ci, ri);
            let field =
                generator.generate(cond, &mut rng, out_grid, band_limit, curves.as_deref())?;
            let file = format!("cond{ci:03}_r{ri:02}.bin");
            field.save(&dir.join(&file))?;
            entries.push(SampleEntry {
                condition_index: ci,
                realization: ri,
                condition: *cond,
                file,
                rng_label: label,
            });
        }
    }
    let manifest = SamplesManifest {
        seed,
        config: cfg,
        calibrated: opts.calibrate,
        band_limit,
        out_grid,
        n_realizations: n_real,
        entries,
    };
    write_json_atomic(&dir.join("manifest.json"), &manifest)
}

impl SamplesManifest {
    pub fn load(dir: &Path) -> Result<SamplesManifest> {
        let path = dir.join("manifest.json");
        let f = std::fs::File::open(&path).map_err(|_| {
            Error::MissingDependency(format!("no samples manifest at {}", path.display()))
        })?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }

    /// Realizations grouped by condition index, in realization order.
    pub fn by_condition(&self) -> Vec<(Condition, Vec<&SampleEntry>)> {
        let mut out: Vec<(Condition, Vec<&SampleEntry>)> = Vec::new();
        for e in &self.entries {
            if out.len() <= e.condition_index {
                out.push((e.condition, Vec::new()));
            }
            out[e.condition_index].1.push(e);
        }
        out
    }
}

// ── Calibration stage ───────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct CalibManifest {
    pub seed: u64,
    pub config: RunConfig,
    pub n_realizations: usize,
    pub anchors: Vec<f64>,
    pub files: Vec<String>,
}

/// Estimates one bias curve per magnitude class from the training split:
/// for each estimation event, generate an ensemble at its condition and
/// compare physical-field spectra against the simulated truth.
pub fn cmd_calibrate(root: &Path, seed: u64, force: bool) -> Result<()> {
    let generator = Generator::load(root)?;
    let cfg = generator.cfg.clone();
    let data_dir = root.join(DATASET_DIR);
    let manifest = DatasetManifest::load(&data_dir)?;
    let dir = claim_stage_dir(root, CALIB_DIR, force)?;

    let out_grid = cfg.sim.grid;
    let n_real = cfg.calibrate.n_realizations;
    let mut anchors = Vec::new();
    let mut files = Vec::new();
    for class in &cfg.dataset.classes {
        let events: Vec<_> = manifest
            .events_in(Split::Train)
            .into_iter()
            .filter(|e| e.class_magnitude == class.magnitude)
            .collect();
        let mut pairs: Vec<(WaveField, Vec<WaveField>)> = Vec::new();
        for ev in &events {
            let truth =
                crate::toydata::to_physical(&manifest.load_field(&data_dir, &ev.fine)?)?;
            let mut ensemble = Vec::with_capacity(n_real);
            for ri in 0..n_real {
                let label = format!("calib-{}-r{ri}", ev.id);
                let mut rng = CounterRng::fork(seed, &label, 0);
                let sample =
                    generator.generate(&ev.condition, &mut rng, out_grid, false, None)?;
                ensemble.push(crate::toydata::to_physical(&sample)?);
            }
            pairs.push((truth, ensemble));
        }
        let by_ref: Vec<(&WaveField, &[WaveField])> =
            pairs.iter().map(|(d, e)| (d, e.as_slice())).collect();
        let curve = crate::calibration::estimate_bias(&by_ref, class.magnitude)?;
        let file = format!("bias_m{}.json", class.magnitude);
        curve.save(&dir.join(&file))?;
        anchors.push(class.magnitude);
        files.push(file);
    }
    let manifest = CalibManifest { seed, config: cfg, n_realizations: n_real, anchors, files };
    write_json_atomic(&dir.join("manifest.json"), &manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{save_checkpoint, ConditionRanges};
    use crate::pipeline::config::ClassSpec;
    use crate::pipeline::dataset::generate;

    /// A full run root with a tiny dataset and untrained (random-init)
    /// checkpoints; sampling only needs loadable stages, not good ones.
    fn seed_run_root(root: &Path, seed: u64) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.sim.grid = [16, 8, 12];
        cfg.dataset.n_train = 2;
        cfg.dataset.n_test = 2;
        cfg.dataset.classes = vec![ClassSpec {
            magnitude: 5.0,
            hypo_x: [4.0, 12.0],
            hypo_y: [2.0, 6.0],
            rupture: None,
        }];
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
                magnitude: [4.0, 6.0],
                hypo_x: [4.0, 12.0],
                hypo_y: [2.0, 6.0],
            },
        };
        cfg.sample.n_realizations = 1;
        cfg.sample.out_grid = [16, 8, 12];
        generate(&cfg, seed, &root.join(DATASET_DIR), false).unwrap();

        let mut rng = CounterRng::new(42);
        let mut store = ParamStore::new();
        let _ = Aeno::new(cfg.aeno.clone(), &mut store, &mut rng);
        std::fs::create_dir_all(root.join(AENO_DIR)).unwrap();
        save_checkpoint(&root.join(AENO_DIR).join("checkpoint.bin"), &cfg.aeno, &store)
            .unwrap();

        let mut store = ParamStore::new();
        let _ = Sno::new(cfg.sno.clone(), &mut store, &mut rng);
        std::fs::create_dir_all(root.join(SNO_DIR)).unwrap();
        save_checkpoint(&root.join(SNO_DIR).join("checkpoint.bin"), &cfg.sno, &store).unwrap();

        let mut store = ParamStore::new();
        let _ = FlowNet::new(cfg.flow_net.clone(), &mut store, &mut rng);
        std::fs::create_dir_all(root.join(FM_DIR)).unwrap();
        save_checkpoint(&root.join(FM_DIR).join("checkpoint.bin"), &cfg.flow_net, &store)
            .unwrap();
        cfg
    }

    #[test]
    fn sampling_is_deterministic_across_run_roots() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        seed_run_root(dir_a.path(), 21);
        seed_run_root(dir_b.path(), 21);
        let opts = SampleOptions {
            conditions_path: None,
            n_realizations: None,
            calibrate: false,
            band_limit: None,
        };
        cmd_sample(dir_a.path(), 21, &opts, false).unwrap();
        cmd_sample(dir_b.path(), 21, &opts, false).unwrap();

        let manifest = SamplesManifest::load(&dir_a.path().join(SAMPLES_DIR)).unwrap();
        assert_eq!(manifest.entries.len(), 2);
        for e in &manifest.entries {
            let a = std::fs::read(dir_a.path().join(SAMPLES_DIR).join(&e.file)).unwrap();
            let b = std::fs::read(dir_b.path().join(SAMPLES_DIR).join(&e.file)).unwrap();
            assert_eq!(a, b, "sample {} differs between identical runs", e.file);
        }
        let ma = std::fs::read(dir_a.path().join(SAMPLES_DIR).join("manifest.json")).unwrap();
        let mb = std::fs::read(dir_b.path().join(SAMPLES_DIR).join("manifest.json")).unwrap();
        assert_eq!(ma, mb);

        // A second run refuses to clobber the stage without force.
        assert!(cmd_sample(dir_a.path(), 21, &opts, false).is_err());
        cmd_sample(dir_a.path(), 21, &opts, true).unwrap();
    }

    #[test]
    fn sampling_requires_every_stage_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        seed_run_root(dir.path(), 23);
        std::fs::remove_file(dir.path().join(FM_DIR).join("checkpoint.bin")).unwrap();
        let opts = SampleOptions {
            conditions_path: None,
            n_realizations: None,
            calibrate: false,
            band_limit: None,
        };
        let err = cmd_sample(dir.path(), 23, &opts, false).unwrap_err();
        assert!(matches!(err, Error::MissingDependency(_)), "got {err:?}");
    }

    /// Generated fields land on the requested grid, carry the norm-channel
    /// role, and hold finite values even for untrained stages.
    #[test]
    fn generator_produces_finite_fields_on_requested_grids() {
        let dir = tempfile::tempdir().unwrap();
        seed_run_root(dir.path(), 29);
        let generator = Generator::load(dir.path()).unwrap();
        let cond = Condition { magnitude: 5.0, hypo_x: 8.0, hypo_y: 4.0 };
        let mut rng = CounterRng::fork(29, "probe", 0);
        let native = generator.generate(&cond, &mut rng, [16, 8, 12], false, None).unwrap();
        assert_eq!(native.grid(), [16, 8, 12]);
        assert!(native.norm_channel().is_some());
        assert!(native.data.all_finite());

        // Zero-shot: double the spatial sampling at unchanged extent.
        let mut rng = CounterRng::fork(29, "probe", 0);
        let fine = generator.generate(&cond, &mut rng, [32, 16, 12], false, None).unwrap();
        assert_eq!(fine.grid(), [32, 16, 12]);
        assert!((fine.dx * 32.0 - native.dx * 16.0).abs() < 1e-12);
    }
}
