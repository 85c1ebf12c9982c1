//! Evaluation stage: compares generated ensembles against held-out data
//! and writes the metric bundle as flat CSV tables plus a JSON summary.
//!
//! Exported families: PGV maps (ensemble mean and spread), FAS maps at
//! selected frequency bins, NCC maps against central and random reference
//! stations, time-distance profiles along configured segments, spectral
//! residual statistics, log-intensity distributions with their W1
//! distances, and a magnitude-scaling sweep over interpolated conditions.

use crate::error::{Error, Result};
use crate::metrics::{
    amplitude, fas, fas_freqs, frequency_stats, histogram_fd, interp_conditions, ncc, pearson,
    percentile_sorted, pgv, residual, wasserstein1, Histogram, SPECTRUM_FLOOR,
};
use crate::operators::Condition;
use crate::pipeline::config::RunConfig;
use crate::pipeline::dataset::{write_json_atomic, DatasetManifest, Split};
use crate::pipeline::sample::{load_bias_curves, Generator, SamplesManifest};
use crate::pipeline::{claim_stage_dir, DATASET_DIR, EVAL_DIR, SAMPLES_DIR};
use crate::rng::CounterRng;
use crate::subspace::WaveField;
use crate::tensor::Tensor;
use crate::toydata::to_physical;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

// ── CSV plumbing ────────────────────────────────────────────────────────

/// In-memory CSV accumulator; rows are flushed in one atomic-ish write so
/// a crashed run never leaves a half-written table behind.
struct CsvFile {
    name: String,
    buf: String,
}

impl CsvFile {
    fn new(name: &str, header: &str) -> CsvFile {
        let mut buf = String::new();
        buf.push_str(header);
        buf.push('\n');
        CsvFile { name: name.to_string(), buf }
    }

    fn row(&mut self, line: std::fmt::Arguments<'_>) {
        self.buf.write_fmt(line).expect("string write is infallible");
        self.buf.push('\n');
    }

    fn finish(self, dir: &Path) -> Result<String> {
        std::fs::write(dir.join(&self.name), self.buf.as_bytes())?;
        Ok(self.name)
    }
}

/// Fixed-width scientific notation so reruns are byte-comparable.
fn num(v: f64) -> String {
    format!("{v:.12e}")
}

// ── Summary schema ──────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct EventSummary {
    pub id: String,
    pub magnitude: f64,
    pub ensemble_size: usize,
    /// Pearson correlation between the truth PGV map and the ensemble
    /// mean PGV map.
    pub pearson_pgv: f64,
    /// W1 between pointwise log10 PGV distributions, truth vs pooled
    /// ensemble.
    pub w1_log10_pgv: f64,
    /// Largest per-frequency |spatial mean| of the log spectral residual.
    pub residual_mean_abs_max: f64,
    /// Spectrum bins clamped to the floor before logs.
    pub floored_bins: usize,
    /// Mean over locations of |truth NCC - ensemble mean NCC| at the
    /// central reference.
    pub ncc_central_abs_diff: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepBin {
    pub magnitude: f64,
    pub n_conditions: usize,
    pub n_fields: usize,
    pub pgv_median: f64,
    pub pgv_mean: f64,
    pub pgv_p16: f64,
    pub pgv_p84: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub seed: u64,
    pub n_events: usize,
    pub calibrated: bool,
    pub band_limit: bool,
    pub out_grid: [usize; 3],
    pub per_event: Vec<EventSummary>,
    pub mean_pearson_pgv: f64,
    pub min_pearson_pgv: f64,
    pub mean_w1_log10_pgv: f64,
    pub max_residual_mean_abs: f64,
    pub mag_sweep: Vec<SweepBin>,
    /// Whether sweep PGV medians are non-decreasing in magnitude; absent
    /// when the sweep is disabled.
    pub mag_sweep_monotonic: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalManifest {
    pub stage: String,
    pub seed: u64,
    pub config: RunConfig,
    pub files: Vec<String>,
}

// ── Helpers ─────────────────────────────────────────────────────────────

/// Rescales to physical units when a norm channel is present; fields
/// without one are already physical.
fn physical_view(f: &WaveField) -> Result<WaveField> {
    if f.norm_channel().is_some() {
        to_physical(f)
    } else {
        Ok(f.clone())
    }
}

/// FAS with every bin clamped to the spectrum floor, safe for logs and
/// geometric statistics.
fn fas_floored(u: &WaveField) -> Result<Tensor> {
    Ok(fas(u, None)?.map(|v| v.max(SPECTRUM_FLOOR)))
}

fn log10_values(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|v| v.max(SPECTRUM_FLOOR).log10()).collect()
}

/// Snaps a physical coordinate to the nearest grid index.
fn snap(coord: f64, spacing: f64, n: usize) -> usize {
    let idx = (coord / spacing).round();
    (idx.max(0.0) as usize).min(n - 1)
}

fn histogram_rows(csv: &mut CsvFile, event: &str, metric: &str, source: &str, h: &Histogram) {
    for (b, count) in h.counts.iter().enumerate() {
        csv.row(format_args!(
            "{event},{metric},{source},{},{},{count}",
            num(h.edges[b]),
            num(h.edges[b + 1]),
        ));
    }
}

// ── Evaluation stage ────────────────────────────────────────────────────

pub fn cmd_evaluate(root: &Path, seed: u64, force: bool) -> Result<()> {
    let data = DatasetManifest::load(&root.join(DATASET_DIR))?;
    let samples = SamplesManifest::load(&root.join(SAMPLES_DIR))?;
    let cfg = data.config.clone();
    let dataset_dir = root.join(DATASET_DIR);
    let samples_dir = root.join(SAMPLES_DIR);
    let eval_dir = claim_stage_dir(root, EVAL_DIR, force)?;

    let test_events = data.events_in(Split::Test);
    let groups = samples.by_condition();
    if groups.is_empty() {
        return Err(Error::Domain("samples manifest holds no entries".into()));
    }

    let mut pgv_csv = CsvFile::new("pgv_maps.csv", "event,x,y,truth,ens_mean,ens_std");
    let mut fas_csv = CsvFile::new("fas_maps.csv", "event,f,x,y,truth,geo_mean,geo_std");
    let mut ncc_csv = CsvFile::new(
        "ncc_maps.csv",
        "event,ref,ref_x,ref_y,x,y,truth_rho,truth_lag,syn_rho,syn_lag",
    );
    let mut prof_csv =
        CsvFile::new("profiles.csv", "event,profile,point,x,y,distance,t,truth,syn");
    let mut res_csv =
        CsvFile::new("residual_stats.csv", "event,f,mean,median,p16,p84");
    let mut dist_csv =
        CsvFile::new("distributions.csv", "event,metric,source,bin_lo,bin_hi,count");
    let mut w1_csv = CsvFile::new("w1.csv", "event,metric,w1");
    let mut sweep_csv = CsvFile::new("mag_scaling.csv", "magnitude,metric,value");

    // Reference stations are shared across events so maps are comparable.
    let truth_grid = {
        let first = data.load_field(&dataset_dir, &test_events[0].fine)?;
        first.grid()
    };
    let mut refs: Vec<(String, [usize; 2])> =
        vec![("central".to_string(), [truth_grid[0] / 2, truth_grid[1] / 2])];
    let mut ref_rng = CounterRng::fork(seed, "eval-ncc-refs", 0);
    for r in 0..cfg.eval.n_random_refs {
        refs.push((
            format!("random{r}"),
            [ref_rng.below(truth_grid[0]), ref_rng.below(truth_grid[1])],
        ));
    }

    let nf = truth_grid[2] / 2 + 1;
    for &bin in &cfg.eval.fas_bins {
        if bin >= nf {
            return Err(Error::Config(format!(
                "fas bin {bin} out of range for {nf} frequency bins"
            )));
        }
    }

    let mut per_event = Vec::new();
    for (cond, entries) in &groups {
        let event = test_events
            .iter()
            .find(|e| e.condition == *cond)
            .copied()
            .ok_or_else(|| {
                Error::Domain(format!(
                    "sample condition (m={}, hypo=({}, {})) has no matching test event",
                    cond.magnitude, cond.hypo_x, cond.hypo_y
                ))
            })?;
        let truth = physical_view(&data.load_field(&dataset_dir, &event.fine)?)?;
        let [nx, ny, nt] = truth.grid();
        let freqs = fas_freqs(nt, truth.dt);

        let mut members = Vec::with_capacity(entries.len());
        for e in entries {
            let m = physical_view(&WaveField::load(&samples_dir.join(&e.file))?)?;
            if m.grid() != truth.grid() {
                return Err(Error::Shape(format!(
                    "sample grid {:?} does not match data grid {:?} for event {}",
                    m.grid(),
                    truth.grid(),
                    event.id
                )));
            }
            members.push(m);
        }

        // PGV maps and pointwise log-intensity distributions.
        let truth_pgv = pgv(&truth)?;
        let member_pgv: Vec<Tensor> = members.iter().map(pgv).collect::<Result<_>>()?;
        let n_m = members.len() as f64;
        let mut ens_mean = vec![0.0; nx * ny];
        let mut ens_sq = vec![0.0; nx * ny];
        for m in &member_pgv {
            for (i, v) in m.data().iter().enumerate() {
                ens_mean[i] += v / n_m;
                ens_sq[i] += v * v / n_m;
            }
        }
        let ens_std: Vec<f64> =
            ens_mean.iter().zip(&ens_sq).map(|(m, s)| (s - m * m).max(0.0).sqrt()).collect();
        for ix in 0..nx {
            for iy in 0..ny {
                let i = ix * ny + iy;
                pgv_csv.row(format_args!(
                    "{},{ix},{iy},{},{},{}",
                    event.id,
                    num(truth_pgv.data()[i]),
                    num(ens_mean[i]),
                    num(ens_std[i]),
                ));
            }
        }
        let pearson_pgv = pearson(truth_pgv.data(), &ens_mean)?;

        let truth_log_pgv = log10_values(&truth_pgv);
        let mut pool_log_pgv = Vec::with_capacity(member_pgv.len() * nx * ny);
        for m in &member_pgv {
            pool_log_pgv.extend(log10_values(m));
        }
        let w1_pgv = wasserstein1(&truth_log_pgv, &pool_log_pgv)?;
        w1_csv.row(format_args!("{},log10_pgv,{}", event.id, num(w1_pgv)));
        histogram_rows(&mut dist_csv, &event.id, "log10_pgv", "truth", &histogram_fd(&truth_log_pgv)?);
        histogram_rows(
            &mut dist_csv,
            &event.id,
            "log10_pgv",
            "ensemble",
            &histogram_fd(&pool_log_pgv)?,
        );

        // Spectral maps, residual statistics, and FAS distributions.
        let truth_fas = fas_floored(&truth)?;
        let member_fas: Vec<Tensor> = members.iter().map(fas_floored).collect::<Result<_>>()?;
        let fas_refs: Vec<&Tensor> = member_fas.iter().collect();
        let (geo_mean, geo_std) = crate::metrics::geo_stats(&fas_refs)?;
        for &bin in &cfg.eval.fas_bins {
            for ix in 0..nx {
                for iy in 0..ny {
                    let i = (ix * ny + iy) * nf + bin;
                    fas_csv.row(format_args!(
                        "{},{},{ix},{iy},{},{},{}",
                        event.id,
                        num(freqs[bin]),
                        num(truth_fas.data()[i]),
                        num(geo_mean.data()[i]),
                        num(geo_std.data()[i]),
                    ));
                }
            }
            let truth_bin: Vec<f64> = (0..nx * ny)
                .map(|loc| truth_fas.data()[loc * nf + bin].log10())
                .collect();
            let mut pool_bin = Vec::with_capacity(member_fas.len() * nx * ny);
            for m in &member_fas {
                pool_bin.extend((0..nx * ny).map(|loc| m.data()[loc * nf + bin].log10()));
            }
            let w1_bin = wasserstein1(&truth_bin, &pool_bin)?;
            w1_csv.row(format_args!("{},log10_fas_bin{bin},{}", event.id, num(w1_bin)));
        }

        let res = residual(&truth_fas, &fas_refs)?;
        let stats = frequency_stats(&res.eps)?;
        let mut residual_mean_abs_max: f64 = 0.0;
        for k in 0..nf {
            residual_mean_abs_max = residual_mean_abs_max.max(stats.mean[k].abs());
            res_csv.row(format_args!(
                "{},{},{},{},{},{}",
                event.id,
                num(freqs[k]),
                num(stats.mean[k]),
                num(stats.median[k]),
                num(stats.p16[k]),
                num(stats.p84[k]),
            ));
        }

        // NCC maps: truth map plus the ensemble mean of per-member maps.
        let mut ncc_central_abs_diff = 0.0;
        for (ref_name, ref_loc) in &refs {
            let truth_map = ncc(&truth, *ref_loc, cfg.eval.ncc_max_lag)?;
            let mut syn_rho = vec![0.0; nx * ny];
            let mut syn_lag = vec![0.0; nx * ny];
            for m in &members {
                let map = ncc(m, *ref_loc, cfg.eval.ncc_max_lag)?;
                for i in 0..nx * ny {
                    syn_rho[i] += map.rho.data()[i] / n_m;
                    syn_lag[i] += map.lag.data()[i] / n_m;
                }
            }
            if ref_name == "central" {
                ncc_central_abs_diff = truth_map
                    .rho
                    .data()
                    .iter()
                    .zip(&syn_rho)
                    .map(|(t, s)| (t - s).abs())
                    .sum::<f64>()
                    / (nx * ny) as f64;
            }
            for ix in 0..nx {
                for iy in 0..ny {
                    let i = ix * ny + iy;
                    ncc_csv.row(format_args!(
                        "{},{ref_name},{},{},{ix},{iy},{},{},{},{}",
                        event.id,
                        ref_loc[0],
                        ref_loc[1],
                        num(truth_map.rho.data()[i]),
                        num(truth_map.lag.data()[i]),
                        num(syn_rho[i]),
                        num(syn_lag[i]),
                    ));
                }
            }
        }

        // Time-distance profiles with nearest-grid-point sampling.
        let truth_amp = amplitude(&truth)?;
        let mut amp_mean = Tensor::zeros(&[nx, ny, nt]);
        for m in &members {
            let a = amplitude(m)?;
            let dst = amp_mean.data_mut();
            for (i, v) in a.data().iter().enumerate() {
                dst[i] += v / n_m;
            }
        }
        for (pi, seg) in cfg.eval.profiles.iter().enumerate() {
            let [a, b] = seg;
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            let n_pts = ((len / truth.dx.min(truth.dy)).ceil() as usize).max(1) + 1;
            for p in 0..n_pts {
                let s = p as f64 / (n_pts - 1) as f64;
                let px = a[0] + s * (b[0] - a[0]);
                let py = a[1] + s * (b[1] - a[1]);
                let ix = snap(px, truth.dx, nx);
                let iy = snap(py, truth.dy, ny);
                let sx = ix as f64 * truth.dx;
                let sy = iy as f64 * truth.dy;
                let dist = ((sx - a[0]).powi(2) + (sy - a[1]).powi(2)).sqrt();
                for it in 0..nt {
                    let i = (ix * ny + iy) * nt + it;
                    prof_csv.row(format_args!(
                        "{},{pi},{p},{ix},{iy},{},{},{},{}",
                        event.id,
                        num(dist),
                        num(it as f64 * truth.dt),
                        num(truth_amp.data()[i]),
                        num(amp_mean.data()[i]),
                    ));
                }
            }
        }

        per_event.push(EventSummary {
            id: event.id.clone(),
            magnitude: event.class_magnitude,
            ensemble_size: members.len(),
            pearson_pgv,
            w1_log10_pgv: w1_pgv,
            residual_mean_abs_max,
            floored_bins: res.floored_bins,
            ncc_central_abs_diff,
        });
    }

    // Magnitude-scaling sweep over interpolated conditions; needs the
    // trained generator, so it only runs when enabled.
    let sweep = &cfg.eval.mag_sweep;
    let mut sweep_bins = Vec::new();
    if sweep.n_per_bin > 0 && sweep.step > 0.0 && sweep.from <= sweep.to {
        let generator = Generator::load(root)?;
        let curves = if samples.calibrated {
            Some(load_bias_curves(root, &cfg)?)
        } else {
            None
        };
        let train = data.events_in(Split::Train);
        let pools: Vec<Vec<Condition>> = cfg
            .dataset
            .classes
            .iter()
            .map(|c| {
                train
                    .iter()
                    .filter(|e| e.class_magnitude == c.magnitude)
                    .map(|e| e.condition)
                    .collect()
            })
            .collect();

        let mut bi = 0usize;
        loop {
            let m = sweep.from + bi as f64 * sweep.step;
            if m > sweep.to + 1e-9 {
                break;
            }
            let seg = cfg
                .dataset
                .classes
                .windows(2)
                .position(|w| w[0].magnitude <= m + 1e-12 && m <= w[1].magnitude + 1e-12)
                .ok_or_else(|| {
                    Error::Config(format!("sweep magnitude {m} outside anchor classes"))
                })?;
            // Common random numbers across bins: the same pick stream and the
            // same per-slot noise leave magnitude as the only input that
            // changes from bin to bin, so the scaling trend is compared on
            // paired ensembles instead of independently noisy ones.
            let mut rng = CounterRng::fork(seed, "eval-sweep-pick", 0);
            let conds = interp_conditions(
                m,
                &pools[seg],
                cfg.dataset.classes[seg].magnitude,
                &pools[seg + 1],
                cfg.dataset.classes[seg + 1].magnitude,
                sweep.n_per_bin,
                &mut rng,
            )?;
            let mut values = Vec::new();
            let mut n_fields = 0usize;
            for (ci, c) in conds.iter().enumerate() {
                for ri in 0..sweep.realizations_per_condition {
                    let label = format!("eval-sweep-c{ci}-r{ri}");
                    let mut grng = CounterRng::fork(seed, &label, 0);
                    let field = generator.generate(
                        c,
                        &mut grng,
                        samples.out_grid,
                        samples.band_limit,
                        curves.as_deref(),
                    )?;
                    let phys = physical_view(&field)?;
                    values.extend_from_slice(pgv(&phys)?.data());
                    n_fields += 1;
                }
            }
            values.sort_by(|a, b| a.total_cmp(b));
            let bin = SweepBin {
                magnitude: m,
                n_conditions: conds.len(),
                n_fields,
                pgv_median: percentile_sorted(&values, 0.5),
                pgv_mean: values.iter().sum::<f64>() / values.len() as f64,
                pgv_p16: percentile_sorted(&values, 0.16),
                pgv_p84: percentile_sorted(&values, 0.84),
            };
            for (metric, v) in [
                ("pgv_median", bin.pgv_median),
                ("pgv_mean", bin.pgv_mean),
                ("pgv_p16", bin.pgv_p16),
                ("pgv_p84", bin.pgv_p84),
            ] {
                sweep_csv.row(format_args!("{},{metric},{}", num(m), num(v)));
            }
            sweep_bins.push(bin);
            bi += 1;
        }
    }
    let monotonic = if sweep_bins.is_empty() {
        None
    } else {
        Some(sweep_bins.windows(2).all(|w| w[0].pgv_median <= w[1].pgv_median))
    };

    let n = per_event.len() as f64;
    let summary = EvalSummary {
        seed,
        n_events: per_event.len(),
        calibrated: samples.calibrated,
        band_limit: samples.band_limit,
        out_grid: samples.out_grid,
        mean_pearson_pgv: per_event.iter().map(|e| e.pearson_pgv).sum::<f64>() / n,
        min_pearson_pgv: per_event
            .iter()
            .map(|e| e.pearson_pgv)
            .fold(f64::INFINITY, f64::min),
        mean_w1_log10_pgv: per_event.iter().map(|e| e.w1_log10_pgv).sum::<f64>() / n,
        max_residual_mean_abs: per_event
            .iter()
            .map(|e| e.residual_mean_abs_max)
            .fold(0.0, f64::max),
        per_event,
        mag_sweep: sweep_bins,
        mag_sweep_monotonic: monotonic,
    };

    let mut files = Vec::new();
    for csv in [pgv_csv, fas_csv, ncc_csv, prof_csv, res_csv, dist_csv, w1_csv, sweep_csv] {
        files.push(csv.finish(&eval_dir)?);
    }
    write_json_atomic(&eval_dir.join("summary.json"), &summary)?;
    files.push("summary.json".to_string());
    let manifest = EvalManifest { stage: "evaluate".to_string(), seed, config: cfg, files };
    write_json_atomic(&eval_dir.join("manifest.json"), &manifest)?;
    Ok(())
}
