//! Evaluation metrics for wavefields: multi-channel amplitude, peak ground
//! velocity, power-mean Fourier amplitude spectra, lagged normalized
//! cross-correlation maps, spectral log-residuals with ensemble statistics,
//! Wasserstein-1 distances between intensity distributions, and
//! magnitude-interpolated condition pools.
//!
//! All metrics read physical channels only; a normalization channel never
//! influences any value here.

use crate::error::{Error, Result};
use crate::fft;
use crate::operators::Condition;
use crate::rng::CounterRng;
use crate::subspace::WaveField;
use crate::tensor::Tensor;

// ── Pointwise intensity ─────────────────────────────────────────────────

/// Instantaneous amplitude: Euclidean norm over physical channels at every
/// grid point and time sample. Returns [nx, ny, nt].
pub fn amplitude(u: &WaveField) -> Result<Tensor> {
    let phys = u.physical_channels();
    if phys.is_empty() {
        return Err(Error::Shape("amplitude needs at least one physical channel".into()));
    }
    let [nx, ny, nt] = u.grid();
    let p = nx * ny * nt;
    let mut out = Tensor::zeros(&[nx, ny, nt]);
    {
        let o = out.data_mut();
        for c in &phys {
            let src = &u.data.data()[c * p..(c + 1) * p];
            for (ov, s) in o.iter_mut().zip(src) {
                *ov += s * s;
            }
        }
        for ov in o.iter_mut() {
            *ov = ov.sqrt();
        }
    }
    Ok(out)
}

/// Peak amplitude over time per location. Returns [nx, ny].
pub fn pgv(u: &WaveField) -> Result<Tensor> {
    let amp = amplitude(u)?;
    let [nx, ny, nt] = u.grid();
    let mut out = Tensor::zeros(&[nx, ny]);
    {
        let o = out.data_mut();
        let a = amp.data();
        for loc in 0..nx * ny {
            o[loc] = a[loc * nt..(loc + 1) * nt].iter().fold(0.0f64, |m, v| m.max(*v));
        }
    }
    Ok(out)
}

// ── Fourier amplitude spectra ───────────────────────────────────────────

/// One-sided frequency axis f_k = k / (nt * dt), k = 0 ..= nt/2.
pub fn fas_freqs(nt: usize, dt: f64) -> Vec<f64> {
    (0..=nt / 2).map(|k| k as f64 / (nt as f64 * dt)).collect()
}

fn channel_spectrum(u: &WaveField, channel: usize) -> Result<Tensor> {
    let [nx, ny, nt] = u.grid();
    let p = nx * ny * nt;
    let trace = Tensor::from_vec(
        &[nx, ny, nt],
        u.data.data()[channel * p..(channel + 1) * p].to_vec(),
    )?;
    let spec = fft::fft(&trace.to_complex(), &[2])?;
    let nf = nt / 2 + 1;
    let mut out = Tensor::zeros(&[nx, ny, nf]);
    {
        let o = out.data_mut();
        let s = spec.data();
        for loc in 0..nx * ny {
            for k in 0..nf {
                let re = s[2 * (loc * nt + k)];
                let im = s[2 * (loc * nt + k) + 1];
                o[loc * nf + k] = u.dt * (re * re + im * im).sqrt();
            }
        }
    }
    Ok(out)
}

/// One-sided amplitude spectrum per location, continuous-transform
/// normalization dt * |X_k|. With a channel pair, returns the power mean
/// sqrt((A1^2 + A2^2) / 2); otherwise the first physical channel's
/// spectrum. Returns [nx, ny, nt/2 + 1].
pub fn fas(u: &WaveField, pair: Option<[usize; 2]>) -> Result<Tensor> {
    let phys = u.physical_channels();
    if phys.is_empty() {
        return Err(Error::Shape("fas needs at least one physical channel".into()));
    }
    match pair {
        None => channel_spectrum(u, phys[0]),
        Some([c1, c2]) => {
            for c in [c1, c2] {
                if !phys.contains(&c) {
                    return Err(Error::Domain(format!("channel {c} is not physical")));
                }
            }
            let a1 = channel_spectrum(u, c1)?;
            let a2 = channel_spectrum(u, c2)?;
            let mut out = a1;
            {
                let o = out.data_mut();
                let b = a2.data();
                for (ov, bv) in o.iter_mut().zip(b) {
                    *ov = (0.5 * (*ov * *ov + bv * bv)).sqrt();
                }
            }
            Ok(out)
        }
    }
}

// ── Normalized cross-correlation ────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct NccMap {
    /// Peak correlation coefficient per location, in [-1, 1].
    pub rho: Tensor,
    /// Lag of the peak in time units (lag index times dt).
    pub lag: Tensor,
    pub reference: [usize; 2],
    pub max_lag: f64,
}

/// Lag search half-width: min(floor(max_lag/dt + 1/2), T - 1).
pub fn ncc_lag_count(max_lag: f64, dt: f64, t: usize) -> usize {
    ((max_lag / dt + 0.5).floor() as usize).min(t.saturating_sub(1))
}

/// Multi-channel NCC against the reference location's traces. For each lag
/// k the sum runs over the valid overlap window, normalized by the overlap
/// energies of both sides. Peak selection breaks ties toward the smallest
/// |k|, then the negative one.
pub fn ncc(u: &WaveField, reference: [usize; 2], max_lag: f64) -> Result<NccMap> {
    let phys = u.physical_channels();
    if phys.is_empty() {
        return Err(Error::Shape("ncc needs at least one physical channel".into()));
    }
    let [nx, ny, nt] = u.grid();
    if reference[0] >= nx || reference[1] >= ny {
        return Err(Error::Domain(format!("reference {reference:?} outside {nx} x {ny} grid")));
    }
    if max_lag < 0.0 {
        return Err(Error::Domain("max_lag must be nonnegative".into()));
    }
    let p = nx * ny * nt;
    let trace = |c: usize, loc: usize| &u.data.data()[c * p + loc * nt..c * p + loc * nt + nt];
    let ref_loc = reference[0] * ny + reference[1];

    let ref_energy: f64 =
        phys.iter().map(|c| trace(*c, ref_loc).iter().map(|v| v * v).sum::<f64>()).sum();
    if ref_energy == 0.0 {
        return Err(Error::Domain("reference trace has zero energy".into()));
    }

    let k_max = ncc_lag_count(max_lag, u.dt, nt) as isize;
    let mut rho = Tensor::zeros(&[nx, ny]);
    let mut lag = Tensor::zeros(&[nx, ny]);
    for loc in 0..nx * ny {
        let mut best_rho = f64::NEG_INFINITY;
        let mut best_k = 0isize;
        for k in -k_max..=k_max {
            // Overlap window: reference index t, test index t + k.
            let (t_lo, t_hi) = if k >= 0 {
                (0usize, (nt as isize - k) as usize)
            } else {
                ((-k) as usize, nt)
            };
            let mut num = 0.0;
            let mut e_ref = 0.0;
            let mut e_tst = 0.0;
            for c in &phys {
                let r = trace(*c, ref_loc);
                let s = trace(*c, loc);
                for t in t_lo..t_hi {
                    let tv = s[(t as isize + k) as usize];
                    num += tv * r[t];
                    e_ref += r[t] * r[t];
                    e_tst += tv * tv;
                }
            }
            let denom = (e_ref * e_tst).sqrt();
            let r = if denom > 0.0 { num / denom } else { 0.0 };
            let better = r > best_rho
                || (r == best_rho
                    && (k.abs() < best_k.abs() || (k.abs() == best_k.abs() && k < best_k)));
            if better {
                best_rho = r;
                best_k = k;
            }
        }
        rho.data_mut()[loc] = best_rho;
        lag.data_mut()[loc] = best_k as f64 * u.dt;
    }
    Ok(NccMap { rho, lag, reference, max_lag })
}

// ── Spectral residuals ──────────────────────────────────────────────────

pub const SPECTRUM_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone)]
pub struct ResidualField {
    /// ln(A_data) - mean(ln(A_syn)) per location and frequency bin.
    pub eps: Tensor,
    /// Bins clamped to the spectrum floor before taking logs.
    pub floored_bins: usize,
    pub ensemble_size: usize,
}

/// Log-residual of a data spectrum against an ensemble of synthetic
/// spectra, all shaped [nx, ny, nf].
pub fn residual(data_fas: &Tensor, ensemble: &[&Tensor]) -> Result<ResidualField> {
    if ensemble.is_empty() {
        return Err(Error::Domain("residual needs a nonempty ensemble".into()));
    }
    for s in ensemble {
        if s.shape() != data_fas.shape() {
            return Err(Error::Shape(format!(
                "ensemble member {:?} vs data {:?}",
                s.shape(),
                data_fas.shape()
            )));
        }
    }
    let mut floored = 0usize;
    let mut ln_floor = |v: f64| -> f64 {
        if v < SPECTRUM_FLOOR {
            floored += 1;
            SPECTRUM_FLOOR.ln()
        } else {
            v.ln()
        }
    };
    let n = data_fas.numel();
    let mut eps = Tensor::zeros(data_fas.shape());
    {
        let o = eps.data_mut();
        for i in 0..n {
            let mut syn_mean = 0.0;
            for s in ensemble {
                syn_mean += ln_floor(s.data()[i]);
            }
            syn_mean /= ensemble.len() as f64;
            o[i] = ln_floor(data_fas.data()[i]) - syn_mean;
        }
    }
    Ok(ResidualField { eps, floored_bins: floored, ensemble_size: ensemble.len() })
}

#[derive(Debug, Clone)]
pub struct FreqStats {
    pub mean: Vec<f64>,
    pub median: Vec<f64>,
    pub p16: Vec<f64>,
    pub p84: Vec<f64>,
}

/// Linear-interpolation percentile of already-sorted samples.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Per-frequency mean / median / 16th / 84th percentiles over locations of
/// a residual tensor shaped [nx, ny, nf].
pub fn frequency_stats(eps: &Tensor) -> Result<FreqStats> {
    let shape = eps.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("frequency stats need [x, y, f], got {shape:?}")));
    }
    let (n_loc, nf) = (shape[0] * shape[1], shape[2]);
    if n_loc == 0 || nf == 0 {
        return Err(Error::Shape("frequency stats need a nonempty grid".into()));
    }
    let mut stats = FreqStats {
        mean: Vec::with_capacity(nf),
        median: Vec::with_capacity(nf),
        p16: Vec::with_capacity(nf),
        p84: Vec::with_capacity(nf),
    };
    let mut col = vec![0.0f64; n_loc];
    for k in 0..nf {
        for loc in 0..n_loc {
            col[loc] = eps.data()[loc * nf + k];
        }
        stats.mean.push(col.iter().sum::<f64>() / n_loc as f64);
        col.sort_by(|a, b| a.total_cmp(b));
        stats.median.push(percentile_sorted(&col, 0.5));
        stats.p16.push(percentile_sorted(&col, 0.16));
        stats.p84.push(percentile_sorted(&col, 0.84));
    }
    Ok(stats)
}

/// Geometric mean and geometric standard deviation per bin:
/// exp(mean(ln)) and exp(population std(ln)).
pub fn geo_stats(ensemble: &[&Tensor]) -> Result<(Tensor, Tensor)> {
    if ensemble.is_empty() {
        return Err(Error::Domain("geo stats need a nonempty ensemble".into()));
    }
    let shape = ensemble[0].shape().to_vec();
    for s in ensemble {
        if s.shape() != shape {
            return Err(Error::Shape("ensemble members must share a shape".into()));
        }
        if s.data().iter().any(|v| *v <= 0.0) {
            return Err(Error::Domain("geo stats need positive values".into()));
        }
    }
    let n = ensemble.len() as f64;
    let numel = ensemble[0].numel();
    let mut mean = Tensor::zeros(&shape);
    let mut std = Tensor::zeros(&shape);
    for i in 0..numel {
        let logs: Vec<f64> = ensemble.iter().map(|s| s.data()[i].ln()).collect();
        let m = logs.iter().sum::<f64>() / n;
        let v = logs.iter().map(|l| (l - m) * (l - m)).sum::<f64>() / n;
        mean.data_mut()[i] = m.exp();
        std.data_mut()[i] = v.sqrt().exp();
    }
    Ok((mean, std))
}

// ── Distribution distances and correlation ──────────────────────────────

/// Wasserstein-1 distance between empirical distributions. Equal sizes
/// reduce to the mean absolute difference of sorted samples; unequal sizes
/// integrate the inverse-CDF gap exactly over merged quantile breakpoints.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("wasserstein1 needs nonempty samples".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.total_cmp(y));
    sb.sort_by(|x, y| x.total_cmp(y));
    if sa.len() == sb.len() {
        let n = sa.len() as f64;
        return Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / n);
    }
    // Inverse CDFs are step functions with jumps at i/n; the difference is
    // constant between merged breakpoints.
    let (na, nb) = (sa.len(), sb.len());
    let mut total = 0.0;
    let mut q = 0.0f64;
    let (mut ia, mut ib) = (0usize, 0usize);
    while q < 1.0 {
        let next_a = (ia + 1) as f64 / na as f64;
        let next_b = (ib + 1) as f64 / nb as f64;
        let next = next_a.min(next_b).min(1.0);
        total += (next - q) * (sa[ia] - sb[ib]).abs();
        q = next;
        if next + 1e-15 >= next_a && ia + 1 < na {
            ia += 1;
        }
        if next + 1e-15 >= next_b && ib + 1 < nb {
            ib += 1;
        }
    }
    Ok(total)
}

/// Pearson correlation coefficient of paired samples.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Domain("pearson needs paired samples, at least two".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Domain("pearson undefined for constant samples".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

// ── Magnitude interpolation ─────────────────────────────────────────────

/// Conditions for a target magnitude between two anchor pools: the mixing
/// weight alpha = (m - m_low) / (m_high - m_low) decides how many
/// hypocenters come from each pool (round(alpha * n) from the high side),
/// drawn without replacement; every output keeps its source hypocenter
/// with the magnitude overwritten.
pub fn interp_conditions(
    m_target: f64,
    pool_low: &[Condition],
    m_low: f64,
    pool_high: &[Condition],
    m_high: f64,
    n: usize,
    rng: &mut CounterRng,
) -> Result<Vec<Condition>> {
    if m_high <= m_low {
        return Err(Error::Config("anchor magnitudes must be increasing".into()));
    }
    if !(m_low..=m_high).contains(&m_target) {
        return Err(Error::Domain(format!(
            "target {m_target} outside anchors [{m_low}, {m_high}]"
        )));
    }
    let alpha = (m_target - m_low) / (m_high - m_low);
    let n_high = (alpha * n as f64).round() as usize;
    let n_low = n - n_high;
    if n_high > pool_high.len() || n_low > pool_low.len() {
        return Err(Error::Domain(format!(
            "pool too small: need {n_low} low / {n_high} high, have {} / {}",
            pool_low.len(),
            pool_high.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for (pool, count) in [(pool_low, n_low), (pool_high, n_high)] {
        for idx in rng.choose_without_replacement(pool.len(), count) {
            let mut c = pool[idx];
            c.magnitude = m_target;
            out.push(c);
        }
    }
    Ok(out)
}

// ── Histograms ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Histogram {
    /// Bin edges, length counts.len() + 1.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Freedman-Diaconis binning: width 2 * IQR / n^(1/3), falling back to a
/// single bin for degenerate spreads.
pub fn histogram_fd(samples: &[f64]) -> Result<Histogram> {
    if samples.is_empty() {
        return Err(Error::Domain("histogram needs samples".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let iqr = percentile_sorted(&sorted, 0.75) - percentile_sorted(&sorted, 0.25);
    let width = 2.0 * iqr / (sorted.len() as f64).cbrt();
    let n_bins = if width > 0.0 && hi > lo {
        (((hi - lo) / width).ceil() as usize).clamp(1, 10_000)
    } else {
        1
    };
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let mut counts = vec![0usize; n_bins];
    for v in &sorted {
        let b = (((v - lo) / span) * n_bins as f64) as usize;
        counts[b.min(n_bins - 1)] += 1;
    }
    let edges = (0..=n_bins).map(|i| lo + span * i as f64 / n_bins as f64).collect();
    Ok(Histogram { edges, counts })
}
