//! Frequency-dependent amplitude calibration: estimate per-bin
//! log-amplitude bias curves from spectral residuals at anchor magnitudes,
//! interpolate them across magnitude, and apply them as a phase-preserving
//! multiplicative correction to waveforms.

use crate::error::{Error, Result};
use crate::fft;
use crate::metrics::{fas, fas_freqs, residual};
use crate::subspace::WaveField;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Log-amplitude correction per one-sided frequency bin, in natural-log
/// units, anchored at one magnitude.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasCurve {
    pub anchor_magnitude: f64,
    pub freqs: Vec<f64>,
    pub values: Vec<f64>,
}

impl BiasCurve {
    pub fn zero(anchor_magnitude: f64, nt: usize, dt: f64) -> BiasCurve {
        let freqs = fas_freqs(nt, dt);
        let values = vec![0.0; freqs.len()];
        BiasCurve { anchor_magnitude, freqs, values }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<BiasCurve> {
        let f = std::fs::File::open(path)?;
        let curve: BiasCurve = serde_json::from_reader(std::io::BufReader::new(f))?;
        if curve.freqs.len() != curve.values.len() {
            return Err(Error::Config("bias curve axis and values disagree".into()));
        }
        if curve.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("bias curve holds non-finite values".into()));
        }
        Ok(curve)
    }

    fn check_axis(&self, nt: usize, dt: f64) -> Result<()> {
        let want = fas_freqs(nt, dt);
        if self.freqs.len() != want.len()
            || self.freqs.iter().zip(&want).any(|(a, b)| (a - b).abs() > 1e-9)
        {
            return Err(Error::Shape(format!(
                "bias curve has {} bins, field expects {}",
                self.freqs.len(),
                want.len()
            )));
        }
        Ok(())
    }
}

/// Mean spectral log-residual over locations and events of one anchor
/// class: bias(f) = mean_x,e [ln A_data(x,f) - mean_i ln A_syn_i(x,f)].
/// Applying e^bias to the synthetics zeroes that mean by construction.
pub fn estimate_bias(
    events: &[(&WaveField, &[WaveField])],
    anchor_magnitude: f64,
) -> Result<BiasCurve> {
    if events.is_empty() {
        return Err(Error::Domain("bias estimation needs at least one event".into()));
    }
    let [_, _, nt] = events[0].0.grid();
    let dt = events[0].0.dt;
    let nf = nt / 2 + 1;
    let mut sum = vec![0.0f64; nf];
    let mut count = 0usize;
    for (data, ensemble) in events {
        if ensemble.is_empty() {
            return Err(Error::Domain("bias estimation needs nonempty ensembles".into()));
        }
        let data_fas = fas(data, None)?;
        let syn_fas: Vec<Tensor> =
            ensemble.iter().map(|s| fas(s, None)).collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = syn_fas.iter().collect();
        let res = residual(&data_fas, &refs)?;
        let [nx, ny, _] = data.grid();
        for loc in 0..nx * ny {
            for k in 0..nf {
                sum[k] += res.eps.data()[loc * nf + k];
            }
        }
        count += nx * ny;
    }
    let values = sum.iter().map(|s| s / count as f64).collect();
    Ok(BiasCurve { anchor_magnitude, freqs: fas_freqs(nt, dt), values })
}

/// Linear interpolation between the two anchor curves bracketing `m`.
/// No extrapolation: `m` outside the anchor range is an error.
pub fn interp_bias(m: f64, anchors: &[BiasCurve]) -> Result<BiasCurve> {
    if anchors.is_empty() {
        return Err(Error::Domain("no anchor curves".into()));
    }
    if anchors.windows(2).any(|w| w[1].anchor_magnitude <= w[0].anchor_magnitude) {
        return Err(Error::Config("anchor curves must be sorted by magnitude".into()));
    }
    let lo = anchors[0].anchor_magnitude;
    let hi = anchors[anchors.len() - 1].anchor_magnitude;
    if !(lo..=hi).contains(&m) {
        return Err(Error::Domain(format!("magnitude {m} outside anchors [{lo}, {hi}]")));
    }
    let hi_idx = anchors
        .iter()
        .position(|c| c.anchor_magnitude >= m)
        .expect("m is within the anchor range");
    if anchors[hi_idx].anchor_magnitude == m || hi_idx == 0 {
        let mut c = anchors[hi_idx].clone();
        c.anchor_magnitude = m;
        return Ok(c);
    }
    let (a, b) = (&anchors[hi_idx - 1], &anchors[hi_idx]);
    if a.freqs.len() != b.freqs.len() {
        return Err(Error::Shape("anchor curves have different frequency axes".into()));
    }
    let w = (m - a.anchor_magnitude) / (b.anchor_magnitude - a.anchor_magnitude);
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(va, vb)| va * (1.0 - w) + vb * w)
        .collect();
    Ok(BiasCurve { anchor_magnitude: m, freqs: a.freqs.clone(), values })
}

/// Scales every physical channel's spectrum bin k by e^(bias(f_k)),
/// conjugate-symmetrically so the result stays real; phases are untouched
/// and the norm channel passes through unchanged.
pub fn apply_calibration(u: &WaveField, curve: &BiasCurve) -> Result<WaveField> {
    let [nx, ny, nt] = u.grid();
    curve.check_axis(nt, u.dt)?;
    let nf = nt / 2 + 1;
    let mut factor = vec![0.0f64; nt];
    for (k, f) in factor.iter_mut().enumerate() {
        let bin = if k < nf { k } else { nt - k };
        *f = curve.values[bin].exp();
    }

    let p = nx * ny * nt;
    let mut out = u.data.clone();
    for c in u.physical_channels() {
        let trace =
            Tensor::from_vec(&[nx, ny, nt], u.data.data()[c * p..(c + 1) * p].to_vec())?;
        let mut spec = fft::fft(&trace.to_complex(), &[2])?;
        {
            let s = spec.data_mut();
            for loc in 0..nx * ny {
                for k in 0..nt {
                    s[2 * (loc * nt + k)] *= factor[k];
                    s[2 * (loc * nt + k) + 1] *= factor[k];
                }
            }
        }
        let back = fft::ifft(&spec, &[2])?.real_part();
        out.data_mut()[c * p..(c + 1) * p].copy_from_slice(back.data());
    }
    WaveField::new(out, u.dx, u.dy, u.dt, u.roles.clone())
}
