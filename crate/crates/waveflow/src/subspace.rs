//! Wave field container and the coarse/fine pair construction used to setup
//! two-resolution training: a sharp temporal band limit plus strided
//! subsampling produce the coarse conditioning field, while the original
//! stays as the fine target.

use crate::error::{Error, Result};
use crate::fft;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Meaning of each channel in a field. `Norm` marks the appended
/// normalization channel that carries log-amplitude, constant over the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelRole {
    Physical,
    Norm,
}

/// A multi-channel field on a regular [C, x, y, t] grid with physical
/// spacings. Invariant: `roles.len()` equals the channel extent.
#[derive(Debug, Clone)]
pub struct WaveField {
    pub data: Tensor,
    pub dx: f64,
    pub dy: f64,
    pub dt: f64,
    pub roles: Vec<ChannelRole>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldMeta {
    dx: f64,
    dy: f64,
    dt: f64,
    roles: Vec<ChannelRole>,
}

impl WaveField {
    pub fn new(data: Tensor, dx: f64, dy: f64, dt: f64, roles: Vec<ChannelRole>) -> Result<Self> {
        if data.shape().len() != 4 || !data.is_real() {
            return Err(Error::Shape(format!(
                "wave field needs real [C, x, y, t], got {:?}",
                data.shape()
            )));
        }
        if roles.len() != data.shape()[0] {
            return Err(Error::Shape(format!(
                "{} roles for {} channels",
                roles.len(),
                data.shape()[0]
            )));
        }
        if dx <= 0.0 || dy <= 0.0 || dt <= 0.0 {
            return Err(Error::Domain("grid spacings must be positive".into()));
        }
        Ok(WaveField { data, dx, dy, dt, roles })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn grid(&self) -> [usize; 3] {
        [self.data.shape()[1], self.data.shape()[2], self.data.shape()[3]]
    }

    pub fn physical_channels(&self) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == ChannelRole::Physical)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn norm_channel(&self) -> Option<usize> {
        self.roles.iter().position(|r| *r == ChannelRole::Norm)
    }

    /// Writes the tensor payload to `path` and metadata to `path` + ".meta.json".
    pub fn save(&self, path: &Path) -> Result<()> {
        self.data.save(path)?;
        let meta = FieldMeta { dx: self.dx, dy: self.dy, dt: self.dt, roles: self.roles.clone() };
        let f = std::fs::File::create(meta_path(path))?;
        serde_json::to_writer(std::io::BufWriter::new(f), &meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<WaveField> {
        let data = Tensor::load(path)?;
        let f = std::fs::File::open(meta_path(path))?;
        let meta: FieldMeta = serde_json::from_reader(std::io::BufReader::new(f))?;
        WaveField::new(data, meta.dx, meta.dy, meta.dt, meta.roles)
    }
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}

/// Coarse/fine pair construction parameters. `fraction` is the kept share of
/// the fine-grid temporal Nyquist band; `factors` are the subsampling strides
/// per grid axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubspaceConfig {
    pub fraction: f64,
    pub factors: [usize; 3],
}

impl Default for SubspaceConfig {
    fn default() -> Self {
        SubspaceConfig { fraction: 0.375, factors: [2, 2, 2] }
    }
}

/// Sharp temporal band limit: frequency bins with |s| <= fraction * nt / 2
/// survive, the rest are zeroed. Sharpness makes the operation an exact
/// projection (applying it twice changes nothing), which downstream
/// consistency checks rely on.
pub fn lowpass(field: &WaveField, fraction: f64) -> Result<WaveField> {
    if !(0.0 < fraction) || fraction > 1.0 {
        return Err(Error::Domain(format!("lowpass fraction {fraction} outside (0, 1]")));
    }
    let nt = field.grid()[2];
    let cutoff = fraction * nt as f64 / 2.0 + 1e-9;
    let mut sp = fft::fft(&field.data, &[3])?;
    {
        let shape = sp.shape().to_vec();
        let inner = 1usize;
        let outer: usize = shape[..3].iter().product();
        let d = sp.data_mut();
        for o in 0..outer {
            for k in 0..nt {
                let s = if k <= nt / 2 { k as isize } else { k as isize - nt as isize };
                if (s.unsigned_abs() as f64) > cutoff {
                    let idx = 2 * (o * nt * inner + k);
                    d[idx] = 0.0;
                    d[idx + 1] = 0.0;
                }
            }
        }
    }
    let data = fft::ifft(&sp, &[3])?.real_part();
    WaveField::new(data, field.dx, field.dy, field.dt, field.roles.clone())
}

/// Strided subsampling by integer factors per grid axis; extents must divide
/// evenly and spacings scale accordingly. No anti-aliasing here: callers
/// band-limit first when that matters.
pub fn coarsen(field: &WaveField, factors: [usize; 3]) -> Result<WaveField> {
    let g = field.grid();
    for (ax, (n, f)) in g.iter().zip(&factors).enumerate() {
        if *f == 0 || n % f != 0 {
            return Err(Error::Shape(format!(
                "axis {ax}: extent {n} not divisible by stride {f}"
            )));
        }
    }
    let c = field.channels();
    let out_grid = [g[0] / factors[0], g[1] / factors[1], g[2] / factors[2]];
    let src = &field.data;
    let data = Tensor::from_fn(&[c, out_grid[0], out_grid[1], out_grid[2]], |idx| {
        src.at(&[idx[0], idx[1] * factors[0], idx[2] * factors[1], idx[3] * factors[2]])
    });
    WaveField::new(
        data,
        field.dx * factors[0] as f64,
        field.dy * factors[1] as f64,
        field.dt * factors[2] as f64,
        field.roles.clone(),
    )
}

/// Coarse conditioning input plus untouched fine target.
pub fn make_pair(field: &WaveField, cfg: &SubspaceConfig) -> Result<(WaveField, WaveField)> {
    let coarse = coarsen(&lowpass(field, cfg.fraction)?, cfg.factors)?;
    Ok((coarse, field.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn random_field(seed: u64, grid: [usize; 3]) -> WaveField {
        let mut rng = CounterRng::new(seed);
        let data = Tensor::randn(&[2, grid[0], grid[1], grid[2]], 1.0, &mut rng);
        WaveField::new(data, 1.0, 1.0, 0.5, vec![ChannelRole::Physical; 2]).unwrap()
    }

    #[test]
    fn lowpass_is_idempotent() {
        let f = random_field(1, [4, 4, 24]);
        let once = lowpass(&f, 0.375).unwrap();
        let twice = lowpass(&once, 0.375).unwrap();
        assert!(twice.data.rel_l2(&once.data).unwrap() < 1e-10);
    }

    #[test]
    fn lowpass_never_gains_energy_and_preserves_dc() {
        let f = random_field(2, [3, 3, 16]);
        let lp = lowpass(&f, 0.5).unwrap();
        assert!(lp.data.norm() <= f.data.norm() + 1e-12);

        let c = WaveField::new(
            Tensor::filled(&[1, 2, 2, 8], 3.25),
            1.0,
            1.0,
            1.0,
            vec![ChannelRole::Physical],
        )
        .unwrap();
        let lc = lowpass(&c, 0.25).unwrap();
        assert!(lc.data.rel_l2(&c.data).unwrap() < 1e-14);
    }

    #[test]
    fn lowpass_is_linear() {
        let a = random_field(3, [2, 3, 12]);
        let b = random_field(4, [2, 3, 12]);
        let mixed = WaveField::new(
            a.data.scale(0.6).add(&b.data.scale(-1.1)).unwrap(),
            1.0,
            1.0,
            0.5,
            a.roles.clone(),
        )
        .unwrap();
        let lhs = lowpass(&mixed, 0.4).unwrap();
        let rhs = lowpass(&a, 0.4)
            .unwrap()
            .data
            .scale(0.6)
            .add(&lowpass(&b, 0.4).unwrap().data.scale(-1.1))
            .unwrap();
        assert!(lhs.data.rel_l2(&rhs).unwrap() < 1e-10);
    }

    #[test]
    fn lowpass_passes_and_blocks_single_frequencies() {
        // nt = 24, fraction 0.375 keeps |s| <= 4.5, so s=4 passes, s=5 dies.
        let nt = 24;
        let mk = |s: f64| {
            let data = Tensor::from_fn(&[1, 2, 2, nt], |idx| {
                (2.0 * PI * s * idx[3] as f64 / nt as f64).sin() + 0.1
            });
            WaveField::new(data, 1.0, 1.0, 1.25, vec![ChannelRole::Physical]).unwrap()
        };
        let keep = lowpass(&mk(4.0), 0.375).unwrap();
        assert!(keep.data.rel_l2(&mk(4.0).data).unwrap() < 1e-12);
        let kill = lowpass(&mk(5.0), 0.375).unwrap();
        // Only the 0.1 offset (DC) survives.
        for v in kill.data.data() {
            assert!((v - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn cutoff_bins_match_between_fine_and_coarse_grids() {
        // Fraction doubles when dt doubles, keeping the same physical band:
        // |s| <= 4 on both nt=24 (fraction .375) and nt=12 (fraction .75).
        let fine = random_field(5, [2, 2, 24]);
        let sub = coarsen(&fine, [1, 1, 2]).unwrap();
        let a = lowpass(&sub, 0.75).unwrap();
        let b = coarsen(&lowpass(&fine, 0.375).unwrap(), [1, 1, 2]).unwrap();
        // Not equal in general (subsampling aliases s in 5..=6 content into
        // the kept band), but a pre-band-limited field commutes exactly.
        let pre = lowpass(&fine, 0.33).unwrap(); // keeps |s| <= 3
        let a2 = lowpass(&coarsen(&pre, [1, 1, 2]).unwrap(), 0.75).unwrap();
        let b2 = coarsen(&lowpass(&pre, 0.375).unwrap(), [1, 1, 2]).unwrap();
        assert!(a2.data.rel_l2(&b2.data).unwrap() < 1e-10);
        let _ = (a, b);
    }

    #[test]
    fn coarsen_takes_exact_samples_and_scales_spacings() {
        let f = random_field(6, [4, 6, 8]);
        let c = coarsen(&f, [2, 3, 2]).unwrap();
        assert_eq!(c.grid(), [2, 2, 4]);
        assert_eq!(c.dx, 2.0);
        assert_eq!(c.dy, 3.0);
        assert_eq!(c.dt, 1.0);
        assert_eq!(c.data.at(&[1, 1, 1, 3]), f.data.at(&[1, 2, 3, 6]));
        assert!(coarsen(&f, [3, 1, 1]).is_err());
        assert!(coarsen(&f, [0, 1, 1]).is_err());
    }

    #[test]
    fn make_pair_leaves_fine_untouched() {
        let f = random_field(7, [4, 4, 24]);
        let cfg = SubspaceConfig::default();
        let (coarse, fine) = make_pair(&f, &cfg).unwrap();
        assert_eq!(coarse.grid(), [2, 2, 12]);
        assert_eq!(fine.data.data(), f.data.data());
        let want = coarsen(&lowpass(&f, 0.375).unwrap(), [2, 2, 2]).unwrap();
        assert!(coarse.data.rel_l2(&want.data).unwrap() < 1e-14);
    }

    #[test]
    fn norm_channel_survives_lowpass_unchanged() {
        let mut rng = CounterRng::new(8);
        let mut data = Tensor::randn(&[2, 2, 2, 16], 1.0, &mut rng);
        // Channel 1 constant, as the normalization channel always is.
        let p: usize = 2 * 2 * 16;
        for v in &mut data.data_mut()[p..] {
            *v = -0.73;
        }
        let f = WaveField::new(
            data,
            1.0,
            1.0,
            1.0,
            vec![ChannelRole::Physical, ChannelRole::Norm],
        )
        .unwrap();
        let lp = lowpass(&f, 0.3).unwrap();
        for v in &lp.data.data()[p..] {
            assert!((v + 0.73).abs() < 1e-12);
        }
        assert_eq!(f.norm_channel(), Some(1));
        assert_eq!(f.physical_channels(), vec![0]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.bin");
        let f = random_field(9, [3, 4, 6]);
        f.save(&path).unwrap();
        let g = WaveField::load(&path).unwrap();
        assert_eq!(g.grid(), f.grid());
        assert_eq!(g.dt, f.dt);
        assert_eq!(g.roles, f.roles);
        // f32 storage rounds the payload.
        assert!(g.data.rel_l2(&f.data).unwrap() < 1e-6);
    }

    proptest! {
        #[test]
        fn lowpass_idempotent_and_contractive_for_any_fraction(
            seed in 1u64..500,
            frac in 0.05f64..1.0,
        ) {
            let f = random_field(seed, [2, 2, 12]);
            let once = lowpass(&f, frac).unwrap();
            let twice = lowpass(&once, frac).unwrap();
            prop_assert!(twice.data.rel_l2(&once.data).unwrap_or(0.0) < 1e-10);
            prop_assert!(once.data.norm() <= f.data.norm() + 1e-12);
        }
    }
}
