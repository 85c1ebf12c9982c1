//! Ground-truth factory: a 2D heterogeneous acoustic finite-difference
//! simulator with an absorbing sponge, Ricker point sources, finite ruptures
//! as delayed source superpositions, Latin hypercube event sampling, and the
//! per-sample amplitude normalization that feeds training.
//!
//! The solver runs on an internal grid `refine` times finer than the output
//! grid in space and time, surrounded by a sponge margin that lies entirely
//! outside the output domain. Recorded traces are low-passed with a
//! sixth-order Butterworth cascade before temporal decimation.

use crate::error::{Error, Result};
use crate::operators::Condition;
use crate::rng::CounterRng;
use crate::subspace::{ChannelRole, WaveField};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MediumConfig {
    pub c_bg: f64,
    pub basin_c: f64,
    pub basin_center: [f64; 2],
    pub basin_radii: [f64; 2],
}

impl Default for MediumConfig {
    fn default() -> Self {
        MediumConfig {
            c_bg: 0.5,
            basin_c: 0.25,
            basin_center: [20.0, 6.0],
            basin_radii: [6.0, 3.5],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    /// Output grid [nx, ny, nt].
    pub grid: [usize; 3],
    pub dx: f64,
    pub dy: f64,
    pub dt: f64,
    /// Internal refinement: spatial cells and time steps per output sample.
    pub refine_space: usize,
    pub refine_time: usize,
    /// Sponge margin width in internal cells, outside the output domain.
    pub sponge_cells: usize,
    pub sponge_alpha: f64,
    /// Ricker center frequency and delay.
    pub f0: f64,
    pub t0: f64,
    /// Source amplitude 10^(amp_per_mag * (M - m_ref)).
    pub m_ref: f64,
    pub amp_per_mag: f64,
    /// Butterworth corner frequency (absolute units) applied before
    /// temporal decimation.
    pub filter_cutoff: f64,
    pub medium: MediumConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        // With c = 0.5 the 60-unit window lets the wavefront cross the
        // 32 x 16 domain from any interior hypocenter.
        SimConfig {
            grid: [32, 16, 24],
            dx: 1.0,
            dy: 1.0,
            dt: 2.5,
            refine_space: 4,
            refine_time: 8,
            sponge_cells: 32,
            sponge_alpha: 0.015,
            f0: 0.08,
            t0: 8.0,
            m_ref: 4.4,
            amp_per_mag: 0.5,
            filter_cutoff: 0.13,
            medium: MediumConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn domain_size(&self) -> [f64; 2] {
        [self.grid[0] as f64 * self.dx, self.grid[1] as f64 * self.dy]
    }
}

/// Unilateral rupture from the hypocenter toward `end`, split into equal
/// segments that fire with distance/speed delays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuptureSpec {
    pub end: [f64; 2],
    pub speed: f64,
    pub segments: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventSpec {
    pub condition: Condition,
    pub rupture: Option<RuptureSpec>,
}

// ── Source wavelet ──────────────────────────────────────────────────────

/// Ricker wavelet with center frequency f0, peaking at t0.
pub fn ricker(t: f64, f0: f64, t0: f64) -> f64 {
    let a = PI * f0 * (t - t0);
    let a2 = a * a;
    (1.0 - 2.0 * a2) * (-a2).exp()
}

// ── Simulator ───────────────────────────────────────────────────────────

struct Injection {
    ix: usize,
    iy: usize,
    amp: f64,
    delay: f64,
}

/// Acoustic pressure simulation: leapfrog on p_tt = c^2 lap(p) + s, Cerjan
/// sponge at the outer margin, Butterworth + decimation down to the output
/// grid. Returns a single-channel field with Physical role.
fn run_simulation(cfg: &SimConfig, injections: &[Injection]) -> Result<WaveField> {
    let [nx, ny, nt] = cfg.grid;
    let rs = cfg.refine_space;
    let rt = cfg.refine_time;
    if rs == 0 || rt == 0 || nx == 0 || ny == 0 || nt == 0 {
        return Err(Error::Config("simulation grid and refinement must be positive".into()));
    }
    if (cfg.dx - cfg.dy).abs() > 1e-12 {
        return Err(Error::Config("simulator assumes square cells (dx == dy)".into()));
    }
    let h = cfg.dx / rs as f64;
    let dt = cfg.dt / rt as f64;
    let c_max = cfg.medium.c_bg.max(cfg.medium.basin_c);
    if cfg.medium.c_bg <= 0.0 || cfg.medium.basin_c <= 0.0 {
        return Err(Error::Config("medium velocities must be positive".into()));
    }
    let cfl = c_max * dt / h;
    if cfl > std::f64::consts::FRAC_1_SQRT_2 {
        return Err(Error::Config(format!(
            "CFL number {cfl:.3} exceeds 1/sqrt(2); refine the time step"
        )));
    }

    let sp = cfg.sponge_cells;
    let wx = nx * rs + 2 * sp;
    let wy = ny * rs + 2 * sp;
    let idx = |i: usize, j: usize| i * wy + j;

    // Squared Courant factor per cell, from the velocity map.
    let mut c2fac = vec![0.0f64; wx * wy];
    for i in 0..wx {
        let x = (i as isize - sp as isize) as f64 * h;
        for j in 0..wy {
            let y = (j as isize - sp as isize) as f64 * h;
            let m = &cfg.medium;
            let ex = (x - m.basin_center[0]) / m.basin_radii[0];
            let ey = (y - m.basin_center[1]) / m.basin_radii[1];
            let c = if ex * ex + ey * ey <= 1.0 { m.basin_c } else { m.c_bg };
            let f = c * dt / h;
            c2fac[idx(i, j)] = f * f;
        }
    }

    // Cerjan taper: exp(-(alpha * depth_into_sponge)^2), applied to both
    // time levels each step.
    let mut damp = vec![1.0f64; wx * wy];
    for i in 0..wx {
        for j in 0..wy {
            let d = i.min(wx - 1 - i).min(j).min(wy - 1 - j);
            if d < sp {
                let a = cfg.sponge_alpha * (sp - d) as f64;
                damp[idx(i, j)] = (-a * a).exp();
            }
        }
    }

    let mut prev = vec![0.0f64; wx * wy];
    let mut cur = vec![0.0f64; wx * wy];
    let mut next = vec![0.0f64; wx * wy];

    let total_steps = nt * rt;
    let n_rec = nx * ny;
    // Traces at output spatial locations, every internal step.
    let mut traces = vec![0.0f64; n_rec * total_steps];
    let rec_cell: Vec<usize> =
        (0..n_rec).map(|k| idx(sp + (k / ny) * rs, sp + (k % ny) * rs)).collect();

    let dt2 = dt * dt;
    for step in 1..total_steps {
        let t_prev = (step - 1) as f64 * dt;
        for i in 1..wx - 1 {
            for j in 1..wy - 1 {
                let k = idx(i, j);
                let lap = cur[k - wy] + cur[k + wy] + cur[k - 1] + cur[k + 1] - 4.0 * cur[k];
                next[k] = 2.0 * cur[k] - prev[k] + c2fac[k] * lap;
            }
        }
        for inj in injections {
            let k = idx(inj.ix, inj.iy);
            next[k] += dt2 * inj.amp * ricker(t_prev - inj.delay, cfg.f0, cfg.t0);
        }
        for k in 0..wx * wy {
            next[k] *= damp[k];
            cur[k] *= damp[k];
        }
        std::mem::swap(&mut prev, &mut cur);
        std::mem::swap(&mut cur, &mut next);
        for (rk, cell) in rec_cell.iter().enumerate() {
            traces[rk * total_steps + step] = cur[*cell];
        }
    }

    // Sixth-order Butterworth (three biquads) along time, then decimate.
    let fs = 1.0 / dt;
    let mut data = Tensor::zeros(&[1, nx, ny, nt]);
    {
        let out = data.data_mut();
        let mut work = vec![0.0f64; total_steps];
        for rk in 0..n_rec {
            work.copy_from_slice(&traces[rk * total_steps..(rk + 1) * total_steps]);
            butterworth6_in_place(&mut work, cfg.filter_cutoff, fs)?;
            for k in 0..nt {
                out[rk * nt + k] = work[k * rt];
            }
        }
    }
    if !data.all_finite() {
        return Err(Error::Numeric("simulation produced non-finite samples".into()));
    }
    WaveField::new(data, cfg.dx, cfg.dy, cfg.dt, vec![ChannelRole::Physical])
}

/// Cascaded-biquad low-pass (Butterworth poles for order six), causal,
/// direct form II transposed.
fn butterworth6_in_place(x: &mut [f64], fc: f64, fs: f64) -> Result<()> {
    if !(fc > 0.0) || fc >= fs / 2.0 {
        return Err(Error::Config(format!("filter cutoff {fc} outside (0, {})", fs / 2.0)));
    }
    const Q: [f64; 3] = [0.5176380902050415, std::f64::consts::FRAC_1_SQRT_2, 1.9318516525781366];
    let w0 = 2.0 * PI * fc / fs;
    let (sw, cw) = (w0.sin(), w0.cos());
    for q in Q {
        let alpha = sw / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b0 = (1.0 - cw) / 2.0 / a0;
        let b1 = (1.0 - cw) / a0;
        let b2 = b0;
        let a1 = -2.0 * cw / a0;
        let a2 = (1.0 - alpha) / a0;
        let (mut s1, mut s2) = (0.0f64, 0.0f64);
        for v in x.iter_mut() {
            let xin = *v;
            let y = b0 * xin + s1;
            s1 = b1 * xin - a1 * y + s2;
            s2 = b2 * xin - a2 * y;
            *v = y;
        }
    }
    Ok(())
}

fn source_amplitude(cfg: &SimConfig, magnitude: f64) -> f64 {
    10f64.powf(cfg.amp_per_mag * (magnitude - cfg.m_ref))
}

fn locate(cfg: &SimConfig, x: f64, y: f64) -> Result<(usize, usize)> {
    let [w, hgt] = cfg.domain_size();
    if !(0.0..=w).contains(&x) || !(0.0..=hgt).contains(&y) {
        return Err(Error::Domain(format!("source ({x}, {y}) outside domain {w} x {hgt}")));
    }
    let r = cfg.refine_space as f64;
    let ix =
        cfg.sponge_cells + ((x / cfg.dx * r).round() as usize).min(cfg.grid[0] * cfg.refine_space);
    let iy =
        cfg.sponge_cells + ((y / cfg.dy * r).round() as usize).min(cfg.grid[1] * cfg.refine_space);
    Ok((ix, iy))
}

pub fn simulate_point_source(cond: &Condition, cfg: &SimConfig) -> Result<WaveField> {
    let (ix, iy) = locate(cfg, cond.hypo_x, cond.hypo_y)?;
    let inj = Injection { ix, iy, amp: source_amplitude(cfg, cond.magnitude), delay: 0.0 };
    run_simulation(cfg, &[inj])
}

/// Finite rupture as a superposition of delayed point sources at segment
/// midpoints; total amplitude matches the point source of the same
/// magnitude. Without a rupture spec this is exactly the point source.
pub fn simulate_finite_rupture(spec: &EventSpec, cfg: &SimConfig) -> Result<WaveField> {
    let cond = &spec.condition;
    let Some(rup) = &spec.rupture else {
        return simulate_point_source(cond, cfg);
    };
    if rup.segments == 0 {
        return Err(Error::Config("rupture needs at least one segment".into()));
    }
    if rup.speed <= 0.0 {
        return Err(Error::Config("rupture speed must be positive".into()));
    }
    let total = source_amplitude(cfg, cond.magnitude);
    let n = rup.segments;
    let (x0, y0) = (cond.hypo_x, cond.hypo_y);
    let (ex, ey) = (rup.end[0] - x0, rup.end[1] - y0);
    let mut injections = Vec::with_capacity(n);
    for i in 0..n {
        let frac = (i as f64 + 0.5) / n as f64;
        let (sx, sy) = (x0 + frac * ex, y0 + frac * ey);
        let dist = ((sx - x0).powi(2) + (sy - y0).powi(2)).sqrt();
        let (ix, iy) = locate(cfg, sx, sy)?;
        injections.push(Injection { ix, iy, amp: total / n as f64, delay: dist / rup.speed });
    }
    run_simulation(cfg, &injections)
}

pub fn simulate(spec: &EventSpec, cfg: &SimConfig) -> Result<WaveField> {
    simulate_finite_rupture(spec, cfg)
}

// ── Latin hypercube sampling ────────────────────────────────────────────

/// One point per stratum per dimension: dimension d is split into n equal
/// strata, each sampled once, with an independent random stratum-to-point
/// assignment per dimension.
pub fn latin_hypercube(n: usize, ranges: &[[f64; 2]], rng: &mut CounterRng) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::Config("latin hypercube needs n >= 1".into()));
    }
    if ranges.iter().any(|r| r[1] <= r[0]) {
        return Err(Error::Config("latin hypercube ranges must be increasing".into()));
    }
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(ranges.len());
    for r in ranges {
        let mut strata: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut strata);
        let col: Vec<f64> = strata
            .iter()
            .map(|s| {
                let u = (*s as f64 + rng.uniform()) / n as f64;
                r[0] + u * (r[1] - r[0])
            })
            .collect();
        cols.push(col);
    }
    Ok((0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect())
}

// ── Normalization ───────────────────────────────────────────────────────

/// Divide physical channels by their pooled standard deviation and append a
/// constant channel holding log10 of that deviation.
pub fn preprocess(u: &WaveField) -> Result<WaveField> {
    if u.norm_channel().is_some() {
        return Err(Error::Domain("field already carries a normalization channel".into()));
    }
    let phys = u.physical_channels();
    if phys.is_empty() {
        return Err(Error::Shape("no physical channels to normalize".into()));
    }
    let g = u.grid();
    let p: usize = g.iter().product();
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for c in &phys {
        for v in &u.data.data()[c * p..(c + 1) * p] {
            sum += v;
            sumsq += v * v;
        }
    }
    let count = (phys.len() * p) as f64;
    let mean = sum / count;
    let var = (sumsq / count - mean * mean).max(0.0);
    let sigma = var.sqrt();
    if sigma == 0.0 {
        return Err(Error::Domain("degenerate event: zero standard deviation".into()));
    }

    let c_out = u.channels() + 1;
    let mut data = Tensor::zeros(&[c_out, g[0], g[1], g[2]]);
    {
        let d = data.data_mut();
        for c in 0..u.channels() {
            let src = &u.data.data()[c * p..(c + 1) * p];
            let dst = &mut d[c * p..(c + 1) * p];
            for (o, s) in dst.iter_mut().zip(src) {
                *o = s / sigma;
            }
        }
        d[u.channels() * p..].fill(sigma.log10());
    }
    let mut roles = u.roles.clone();
    roles.push(ChannelRole::Norm);
    WaveField::new(data, u.dx, u.dy, u.dt, roles)
}

/// Inverse of `preprocess`: physical channels times 10^(norm value), norm
/// channel dropped.
pub fn to_physical(u: &WaveField) -> Result<WaveField> {
    let Some(norm_idx) = u.norm_channel() else {
        return Err(Error::Shape("field has no normalization channel".into()));
    };
    let g = u.grid();
    let p: usize = g.iter().product();
    let sigma = 10f64.powf(u.data.data()[norm_idx * p]);
    let phys = u.physical_channels();
    let mut data = Tensor::zeros(&[phys.len(), g[0], g[1], g[2]]);
    {
        let d = data.data_mut();
        for (o, c) in phys.iter().enumerate() {
            let src = &u.data.data()[c * p..(c + 1) * p];
            let dst = &mut d[o * p..(o + 1) * p];
            for (ov, s) in dst.iter_mut().zip(src) {
                *ov = s * sigma;
            }
        }
    }
    WaveField::new(data, u.dx, u.dy, u.dt, vec![ChannelRole::Physical; phys.len()])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn homogeneous_cfg() -> SimConfig {
        let mut cfg = SimConfig::default();
        cfg.medium.basin_c = cfg.medium.c_bg;
        cfg
    }

    fn trace(field: &WaveField, ix: usize, iy: usize) -> Vec<f64> {
        let [_, _, nt] = field.grid();
        (0..nt).map(|k| field.data.at(&[0, ix, iy, k])).collect()
    }

    fn first_arrival(tr: &[f64], dt: f64) -> f64 {
        let peak = tr.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let thresh = 0.05 * peak;
        for (k, v) in tr.iter().enumerate() {
            if v.abs() > thresh {
                return k as f64 * dt;
            }
        }
        f64::INFINITY
    }

    #[test]
    fn travel_time_between_receivers_matches_wave_speed() {
        // Differential arrival between two receivers cancels the wavelet
        // onset and filter group delay, leaving d / c.
        let cfg = homogeneous_cfg();
        let cond = Condition { magnitude: 5.0, hypo_x: 6.0, hypo_y: 8.0 };
        let field = simulate_point_source(&cond, &cfg).unwrap();
        let t1 = first_arrival(&trace(&field, 12, 8), cfg.dt);
        let t2 = first_arrival(&trace(&field, 24, 8), cfg.dt);
        let expect = (24.0 - 12.0) / cfg.medium.c_bg;
        assert!(
            (t2 - t1 - expect).abs() <= cfg.dt + 1e-12,
            "arrival spacing {} vs expected {expect}",
            t2 - t1
        );
    }

    #[test]
    fn simulation_is_linear_in_source_amplitude() {
        // amp_per_mag 0.5 means M+2 scales the source by 10x exactly.
        let cfg = SimConfig::default();
        let c1 = Condition { magnitude: 4.4, hypo_x: 10.0, hypo_y: 8.0 };
        let c2 = Condition { magnitude: 6.4, hypo_x: 10.0, hypo_y: 8.0 };
        let f1 = simulate_point_source(&c1, &cfg).unwrap();
        let f2 = simulate_point_source(&c2, &cfg).unwrap();
        let rel = f2.data.rel_l2(&f1.data.scale(10.0)).unwrap();
        assert!(rel < 1e-10, "nonlinearity {rel}");
    }

    #[test]
    fn sponge_absorbs_outgoing_energy() {
        // Long-duration run: by the end the wavefront has crossed into the
        // sponge everywhere and most energy is gone.
        let mut cfg = homogeneous_cfg();
        cfg.grid = [16, 16, 48];
        let cond = Condition { magnitude: 5.0, hypo_x: 8.0, hypo_y: 8.0 };
        let field = simulate_point_source(&cond, &cfg).unwrap();
        let [nx, ny, nt] = field.grid();
        let frame_energy = |k: usize| -> f64 {
            let mut e = 0.0;
            for i in 0..nx {
                for j in 0..ny {
                    let v = field.data.at(&[0, i, j, k]);
                    e += v * v;
                }
            }
            e
        };
        let peak = (0..nt).map(frame_energy).fold(0.0f64, f64::max);
        let last = frame_energy(nt - 1);
        assert!(last < 0.5 * peak, "final energy {last} vs peak {peak}");
        assert!(peak > 0.0);
    }

    #[test]
    fn degenerate_rupture_equals_point_source_exactly() {
        let cfg = SimConfig::default();
        let cond = Condition { magnitude: 5.5, hypo_x: 12.0, hypo_y: 6.0 };
        let point = simulate_point_source(&cond, &cfg).unwrap();
        let spec = EventSpec {
            condition: cond,
            rupture: Some(RuptureSpec { end: [12.0, 6.0], speed: 0.4, segments: 1 }),
        };
        let rup = simulate_finite_rupture(&spec, &cfg).unwrap();
        assert_eq!(rup.data.data(), point.data.data());

        // Two co-located half-amplitude segments also match exactly.
        let spec2 = EventSpec {
            condition: cond,
            rupture: Some(RuptureSpec { end: [12.0, 6.0], speed: 0.4, segments: 2 }),
        };
        let rup2 = simulate_finite_rupture(&spec2, &cfg).unwrap();
        assert!(rup2.data.rel_l2(&point.data).unwrap() < 1e-12);
    }

    #[test]
    fn rupture_directivity_amplifies_forward_receivers() {
        let cfg = homogeneous_cfg();
        let cond = Condition { magnitude: 6.0, hypo_x: 10.0, hypo_y: 8.0 };
        let spec = EventSpec {
            condition: cond,
            rupture: Some(RuptureSpec { end: [16.0, 8.0], speed: 0.4, segments: 8 }),
        };
        let field = simulate_finite_rupture(&spec, &cfg).unwrap();
        // Receivers symmetric about the rupture midpoint (13, 8).
        let pgv = |ix: usize| -> f64 {
            trace(&field, ix, 8).iter().fold(0.0f64, |m, v| m.max(v.abs()))
        };
        let forward = pgv(23);
        let backward = pgv(3);
        assert!(
            forward > backward,
            "directivity missing: forward {forward} vs backward {backward}"
        );
    }

    #[test]
    fn sources_outside_domain_or_bad_cfl_are_rejected() {
        let cfg = SimConfig::default();
        let bad = Condition { magnitude: 5.0, hypo_x: 40.0, hypo_y: 8.0 };
        assert!(matches!(simulate_point_source(&bad, &cfg), Err(Error::Domain(_))));

        let mut fast = SimConfig::default();
        fast.medium.c_bg = 5.0;
        let cond = Condition { magnitude: 5.0, hypo_x: 10.0, hypo_y: 8.0 };
        assert!(matches!(simulate_point_source(&cond, &fast), Err(Error::Config(_))));
    }

    #[test]
    fn repeated_simulation_is_deterministic() {
        let cfg = SimConfig::default();
        let cond = Condition { magnitude: 5.0, hypo_x: 14.5, hypo_y: 9.5 };
        let a = simulate_point_source(&cond, &cfg).unwrap();
        let b = simulate_point_source(&cond, &cfg).unwrap();
        assert_eq!(a.data.data(), b.data.data());
    }

    #[test]
    fn pgv_grows_with_magnitude() {
        let cfg = SimConfig::default();
        let at = |m: f64| {
            let cond = Condition { magnitude: m, hypo_x: 10.0, hypo_y: 8.0 };
            let f = simulate_point_source(&cond, &cfg).unwrap();
            f.data.max_abs()
        };
        let (a, b, c) = (at(4.4), at(6.0), at(7.0));
        assert!(a < b && b < c, "pgv not monotone: {a} {b} {c}");
    }

    #[test]
    fn latin_hypercube_covers_every_stratum() {
        let mut rng = CounterRng::new(7);
        let pts = latin_hypercube(4, &[[0.0, 1.0]], &mut rng).unwrap();
        let mut seen = [false; 4];
        for p in &pts {
            let q = (p[0] * 4.0).floor() as usize;
            seen[q.min(3)] = true;
        }
        assert!(seen.iter().all(|s| *s), "quartile missing: {pts:?}");

        // Stratum completeness per dimension for a bigger design.
        let mut rng = CounterRng::new(8);
        let pts = latin_hypercube(16, &[[0.0, 1.0], [-2.0, 2.0], [5.0, 6.0]], &mut rng).unwrap();
        for (d, r) in [[0.0, 1.0], [-2.0, 2.0], [5.0, 6.0]].iter().enumerate() {
            let mut seen = vec![false; 16];
            for p in &pts {
                let u = (p[d] - r[0]) / (r[1] - r[0]);
                seen[((u * 16.0).floor() as usize).min(15)] = true;
            }
            assert!(seen.iter().all(|s| *s), "dimension {d} not stratum-complete");
        }
    }

    #[test]
    fn latin_hypercube_is_deterministic_and_validates() {
        let a = latin_hypercube(6, &[[0.0, 3.0], [1.0, 2.0]], &mut CounterRng::new(9)).unwrap();
        let b = latin_hypercube(6, &[[0.0, 3.0], [1.0, 2.0]], &mut CounterRng::new(9)).unwrap();
        assert_eq!(a, b);
        assert!(latin_hypercube(0, &[[0.0, 1.0]], &mut CounterRng::new(1)).is_err());
        assert!(latin_hypercube(3, &[[1.0, 1.0]], &mut CounterRng::new(1)).is_err());
    }

    #[test]
    fn preprocess_normalizes_and_round_trips() {
        let mut rng = CounterRng::new(10);
        let raw = Tensor::randn(&[1, 4, 4, 6], 0.01, &mut rng);
        let field = WaveField::new(raw, 1.0, 1.0, 1.25, vec![ChannelRole::Physical]).unwrap();
        let prep = preprocess(&field).unwrap();
        assert_eq!(prep.channels(), 2);
        assert_eq!(prep.roles[1], ChannelRole::Norm);

        // Unit standard deviation afterwards.
        let p = 96;
        let vals = &prep.data.data()[..p];
        let mean = vals.iter().sum::<f64>() / p as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
        assert!((var.sqrt() - 1.0).abs() < 1e-12);

        // Norm channel holds log10(sigma), near -2 for sigma ~ 0.01.
        let nc = prep.data.data()[p];
        assert!((nc + 2.0).abs() < 0.2);
        for v in &prep.data.data()[p..] {
            assert_eq!(*v, nc);
        }

        let back = to_physical(&prep).unwrap();
        assert_eq!(back.channels(), 1);
        assert!(back.data.rel_l2(&field.data).unwrap() < 1e-12);

        // Double preprocessing is refused, as is a silent zero field.
        assert!(preprocess(&prep).is_err());
        let zero =
            WaveField::new(Tensor::zeros(&[1, 2, 2, 2]), 1.0, 1.0, 1.0, vec![ChannelRole::Physical])
                .unwrap();
        assert!(preprocess(&zero).is_err());
    }

    #[test]
    fn zero_amplitude_source_gives_zero_field() {
        // Amplitude formula cannot reach zero, so drive it with an empty
        // injection list through the rupture path instead.
        let cfg = SimConfig::default();
        let field = run_simulation(&cfg, &[]).unwrap();
        assert_eq!(field.data.max_abs(), 0.0);
    }

    #[test]
    fn butterworth_attenuates_above_cutoff() {
        // Feed two sinusoids through the cascade; the one at 2.5x the corner
        // must come out far smaller than the one at 0.4x.
        let fs = 3.2;
        let fc = 0.1875;
        let n = 4096;
        let amp_out = |f: f64| -> f64 {
            let mut x: Vec<f64> =
                (0..n).map(|k| (2.0 * PI * f * k as f64 / fs).sin()).collect();
            butterworth6_in_place(&mut x, fc, fs).unwrap();
            x[n / 2..].iter().fold(0.0f64, |m, v| m.max(v.abs()))
        };
        let low = amp_out(0.4 * fc);
        let high = amp_out(2.5 * fc);
        assert!(low > 0.9, "passband droop: {low}");
        assert!(high < 0.01, "stopband leak: {high}");
        assert!(butterworth6_in_place(&mut [0.0; 4], 2.0, fs).is_err());
    }
}
