//! FFT along named tensor axes: iterative radix-2 for power-of-two lengths,
//! Bluestein's chirp-z algorithm for everything else. Forward transform is
//! unnormalized; the inverse divides by the product of transformed extents.

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Tensor};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

enum Plan {
    /// Bit-reversal permutation plus per-stage twiddles, interleaved (re, im).
    Radix2 { n: usize, perm: Vec<u32>, twiddles: Vec<f64> },
    /// Chirp-z: convolution with a precomputed chirp through a radix-2 FFT
    /// of length m >= 2n-1.
    Bluestein { n: usize, m: usize, chirp: Vec<f64>, chirp_fft: Vec<f64>, inner: Arc<Plan> },
}

fn plan_cache() -> &'static Mutex<HashMap<usize, Arc<Plan>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Plan>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn make_radix2(n: usize) -> Plan {
    debug_assert!(n.is_power_of_two());
    let bits = n.trailing_zeros();
    let perm: Vec<u32> = (0..n as u32).map(|i| i.reverse_bits() >> (32 - bits)).collect();
    // Stage `len` uses len/2 twiddles w_len^j = exp(-2*pi*i*j/len); stages are
    // concatenated in execution order (len = 2, 4, ..., n).
    let mut twiddles = Vec::with_capacity(2 * (n - 1));
    let mut len = 2;
    while len <= n {
        for j in 0..len / 2 {
            let ang = -2.0 * PI * j as f64 / len as f64;
            twiddles.push(ang.cos());
            twiddles.push(ang.sin());
        }
        len *= 2;
    }
    Plan::Radix2 { n, perm, twiddles }
}

fn make_bluestein(n: usize) -> Plan {
    let m = (2 * n - 1).next_power_of_two();
    let inner = get_plan(m);
    // chirp[k] = exp(-i*pi*k^2/n); k^2 is taken mod 2n to avoid precision
    // loss for large k.
    let mut chirp = Vec::with_capacity(2 * n);
    for k in 0..n {
        let sq = (k * k) % (2 * n);
        let ang = -PI * sq as f64 / n as f64;
        chirp.push(ang.cos());
        chirp.push(ang.sin());
    }
    // b holds conj(chirp) arranged circularly; its FFT is reused every call.
    let mut b = vec![0.0; 2 * m];
    for k in 0..n {
        let (re, im) = (chirp[2 * k], -chirp[2 * k + 1]);
        b[2 * k] = re;
        b[2 * k + 1] = im;
        if k > 0 {
            b[2 * (m - k)] = re;
            b[2 * (m - k) + 1] = im;
        }
    }
    fft_in_place(&inner, &mut b);
    Plan::Bluestein { n, m, chirp, chirp_fft: b, inner }
}

fn get_plan(n: usize) -> Arc<Plan> {
    if let Some(p) = plan_cache().lock().unwrap().get(&n) {
        return p.clone();
    }
    // Built outside the lock: Bluestein recursively requires the plan for m.
    let plan = if n.is_power_of_two() { make_radix2(n) } else { make_bluestein(n) };
    let arc = Arc::new(plan);
    plan_cache().lock().unwrap().entry(n).or_insert_with(|| arc.clone());
    arc
}

/// Forward unnormalized DFT of one interleaved complex line.
fn fft_in_place(plan: &Plan, buf: &mut [f64]) {
    match plan {
        Plan::Radix2 { n, perm, twiddles } => {
            let n = *n;
            debug_assert_eq!(buf.len(), 2 * n);
            for i in 0..n {
                let j = perm[i] as usize;
                if i < j {
                    buf.swap(2 * i, 2 * j);
                    buf.swap(2 * i + 1, 2 * j + 1);
                }
            }
            let mut len = 2;
            let mut tw_off = 0;
            while len <= n {
                let half = len / 2;
                let tw = &twiddles[2 * tw_off..2 * (tw_off + half)];
                let mut base = 0;
                while base < n {
                    for j in 0..half {
                        let (wr, wi) = (tw[2 * j], tw[2 * j + 1]);
                        let a = 2 * (base + j);
                        let b = 2 * (base + j + half);
                        let (br, bi) = (buf[b], buf[b + 1]);
                        let tr = br * wr - bi * wi;
                        let ti = br * wi + bi * wr;
                        let (ar, ai) = (buf[a], buf[a + 1]);
                        buf[a] = ar + tr;
                        buf[a + 1] = ai + ti;
                        buf[b] = ar - tr;
                        buf[b + 1] = ai - ti;
                    }
                    base += len;
                }
                tw_off += half;
                len *= 2;
            }
        }
        Plan::Bluestein { n, m, chirp, chirp_fft, inner } => {
            let (n, m) = (*n, *m);
            debug_assert_eq!(buf.len(), 2 * n);
            let mut a = vec![0.0; 2 * m];
            for k in 0..n {
                let (xr, xi) = (buf[2 * k], buf[2 * k + 1]);
                let (cr, ci) = (chirp[2 * k], chirp[2 * k + 1]);
                a[2 * k] = xr * cr - xi * ci;
                a[2 * k + 1] = xr * ci + xi * cr;
            }
            fft_in_place(inner, &mut a);
            for k in 0..m {
                let (ar, ai) = (a[2 * k], a[2 * k + 1]);
                let (br, bi) = (chirp_fft[2 * k], chirp_fft[2 * k + 1]);
                a[2 * k] = ar * br - ai * bi;
                a[2 * k + 1] = ar * bi + ai * br;
            }
            // Unnormalized inverse of the inner FFT via the conjugation trick.
            for k in 0..m {
                a[2 * k + 1] = -a[2 * k + 1];
            }
            fft_in_place(inner, &mut a);
            let inv_m = 1.0 / m as f64;
            for k in 0..n {
                let (cr, ci) = (chirp[2 * k], chirp[2 * k + 1]);
                let (vr, vi) = (a[2 * k] * inv_m, -a[2 * k + 1] * inv_m);
                buf[2 * k] = vr * cr - vi * ci;
                buf[2 * k + 1] = vr * ci + vi * cr;
            }
        }
    }
}

fn check_axes(shape: &[usize], axes: &[usize]) -> Result<()> {
    for (i, &ax) in axes.iter().enumerate() {
        if ax >= shape.len() {
            return Err(Error::Shape(format!(
                "fft axis {ax} out of range for rank {}",
                shape.len()
            )));
        }
        if shape[ax] == 0 {
            return Err(Error::Shape(format!("fft along zero-length axis {ax}")));
        }
        if axes[..i].contains(&ax) {
            return Err(Error::Shape(format!("fft axis {ax} repeated")));
        }
    }
    Ok(())
}

fn transform_axis(t: &mut Tensor, axis: usize, inverse: bool) {
    let shape = t.shape().to_vec();
    let n = shape[axis];
    if n == 1 {
        return; // length-1 DFT is the identity
    }
    let plan = get_plan(n);
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let data = t.data_mut();
    let inv_n = 1.0 / n as f64;
    let mut line = vec![0.0; 2 * n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            if inner == 1 {
                let chunk = &mut data[2 * base..2 * (base + n)];
                if inverse {
                    for p in chunk.chunks_exact_mut(2) {
                        p[1] = -p[1];
                    }
                    fft_in_place(&plan, chunk);
                    for p in chunk.chunks_exact_mut(2) {
                        p[0] *= inv_n;
                        p[1] *= -inv_n;
                    }
                } else {
                    fft_in_place(&plan, chunk);
                }
            } else {
                for j in 0..n {
                    let src = 2 * (base + j * inner);
                    line[2 * j] = data[src];
                    line[2 * j + 1] = if inverse { -data[src + 1] } else { data[src + 1] };
                }
                fft_in_place(&plan, &mut line);
                for j in 0..n {
                    let dst = 2 * (base + j * inner);
                    if inverse {
                        data[dst] = line[2 * j] * inv_n;
                        data[dst + 1] = -line[2 * j + 1] * inv_n;
                    } else {
                        data[dst] = line[2 * j];
                        data[dst + 1] = line[2 * j + 1];
                    }
                }
            }
        }
    }
}

/// Forward DFT along `axes`. Real input is promoted to complex; the result is
/// always complex. Unnormalized.
pub fn fft(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    check_axes(t.shape(), axes)?;
    let mut out = t.to_complex();
    for &ax in axes {
        transform_axis(&mut out, ax, false);
    }
    Ok(out)
}

/// Inverse DFT along `axes`; divides by the product of the transformed
/// extents so `ifft(fft(x)) == x`.
pub fn ifft(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    if t.dtype() != Dtype::Complex {
        return Err(Error::Shape("ifft expects a complex tensor".into()));
    }
    check_axes(t.shape(), axes)?;
    let mut out = t.clone();
    for &ax in axes {
        transform_axis(&mut out, ax, true);
    }
    Ok(out)
}
