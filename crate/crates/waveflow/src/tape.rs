//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every operation records its output value (full forward activations, no
//! checkpointing) plus a closure computing parent cotangents from the output
//! cotangent. Nodes are appended in execution order, so parents always have
//! smaller ids and the reverse sweep is a plain reverse id scan.
//!
//! Complex cotangents use the convention grad_z = dL/d(Re z) + i dL/d(Im z),
//! under which the vector-Jacobian product of a complex-linear map A is A^H
//! applied to the cotangent. The FFT gradient is therefore the adjoint DFT:
//! N * ifft for the forward transform, fft / N for the inverse.

use crate::error::{Error, Result};
use crate::fft;
use crate::rng::CounterRng;
use crate::tensor::Tensor;

pub type NodeId = usize;

struct Node {
    value: Tensor,
    parents: Vec<NodeId>,
    grad_fn: Option<GradFn>,
    trainable: bool,
}

/// Arguments: output cotangent, parent values, output value.
/// Returns one cotangent per parent, in parent order.
type GradFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Cotangents produced by `Tape::backward`, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a node; zero-filled for trainable leaves that did not
    /// participate in the loss.
    pub fn wrt(&self, tape: &Tape, id: NodeId) -> Tensor {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => {
                let v = &tape.nodes[id].value;
                if v.is_real() {
                    Tensor::zeros(v.shape())
                } else {
                    Tensor::zeros_complex(v.shape())
                }
            }
        }
    }
}

fn grid_len(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<NodeId>,
        grad_fn: Option<GradFn>,
        trainable: bool,
    ) -> NodeId {
        let id = self.nodes.len();
        // Acyclicity by construction: inputs must already be recorded.
        assert!(parents.iter().all(|p| *p < id), "tape parents must precede the node");
        self.nodes.push(Node { value, parents, grad_fn, trainable });
        id
    }

    /// Leaf holding a parameter (gradient requested).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, vec![], None, true)
    }

    /// Leaf holding data (no gradient requested).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, vec![], None, false)
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
            false,
        ))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.scale(-1.0)])),
            false,
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, p, _| {
                vec![g.mul(p[1]).unwrap(), g.mul(p[0]).unwrap()]
            })),
            false,
        ))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).scale(k);
        self.push(v, vec![a], Some(Box::new(move |g, _, _| vec![g.scale(k)])), false)
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let av = self.value(a);
        if !av.is_real() {
            return Err(Error::Shape("add_scalar expects a real tensor".into()));
        }
        let v = av.map(|x| x + k);
        Ok(self.push(v, vec![a], Some(Box::new(|g, _, _| vec![g.clone()])), false))
    }

    /// Elementwise x^p for strictly positive x (used for 1/sqrt in norms).
    pub fn powf_const(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        let av = self.value(a);
        if !av.is_real() {
            return Err(Error::Shape("powf_const expects a real tensor".into()));
        }
        if av.data().iter().any(|x| *x <= 0.0) {
            return Err(Error::Domain("powf_const requires positive entries".into()));
        }
        let v = av.map(|x| x.powf(p));
        Ok(self.push(
            v,
            vec![a],
            Some(Box::new(move |g, p_vals, _| {
                let deriv = p_vals[0].map(|x| p * x.powf(p - 1.0));
                vec![g.mul(&deriv).unwrap()]
            })),
            false,
        ))
    }

    /// GELU with the tanh approximation; derivative is analytic.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A3: f64 = 0.044715;
        let av = self.value(a);
        if !av.is_real() {
            return Err(Error::Shape("gelu expects a real tensor".into()));
        }
        let v = av.map(|x| {
            let u = C * (x + A3 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        Ok(self.push(
            v,
            vec![a],
            Some(Box::new(|g, p, _| {
                let deriv = p[0].map(|x| {
                    let u = C * (x + A3 * x * x * x);
                    let t = u.tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A3 * x * x)
                });
                vec![g.mul(&deriv).unwrap()]
            })),
            false,
        ))
    }

    // ── Channel algebra ─────────────────────────────────────────────────

    /// Pointwise linear map over the channel axis: x [Cin, grid...] with
    /// w [Cin, Cout] gives [Cout, grid...].
    pub fn channel_mix(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if !xv.is_real() || !wv.is_real() || wv.shape().len() != 2 || xv.shape().is_empty() {
            return Err(Error::Shape("channel_mix expects real x [Cin, ...], w [Cin, Cout]".into()));
        }
        let (cin, cout) = (wv.shape()[0], wv.shape()[1]);
        if xv.shape()[0] != cin {
            return Err(Error::Shape(format!(
                "channel_mix: x has {} channels, w expects {cin}",
                xv.shape()[0]
            )));
        }
        let p = grid_len(xv.shape());
        let mut out_shape = xv.shape().to_vec();
        out_shape[0] = cout;
        let mut out = Tensor::zeros(&out_shape);
        {
            let (xd, wd, od) = (xv.data(), wv.data(), out.data_mut());
            for i in 0..cin {
                for o in 0..cout {
                    let wio = wd[i * cout + o];
                    let src = &xd[i * p..(i + 1) * p];
                    let dst = &mut od[o * p..(o + 1) * p];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wio * s;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            vec![x, w],
            Some(Box::new(move |g, pv, _| {
                let (xd, wd, gd) = (pv[0].data(), pv[1].data(), g.data());
                let mut gx = Tensor::zeros(pv[0].shape());
                let mut gw = Tensor::zeros(pv[1].shape());
                {
                    let gxd = gx.data_mut();
                    for i in 0..cin {
                        for o in 0..cout {
                            let wio = wd[i * cout + o];
                            let gsl = &gd[o * p..(o + 1) * p];
                            let dst = &mut gxd[i * p..(i + 1) * p];
                            for (d, s) in dst.iter_mut().zip(gsl) {
                                *d += wio * s;
                            }
                        }
                    }
                }
                {
                    let gwd = gw.data_mut();
                    for i in 0..cin {
                        for o in 0..cout {
                            let xsl = &xd[i * p..(i + 1) * p];
                            let gsl = &gd[o * p..(o + 1) * p];
                            gwd[i * cout + o] = xsl.iter().zip(gsl).map(|(a, b)| a * b).sum();
                        }
                    }
                }
                vec![gx, gw]
            })),
            false,
        ))
    }

    /// Row vector times matrix: v [F] with w [F, W] gives [W].
    pub fn vec_mat(&mut self, v: NodeId, w: NodeId) -> Result<NodeId> {
        let (vv, wv) = (self.value(v), self.value(w));
        if vv.shape().len() != 1 || wv.shape().len() != 2 || vv.shape()[0] != wv.shape()[0] {
            return Err(Error::Shape(format!(
                "vec_mat: v {:?} vs w {:?}",
                vv.shape(),
                wv.shape()
            )));
        }
        let (f, width) = (wv.shape()[0], wv.shape()[1]);
        let mut out = Tensor::zeros(&[width]);
        for j in 0..f {
            let vj = vv.data()[j];
            for k in 0..width {
                out.data_mut()[k] += vj * wv.data()[j * width + k];
            }
        }
        Ok(self.push(
            out,
            vec![v, w],
            Some(Box::new(move |g, pv, _| {
                let mut gv = Tensor::zeros(&[f]);
                let mut gw = Tensor::zeros(&[f, width]);
                for j in 0..f {
                    let mut acc = 0.0;
                    for k in 0..width {
                        acc += pv[1].data()[j * width + k] * g.data()[k];
                        gw.data_mut()[j * width + k] = pv[0].data()[j] * g.data()[k];
                    }
                    gv.data_mut()[j] = acc;
                }
                vec![gv, gw]
            })),
            false,
        ))
    }

    /// Broadcast a per-channel vector [C] over a grid: result [C, grid...].
    pub fn broadcast_channel(&mut self, v: NodeId, grid: &[usize]) -> Result<NodeId> {
        let vv = self.value(v);
        if vv.shape().len() != 1 || !vv.is_real() {
            return Err(Error::Shape("broadcast_channel expects a real vector".into()));
        }
        let c = vv.shape()[0];
        let p: usize = grid.iter().product();
        let mut shape = vec![c];
        shape.extend_from_slice(grid);
        let mut out = Tensor::zeros(&shape);
        for ch in 0..c {
            let val = vv.data()[ch];
            out.data_mut()[ch * p..(ch + 1) * p].fill(val);
        }
        Ok(self.push(
            out,
            vec![v],
            Some(Box::new(move |g, _, _| {
                let mut gv = Tensor::zeros(&[c]);
                for ch in 0..c {
                    gv.data_mut()[ch] = g.data()[ch * p..(ch + 1) * p].iter().sum();
                }
                vec![gv]
            })),
            false,
        ))
    }

    /// Mean over the grid for each channel: [C, grid...] -> [C].
    pub fn per_channel_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if !xv.is_real() || xv.shape().len() < 2 {
            return Err(Error::Shape("per_channel_mean expects real [C, grid...]".into()));
        }
        let c = xv.shape()[0];
        let p = grid_len(xv.shape());
        let mut out = Tensor::zeros(&[c]);
        for ch in 0..c {
            out.data_mut()[ch] = xv.data()[ch * p..(ch + 1) * p].iter().sum::<f64>() / p as f64;
        }
        let in_shape = xv.shape().to_vec();
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(&in_shape);
                for ch in 0..c {
                    let gc = g.data()[ch] / p as f64;
                    gx.data_mut()[ch * p..(ch + 1) * p].fill(gc);
                }
                vec![gx]
            })),
            false,
        ))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if !xv.is_real() {
            return Err(Error::Shape("mean_all expects a real tensor".into()));
        }
        let n = xv.numel();
        let v = Tensor::scalar(xv.mean());
        let shape = xv.shape().to_vec();
        Ok(self.push(
            v,
            vec![x],
            Some(Box::new(move |g, _, _| {
                vec![Tensor::filled(&shape, g.data()[0] / n as f64)]
            })),
            false,
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if !xv.is_real() {
            return Err(Error::Shape("sum_all expects a real tensor".into()));
        }
        let v = Tensor::scalar(xv.sum());
        let shape = xv.shape().to_vec();
        Ok(self.push(
            v,
            vec![x],
            Some(Box::new(move |g, _, _| vec![Tensor::filled(&shape, g.data()[0])])),
            false,
        ))
    }

    pub fn channel_slice(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.shape()[0];
        if lo >= hi || hi > c {
            return Err(Error::Shape(format!("channel_slice {lo}..{hi} of {c}")));
        }
        if !xv.is_real() {
            return Err(Error::Shape("channel_slice expects a real tensor".into()));
        }
        let p = grid_len(xv.shape());
        let mut shape = xv.shape().to_vec();
        shape[0] = hi - lo;
        let data = xv.data()[lo * p..hi * p].to_vec();
        let out = Tensor::from_vec(&shape, data)?;
        let in_shape = xv.shape().to_vec();
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(&in_shape);
                gx.data_mut()[lo * p..hi * p].copy_from_slice(g.data());
                vec![gx]
            })),
            false,
        ))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape()[1..] != bv.shape()[1..] || !av.is_real() || !bv.is_real() {
            return Err(Error::Shape(format!(
                "concat_channels: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (ca, cb) = (av.shape()[0], bv.shape()[0]);
        let p = grid_len(av.shape());
        let mut shape = av.shape().to_vec();
        shape[0] = ca + cb;
        let mut data = Vec::with_capacity((ca + cb) * p);
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let out = Tensor::from_vec(&shape, data)?;
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g, _, _| {
                let ga = Tensor::from_vec(&sa, g.data()[..ca * p].to_vec()).unwrap();
                let gb = Tensor::from_vec(&sb, g.data()[ca * p..].to_vec()).unwrap();
                vec![ga, gb]
            })),
            false,
        ))
    }

    // ── Complex / spectral ──────────────────────────────────────────────

    pub fn to_complex(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if !xv.is_real() {
            return Err(Error::Shape("to_complex expects a real tensor".into()));
        }
        let v = xv.to_complex();
        Ok(self.push(
            v,
            vec![x],
            Some(Box::new(|g, _, _| vec![g.real_part()])),
            false,
        ))
    }

    pub fn real_part(&mut self, z: NodeId) -> Result<NodeId> {
        let zv = self.value(z);
        if zv.is_real() {
            return Err(Error::Shape("real_part expects a complex tensor".into()));
        }
        let v = zv.real_part();
        Ok(self.push(
            v,
            vec![z],
            Some(Box::new(|g, _, _| vec![g.to_complex()])),
            false,
        ))
    }

    pub fn fft(&mut self, z: NodeId, axes: &[usize]) -> Result<NodeId> {
        let zv = self.value(z);
        if zv.is_real() {
            return Err(Error::Shape("tape fft expects a complex tensor".into()));
        }
        let v = fft::fft(zv, axes)?;
        let axes_v = axes.to_vec();
        let n: usize = axes.iter().map(|&a| zv.shape()[a]).product();
        Ok(self.push(
            v,
            vec![z],
            Some(Box::new(move |g, _, _| {
                // Adjoint of the unnormalized forward DFT is N * ifft.
                vec![fft::ifft(g, &axes_v).unwrap().scale(n as f64)]
            })),
            false,
        ))
    }

    pub fn ifft(&mut self, z: NodeId, axes: &[usize]) -> Result<NodeId> {
        let zv = self.value(z);
        if zv.is_real() {
            return Err(Error::Shape("tape ifft expects a complex tensor".into()));
        }
        let v = fft::ifft(zv, axes)?;
        let axes_v = axes.to_vec();
        let n: usize = axes.iter().map(|&a| zv.shape()[a]).product();
        Ok(self.push(
            v,
            vec![z],
            Some(Box::new(move |g, _, _| {
                vec![fft::fft(g, &axes_v).unwrap().scale(1.0 / n as f64)]
            })),
            false,
        ))
    }

    /// Gather the lowest `modes` signed frequencies per grid axis from a
    /// complex spectrum [C, n1, n2, n3] into [C, 2m1-1, 2m2-1, 2m3-1].
    /// Slots whose frequency is not representable at the source extent are
    /// zero (retained modes are clipped to available bins).
    pub fn mode_truncate(&mut self, z: NodeId, modes: [usize; 3]) -> Result<NodeId> {
        let zv = self.value(z);
        check_spectral_input(zv, &modes)?;
        let maps = axis_slot_maps(&zv.shape()[1..4], &modes);
        let out = gather_modes(zv, &maps);
        let in_shape = zv.shape().to_vec();
        Ok(self.push(
            out,
            vec![z],
            Some(Box::new(move |g, _, _| vec![scatter_modes(g, &maps, &in_shape)])),
            false,
        ))
    }

    /// Inverse placement of `mode_truncate`: scatter retained slots back into
    /// a full spectrum of grid extents `full`, zero elsewhere.
    pub fn mode_pad(&mut self, z: NodeId, full: [usize; 3]) -> Result<NodeId> {
        let zv = self.value(z);
        if zv.is_real() || zv.shape().len() != 4 {
            return Err(Error::Shape("mode_pad expects complex [C, b1, b2, b3]".into()));
        }
        let modes = bins_to_modes(&zv.shape()[1..4])?;
        let maps = axis_slot_maps(&full, &modes);
        let mut out_shape = vec![zv.shape()[0]];
        out_shape.extend_from_slice(&full);
        let out = scatter_modes(zv, &maps, &out_shape);
        Ok(self.push(
            out,
            vec![z],
            Some(Box::new(move |g, _, _| vec![gather_modes(g, &maps)])),
            false,
        ))
    }

    /// Per-mode linear channel map: x [Cin, bins...] with complex weights
    /// w [Cin, Cout, bins...] gives [Cout, bins...].
    pub fn mode_contract(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.is_real() || wv.is_real() {
            return Err(Error::Shape("mode_contract expects complex tensors".into()));
        }
        if wv.shape().len() != xv.shape().len() + 1
            || wv.shape()[0] != xv.shape()[0]
            || wv.shape()[2..] != xv.shape()[1..]
        {
            return Err(Error::Shape(format!(
                "mode_contract: x {:?} vs w {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (cin, cout) = (wv.shape()[0], wv.shape()[1]);
        let p = grid_len(xv.shape());
        let mut out_shape = xv.shape().to_vec();
        out_shape[0] = cout;
        let mut out = Tensor::zeros_complex(&out_shape);
        {
            let (xd, wd, od) = (xv.data(), wv.data(), out.data_mut());
            for i in 0..cin {
                for o in 0..cout {
                    let woff = 2 * (i * cout + o) * p;
                    let xoff = 2 * i * p;
                    let ooff = 2 * o * p;
                    for k in 0..p {
                        let (xr, xi) = (xd[xoff + 2 * k], xd[xoff + 2 * k + 1]);
                        let (wr, wi) = (wd[woff + 2 * k], wd[woff + 2 * k + 1]);
                        od[ooff + 2 * k] += xr * wr - xi * wi;
                        od[ooff + 2 * k + 1] += xr * wi + xi * wr;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            vec![x, w],
            Some(Box::new(move |g, pv, _| {
                // grad_x = conj(w) . g summed over out channels;
                // grad_w = conj(x) . g per mode.
                let (xd, wd, gd) = (pv[0].data(), pv[1].data(), g.data());
                let mut gx = Tensor::zeros_complex(pv[0].shape());
                let mut gw = Tensor::zeros_complex(pv[1].shape());
                {
                    let gxd = gx.data_mut();
                    for i in 0..cin {
                        for o in 0..cout {
                            let woff = 2 * (i * cout + o) * p;
                            let goff = 2 * o * p;
                            let xoff = 2 * i * p;
                            for k in 0..p {
                                let (wr, wi) = (wd[woff + 2 * k], -wd[woff + 2 * k + 1]);
                                let (gr, gi) = (gd[goff + 2 * k], gd[goff + 2 * k + 1]);
                                gxd[xoff + 2 * k] += wr * gr - wi * gi;
                                gxd[xoff + 2 * k + 1] += wr * gi + wi * gr;
                            }
                        }
                    }
                }
                {
                    let gwd = gw.data_mut();
                    for i in 0..cin {
                        for o in 0..cout {
                            let woff = 2 * (i * cout + o) * p;
                            let goff = 2 * o * p;
                            let xoff = 2 * i * p;
                            for k in 0..p {
                                let (xr, xi) = (xd[xoff + 2 * k], -xd[xoff + 2 * k + 1]);
                                let (gr, gi) = (gd[goff + 2 * k], gd[goff + 2 * k + 1]);
                                gwd[woff + 2 * k] = xr * gr - xi * gi;
                                gwd[woff + 2 * k + 1] = xr * gi + xi * gr;
                            }
                        }
                    }
                }
                vec![gx, gw]
            })),
            false,
        ))
    }

    /// Resize one grid axis of a complex spectrum so that the inverse
    /// transform is the band-limited interpolant (or exact subsample) of the
    /// original signal. Coefficients scale by new/old; Nyquist bins split on
    /// upsampling and merge on downsampling.
    pub fn resize_spectrum_axis(&mut self, z: NodeId, axis: usize, new_n: usize) -> Result<NodeId> {
        let zv = self.value(z);
        if zv.is_real() || axis == 0 || axis >= zv.shape().len() {
            return Err(Error::Shape("resize_spectrum_axis expects complex grid axis".into()));
        }
        if new_n == 0 {
            return Err(Error::Shape("resize_spectrum_axis to zero length".into()));
        }
        let n = zv.shape()[axis];
        let map = resize_map(n, new_n);
        let v = apply_resize(zv, axis, new_n, &map, false);
        let old_n = n;
        Ok(self.push(
            v,
            vec![z],
            Some(Box::new(move |g, _, _| {
                vec![apply_resize(g, axis, old_n, &map, true)]
            })),
            false,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Produces cotangents for every
    /// participating node; trainable leaves off the loss path read as zero.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !(lv.is_real() && lv.numel() == 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(1.0));
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let node = &self.nodes[id];
            let Some(grad_fn) = &node.grad_fn else { continue };
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|p| &self.nodes[*p].value).collect();
            let parent_grads = grad_fn(&g, &parent_vals, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[*p] {
                    Some(acc) => *acc = acc.add(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id].trainable
    }
}

// ── Mode bookkeeping ────────────────────────────────────────────────────

/// Signed frequency of slot j on a truncated axis of 2m-1 slots, ordered
/// [0, 1, ..., m-1, -(m-1), ..., -1] to match FFT bin layout.
fn slot_freq(j: usize, m: usize) -> isize {
    if j < m {
        j as isize
    } else {
        j as isize - (2 * m as isize - 1)
    }
}

/// Source bin for signed frequency s at extent n, or None when that
/// frequency is not representable. Positive frequencies may claim the
/// Nyquist bin of an even extent; negative ones never do (single owner).
fn freq_bin(s: isize, n: usize) -> Option<usize> {
    if s >= 0 {
        if s as usize <= n / 2 {
            Some(s as usize)
        } else {
            None
        }
    } else if (-s) as usize <= (n - 1) / 2 {
        Some((n as isize + s) as usize)
    } else {
        None
    }
}

fn check_spectral_input(z: &Tensor, modes: &[usize; 3]) -> Result<()> {
    if z.is_real() || z.shape().len() != 4 {
        return Err(Error::Shape("expected complex [C, n1, n2, n3]".into()));
    }
    if modes.iter().any(|m| *m == 0) {
        return Err(Error::Shape("mode counts must be at least 1".into()));
    }
    Ok(())
}

fn bins_to_modes(bins: &[usize]) -> Result<[usize; 3]> {
    let mut modes = [0usize; 3];
    for (i, b) in bins.iter().enumerate() {
        if b % 2 == 0 {
            return Err(Error::Shape(format!("truncated axis extent {b} is not 2m-1")));
        }
        modes[i] = (b + 1) / 2;
    }
    Ok(modes)
}

/// Per axis: slot -> Option<source bin>.
fn axis_slot_maps(extents: &[usize], modes: &[usize; 3]) -> [Vec<Option<usize>>; 3] {
    let mut maps: [Vec<Option<usize>>; 3] = [vec![], vec![], vec![]];
    for ax in 0..3 {
        let m = modes[ax];
        let n = extents[ax];
        maps[ax] = (0..2 * m - 1).map(|j| freq_bin(slot_freq(j, m), n)).collect();
    }
    maps
}

fn gather_modes(z: &Tensor, maps: &[Vec<Option<usize>>; 3]) -> Tensor {
    let c = z.shape()[0];
    let n = &z.shape()[1..4];
    let b: Vec<usize> = maps.iter().map(|m| m.len()).collect();
    let mut out = Tensor::zeros_complex(&[c, b[0], b[1], b[2]]);
    let (zd, od) = (z.data(), out.data_mut());
    let (s1, s2) = (n[1] * n[2], n[2]);
    let (t1, t2) = (b[1] * b[2], b[2]);
    for ch in 0..c {
        let zoff = ch * n[0] * s1;
        let ooff = ch * b[0] * t1;
        for (j0, src0) in maps[0].iter().enumerate() {
            let Some(k0) = src0 else { continue };
            for (j1, src1) in maps[1].iter().enumerate() {
                let Some(k1) = src1 else { continue };
                for (j2, src2) in maps[2].iter().enumerate() {
                    let Some(k2) = src2 else { continue };
                    let si = 2 * (zoff + k0 * s1 + k1 * s2 + k2);
                    let di = 2 * (ooff + j0 * t1 + j1 * t2 + j2);
                    od[di] = zd[si];
                    od[di + 1] = zd[si + 1];
                }
            }
        }
    }
    out
}

fn scatter_modes(z: &Tensor, maps: &[Vec<Option<usize>>; 3], out_shape: &[usize]) -> Tensor {
    let c = out_shape[0];
    let n = &out_shape[1..4];
    let b: Vec<usize> = maps.iter().map(|m| m.len()).collect();
    let mut out = Tensor::zeros_complex(out_shape);
    let (zd, od) = (z.data(), out.data_mut());
    let (s1, s2) = (n[1] * n[2], n[2]);
    let (t1, t2) = (b[1] * b[2], b[2]);
    for ch in 0..c {
        let ooff = ch * n[0] * s1;
        let zoff = ch * b[0] * t1;
        for (j0, src0) in maps[0].iter().enumerate() {
            let Some(k0) = src0 else { continue };
            for (j1, src1) in maps[1].iter().enumerate() {
                let Some(k1) = src1 else { continue };
                for (j2, src2) in maps[2].iter().enumerate() {
                    let Some(k2) = src2 else { continue };
                    let di = 2 * (ooff + k0 * s1 + k1 * s2 + k2);
                    let si = 2 * (zoff + j0 * t1 + j1 * t2 + j2);
                    od[di] = zd[si];
                    od[di + 1] = zd[si + 1];
                }
            }
        }
    }
    out
}

/// (src bin, dst bin, real coefficient) triples realizing an exact
/// band-limited resize of one spectral axis from n to m bins.
pub(crate) fn resize_map(n: usize, m: usize) -> Vec<(usize, usize, f64)> {
    let scale = m as f64 / n as f64;
    let mut map = Vec::new();
    if m >= n {
        for k in 0..n {
            let s: isize = if k <= n / 2 { k as isize } else { k as isize - n as isize };
            if n % 2 == 0 && k == n / 2 {
                // Source Nyquist energy splits evenly across +/- bins.
                let up = freq_bin(s, m).unwrap();
                let down = freq_bin(-s, m).unwrap();
                if up == down {
                    map.push((k, up, scale));
                } else {
                    map.push((k, up, 0.5 * scale));
                    map.push((k, down, 0.5 * scale));
                }
            } else {
                map.push((k, freq_bin(s, m).unwrap(), scale));
            }
        }
    } else {
        for k2 in 0..m {
            let s: isize = if k2 <= m / 2 { k2 as isize } else { k2 as isize - m as isize };
            if m % 2 == 0 && k2 == m / 2 {
                // Target Nyquist collects both source bins that alias onto it.
                map.push((freq_bin(s, n).unwrap(), k2, scale));
                map.push((freq_bin(-s, n).unwrap(), k2, scale));
            } else {
                map.push((freq_bin(s, n).unwrap(), k2, scale));
            }
        }
    }
    map
}

pub(crate) fn apply_resize(
    z: &Tensor,
    axis: usize,
    new_n: usize,
    map: &[(usize, usize, f64)],
    transpose: bool,
) -> Tensor {
    let mut out_shape = z.shape().to_vec();
    out_shape[axis] = new_n;
    let mut out = Tensor::zeros_complex(&out_shape);
    let inner: usize = z.shape()[axis + 1..].iter().product();
    let outer: usize = z.shape()[..axis].iter().product();
    let n_in = z.shape()[axis];
    let (zd, od) = (z.data(), out.data_mut());
    for o in 0..outer {
        for i in 0..inner {
            let in_base = o * n_in * inner + i;
            let out_base = o * new_n * inner + i;
            for &(src, dst, c) in map {
                let (s, d) = if transpose { (dst, src) } else { (src, dst) };
                let si = 2 * (in_base + s * inner);
                let di = 2 * (out_base + d * inner);
                od[di] += c * zd[si];
                od[di + 1] += c * zd[si + 1];
            }
        }
    }
    out
}

// ── Gradient checking ───────────────────────────────────────────────────

pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Validate tape gradients against central finite differences.
///
/// `build` must register the given leaves (in order) on the fresh tape it
/// receives and return a scalar loss node. Finite differences perturb the
/// flat storage directly, which for complex leaves checks dL/dRe and dL/dIm
/// separately. Relative error uses max(|ad|, |fd|, 1e-6) as denominator.
pub fn check_gradients(
    build: &dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    inits: &[Tensor],
    step: f64,
    max_coords_per_leaf: usize,
    rng: &mut CounterRng,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inits.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = ids.iter().map(|id| grads.wrt(&tape, *id)).collect();

    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|p| t.param(p.clone())).collect();
        let loss = build(&mut t, &ids)?;
        Ok(t.value(loss).data()[0])
    };

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut work: Vec<Tensor> = inits.to_vec();
    for (li, init) in inits.iter().enumerate() {
        let len = init.data().len();
        let coords: Vec<usize> = if len <= max_coords_per_leaf {
            (0..len).collect()
        } else {
            (0..max_coords_per_leaf).map(|_| rng.below(len)).collect()
        };
        for ci in coords {
            let orig = work[li].data()[ci];
            work[li].data_mut()[ci] = orig + step;
            let up = eval(&work)?;
            work[li].data_mut()[ci] = orig - step;
            let down = eval(&work)?;
            work[li].data_mut()[ci] = orig;
            let fd = (up - down) / (2.0 * step);
            let ad = analytic[li].data()[ci];
            let rel = (fd - ad).abs() / ad.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, coords_checked: checked })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randt(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut CounterRng::new(seed))
    }

    #[test]
    fn add_mul_chain_matches_hand_gradient() {
        // loss = mean((a + b) * a); d/da = (2a + b)/n, d/db = a/n.
        let mut tape = Tape::new();
        let a = tape.param(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let b = tape.param(Tensor::from_vec(&[2], vec![3.0, -1.0]).unwrap());
        let s = tape.add(a, b).unwrap();
        let p = tape.mul(s, a).unwrap();
        let loss = tape.mean_all(p).unwrap();
        let g = tape.backward(loss).unwrap();
        let ga = g.wrt(&tape, a);
        let gb = g.wrt(&tape, b);
        assert!((ga.data()[0] - 2.5).abs() < 1e-12); // (2*1+3)/2
        assert!((ga.data()[1] - 1.5).abs() < 1e-12); // (2*2-1)/2
        assert!((gb.data()[0] - 0.5).abs() < 1e-12);
        assert!((gb.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unused_trainable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(2.0));
        let unused = tape.param(Tensor::scalar(5.0));
        let loss = tape.mean_all(a).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&tape, unused).data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let a = tape.param(randt(&[3], 1));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn elementwise_primitives_pass_fd_checks() {
        let mut rng = CounterRng::new(42);
        // Each builder combines the primitive with reductions so the loss is
        // scalar and every input participates.
        let builders: Vec<(&str, Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>)> = vec![
            ("add", Box::new(|t: &mut Tape, ids: &[NodeId]| {
                let s = t.add(ids[0], ids[1])?;
                let m = t.mul(s, s)?;
                t.mean_all(m)
            })),
            ("sub_scale", Box::new(|t, ids| {
                let s = t.sub(ids[0], ids[1])?;
                let s = t.scale(s, 1.7);
                let m = t.mul(s, s)?;
                t.sum_all(m)
            })),
            ("gelu", Box::new(|t, ids| {
                let y = t.gelu(ids[0])?;
                let m = t.mul(y, y)?;
                t.mean_all(m)
            })),
            ("powf", Box::new(|t, ids| {
                let sq = t.mul(ids[0], ids[0])?;
                let sq = t.add_scalar(sq, 1.0)?;
                let y = t.powf_const(sq, -0.5)?;
                t.mean_all(y)
            })),
        ];
        for (name, b) in &builders {
            let inits = vec![randt(&[2, 3], 7), randt(&[2, 3], 8)];
            let inits = if *name == "gelu" || *name == "powf" { inits[..1].to_vec() } else { inits };
            let rep = check_gradients(b.as_ref(), &inits, 1e-5, 64, &mut rng).unwrap();
            assert!(rep.max_rel_err < 1e-6, "{name}: {}", rep.max_rel_err);
        }
    }

    #[test]
    fn channel_ops_pass_fd_checks() {
        let mut rng = CounterRng::new(43);
        let build = |t: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
            let y = t.channel_mix(ids[0], ids[1])?;
            let bias = t.broadcast_channel(ids[2], &[4, 5])?;
            let y = t.add(y, bias)?;
            let m = t.per_channel_mean(y)?;
            let mm = t.mul(m, m)?;
            t.sum_all(mm)
        };
        let inits = vec![randt(&[3, 4, 5], 1), randt(&[3, 2], 2), randt(&[2], 3)];
        let rep = check_gradients(&build, &inits, 1e-5, 200, &mut rng).unwrap();
        assert!(rep.max_rel_err < 1e-6, "{}", rep.max_rel_err);
    }

    #[test]
    fn slice_concat_vec_mat_pass_fd_checks() {
        let mut rng = CounterRng::new(44);
        let build = |t: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
            let top = t.channel_slice(ids[0], 0, 1)?;
            let rest = t.channel_slice(ids[0], 1, 3)?;
            let cat = t.concat_channels(rest, top)?;
            let v = t.vec_mat(ids[1], ids[2])?;
            let y = t.mul(cat, cat)?;
            let m = t.per_channel_mean(y)?;
            let m = t.add(m, v)?;
            let mm = t.mul(m, m)?;
            t.mean_all(mm)
        };
        let inits = vec![randt(&[3, 4], 1), randt(&[5], 2), randt(&[5, 3], 3)];
        let rep = check_gradients(&build, &inits, 1e-5, 200, &mut rng).unwrap();
        assert!(rep.max_rel_err < 1e-6, "{}", rep.max_rel_err);
    }

    #[test]
    fn fft_chain_passes_fd_check() {
        // Real -> complex -> fft -> ifft -> real -> loss exercises the
        // adjoint-DFT gradients through both transforms, on a Bluestein size.
        let mut rng = CounterRng::new(45);
        let build = |t: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
            let z = t.to_complex(ids[0])?;
            let f = t.fft(z, &[1, 2, 3])?;
            let b = t.ifft(f, &[3])?;
            let r = t.real_part(b)?;
            let m = t.mul(r, r)?;
            t.mean_all(m)
        };
        let inits = vec![randt(&[1, 2, 3, 6], 5)];
        let rep = check_gradients(&build, &inits, 1e-5, 72, &mut rng).unwrap();
        assert!(rep.max_rel_err < 1e-6, "{}", rep.max_rel_err);
    }

    #[test]
    fn fft_gradient_of_spectrum_power_is_adjoint() {
        // Exact round-trip: loss = sum Re(ifft(fft(x)))^2 = sum x^2, so the
        // gradient through both adjoints must be exactly 2x.
        let mut tape = Tape::new();
        let x = tape.param(randt(&[1, 1, 1, 8], 6));
        let z = tape.to_complex(x).unwrap();
        let f = tape.fft(z, &[3]).unwrap();
        let back = tape.ifft(f, &[3]).unwrap();
        let r = tape.real_part(back).unwrap();
        let m = tape.mul(r, r).unwrap();
        let loss = tape.sum_all(m).unwrap();
        let g = tape.backward(loss).unwrap();
        let gx = g.wrt(&tape, x);
        let want = tape.value(x).scale(2.0);
        assert!(gx.rel_l2(&want).unwrap() < 1e-12);
    }

    #[test]
    fn mode_truncate_pad_round_trip_keeps_low_modes() {
        let mut tape = Tape::new();
        let x = tape.param(randt(&[2, 4, 4, 8], 7));
        let z = tape.to_complex(x).unwrap();
        let f = tape.fft(z, &[1, 2, 3]).unwrap();
        let tr = tape.mode_truncate(f, [2, 2, 3]).unwrap();
        assert_eq!(tape.value(tr).shape(), &[2, 3, 3, 5]);
        let padded = tape.mode_pad(tr, [4, 4, 8]).unwrap();
        assert_eq!(tape.value(padded).shape(), &[2, 4, 4, 8]);
        // Retained bins agree with the original spectrum.
        let orig = tape.value(f).clone();
        let pad = tape.value(padded).clone();
        // Bin (0,0,1) is retained: same value.
        let strides = [4 * 4 * 8, 4 * 8, 8, 1];
        let at = |t: &Tensor, c: usize, i: usize, j: usize, k: usize| {
            let idx = c * strides[0] + i * strides[1] + j * strides[2] + k * strides[3];
            (t.data()[2 * idx], t.data()[2 * idx + 1])
        };
        assert_eq!(at(&orig, 0, 0, 0, 1), at(&pad, 0, 0, 0, 1));
        assert_eq!(at(&orig, 1, 3, 1, 7), at(&pad, 1, 3, 1, 7)); // freq (-1,1,-1)
        // Bin with axis-0 frequency 2 (= Nyquist of 4) is outside modes=2.
        assert_eq!(at(&pad, 0, 2, 0, 0), (0.0, 0.0));
    }

    #[test]
    fn spectral_pipeline_passes_fd_check() {
        let mut rng = CounterRng::new(46);
        let build = |t: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
            let z = t.to_complex(ids[0])?;
            let f = t.fft(z, &[1, 2, 3])?;
            let tr = t.mode_truncate(f, [2, 2, 2])?;
            let y = t.mode_contract(tr, ids[1])?;
            let padded = t.mode_pad(y, [4, 4, 6])?;
            let b = t.ifft(padded, &[1, 2, 3])?;
            let r = t.real_part(b)?;
            let m = t.mul(r, r)?;
            t.mean_all(m)
        };
        let mut rng2 = CounterRng::new(9);
        let inits = vec![
            randt(&[2, 4, 4, 6], 8),
            Tensor::randn_complex(&[2, 3, 3, 3, 3], 0.5, &mut rng2),
        ];
        let rep = check_gradients(&build, &inits, 1e-5, 120, &mut rng).unwrap();
        assert!(rep.max_rel_err < 1e-6, "{}", rep.max_rel_err);
    }

    #[test]
    fn resize_axis_passes_fd_check_both_directions() {
        let mut rng = CounterRng::new(47);
        let build_up = |t: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
            let z = t.to_complex(ids[0])?;
            let f = t.fft(z, &[3])?;
            let r = t.resize_spectrum_axis(f, 3, 8)?;
            let b = t.ifft(r, &[3])?;
            let re = t.real_part(b)?;
            let m = t.mul(re, re)?;
            t.mean_all(m)
        };
        let build_down = |t: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
            let z = t.to_complex(ids[0])?;
            let f = t.fft(z, &[3])?;
            let r = t.resize_spectrum_axis(f, 3, 3)?;
            let b = t.ifft(r, &[3])?;
            let re = t.real_part(b)?;
            let m = t.mul(re, re)?;
            t.mean_all(m)
        };
        let inits = vec![randt(&[1, 1, 1, 6], 3)];
        let up = check_gradients(&build_up, &inits, 1e-5, 12, &mut rng).unwrap();
        let down = check_gradients(&build_down, &inits, 1e-5, 12, &mut rng).unwrap();
        assert!(up.max_rel_err < 1e-6, "up {}", up.max_rel_err);
        assert!(down.max_rel_err < 1e-6, "down {}", down.max_rel_err);
    }

    #[test]
    fn resize_upsample_is_band_limited_interpolation() {
        // cos at the Nyquist of a 4-point grid interpolates exactly onto 8.
        let x = Tensor::from_fn(&[1, 1, 1, 4], |idx| if idx[3] % 2 == 0 { 1.0 } else { -1.0 });
        let mut tape = Tape::new();
        let xi = tape.constant(x);
        let z = tape.to_complex(xi).unwrap();
        let f = tape.fft(z, &[3]).unwrap();
        let r = tape.resize_spectrum_axis(f, 3, 8).unwrap();
        let b = tape.ifft(r, &[3]).unwrap();
        let re = tape.real_part(b).unwrap();
        let got = tape.value(re);
        for j in 0..8 {
            let want = (std::f64::consts::PI * j as f64 / 2.0).cos();
            assert!((got.data()[j] - want).abs() < 1e-12, "j={j}");
        }
    }

    #[test]
    fn resize_down_then_sample_matches_subsampling() {
        // Band-limited signal: resize 8 -> 4 equals taking every other sample.
        let x = Tensor::from_fn(&[1, 1, 1, 8], |idx| {
            let t = idx[3] as f64 / 8.0;
            1.0 + (2.0 * std::f64::consts::PI * t).sin() - 0.3 * (4.0 * std::f64::consts::PI * t).cos()
        });
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let z = tape.to_complex(xi).unwrap();
        let f = tape.fft(z, &[3]).unwrap();
        let r = tape.resize_spectrum_axis(f, 3, 4).unwrap();
        let b = tape.ifft(r, &[3]).unwrap();
        let re = tape.real_part(b).unwrap();
        let got = tape.value(re);
        for j in 0..4 {
            assert!((got.data()[j] - x.data()[2 * j]).abs() < 1e-12, "j={j}");
        }
    }
}
