//! Building blocks for Fourier neural operators on [C, x, y, t] fields.
//!
//! Layers own no tensors; parameters live in a `ParamStore` and layers hold
//! ids into it. Each forward pass binds parameters onto a fresh tape through
//! `Bindings`, which also maps gradients back into store order so the
//! optimizer and checkpoint writer see one stable flat list.

use crate::error::{Error, Result};
use crate::fft;
use crate::rng::CounterRng;
use crate::tape::{self, Gradients, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    /// Replace tensor contents by name, for checkpoint restore. Shapes and
    /// dtypes must match the constructed layout.
    pub fn load_named(&mut self, name: &str, t: Tensor) -> Result<()> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let cur = &self.tensors[idx];
        if cur.shape() != t.shape() || cur.dtype() != t.dtype() {
            return Err(Error::Shape(format!(
                "parameter {name}: stored {:?} vs incoming {:?}",
                cur.shape(),
                t.shape()
            )));
        }
        self.tensors[idx] = t;
        Ok(())
    }
}

/// Per-tape cache of parameter bindings. Binding the same ParamId twice on
/// one tape reuses the node, so shared weights accumulate gradients.
pub struct Bindings {
    node_of: Vec<Option<NodeId>>,
}

impl Bindings {
    pub fn new(store: &ParamStore) -> Bindings {
        Bindings { node_of: vec![None; store.len()] }
    }

    /// Bindings over leaves already registered on a tape in store order,
    /// used by gradient checkers that manage their own leaf registration.
    pub fn from_nodes(ids: &[NodeId]) -> Bindings {
        Bindings { node_of: ids.iter().map(|i| Some(*i)).collect() }
    }

    pub fn node(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(n) = self.node_of[id.0] {
            return n;
        }
        let n = tape.param(store.get(id).clone());
        self.node_of[id.0] = Some(n);
        n
    }

    /// Gradients in store order; parameters never bound on this tape get
    /// zeros of the right shape.
    pub fn grads(&self, tape: &Tape, store: &ParamStore, g: &Gradients) -> Vec<Tensor> {
        (0..store.len())
            .map(|i| match self.node_of[i] {
                Some(n) => g.wrt(tape, n),
                None => {
                    let t = &store.tensors()[i];
                    if t.is_real() {
                        Tensor::zeros(t.shape())
                    } else {
                        Tensor::zeros_complex(t.shape())
                    }
                }
            })
            .collect()
    }
}

/// Forward-pass context: the tape being recorded plus parameter plumbing.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub bind: &'a mut Bindings,
}

impl<'a> Fwd<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, bind: &'a mut Bindings) -> Fwd<'a> {
        Fwd { tape, store, bind }
    }

    /// Tape node for a stored parameter, recording it on first use.
    pub fn p(&mut self, id: ParamId) -> NodeId {
        self.bind.node(self.tape, self.store, id)
    }
}

// ── Layers ──────────────────────────────────────────────────────────────

/// Pointwise channel map with optional bias.
pub struct ChannelMix {
    w: ParamId,
    b: Option<ParamId>,
}

impl ChannelMix {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        rng: &mut CounterRng,
    ) -> ChannelMix {
        let std = (2.0 / (cin + cout) as f64).sqrt();
        let w = store.add(&format!("{name}.w"), Tensor::randn(&[cin, cout], std, rng));
        let b = bias.then(|| store.add(&format!("{name}.b"), Tensor::zeros(&[cout])));
        ChannelMix { w, b }
    }

    /// All-zero weights, for final projections that must start as identity
    /// contributions to a residual path.
    pub fn zeroed(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
    ) -> ChannelMix {
        let w = store.add(&format!("{name}.w"), Tensor::zeros(&[cin, cout]));
        let b = bias.then(|| store.add(&format!("{name}.b"), Tensor::zeros(&[cout])));
        ChannelMix { w, b }
    }

    pub fn forward(&self, f: &mut Fwd, x: NodeId) -> Result<NodeId> {
        let w = f.p(self.w);
        let y = f.tape.channel_mix(x, w)?;
        match self.b {
            Some(bid) => {
                let b = f.p(bid);
                let grid = f.tape.value(y).shape()[1..].to_vec();
                let bb = f.tape.broadcast_channel(b, &grid)?;
                f.tape.add(y, bb)
            }
            None => Ok(y),
        }
    }
}

/// Per-mode complex linear map in Fourier space. The weight holds 2m-1 slots
/// per axis keyed by signed frequency, so one weight tensor serves any grid
/// resolution: frequencies a grid cannot represent read as zero and receive
/// zero gradient.
pub struct SpectralConv {
    w: ParamId,
    modes: [usize; 3],
}

impl SpectralConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        modes: [usize; 3],
        rng: &mut CounterRng,
    ) -> SpectralConv {
        let slots: usize = modes.iter().map(|m| 2 * m - 1).product();
        let std = 1.0 / (cin * slots) as f64;
        let shape = [cin, cout, 2 * modes[0] - 1, 2 * modes[1] - 1, 2 * modes[2] - 1];
        let w = store.add(&format!("{name}.w"), Tensor::randn_complex(&shape, std, rng));
        SpectralConv { w, modes }
    }

    pub fn forward(&self, f: &mut Fwd, x: NodeId) -> Result<NodeId> {
        let shape = f.tape.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("spectral conv expects [C,x,y,t], got {shape:?}")));
        }
        let grid = [shape[1], shape[2], shape[3]];
        let w = f.p(self.w);
        let z = f.tape.to_complex(x)?;
        let sp = f.tape.fft(z, &[1, 2, 3])?;
        let tr = f.tape.mode_truncate(sp, self.modes)?;
        let y = f.tape.mode_contract(tr, w)?;
        let padded = f.tape.mode_pad(y, grid)?;
        let back = f.tape.ifft(padded, &[1, 2, 3])?;
        f.tape.real_part(back)
    }
}

/// Fourier operator block: gelu(spectral(x) + pointwise(x)), with an
/// identity skip when input and output widths agree.
pub struct FnoBlock {
    spec: SpectralConv,
    mix: ChannelMix,
    residual: bool,
}

impl FnoBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        modes: [usize; 3],
        rng: &mut CounterRng,
    ) -> FnoBlock {
        FnoBlock {
            spec: SpectralConv::new(store, &format!("{name}.spec"), cin, cout, modes, rng),
            mix: ChannelMix::new(store, &format!("{name}.mix"), cin, cout, true, rng),
            residual: cin == cout,
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: NodeId) -> Result<NodeId> {
        let s = self.spec.forward(f, x)?;
        let m = self.mix.forward(f, x)?;
        let sum = f.tape.add(s, m)?;
        let h = f.tape.gelu(sum)?;
        if self.residual {
            f.tape.add(x, h)
        } else {
            Ok(h)
        }
    }
}

// ── Parameter-free composites ───────────────────────────────────────────

/// Per-channel standardization over the grid, epsilon inside the sqrt.
pub fn instance_norm(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    const EPS: f64 = 1e-5;
    let shape = tape.value(x).shape().to_vec();
    if shape.len() < 2 {
        return Err(Error::Shape("instance_norm expects [C, grid...]".into()));
    }
    let grid = shape[1..].to_vec();
    let mu = tape.per_channel_mean(x)?;
    let mub = tape.broadcast_channel(mu, &grid)?;
    let cent = tape.sub(x, mub)?;
    let sq = tape.mul(cent, cent)?;
    let var = tape.per_channel_mean(sq)?;
    let var = tape.add_scalar(var, EPS)?;
    let inv = tape.powf_const(var, -0.5)?;
    let invb = tape.broadcast_channel(inv, &grid)?;
    tape.mul(cent, invb)
}

/// Mean squared error over all entries: mean((a - b)^2).
pub fn mse(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    tape.mean_all(sq)
}

/// Band-limited resampling of a real field [C, x, y, t] onto a new grid,
/// recorded on the tape (differentiable).
pub fn resample(tape: &mut Tape, x: NodeId, new: [usize; 3]) -> Result<NodeId> {
    if tape.value(x).shape().len() != 4 {
        return Err(Error::Shape("resample expects [C, x, y, t]".into()));
    }
    let z = tape.to_complex(x)?;
    let mut sp = tape.fft(z, &[1, 2, 3])?;
    for (ax, n) in new.iter().enumerate() {
        sp = tape.resize_spectrum_axis(sp, ax + 1, *n)?;
    }
    let b = tape.ifft(sp, &[1, 2, 3])?;
    tape.real_part(b)
}

/// Plain-tensor version of `resample` for data preparation paths.
pub fn resample_tensor(x: &Tensor, new: [usize; 3]) -> Result<Tensor> {
    if x.shape().len() != 4 || !x.is_real() {
        return Err(Error::Shape("resample_tensor expects real [C, x, y, t]".into()));
    }
    let mut sp = fft::fft(x, &[1, 2, 3])?;
    for (ax, n) in new.iter().enumerate() {
        if *n == 0 {
            return Err(Error::Shape("resample to zero extent".into()));
        }
        let map = tape::resize_map(sp.shape()[ax + 1], *n);
        sp = tape::apply_resize(&sp, ax + 1, *n, &map, false);
    }
    Ok(fft::ifft(&sp, &[1, 2, 3])?.real_part())
}
