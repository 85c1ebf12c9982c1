//! The three learned operators: an autoencoder between coarse fields and a
//! fixed-shape latent, a super-resolution operator from coarse to fine
//! grids, and a conditional flow network on latents.
//!
//! All of them are Fourier-operator stacks, so a trained parameter set can
//! be evaluated on any grid; the latent alone has a fixed shape. Fields
//! follow the convention that a normalization channel, when present, is the
//! last channel and constant over the grid; decoders re-impose that
//! constancy by replacing the channel with its grid mean.

use crate::error::{Error, Result};
use crate::flowmatch::{self, CleanPredictor};
use crate::rng::CounterRng;
use crate::specops::{
    instance_norm, Bindings, ChannelMix, FnoBlock, Fwd, ParamId, ParamStore,
};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{BufRead, Read, Write};
use std::path::Path;

// ── Conditions ──────────────────────────────────────────────────────────

/// Event parameters the generator is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub magnitude: f64,
    pub hypo_x: f64,
    pub hypo_y: f64,
}

/// Declared data ranges used to normalize conditions to [-1, 1].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConditionRanges {
    pub magnitude: [f64; 2],
    pub hypo_x: [f64; 2],
    pub hypo_y: [f64; 2],
}

impl ConditionRanges {
    pub fn normalize(&self, c: &Condition) -> Result<[f64; 3]> {
        let one = |v: f64, r: [f64; 2], name: &str| -> Result<f64> {
            if r[1] <= r[0] {
                return Err(Error::Config(format!("degenerate {name} range {r:?}")));
            }
            if v < r[0] || v > r[1] {
                return Err(Error::Domain(format!("{name} {v} outside declared range {r:?}")));
            }
            Ok(2.0 * (v - r[0]) / (r[1] - r[0]) - 1.0)
        };
        Ok([
            one(c.magnitude, self.magnitude, "magnitude")?,
            one(c.hypo_x, self.hypo_x, "hypo_x")?,
            one(c.hypo_y, self.hypo_y, "hypo_y")?,
        ])
    }
}

/// Sinusoidal time features at octave frequencies, then the normalized
/// condition, then a constant slot so the embedding matrix carries a bias.
pub const EMBED_FEATURES: usize = 12;

fn embed_features(t: f64, cond: &[f64; 3]) -> [f64; EMBED_FEATURES] {
    let mut f = [0.0; EMBED_FEATURES];
    for j in 0..4 {
        let w = PI * (1 << j) as f64;
        f[2 * j] = (w * t).sin();
        f[2 * j + 1] = (w * t).cos();
    }
    f[8] = cond[0];
    f[9] = cond[1];
    f[10] = cond[2];
    f[11] = 1.0;
    f
}

// ── Autoencoder ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AenoConfig {
    pub in_channels: usize,
    pub width: usize,
    pub latent_channels: usize,
    pub latent_grid: [usize; 3],
    pub field_modes: [usize; 3],
    pub latent_modes: [usize; 3],
    pub blocks_outer: usize,
    pub blocks_inner: usize,
    /// Last channel is a constant normalization channel; decoding replaces
    /// it with its grid mean so the constancy is exact.
    pub norm_channel: bool,
}

impl Default for AenoConfig {
    fn default() -> Self {
        AenoConfig {
            in_channels: 2,
            width: 12,
            latent_channels: 1,
            latent_grid: [8, 4, 4],
            field_modes: [5, 3, 4],
            latent_modes: [3, 2, 2],
            blocks_outer: 2,
            blocks_inner: 1,
            norm_channel: true,
        }
    }
}

pub struct Aeno {
    pub cfg: AenoConfig,
    enc_lift: ChannelMix,
    enc_outer: Vec<FnoBlock>,
    enc_inner: Vec<FnoBlock>,
    enc_proj: ChannelMix,
    dec_lift: ChannelMix,
    dec_inner: Vec<FnoBlock>,
    dec_outer: Vec<FnoBlock>,
    dec_proj: ChannelMix,
}

impl Aeno {
    pub fn new(cfg: AenoConfig, store: &mut ParamStore, rng: &mut CounterRng) -> Aeno {
        let w = cfg.width;
        let mk_blocks = |store: &mut ParamStore, rng: &mut CounterRng, prefix: &str, n, modes| {
            (0..n)
                .map(|i| FnoBlock::new(store, &format!("{prefix}{i}"), w, w, modes, rng))
                .collect::<Vec<_>>()
        };
        Aeno {
            enc_lift: ChannelMix::new(store, "aeno.enc.lift", cfg.in_channels, w, true, rng),
            enc_outer: mk_blocks(store, rng, "aeno.enc.outer", cfg.blocks_outer, cfg.field_modes),
            enc_inner: mk_blocks(store, rng, "aeno.enc.inner", cfg.blocks_inner, cfg.latent_modes),
            // Zero init: fresh models emit a zero latent for any input.
            enc_proj: ChannelMix::zeroed(store, "aeno.enc.proj", w, cfg.latent_channels, true),
            dec_lift: ChannelMix::new(store, "aeno.dec.lift", cfg.latent_channels, w, true, rng),
            dec_inner: mk_blocks(store, rng, "aeno.dec.inner", cfg.blocks_inner, cfg.latent_modes),
            dec_outer: mk_blocks(store, rng, "aeno.dec.outer", cfg.blocks_outer, cfg.field_modes),
            dec_proj: ChannelMix::new(store, "aeno.dec.proj", w, cfg.in_channels, true, rng),
            cfg,
        }
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        let g = self.cfg.latent_grid;
        [self.cfg.latent_channels, g[0], g[1], g[2]]
    }

    /// Field on any grid to a latent of the configured shape.
    pub fn encode(&self, f: &mut Fwd, x: NodeId) -> Result<NodeId> {
        let shape = f.tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[0] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "encoder expects [{}, x, y, t], got {shape:?}",
                self.cfg.in_channels
            )));
        }
        // No stream normalization here: the event's log-amplitude enters as
        // a constant channel, and standardizing hidden channels would strip
        // exactly that constant before it reaches the latent.
        let mut h = self.enc_lift.forward(f, x)?;
        for b in &self.enc_outer {
            h = b.forward(f, h)?;
        }
        h = crate::specops::resample(f.tape, h, self.cfg.latent_grid)?;
        for b in &self.enc_inner {
            h = b.forward(f, h)?;
        }
        self.enc_proj.forward(f, h)
    }

    /// Latent back to a field on `field_grid`.
    pub fn decode(&self, f: &mut Fwd, z: NodeId, field_grid: [usize; 3]) -> Result<NodeId> {
        let shape = f.tape.value(z).shape().to_vec();
        if shape != self.latent_shape() {
            return Err(Error::Shape(format!(
                "decoder expects latent {:?}, got {shape:?}",
                self.latent_shape()
            )));
        }
        let mut h = self.dec_lift.forward(f, z)?;
        for b in &self.dec_inner {
            h = b.forward(f, h)?;
        }
        h = crate::specops::resample(f.tape, h, field_grid)?;
        for b in &self.dec_outer {
            h = b.forward(f, h)?;
        }
        let out = self.dec_proj.forward(f, h)?;
        if self.cfg.norm_channel {
            constify_last_channel(f.tape, out)
        } else {
            Ok(out)
        }
    }
}

/// Replace the last channel with its grid mean (broadcast), leaving the
/// other channels untouched.
fn constify_last_channel(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let c = shape[0];
    if c < 2 {
        return Err(Error::Shape("norm-channel handling needs at least 2 channels".into()));
    }
    let grid = shape[1..].to_vec();
    let phys = tape.channel_slice(x, 0, c - 1)?;
    let norm = tape.channel_slice(x, c - 1, c)?;
    let mean = tape.per_channel_mean(norm)?;
    let flat = tape.broadcast_channel(mean, &grid)?;
    tape.concat_channels(phys, flat)
}

/// Reconstruction loss: mean over batch of per-sample MSE.
pub fn aeno_loss(f: &mut Fwd, model: &Aeno, batch: &[Tensor]) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::Shape("reconstruction loss needs a non-empty batch".into()));
    }
    let mut total: Option<NodeId> = None;
    for u in batch {
        let grid = [u.shape()[1], u.shape()[2], u.shape()[3]];
        let x = f.tape.constant(u.clone());
        let z = model.encode(f, x)?;
        let rec = model.decode(f, z, grid)?;
        let term = crate::specops::mse(f.tape, rec, x)?;
        total = Some(match total {
            Some(acc) => f.tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(f.tape.scale(total.unwrap(), 1.0 / batch.len() as f64))
}

// ── Super-resolution operator ───────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnoConfig {
    pub channels: usize,
    pub width: usize,
    pub modes: [usize; 3],
    pub blocks: usize,
    pub out_grid: [usize; 3],
    pub norm_channel: bool,
}

impl Default for SnoConfig {
    fn default() -> Self {
        SnoConfig {
            channels: 2,
            width: 8,
            modes: [5, 3, 4],
            blocks: 2,
            out_grid: [32, 16, 24],
            norm_channel: true,
        }
    }
}

pub struct Sno {
    pub cfg: SnoConfig,
    lift: ChannelMix,
    blocks: Vec<FnoBlock>,
    proj: ChannelMix,
}

impl Sno {
    pub fn new(cfg: SnoConfig, store: &mut ParamStore, rng: &mut CounterRng) -> Sno {
        let w = cfg.width;
        Sno {
            lift: ChannelMix::new(store, "sno.lift", cfg.channels, w, true, rng),
            blocks: (0..cfg.blocks)
                .map(|i| FnoBlock::new(store, &format!("sno.block{i}"), w, w, cfg.modes, rng))
                .collect(),
            // Zero init: a fresh model is exactly band-limited interpolation.
            proj: ChannelMix::zeroed(store, "sno.proj", w, cfg.channels, true),
            cfg,
        }
    }

    /// Coarse field to `out_grid`: band-limited interpolation plus a learned
    /// correction. Any grid at least as fine as the input is valid
    /// (zero-shot super-resolution).
    pub fn apply(&self, f: &mut Fwd, u_f: NodeId, out_grid: [usize; 3]) -> Result<NodeId> {
        let shape = f.tape.value(u_f).shape().to_vec();
        if shape.len() != 4 || shape[0] != self.cfg.channels {
            return Err(Error::Shape(format!(
                "super-resolution expects [{}, x, y, t], got {shape:?}",
                self.cfg.channels
            )));
        }
        for (ax, (n, m)) in shape[1..].iter().zip(&out_grid).enumerate() {
            if m < n {
                return Err(Error::Domain(format!(
                    "output grid axis {ax} ({m}) coarser than input ({n})"
                )));
            }
        }
        let base = crate::specops::resample(f.tape, u_f, out_grid)?;
        let mut h = self.lift.forward(f, base)?;
        for b in &self.blocks {
            let n = instance_norm(f.tape, h)?;
            h = b.forward(f, n)?;
        }
        let corr = self.proj.forward(f, h)?;
        let out = f.tape.add(base, corr)?;
        if self.cfg.norm_channel {
            constify_last_channel(f.tape, out)
        } else {
            Ok(out)
        }
    }
}

/// Super-resolution loss over (coarse, fine) pairs.
pub fn sno_loss(f: &mut Fwd, model: &Sno, batch: &[(Tensor, Tensor)]) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::Shape("super-resolution loss needs a non-empty batch".into()));
    }
    let mut total: Option<NodeId> = None;
    for (coarse, fine) in batch {
        let grid = [fine.shape()[1], fine.shape()[2], fine.shape()[3]];
        let x = f.tape.constant(coarse.clone());
        let y = f.tape.constant(fine.clone());
        let pred = model.apply(f, x, grid)?;
        let term = crate::specops::mse(f.tape, pred, y)?;
        total = Some(match total {
            Some(acc) => f.tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(f.tape.scale(total.unwrap(), 1.0 / batch.len() as f64))
}

// ── Conditional flow network ────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowNetConfig {
    pub latent_channels: usize,
    pub width: usize,
    pub modes: [usize; 3],
    pub blocks: usize,
    pub ranges: ConditionRanges,
}

impl Default for FlowNetConfig {
    fn default() -> Self {
        FlowNetConfig {
            latent_channels: 1,
            width: 16,
            modes: [3, 2, 2],
            blocks: 3,
            ranges: ConditionRanges {
                magnitude: [4.4, 7.0],
                hypo_x: [0.0, 1.0],
                hypo_y: [0.0, 1.0],
            },
        }
    }
}

pub struct FlowNet {
    pub cfg: FlowNetConfig,
    lift: ChannelMix,
    coords: ChannelMix,
    embed: ParamId,
    blocks: Vec<FnoBlock>,
    proj: ChannelMix,
}

/// Normalized coordinate channels for a latent grid: one channel per axis,
/// each a linear ramp over [-1, 1] along its axis. Spectral convolutions and
/// pointwise maps commute with translations, so without an absolute position
/// reference the flow could never tie generated structure to the conditioned
/// hypocenter; these channels are that reference.
pub fn coord_channels(grid: &[usize]) -> Tensor {
    let mut shape = vec![grid.len()];
    shape.extend_from_slice(grid);
    Tensor::from_fn(&shape, |idx| {
        let axis = idx[0];
        let n = grid[axis];
        if n <= 1 {
            0.0
        } else {
            2.0 * idx[1 + axis] as f64 / (n - 1) as f64 - 1.0
        }
    })
}

impl FlowNet {
    pub fn new(cfg: FlowNetConfig, store: &mut ParamStore, rng: &mut CounterRng) -> FlowNet {
        let w = cfg.width;
        let std = (2.0 / (EMBED_FEATURES + w) as f64).sqrt();
        FlowNet {
            lift: ChannelMix::new(store, "flow.lift", cfg.latent_channels, w, true, rng),
            coords: ChannelMix::new(store, "flow.coords", 3, w, false, rng),
            embed: store.add("flow.embed.w", Tensor::randn(&[EMBED_FEATURES, w], std, rng)),
            blocks: (0..cfg.blocks)
                .map(|i| FnoBlock::new(store, &format!("flow.block{i}"), w, w, cfg.modes, rng))
                .collect(),
            proj: ChannelMix::zeroed(store, "flow.proj", w, cfg.latent_channels, true),
            cfg,
        }
    }

    /// Clean-endpoint prediction z1_hat = F(z_t, t, c).
    pub fn predict(&self, f: &mut Fwd, z_t: NodeId, t: f64, cond: &Condition) -> Result<NodeId> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("flow time {t} outside [0, 1]")));
        }
        let shape = f.tape.value(z_t).shape().to_vec();
        if shape.len() != 4 || shape[0] != self.cfg.latent_channels {
            return Err(Error::Shape(format!("flow net expects a latent, got {shape:?}")));
        }
        let grid = shape[1..].to_vec();
        let feats = embed_features(t, &self.cfg.ranges.normalize(cond)?);
        let fv = f.tape.constant(Tensor::from_vec(&[EMBED_FEATURES], feats.to_vec())?);
        let emb_w = f.bind.node(f.tape, f.store, self.embed);
        let emb = f.tape.vec_mat(fv, emb_w)?;
        let bias = f.tape.broadcast_channel(emb, &grid)?;
        let lifted = self.lift.forward(f, z_t)?;
        let pos = f.tape.constant(coord_channels(&grid));
        let pos = self.coords.forward(f, pos)?;
        let mut h = f.tape.add(lifted, bias)?;
        h = f.tape.add(h, pos)?;
        for b in &self.blocks {
            h = b.forward(f, h)?;
        }
        self.proj.forward(f, h)
    }
}

/// Flow-matching training loss: per element draw z0 ~ N(0, I) and
/// t ~ U[0, 1], form the path state, predict the clean endpoint, and score
/// the implied velocity. Draws come from `rng` in batch order.
pub fn fm_training_loss(
    f: &mut Fwd,
    net: &FlowNet,
    batch: &[(Tensor, Condition)],
    t_clip: f64,
    rng: &mut CounterRng,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::Shape("flow-matching loss needs a non-empty batch".into()));
    }
    let mut preds = Vec::with_capacity(batch.len());
    let mut zts = Vec::with_capacity(batch.len());
    let mut z0s = Vec::with_capacity(batch.len());
    let mut z1s = Vec::with_capacity(batch.len());
    let mut ts = Vec::with_capacity(batch.len());
    for (z1, cond) in batch {
        let z0 = Tensor::randn(z1.shape(), 1.0, rng);
        let t = rng.uniform();
        let zt = flowmatch::sample_path(&z0, z1, t)?;
        let zt_node = f.tape.constant(zt.clone());
        preds.push(net.predict(f, zt_node, t, cond)?);
        zts.push(zt);
        z0s.push(z0);
        z1s.push(z1.clone());
        ts.push(t);
    }
    flowmatch::fm_loss(f.tape, &preds, &zts, &z0s, &z1s, &ts, t_clip)
}

/// Inference-time adapter: a flow net with bound parameters and a fixed
/// condition acts as a clean predictor for the Euler sampler.
pub struct FlowSampler<'a> {
    pub net: &'a FlowNet,
    pub store: &'a ParamStore,
    pub cond: Condition,
}

impl CleanPredictor for FlowSampler<'_> {
    fn predict(&self, z_t: &Tensor, t: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut bind = Bindings::new(self.store);
        let z = tape.constant(z_t.clone());
        let out = {
            let mut f = Fwd::new(&mut tape, self.store, &mut bind);
            self.net.predict(&mut f, z, t, &self.cond)?
        };
        Ok(tape.value(out).clone())
    }
}

// ── Checkpoints ─────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    config: serde_json::Value,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    complex: bool,
}

/// One file: a JSON manifest line (embedded model config plus the parameter
/// table in store order), then each tensor's payload. Complex tensors are
/// stored as real pairs on a trailing axis of 2.
pub fn save_checkpoint<C: Serialize>(path: &Path, config: &C, store: &ParamStore) -> Result<()> {
    let manifest = CheckpointManifest {
        config: serde_json::to_value(config)?,
        params: store
            .names()
            .iter()
            .zip(store.tensors())
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
                complex: !t.is_real(),
            })
            .collect(),
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    for t in store.tensors() {
        let storable = if t.is_real() { t.clone() } else { t.as_real_pairs()? };
        storable.write_to(&mut w)?;
    }
    Ok(())
}

fn read_manifest<R: BufRead>(r: &mut R) -> Result<CheckpointManifest> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    Ok(serde_json::from_str(&line)?)
}

/// The embedded config of a checkpoint, for construction before loading.
pub fn load_checkpoint_config<C: for<'de> Deserialize<'de>>(path: &Path) -> Result<C> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let manifest = read_manifest(&mut r)?;
    Ok(serde_json::from_value(manifest.config)?)
}

/// Restore parameters into a store built with the same architecture.
pub fn load_checkpoint_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let manifest = read_manifest(&mut r)?;
    if manifest.params.len() != store.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, model expects {}",
            manifest.params.len(),
            store.len()
        )));
    }
    for entry in &manifest.params {
        let raw = Tensor::read_from(&mut r)?;
        let t = if entry.complex { Tensor::from_real_pairs(&raw)? } else { raw };
        store.load_named(&entry.name, t)?;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Config("trailing bytes after checkpoint payload".into()));
    }
    Ok(())
}
