//! Rectified flow on latent tensors with a clean-endpoint parameterization.
//!
//! The path is the straight line z_t = (1-t) z0 + t z1 between a standard
//! normal draw and a data latent. The network predicts the clean endpoint
//! z1; its implied velocity (z1_hat - z_t) / max(1-t, t_clip) is regressed
//! onto the constant path velocity z1 - z0. Sampling integrates that
//! velocity field with fixed-step Euler from t = 0.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Floor on the 1-t denominator when converting clean predictions to
    /// velocities; keeps the target bounded near t = 1.
    pub t_clip: f64,
    /// Euler steps used at sampling time.
    pub steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { t_clip: 1e-3, steps: 50 }
    }
}

/// z_t = (1-t) z0 + t z1.
pub fn sample_path(z0: &Tensor, z1: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("path time {t} outside [0, 1]")));
    }
    z0.scale(1.0 - t).add(&z1.scale(t))
}

/// Straight-path velocity, constant along the segment.
pub fn target_velocity(z0: &Tensor, z1: &Tensor) -> Result<Tensor> {
    z1.sub(z0)
}

/// Velocity implied by a clean-endpoint prediction at (z_t, t).
pub fn clean_to_velocity(z1_hat: &Tensor, z_t: &Tensor, t: f64, t_clip: f64) -> Result<Tensor> {
    let denom = (1.0 - t).max(t_clip);
    Ok(z1_hat.sub(z_t)?.scale(1.0 / denom))
}

/// Flow-matching loss on the tape: per sample the squared component sum of
/// (implied velocity - true velocity), averaged over the batch. `preds` are
/// tape nodes holding clean-endpoint predictions; everything else is data.
pub fn fm_loss(
    tape: &mut Tape,
    preds: &[NodeId],
    z_t: &[Tensor],
    z0: &[Tensor],
    z1: &[Tensor],
    ts: &[f64],
    t_clip: f64,
) -> Result<NodeId> {
    let b = preds.len();
    if b == 0 || z_t.len() != b || z0.len() != b || z1.len() != b || ts.len() != b {
        return Err(Error::Shape("fm_loss: batch slices must be equal and non-empty".into()));
    }
    let mut total: Option<NodeId> = None;
    for i in 0..b {
        let denom = (1.0 - ts[i]).max(t_clip);
        let zt_node = tape.constant(z_t[i].clone());
        let diff = tape.sub(preds[i], zt_node)?;
        let v = tape.scale(diff, 1.0 / denom);
        let target = tape.constant(target_velocity(&z0[i], &z1[i])?);
        let err = tape.sub(v, target)?;
        let sq = tape.mul(err, err)?;
        let s = tape.sum_all(sq)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / b as f64))
}

/// A model that maps (z_t, t) to a clean-endpoint estimate. Conditioning is
/// internal to the implementor.
pub trait CleanPredictor {
    fn predict(&self, z_t: &Tensor, t: f64) -> Result<Tensor>;
}

/// Euler integration of the clean-prediction velocity field on the uniform
/// grid t_k = k / steps (left endpoints).
pub fn euler_sample(model: &dyn CleanPredictor, z0: &Tensor, cfg: &FlowConfig) -> Result<Tensor> {
    if cfg.steps == 0 {
        return Err(Error::Config("euler_sample needs at least one step".into()));
    }
    let h = 1.0 / cfg.steps as f64;
    let mut z = z0.clone();
    for k in 0..cfg.steps {
        let t = k as f64 * h;
        let z1_hat = model.predict(&z, t)?;
        let v = clean_to_velocity(&z1_hat, &z, t, cfg.t_clip)?;
        z = z.add(&v.scale(h))?;
        if !z.all_finite() {
            return Err(Error::Numeric(format!("flow state became non-finite at step {k}")));
        }
    }
    Ok(z)
}
