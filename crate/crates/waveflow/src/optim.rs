//! AdamW with decoupled weight decay and a cosine learning-rate schedule.
//!
//! Moment buffers live on the flat storage of each parameter, so real and
//! complex tensors are handled identically (a complex parameter is two real
//! coordinates per entry). Decay multiplies the parameter by (1 - lr*wd)
//! independently of the gradient step.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &[Tensor]) -> AdamW {
        let m = params.iter().map(|p| vec![0.0; p.data().len()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.data().len()]).collect();
        AdamW { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Override the learning rate (scheduler hook).
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    /// One update in place. `params` and `grads` must match the construction
    /// set in count and length.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let b1c = 1.0 - self.cfg.beta1.powf(t);
        let b2c = 1.0 - self.cfg.beta2.powf(t);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.data().len() != m.len() || g.data().len() != m.len() {
                return Err(Error::Shape("parameter/gradient length changed mid-run".into()));
            }
            let decay = 1.0 - self.cfg.lr * self.cfg.weight_decay;
            let gd = g.data();
            let pd = p.data_mut();
            for i in 0..m.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gd[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gd[i] * gd[i];
                let mhat = m[i] / b1c;
                let vhat = v[i] / b2c;
                pd[i] = pd[i] * decay - self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("cosine_lr needs total_steps > 0".into()));
    }
    let frac = (step.min(total_steps) as f64) / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}
