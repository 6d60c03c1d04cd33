use super::{Grads, ParamStore};
use crate::error::{contract, Error, Result};

/// Rescales all gradients jointly so their global L2 norm is at most `max_norm`.
///
/// Returns the applied scale (1 when no clipping happened).
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "clip max norm must be positive, got {max_norm}"
        )));
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient before clipping".into()));
    }
    let norm = grads.global_norm();
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    grads.scale(scale);
    Ok(scale)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Grads,
    v: Grads,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Grads::zeros_like(store),
            v: Grads::zeros_like(store),
        }
    }

    pub fn first_moment(&self) -> &Grads {
        &self.m
    }

    pub fn second_moment(&self) -> &Grads {
        &self.v
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        contract!(
            grads.len() == store.len() && self.m.len() == store.len(),
            "optimizer/parameter count mismatch"
        );
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for id in store.ids() {
            let g = grads.get(id);
            contract!(
                g.shape() == store.get(id).shape(),
                "gradient shape {:?} does not match parameter `{}` {:?}",
                g.shape(),
                store.name(id),
                store.get(id).shape()
            );
            let m = self.m.get_mut(id).data_mut();
            let v = self.v.get_mut(id).data_mut();
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
