use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update; `t` is the 1-based step index.
pub fn adam_step(store: &mut ParamStore, grads: &ParamGrads, cfg: &AdamConfig, t: u64) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::Shape {
            op: "adam_step",
            expected: vec![store.len()],
            got: vec![grads.len()],
        });
    }
    if t == 0 {
        return Err(Error::invalid("adam step index starts at 1"));
    }
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let g = grads.get(id);
        let (value, m, v) = store.moments_mut(id);
        if g.shape() != value.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                expected: value.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        for (((p, mi), vi), gi) in value
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
