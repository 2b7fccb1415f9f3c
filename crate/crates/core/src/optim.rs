//! AdamW with decoupled weight decay and a linear warmup schedule.
//!
//! For parameter `p` with gradient `g` at step `t`:
//!
//! ```text
//! m ← β1·m + (1-β1)·g
//! v ← β2·v + (1-β2)·g²
//! m̂ = m / (1-β1^t),  v̂ = v / (1-β2^t)
//! p ← p - lr·(m̂ / (√v̂ + eps) + wd·p)
//! ```

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    moments: BTreeMap<usize, Moments>,
}

impl OptimState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self, param_index: usize) -> Option<&Moments> {
        self.moments.get(&param_index)
    }
}

/// One AdamW update of a single tensor. `step` is the 1-based step count
/// after incrementing; `decay` toggles weight decay for this tensor.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    moments: &mut Moments,
    step: u64,
    lr: f64,
    config: &AdamWConfig,
    decay: bool,
) -> Result<()> {
    if grad.len() != param.len() || moments.m.len() != param.len() || moments.v.len() != param.len()
    {
        return Err(Error::Contract(format!(
            "adamw: parameter has {} entries, gradient {}, moments {}/{}",
            param.len(),
            grad.len(),
            moments.m.len(),
            moments.v.len()
        )));
    }
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = *config;
    let wd = if decay { weight_decay } else { 0.0 };
    let bc1 = 1.0 - libm::pow(beta1, step as f64);
    let bc2 = 1.0 - libm::pow(beta2, step as f64);
    for i in 0..param.len() {
        let g = grad[i];
        let m = beta1 * moments.m[i] + (1.0 - beta1) * g;
        let v = beta2 * moments.v[i] + (1.0 - beta2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        param[i] -= lr * (m_hat / (libm::sqrt(v_hat) + eps) + wd * param[i]);
    }
    Ok(())
}

/// Advances the step counter and updates every trainable parameter of the
/// store from its accumulated gradient (zero when none flowed).
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimState, lr: f64) -> Result<()> {
    state.step += 1;
    let step = state.step;
    let config = state.config;
    for (id, p) in store.iter_mut() {
        if !p.requires_grad() {
            continue;
        }
        let n = p.value().numel();
        let grad = p
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let decay = p.weight_decay();
        let moments = state.moments.entry(id.index()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        adamw_update(
            p.value_mut().data_mut(),
            &grad,
            moments,
            step,
            lr,
            &config,
            decay,
        )?;
    }
    Ok(())
}

/// `base_lr · min(1, step / warmup_steps)`, with `step` counted from 1.
pub fn lr_schedule(step: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        base_lr
    } else {
        base_lr * step as f64 / warmup_steps as f64
    }
}
