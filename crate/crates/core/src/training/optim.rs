use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ModelParams;
use crate::tensor::Tensor;

/// First and second moments per tensor plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl OptimState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape)))
            .collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One AdamW update over the tensors accepted by `trainable`.
///
/// Weight decay is applied to the parameter before the Adam step. A
/// non-finite gradient aborts the step with nothing modified.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    st: &mut OptimState,
    hp: &AdamW,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    if hp.lr < 0.0 {
        return Err(Error::Range(format!("negative learning rate {}", hp.lr)));
    }
    for (name, g) in grads {
        if !trainable(name) {
            continue;
        }
        let p = params.get(name)?;
        if p.shape != g.shape {
            return Err(Error::Shape(format!("gradient for '{name}' has shape {:?}, parameter {:?}", g.shape, p.shape)));
        }
        if g.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    st.t += 1;
    let t = st.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (name, g) in grads {
        if !trainable(name) {
            continue;
        }
        let p = params.tensors.get_mut(name).expect("checked above");
        let m = st.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(&p.shape));
        let v = st.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(&p.shape));
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = hp.beta1 * m.data[i] + (1.0 - hp.beta1) * gi;
            v.data[i] = hp.beta2 * v.data[i] + (1.0 - hp.beta2) * gi * gi;
            let m_hat = m.data[i] / c1;
            let v_hat = v.data[i] / c2;
            let mut theta = p.data[i];
            theta -= hp.lr * hp.weight_decay * theta;
            theta -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
            p.data[i] = theta;
        }
    }
    Ok(())
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescale gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Linear warm-up over the first `floor(warmup_fraction * total)` steps, then
/// cosine decay to `lr_min` at `total`.
pub fn lr_schedule(step: usize, total: usize, warmup_fraction: f64, lr_max: f64, lr_min: f64) -> Result<f64> {
    if step > total {
        return Err(Error::Range(format!("step {step} beyond total {total}")));
    }
    if !(0.0..1.0).contains(&warmup_fraction) {
        return Err(Error::Range(format!("warmup_fraction {warmup_fraction}")));
    }
    let w = (warmup_fraction * total as f64).floor() as usize;
    if step < w {
        return Ok(lr_max * step as f64 / w as f64);
    }
    if total == w {
        return Ok(lr_max);
    }
    let progress = (step - w) as f64 / (total - w) as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}
