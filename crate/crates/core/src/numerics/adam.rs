use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::numerics::Matrix;

/// A collection of tensors visited in a fixed, documented order.
///
/// Gradients and optimizer moments are stored in the same container type as
/// the parameters they belong to, so re-routing a parameter (for example when
/// a dense FFN is split into experts) re-routes its moments the same way.
pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments in the same layout as the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<P> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: P,
    pub second_moment: P,
}

impl<P: ParamSet> AdamState<P> {
    pub fn new(params: &P, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }

    /// One bias-corrected Adam update over every tensor.
    pub fn step(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        self.step_masked(params, grads, lr, None)
    }

    /// Like [`AdamState::step`], but tensors whose mask entry is `false` are
    /// left untouched, moments included. Sparse training uses this to skip the
    /// experts that no token selected.
    pub fn step_masked(&mut self, params: &mut P, grads: &P, lr: f64, mask: Option<&[bool]>) -> Result<()> {
        let mut p = params.tensors_mut();
        let g = grads.tensors();
        let mut m = self.first_moment.tensors_mut();
        let mut v = self.second_moment.tensors_mut();
        if p.len() != g.len() || p.len() != m.len() || p.len() != v.len() {
            return Err(shape_err(
                "adam_step",
                format!("{} tensors", p.len()),
                format!("grads {}, moments {}/{}", g.len(), m.len(), v.len()),
            ));
        }
        if let Some(mask) = mask {
            if mask.len() != p.len() {
                return Err(shape_err(
                    "adam_step",
                    format!("mask of {}", p.len()),
                    format!("{}", mask.len()),
                ));
            }
        }
        for i in 0..p.len() {
            if !p[i].same_shape(g[i]) || !p[i].same_shape(m[i]) || !p[i].same_shape(v[i]) {
                return Err(shape_err(
                    "adam_step",
                    format!("tensor {i} {:?}", p[i].shape()),
                    format!("grad {:?}", g[i].shape()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..p.len() {
            if mask.is_some_and(|mask| !mask[i]) {
                continue;
            }
            let pi = p[i].as_mut_slice();
            let mi = m[i].as_mut_slice();
            let vi = v[i].as_mut_slice();
            for (k, &gk) in g[i].as_slice().iter().enumerate() {
                mi[k] = beta1 * mi[k] + (1.0 - beta1) * gk;
                vi[k] = beta2 * vi[k] + (1.0 - beta2) * gk * gk;
                let m_hat = mi[k] / bc1;
                let v_hat = vi[k] / bc2;
                pi[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Noam schedule: `base · d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: u64, warmup: u64, d_model: usize, base: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    base * (d_model as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5))
}
