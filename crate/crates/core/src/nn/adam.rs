use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{argument, Result};
use crate::scalar::Scalar;

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct AdamState<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    /// Decoupled weight decay: `w -= lr * weight_decay * w` per step.
    #[serde(default)]
    pub weight_decay: F,
    /// Per-parameter opt-in for weight decay; empty means every parameter.
    #[serde(default)]
    pub decay_mask: Vec<bool>,
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(store: &ParamStore<F>, lr: F) -> Self {
        AdamState {
            lr,
            beta1: F::lit(0.9),
            beta2: F::lit(0.999),
            eps: F::lit(1e-8),
            weight_decay: F::zero(),
            decay_mask: Vec::new(),
            step: 0,
            m: store.iter().map(|p| vec![F::zero(); p.value.len()]).collect(),
            v: store.iter().map(|p| vec![F::zero(); p.value.len()]).collect(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &[Tensor<F>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(argument(format!(
                "adam: {} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        for ((p, g), m) in store.iter().zip(grads).zip(&self.m) {
            if p.value.shape() != g.shape() || m.len() != g.len() {
                return Err(argument(format!("adam: gradient shape mismatch for {}", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        let decay = F::one() - self.lr * self.weight_decay;
        for (i, (((p, g), m), v)) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v).enumerate() {
            let decay = if self.decay_mask.get(i).copied().unwrap_or(true) { decay } else { F::one() };
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mi = b1 * *mi + (F::one() - b1) * gi;
                *vi = b2 * *vi + (F::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = *w * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Scalar>(grads: &mut [Tensor<F>], max_norm: F) -> F {
    let norm = grads.iter().map(|g| g.sum_sq()).sum::<F>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}
