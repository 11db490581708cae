use serde::{Deserialize, Serialize};

use crate::numeric::{ParamId, ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected first and second moments, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { t: 0, m: zeros(), v: zeros() }
    }

    /// One update of every parameter that has a gradient; `lr` gives each
    /// parameter's step size.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: impl Fn(ParamId) -> f64) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = ParamId(i);
            let step = T::c(lr(id));
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let mhat = m[k] / T::c(bc1);
                let vhat = v[k] / T::c(bc2);
                p[k] -= step * mhat / (vhat.sqrt() + T::c(cfg.eps));
            }
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter().map(|v| v.f64() * v.f64()))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::c(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
