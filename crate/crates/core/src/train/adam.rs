use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied only when positive.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam moments for every parameter of one store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every trainable parameter. Frozen
    /// parameters are skipped; a trainable one without a gradient is an error.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::invalid("optimizer state does not match the parameter store"));
        }
        if store.iter().any(|(_, p)| p.trainable && p.grad.is_none()) {
            return Err(Error::MissingGradients);
        }
        self.step += 1;
        let cfg = self.config;
        let t = self.step as i32;
        let (b1, b2): (T, T) = (c(cfg.beta1), c(cfg.beta2));
        let bc1: T = c(1.0 - cfg.beta1.powi(t));
        let bc2: T = c(1.0 - cfg.beta2.powi(t));
        let (lr, eps, wd): (T, T, T) = (c(cfg.lr), c(cfg.eps), c(cfg.weight_decay));
        for (k, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let g = p.grad.as_ref().expect("checked above");
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((theta, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                if cfg.weight_decay > 0.0 {
                    *theta -= lr * wd * *theta;
                }
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales trainable gradients so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|v| v.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s: T = c(max_norm / norm);
        for p in store.iter_mut() {
            if let (true, Some(g)) = (p.trainable, p.grad.as_mut()) {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}
