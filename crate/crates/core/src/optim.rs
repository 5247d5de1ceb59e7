//! Adam with a polynomial learning-rate decay.

use alloc::vec::Vec;

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `lr · (1 − iteration / total)^power`.
pub fn poly_lr(lr: f64, iteration: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return lr;
    }
    let frac = 1.0 - (iteration.min(total) as f64) / total as f64;
    lr * libm::pow(frac, power)
}

/// Global L2 norm over a gradient list.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    let sq: f64 = grads.iter().flat_map(|g| g.data()).map(|v| v.as_f64() * v.as_f64()).sum();
    libm::sqrt(sq)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub cfg: OptimConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    /// Per-parameter multiplier on the scheduled rate.
    lr_scale: Vec<f64>,
    step: usize,
}

impl<T: Scalar> Adam<T> {
    /// Parameters named `route.*` (the routing gate) step at
    /// `routing_lr_scale` times the scheduled rate.
    pub fn new(cfg: OptimConfig, params: &ParamSet<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let lr_scale = params
            .iter()
            .map(|(_, name, _)| if name.starts_with("route.") { cfg.routing_lr_scale } else { 1.0 })
            .collect();
        Adam {
            cfg,
            m: zeros.clone(),
            v: zeros,
            lr_scale,
            step: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// One update with the learning rate for the current step. Gradients
    /// are rescaled first when their global norm exceeds the clip.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::dim("adam", alloc::format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        let c = &self.cfg;
        let lr = poly_lr(c.lr, self.step, c.iterations, c.poly_power);
        let mut scale = 1.0;
        if c.grad_clip > 0.0 {
            let n = global_norm(grads);
            if n > c.grad_clip {
                scale = c.grad_clip / n;
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one, eps) = (T::one(), T::from_f64(c.eps));
        let (scale, bc1, bc2, lr) = (T::from_f64(scale), T::from_f64(bc1), T::from_f64(bc2), T::from_f64(lr));
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &grads[i];
            if g.shape() != params.tensors()[i].shape() {
                return Err(Error::dim("adam", alloc::format!("gradient {:?} for {}", g.shape(), params.name(id))));
            }
            let p = &params.tensors()[i];
            let lr = lr * T::from_f64(self.lr_scale[i]);
            let mut m = self.m[i].data().to_vec();
            let mut v = self.v[i].data().to_vec();
            let mut out = p.data().to_vec();
            for k in 0..out.len() {
                let gk = g.data()[k] * scale;
                m[k] = b1 * m[k] + (one - b1) * gk;
                v[k] = b2 * v[k] + (one - b2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                out[k] -= lr * mh / (vh.sqrt() + eps);
            }
            let shape = p.shape().to_vec();
            self.m[i] = Tensor::new(&shape, m)?;
            self.v[i] = Tensor::new(&shape, v)?;
            params.set(id, Tensor::new(&shape, out)?);
        }
        Ok(())
    }
}
