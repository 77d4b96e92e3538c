//! Adam with bias correction.

use sge_tensor::Tensor;

use crate::error::{CoreError, Result};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl From<&crate::config::RunConfig> for AdamConfig {
    fn from(c: &crate::config::RunConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    /// First moments, congruent with the parameters.
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet<f32>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. A non-finite gradient aborts before anything changes.
    pub fn update(&mut self, params: &mut ParamSet<f32>, grads: &[Tensor<f32>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(CoreError::Usage(format!(
                "{} gradients / {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(CoreError::Usage(format!(
                    "gradient shape {:?} for `{name}` {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(CoreError::NonFinite {
                    what: format!("gradient of parameter `{name}`"),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] as f64;
                let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * gj;
                let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = c.lr * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                *x = (*x as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Element-wise sum of per-sample gradient lists, accumulated in list order.
pub fn sum_grads(per_sample: &[Vec<Tensor<f32>>]) -> Vec<Tensor<f32>> {
    let mut acc: Vec<Tensor<f32>> = per_sample[0].clone();
    for sample in &per_sample[1..] {
        for (a, g) in acc.iter_mut().zip(sample) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += *y;
            }
        }
    }
    acc
}
