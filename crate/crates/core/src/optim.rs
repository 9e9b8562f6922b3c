//! ADAM with bias correction and per-tensor learning rates.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    /// First moment, one buffer per parameter.
    pub m: Vec<Vec<f64>>,
    /// Second moment.
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Adam {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update of every parameter; `lrs[i]` is the learning rate of
    /// `params[i]`.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lrs: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || lrs.len() != params.len() {
            return Err(Error::Usage(format!(
                "adam: {} params, {} grads, {} rates, {} buffers",
                params.len(),
                grads.len(),
                lrs.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k].data();
            if g.len() != p.len() || self.m[k].len() != p.len() {
                return Err(Error::dim("adam", p.shape(), grads[k].shape()));
            }
            let lr = lrs[k];
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
