use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    Sgd,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub trait Optimizer {
    /// Applies one update using the gradients currently stored in `params`.
    fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()>;
}

pub fn build(config: OptimizerConfig, params: &ParamSet) -> Box<dyn Optimizer + Send> {
    match config {
        OptimizerConfig::Adam { beta1, beta2, eps } => Box::new(Adam::new(params, beta1, beta2, eps)),
        OptimizerConfig::Sgd => Box::new(Sgd),
    }
}

#[derive(Debug, Clone)]
pub struct Sgd;

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        for id in params.ids().collect::<Vec<_>>() {
            let t = params.get_mut(id);
            let g = t.grad().map(<[f64]>::to_vec).unwrap_or_default();
            for (w, gv) in t.data_mut().iter_mut().zip(g) {
                *w -= lr * gv;
            }
        }
        Ok(())
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, param: usize) -> &[f64] {
        &self.m[param]
    }

    pub fn second_moment(&self, param: usize) -> &[f64] {
        &self.v[param]
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::dim(format!(
                "optimizer state tracks {} tensors, parameter set has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let t = params.get_mut(id);
            let n = t.numel();
            if self.m[i].len() != n {
                return Err(Error::dim(format!(
                    "optimizer state for tensor {i} has {} entries, parameter has {n}",
                    self.m[i].len()
                )));
            }
            let g = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
