//! First-order optimizers over flat parameter vectors.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerSpec {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state. `weight_decay` is decoupled (AdamW style) and is
/// applied to every parameter it is given.
#[derive(Debug, Clone)]
pub struct Optimizer {
    spec: OptimizerSpec,
    lr: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, lr: f64, weight_decay: f64, n_params: usize) -> Self {
        let (m, v) = match spec {
            OptimizerSpec::Sgd => (Vec::new(), Vec::new()),
            OptimizerSpec::Adam { .. } => (vec![0.0; n_params], vec![0.0; n_params]),
        };
        Self { spec, lr, weight_decay, step: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch { expected: params.len(), got: grads.len() });
        }
        if let Some(g) = grads.iter().find(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient component {g}")));
        }
        self.step += 1;
        let decay = 1.0 - self.lr * self.weight_decay;
        match self.spec {
            OptimizerSpec::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p = *p * decay - self.lr * g;
                }
            }
            OptimizerSpec::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mh = self.m[i] / bc1;
                    let vh = self.v[i] / bc2;
                    params[i] = params[i] * decay - self.lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
