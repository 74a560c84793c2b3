//! SGD with momentum and the three learning-rate policies.

use crate::error::{CoreError, Result};
use crate::net::{Gradients, Parameters};
use crate::tensor::Tensor;

/// Learning-rate schedule, evaluated from the iteration counter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrPolicy {
    /// base_lr * (1 + gamma * iter)^(-power)
    Inverse { gamma: f64, power: f64 },
    /// base_lr * gamma^floor(iter / step_size)
    Step { gamma: f64, step_size: u64 },
    /// base_lr
    Fixed,
}

impl LrPolicy {
    pub fn lr(&self, base_lr: f64, iter: u64) -> f64 {
        match self {
            LrPolicy::Inverse { gamma, power } => {
                base_lr * (1.0 + gamma * iter as f64).powf(-power)
            }
            LrPolicy::Step { gamma, step_size } => {
                base_lr * gamma.powi((iter / step_size) as i32)
            }
            LrPolicy::Fixed => base_lr,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub base_lr: f64,
    pub momentum: f64,
    pub policy: LrPolicy,
    pub iteration: u64,
    buffers: Vec<(String, Tensor)>,
}

impl OptimizerState {
    /// SGD with momentum 0.9 by default.
    pub fn new(base_lr: f64, policy: LrPolicy) -> Self {
        OptimizerState { base_lr, momentum: 0.9, policy, iteration: 0, buffers: Vec::new() }
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn current_lr(&self) -> f64 {
        self.policy.lr(self.base_lr, self.iteration)
    }

    /// One update: v <- m*v - lr(iter)*g; p <- p + v; iteration += 1.
    pub fn step(&mut self, params: &mut Parameters, grads: &Gradients) -> Result<()> {
        grads.check_finite()?;
        let lr = self.current_lr();
        if !(lr > 0.0) {
            return Err(CoreError::InvalidArgument(format!("non-positive lr {lr}")));
        }
        for entry in params.entries_mut().iter_mut().filter(|e| e.trainable) {
            let g = match grads.get(&entry.name) {
                Some(g) => g,
                None => continue,
            };
            let buf = match self.buffers.iter_mut().find(|(n, _)| n == &entry.name) {
                Some((_, b)) => b,
                None => {
                    self.buffers
                        .push((entry.name.clone(), Tensor::zeros(entry.tensor.shape().to_vec())));
                    &mut self.buffers.last_mut().unwrap().1
                }
            };
            for ((p, v), &gv) in
                entry.tensor.data_mut().iter_mut().zip(buf.data_mut()).zip(g.data())
            {
                *v = self.momentum * *v - lr * gv;
                *p += *v;
            }
            entry.tensor.check_finite(&entry.name)?;
        }
        self.iteration += 1;
        Ok(())
    }
}
