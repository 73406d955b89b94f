//! Optimizers (Adam, plain SGD) and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Optimizer with per-parameter state, deterministic given its state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub step_count: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &[&Tensor]) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Adam => (
                params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
                params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            ),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self {
            kind,
            step_count: 0,
            m,
            v,
        }
    }

    /// One update over all parameters. `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.step_count += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step_count;
                let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for i in 0..g.len() {
                        let gv = g.data()[i];
                        let mv = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * gv;
                        let vv = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * gv * gv;
                        m.data_mut()[i] = mv;
                        v.data_mut()[i] = vv;
                        let mhat = mv / bc1;
                        let vhat = vv / bc2;
                        p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    Constant,
    /// Multiply the rate by `factor` once the epoch index reaches `at_epoch`.
    Step { at_epoch: usize, factor: f64 },
    /// Multiply by `factor` when the best validation loss has not improved
    /// by at least `min_delta` for `patience` consecutive epochs.
    Plateau {
        patience: usize,
        factor: f64,
        min_delta: f64,
    },
}

/// Mutable schedule bookkeeping, checkpointable for exact resume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleState {
    pub current_lr: f64,
    pub best_val: f64,
    pub since_best: usize,
}

impl ScheduleState {
    pub fn new(base_lr: f64) -> Self {
        Self {
            current_lr: base_lr,
            best_val: f64::INFINITY,
            since_best: 0,
        }
    }

    /// Learning rate to use for `epoch` (0-based), before its batches run.
    pub fn lr_for_epoch(&self, schedule: &Schedule, base_lr: f64, epoch: usize) -> f64 {
        match schedule {
            Schedule::Constant => base_lr,
            Schedule::Step { at_epoch, factor } => {
                if epoch >= *at_epoch {
                    base_lr * factor
                } else {
                    base_lr
                }
            }
            Schedule::Plateau { .. } => self.current_lr,
        }
    }

    /// Feed the epoch's validation loss (plateau schedules only).
    pub fn observe_val_loss(&mut self, schedule: &Schedule, val_loss: f64) {
        if let Schedule::Plateau {
            patience,
            factor,
            min_delta,
        } = schedule
        {
            if val_loss < self.best_val - min_delta {
                self.best_val = val_loss;
                self.since_best = 0;
            } else {
                self.since_best += 1;
                if self.since_best >= *patience {
                    self.current_lr *= factor;
                    self.since_best = 0;
                }
            }
        }
    }
}
