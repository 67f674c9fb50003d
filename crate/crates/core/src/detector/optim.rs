//! SGD with momentum and decoupled-from-nothing weight decay, plus the linear
//! learning-rate schedule:
//!
//!   v ← momentum·v + (g + weight_decay·θ)
//!   θ ← θ − lr·v
//!   lr(e) = lr0·((1 − e/E)·(1 − lrf) + lrf)

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lrf: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 8,
            lr0: 0.01,
            lrf: 0.01,
            momentum: 0.937,
            weight_decay: 0.0005,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.lr0 <= 0.0 || self.lrf <= 0.0 || self.lrf > 1.0 {
            return Err(Error::Config("need lr0 > 0 and 0 < lrf <= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0,1), weight decay >= 0".into()));
        }
        Ok(())
    }
}

/// Linear decay from lr0 at epoch 0 to lr0·lrf at epoch E.
pub fn lr_schedule(epoch: usize, total: usize, lr0: f64, lrf: f64) -> f64 {
    let frac = epoch as f64 / total as f64;
    lr0 * ((1.0 - frac) * (1.0 - lrf) + lrf)
}

/// Momentum buffers, one per parameter tensor, in parameter order.
#[derive(Clone, Debug)]
pub struct SgdState {
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(params: &[&Tensor]) -> Self {
        SgdState {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn velocity(&self, i: usize) -> &Tensor {
        &self.velocity[i]
    }
}

/// One SGD update over aligned parameter/gradient lists.
pub fn train_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut SgdState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::invalid(
            "train_step",
            format!(
                "parameter/gradient/state count mismatch: {}/{}/{}",
                params.len(),
                grads.len(),
                state.velocity.len()
            ),
        ));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::ShapeMismatch {
                op: "train_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        for i in 0..p.len() {
            let vel = cfg.momentum * v.data()[i]
                + (g.data()[i] + cfg.weight_decay * p.data()[i]);
            v.data_mut()[i] = vel;
            p.data_mut()[i] -= lr * vel;
        }
    }
    Ok(())
}
