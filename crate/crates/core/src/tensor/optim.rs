//! Classic (non-Nesterov) SGD with momentum.

use crate::error::{Error, Result};

use super::Tensor;

/// Optimizer state: one velocity buffer per trainable parameter, in the
/// model's parameter walk order. Update rule: `v <- m*v + g; p <- p - lr*v`.
pub struct SgdMomentum {
    lr: f32,
    momentum: f32,
    velocities: Vec<Vec<f32>>,
}

impl SgdMomentum {
    pub fn new(lr: f32, momentum: f32, param_sizes: &[usize]) -> Result<Self> {
        // lr 0 is allowed: it freezes parameters, which the train-epoch
        // contract relies on
        if !(lr >= 0.0) {
            return Err(Error::invalid(format!("learning rate must not be negative, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!(
                "momentum must be in [0,1), got {momentum}"
            )));
        }
        Ok(SgdMomentum {
            lr,
            momentum,
            velocities: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
        })
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    pub fn momentum(&self) -> f32 {
        self.momentum
    }

    pub fn velocities(&self) -> &[Vec<f32>] {
        &self.velocities
    }

    /// Restores a velocity buffer (checkpoint resume).
    pub fn load_velocity(&mut self, index: usize, data: Vec<f32>) -> Result<()> {
        let slot = self
            .velocities
            .get_mut(index)
            .ok_or_else(|| Error::invalid(format!("velocity index {index} out of range")))?;
        if slot.len() != data.len() {
            return Err(Error::invalid(format!(
                "velocity {index} length {} != expected {}",
                data.len(),
                slot.len()
            )));
        }
        *slot = data;
        Ok(())
    }

    /// Updates the parameter at walk position `index`, consuming its
    /// accumulated gradient. A parameter without a gradient is treated as
    /// g = 0.
    pub fn step_one(&mut self, index: usize, p: &mut Tensor<f32>) {
        let v = &mut self.velocities[index];
        assert_eq!(v.len(), p.numel(), "optimizer/parameter shape drift");
        match p.take_grad() {
            Some(g) => {
                for (vi, gi) in v.iter_mut().zip(&g) {
                    *vi = self.momentum * *vi + *gi;
                }
            }
            None => {
                for vi in v.iter_mut() {
                    *vi *= self.momentum;
                }
            }
        }
        let data = p.data_mut();
        for (pi, vi) in data.iter_mut().zip(v.iter()) {
            *pi -= self.lr * *vi;
        }
    }

    /// Asserts a full pass stepped every registered parameter.
    pub fn finish_step(&self, stepped: usize) {
        assert_eq!(
            stepped,
            self.velocities.len(),
            "optimizer saw a different parameter count than it was built for"
        );
    }

    /// Applies one update to every parameter in walk order.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor<f32>>) {
        let mut count = 0;
        for p in params {
            self.step_one(count, p);
            count += 1;
        }
        self.finish_step(count);
    }
}
