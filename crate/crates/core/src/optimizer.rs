//! Adam with bias correction and a single-drop step learning-rate schedule.

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[&Array2<f64>]) -> Self {
        let zeros = || params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Array2<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Array2<f64>] {
        &self.v
    }

    /// One Adam update. Refuses the whole step, leaving parameters and state
    /// untouched, if any gradient entry is non-finite.
    pub fn step(
        &mut self,
        params: &mut [&mut Array2<f64>],
        grads: &[&Array2<f64>],
        lr: f64,
    ) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Contract(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors but got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::Contract(format!(
                    "tensor {i}: parameter {:?} / gradient {:?} / state {:?} shapes disagree",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
        }
        if let Some(i) = grads.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in tensor {i}; step refused"
            )));
        }

        let AdamConfig { beta1, beta2, eps } = self.config;
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(&mut **p)
                .and(*g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = if bc1 > 0.0 { *m / bc1 } else { *m };
                    let v_hat = if bc2 > 0.0 { *v / bc2 } else { *v };
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Constant learning rate that drops by `drop_factor` at `drop_epoch`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub drop_epoch: usize,
    pub drop_factor: f64,
    pub total_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 0.0002,
            drop_epoch: 15,
            drop_factor: 10.0,
            total_epochs: 30,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.base_lr
            )));
        }
        if !(self.drop_factor >= 1.0 && self.drop_factor.is_finite()) {
            return Err(Error::Config(format!(
                "lr drop factor must be >= 1, got {}",
                self.drop_factor
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("at least one epoch is required".into()));
        }
        if self.drop_epoch > self.total_epochs {
            return Err(Error::Config(format!(
                "lr drop epoch {} is past the last epoch {}",
                self.drop_epoch, self.total_epochs
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::Contract(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        Ok(if epoch < self.drop_epoch {
            self.base_lr
        } else {
            self.base_lr / self.drop_factor
        })
    }
}
