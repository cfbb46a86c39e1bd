//! Step learning-rate schedule: divide the rate at fixed epoch milestones.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Schedule {
    pub initial_lr: f64,
    /// (epoch, divisor): after completing `epoch`, the learning rate is
    /// divided by `divisor`. A divisor below 1 raises the rate.
    pub milestones: Vec<(u64, f64)>,
}

impl Schedule {
    pub fn new(initial_lr: f64, milestones: Vec<(u64, f64)>) -> Result<Self> {
        // Zero is legal (a stationarity diagnostic); negative is not.
        if !(initial_lr >= 0.0) || !initial_lr.is_finite() {
            return Err(Error::Config {
                field: "lr".into(),
                message: format!("must be non-negative, got {initial_lr}"),
            });
        }
        for w in milestones.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config {
                    field: "milestones".into(),
                    message: "epochs must be strictly increasing".into(),
                });
            }
        }
        for &(e, d) in &milestones {
            if e == 0 || !(d > 0.0) || !d.is_finite() {
                return Err(Error::Config {
                    field: "milestones".into(),
                    message: format!("bad milestone ({e}, {d})"),
                });
            }
        }
        Ok(Schedule { initial_lr, milestones })
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_at(&self, epoch: u64) -> f64 {
        let mut lr = self.initial_lr;
        for &(m, d) in &self.milestones {
            if m < epoch {
                lr /= d;
            }
        }
        lr
    }
}
