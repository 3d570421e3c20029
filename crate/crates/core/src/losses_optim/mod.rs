//! Training objective, analytic gradients, and the cascade training loop.

pub mod backward;
pub mod losses;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backward::{batch_objective, ImageProblem, PrevWeights, StageInput};
pub use losses::{focal, focal_grad, loss_cbp, loss_neg, loss_pbr_mil, EPS};
pub use train::{
    predict, train_p2bnet, train_p2bnet_with, EpochRecord, Prediction, TrainConfig, TrainOutput,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha_mil1: f64,
    pub alpha_mil2: f64,
    pub alpha_neg: f64,
    pub gamma: f64,
    /// Number of refinement iterations `T`.
    pub stages: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Fractions of `epochs` after which the learning rate is multiplied by
    /// `lr_decay`.
    pub lr_decay_at: Vec<f64>,
    pub lr_decay: f64,
    pub momentum: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_mil1: 0.25,
            alpha_mil2: 0.25,
            alpha_neg: 0.75,
            gamma: 2.0,
            stages: 1,
            lr: 0.002,
            epochs: 12,
            lr_decay_at: vec![2.0 / 3.0, 11.0 / 12.0],
            lr_decay: 0.1,
            momentum: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.alpha_mil1, self.alpha_mil2, self.alpha_neg];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be >= 0, got {weights:?}"
            )));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Config(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.lr_decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config(
                "lr decay points must be fractions in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self
            .lr_decay_at
            .iter()
            .filter(|f| epoch >= (*f * self.epochs as f64).round() as usize)
            .count();
        self.lr * self.lr_decay.powi(decays as i32)
    }
}

/// Loss values of one batch. Vectors are indexed by refinement iteration
/// `t - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Coarse-stage loss, including its weight.
    pub l_cbp: f64,
    /// Weighted focal MIL loss, before its weight.
    pub l_mil2: Vec<f64>,
    /// Negative suppression loss, before its weight.
    pub l_neg: Vec<f64>,
    /// Weighted combination of the two above.
    pub l_pbr: Vec<f64>,
    pub l_total: f64,
    pub beta: Vec<f64>,
    /// Previous-stage true-class bag score of every object.
    pub object_weights: Vec<Vec<f64>>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.l_total.is_finite()
    }
}

impl std::fmt::Display for LossReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L_cbp={:.6}", self.l_cbp)?;
        for (t, l) in self.l_pbr.iter().enumerate() {
            write!(f, " L_pbr{}={:.6}", t + 1, l)?;
        }
        write!(f, " total={:.6}", self.l_total)
    }
}
