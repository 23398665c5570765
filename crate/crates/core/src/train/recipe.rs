use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimization and data-pipeline settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRecipe {
    pub lr0: f64,
    /// Epochs at which the learning rate is divided by `decay_factor`.
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Per-axis rotation range in degrees, used when the model config enables
    /// data augmentation.
    pub rotation_degrees: [f64; 3],
    /// Fraction of training sequences held out for validation when the
    /// dataset has no `val` split.
    pub val_fraction: f64,
    pub ref_joint: usize,
    pub seed: u64,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            milestones: vec![60, 90, 110],
            decay_factor: 10.0,
            epochs: 120,
            weight_decay: 1e-4,
            batch_size: 64,
            label_smoothing: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            rotation_degrees: [17.0; 3],
            val_fraction: 0.1,
            ref_joint: 0,
            seed: 0,
        }
    }
}

impl TrainRecipe {
    /// The 40-epoch schedule used for ablation runs.
    pub fn desk() -> Self {
        Self {
            epochs: 40,
            milestones: vec![20, 30, 36],
            batch_size: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones must be strictly increasing, got {:?}", self.milestones));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return bad(format!("milestones {:?} must lie below {} epochs", self.milestones, self.epochs));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label smoothing must lie in [0, 1), got {}", self.label_smoothing));
        }
        if !(self.lr0 > 0.0 && self.decay_factor > 0.0) {
            return bad("learning rate and decay factor must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        if self.weight_decay < 0.0 || self.rotation_degrees.iter().any(|d| d.is_nan() || *d < 0.0) {
            return bad("weight decay and rotation range must be non-negative".into());
        }
        Ok(())
    }
}

/// `lr0 / decay_factor^(milestones reached)`.
pub fn lr_at_epoch(recipe: &TrainRecipe, epoch: usize) -> Result<f64> {
    if epoch >= recipe.epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} outside a {}-epoch schedule",
            recipe.epochs
        )));
    }
    let passed = recipe.milestones.iter().filter(|&&m| m <= epoch).count();
    Ok(recipe.lr0 / recipe.decay_factor.powi(passed as i32))
}
