use serde::{Deserialize, Serialize};

use super::optimizer::OptimizerKind;
use crate::quantizers::TauSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs at whose start the learning rate halves.
    pub lr_milestones: Vec<usize>,
    pub optimizer: OptimizerKind,
    /// Quantization-free epochs before SF-DiVeQ starts.
    pub sf_warmup: usize,
    /// Trailing batches whose latents initialize the SF-DiVeQ codebook.
    pub sf_init_window: usize,
    /// Overrides `epochs`: train for exactly this many iterations.
    pub iterations: Option<usize>,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule {
            epochs: 100,
            batch_size: 128,
            learning_rate: 5.5e-4,
            lr_milestones: vec![40, 70],
            optimizer: OptimizerKind::Sgd,
            sf_warmup: 2,
            sf_init_window: 30,
            iterations: None,
        }
    }
}

impl TrainingSchedule {
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if self.epochs == 0 && self.iterations.is_none() {
            out.push(("epochs", "must be >= 1".into()));
        }
        if self.iterations == Some(0) {
            out.push(("iterations", "must be >= 1 when set".into()));
        }
        if self.batch_size == 0 {
            out.push(("batch_size", "must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(("learning_rate", format!("must be > 0, got {}", self.learning_rate)));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            out.push(("lr_milestones", "must be strictly increasing".into()));
        }
        if self.iterations.is_none() && self.lr_milestones.last().is_some_and(|&m| m >= self.epochs) {
            out.push(("lr_milestones", format!("must be < epochs ({})", self.epochs)));
        }
        if self.sf_init_window == 0 {
            out.push(("sf_init_window", "must be >= 1".into()));
        }
        out
    }

    /// Base rate halved once per milestone already reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.learning_rate * 0.5f64.powi(halvings as i32)
    }
}

/// `max(tau_start * eta^epoch, tau_min)`, `eta = (tau_min / tau_start)^(1/N)`.
pub fn anneal_tau(epoch: usize, schedule: &TauSchedule) -> f64 {
    schedule.at(epoch)
}
