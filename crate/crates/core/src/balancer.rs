//! Stall-counter task weighting: a task whose validation metric has not
//! improved for `m` epochs gets raw weight `max(1, log2 m)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::TaskWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancerState {
    /// Epochs since the last improvement, per task (starts at 1).
    pub stall: [u32; 3],
    /// Best validation metric so far; `None` before the first update.
    pub best: [Option<f64>; 3],
    pub lambdas: TaskWeights,
}

impl Default for BalancerState {
    fn default() -> Self {
        Self::new()
    }
}

impl BalancerState {
    pub fn new() -> Self {
        Self {
            stall: [1; 3],
            best: [None; 3],
            lambdas: TaskWeights::uniform(),
        }
    }

    /// Applies one epoch of validation metrics (higher is better) and
    /// recomputes the weights used for the next epoch.
    pub fn update(&mut self, metrics: [f64; 3]) -> Result<()> {
        if let Some(i) = metrics.iter().position(|m| m.is_nan()) {
            return Err(Error::invalid(format!("validation metric for task {i} is NaN")));
        }
        for i in 0..3 {
            match self.best[i] {
                Some(best) if metrics[i] <= best => self.stall[i] += 1,
                _ => {
                    self.best[i] = Some(metrics[i]);
                    self.stall[i] = 1;
                }
            }
        }
        self.lambdas = weights_from_stall(self.stall);
        Ok(())
    }
}

/// Normalised `max(1, log2 m)` weights.
pub fn weights_from_stall(stall: [u32; 3]) -> TaskWeights {
    let raw = stall.map(|m| f64::from(m).log2().max(1.0));
    let total: f64 = raw.iter().sum();
    TaskWeights(raw.map(|r| r / total))
}
