use serde::{Deserialize, Serialize};

/// Multiplies the learning rate by `factor` once the monitored value has
/// failed to improve for `patience` consecutive epochs; never goes below
/// `floor` and never increases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReduceOnPlateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub floor: f64,
    best: f64,
    bad_epochs: usize,
}

impl ReduceOnPlateau {
    pub fn new(lr: f64, factor: f64, patience: usize, floor: f64) -> Self {
        ReduceOnPlateau {
            lr: lr.max(floor),
            factor,
            patience: patience.max(1),
            floor,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn bad_epochs(&self) -> usize {
        self.bad_epochs
    }

    /// Feeds one end-of-epoch value (lower is better); returns the learning
    /// rate for the next epoch. NaN never counts as an improvement.
    pub fn observe(&mut self, value: f64) -> f64 {
        if value < self.best {
            self.best = value;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.floor);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
