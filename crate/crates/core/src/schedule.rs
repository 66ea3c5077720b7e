use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-constant learning rate: the initial rate divided by `divisor`
/// once for every drop point `floor(fraction * epochs)` already reached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub initial_lr: f64,
    pub drop_fractions: Vec<f64>,
    pub divisor: f64,
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.initial_lr
            )));
        }
        if self.divisor <= 1.0 {
            return Err(Error::Config(format!("lr divisor {} must exceed 1", self.divisor)));
        }
        let in_range = self.drop_fractions.iter().all(|f| *f > 0.0 && *f < 1.0);
        let increasing = self.drop_fractions.windows(2).all(|w| w[0] < w[1]);
        if !in_range || !increasing {
            return Err(Error::Config(format!(
                "lr drop fractions {:?} must be strictly increasing in (0, 1)",
                self.drop_fractions
            )));
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch` of a run lasting `epochs`.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        let drops = self
            .drop_fractions
            .iter()
            .filter(|&&f| (f * epochs as f64).floor() as usize <= epoch)
            .count();
        self.initial_lr / self.divisor.powi(drops as i32)
    }
}
