//! Open-set rejection by thresholding the largest softmax probability.

use crate::classifier::{LogitRecord, Regime};
use crate::decision::{OpenSetDecision, Outcome};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdPolicy {
    epsilon: f64,
    regime: Regime,
    num_known: usize,
}

impl ThresholdPolicy {
    /// `epsilon` must lie strictly between `1 / width` and 1; anything at or
    /// below `1 / width` never rejects.
    pub fn new(epsilon: f64, regime: Regime, num_known: usize) -> Result<Self> {
        let width = regime.width(num_known);
        if width == 0 {
            return Err(Error::InvalidConfig("threshold policy needs at least one class".into()));
        }
        let lower = 1.0 / width as f64;
        if !(epsilon > lower && epsilon < 1.0) {
            return Err(Error::InvalidThreshold { epsilon, lower });
        }
        Ok(Self { epsilon, regime, num_known })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn width(&self) -> usize {
        self.regime.width(self.num_known)
    }
}

/// Unknown when the top probability falls strictly below epsilon, or when a
/// C2 classifier picks its unknown unit. Score is `1 - max probability`.
pub fn threshold_decide(record: &LogitRecord, policy: &ThresholdPolicy) -> Result<OpenSetDecision> {
    if record.probabilities.len() != policy.width() {
        return Err(Error::Shape(format!(
            "record has {} outputs, policy expects {}",
            record.probabilities.len(),
            policy.width()
        )));
    }
    let top = record.max_probability();
    let outcome = if top < policy.epsilon || (policy.regime == Regime::C2 && record.predicted == policy.num_known) {
        Outcome::Unknown
    } else {
        Outcome::Known(record.predicted)
    };
    Ok(OpenSetDecision { outcome, unknownness: 1.0 - top })
}
