use serde::{Deserialize, Serialize};

use super::ExploreError;

/// Exponents of the accuracy / parameter / compute trade-off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreWeights {
    pub kappa: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            kappa: 2.0,
            beta: 0.5,
            gamma: 0.5,
        }
    }
}

/// Architecture quality `20 log10(a^kappa / (p^beta m^gamma))` with accuracy
/// in percent and parameters / MACs in millions.
pub fn netscore(accuracy_pct: f64, params_millions: f64, macs_millions: f64, w: ScoreWeights) -> Result<f64, ExploreError> {
    for (name, v) in [
        ("accuracy", accuracy_pct),
        ("params", params_millions),
        ("macs", macs_millions),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(ExploreError::Score(format!("{name} must be positive and finite, got {v}")));
        }
    }
    Ok(20.0
        * (w.kappa * accuracy_pct.log10() - w.beta * params_millions.log10() - w.gamma * macs_millions.log10()))
}
