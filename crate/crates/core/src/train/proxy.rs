use serde::{Deserialize, Serialize};

use super::{evaluate, train_phase, Optimizer, PhaseConfig, Sample, Scope, TrainError};
use crate::arch::{ArchSpec, Model};
use crate::explore::{Evaluator, ExploreError};

/// Short training budget used to rank candidate architectures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    /// Classifier-head training on the frozen, freshly initialized trunk.
    pub phase: PhaseConfig,
    /// Seed for weight initialization and sample order.
    pub seed: u64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            phase: PhaseConfig {
                optimizer: Optimizer::Adam,
                lr: 1e-3,
                epochs: 5,
                batch_size: 16,
                scope: Scope::FullyConnected,
            },
            seed: 0,
        }
    }
}

/// Scores a spec by its validation accuracy after a short training run.
#[derive(Debug, Clone)]
pub struct ProxyEvaluator {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub config: ProxyConfig,
}

impl ProxyEvaluator {
    pub fn new(train: Vec<Sample>, val: Vec<Sample>, config: ProxyConfig) -> Self {
        Self { train, val, config }
    }

    /// Validation accuracy in percent; `None` when training diverged.
    pub fn run(&self, spec: &ArchSpec) -> Result<Option<f64>, TrainError> {
        let mut model = Model::<f32>::instantiate(spec, self.config.seed)?;
        match train_phase(&mut model, &self.train, &self.config.phase, 1, self.config.seed, None) {
            Ok(_) => {}
            Err(TrainError::Diverged { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
        let acc = evaluate(&model, &self.val)?.accuracy_pct;
        Ok(acc.is_finite().then_some(acc))
    }
}

impl Evaluator for ProxyEvaluator {
    fn accuracy(&mut self, spec: &ArchSpec) -> Result<Option<f64>, ExploreError> {
        self.run(spec).map_err(|e| ExploreError::Evaluation(e.to_string()))
    }
}
