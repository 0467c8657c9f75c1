use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adam_step, sgd_step, AdamConfig, AdamState};
use super::{Sample, TrainError};
use crate::arch::{argmax_rows, Model, Op};
use crate::condenser::Exec;
use crate::tensor::ops::{softmax_cross_entropy, BnMode};
use crate::{ParamGroup, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

/// Which trainable parameters a phase updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    FullyConnected,
    All,
}

impl Scope {
    fn includes(self, group: ParamGroup) -> bool {
        match self {
            Self::FullyConnected => group == ParamGroup::FullyConnected,
            Self::All => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub optimizer: Optimizer,
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub scope: Scope,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Classifier-head warm-up.
    pub phase1: PhaseConfig,
    /// Whole-network fine-tuning.
    pub phase2: PhaseConfig,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase1: PhaseConfig {
                optimizer: Optimizer::Adam,
                lr: 1e-3,
                epochs: 100,
                batch_size: 16,
                scope: Scope::FullyConnected,
            },
            phase2: PhaseConfig {
                optimizer: Optimizer::Sgd,
                lr: 5e-4,
                epochs: 100,
                batch_size: 16,
                scope: Scope::All,
            },
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    /// Overrides both epoch budgets.
    pub fn with_epochs(mut self, phase1: usize, phase2: usize) -> Self {
        self.phase1.epochs = phase1;
        self.phase2.epochs = phase2;
        self
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: u8,
    pub epoch: usize,
    /// Mean cross-entropy over the epoch.
    pub loss: f64,
    /// Fraction of samples classified correctly while training, in [0, 1].
    pub train_acc: f64,
    pub wall_ms: f64,
}

/// Runs phase 1 then phase 2 on `data`, appending one JSON line per epoch
/// to `log` when given. Returns the epoch records.
pub fn train_two_phase(
    model: &mut Model<f32>,
    data: &[Sample],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<EpochLog>, TrainError> {
    let mut records = train_phase(model, data, &cfg.phase1, 1, cfg.rng_seed, log.as_mut().map(|w| &mut **w as &mut dyn Write))?;
    records.extend(train_phase(model, data, &cfg.phase2, 2, cfg.rng_seed, log)?);
    Ok(records)
}

/// One training phase. Samples are visited in a fresh seeded order every
/// epoch; a batch's gradient is the mean of its per-sample gradients.
///
/// When only the classifier head is trained, the frozen trunk is evaluated
/// once per sample and only the nodes downstream of trained parameters are
/// recomputed on later visits.
pub fn train_phase(
    model: &mut Model<f32>,
    data: &[Sample],
    phase: &PhaseConfig,
    phase_id: u8,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<EpochLog>, TrainError> {
    if phase.epochs == 0 {
        return Ok(Vec::new());
    }
    if data.is_empty() || phase.batch_size == 0 {
        return Err(TrainError::Config("training needs samples and a positive batch size".into()));
    }
    if !(phase.lr > 0.0 && phase.lr.is_finite()) {
        return Err(TrainError::Config(format!("learning rate must be positive, got {}", phase.lr)));
    }
    crate::tune_allocator();

    let wanted: Vec<bool> = model.params().iter().map(|p| p.trainable && phase.scope.includes(p.group)).collect();
    if !wanted.iter().any(|&w| w) {
        return Err(TrainError::Config(format!("phase {phase_id} has no parameters to train")));
    }
    let bn = if phase.scope == Scope::All { BnMode::Train } else { BnMode::Infer };
    let has_bn = model.spec().nodes.iter().any(|n| matches!(n.op, Op::Batchnorm));
    let batched = has_bn && bn == BnMode::Train;
    let live = model.live_nodes(&wanted);

    let mut cached = Vec::new();
    if phase.scope != Scope::All {
        let frontier = model.frontier(&live);
        for s in data {
            let mut t = model.trace(&s.input, Exec::Fast, BnMode::Infer)?;
            t.retain(&frontier);
            cached.push(t);
        }
    }

    let mut adam: Vec<Option<AdamState>> = vec![None; wanted.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(phase_id as u64));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(phase.epochs);

    for epoch in 1..=phase.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, batch) in order.chunks(phase.batch_size).enumerate() {
            let diverged = TrainError::Diverged {
                phase: phase_id,
                epoch,
                batch: b,
            };
            let mut grads: Vec<Option<Vec<f32>>> = vec![None; wanted.len()];
            if batched {
                let inputs: Vec<&Tensor<f32>> = batch.iter().map(|&i| &data[i].input).collect();
                let labels: Vec<usize> = batch.iter().map(|&i| data[i].label).collect();
                let x = crate::tensor::ops::concat_batch(&inputs)?;
                let trace = model.trace(&x, Exec::Fast, bn)?;
                let (loss, g) = softmax_cross_entropy(trace.logits(), &labels)?;
                if !loss.is_finite() {
                    return Err(diverged);
                }
                loss_sum += loss as f64 * batch.len() as f64;
                correct += argmax_rows(trace.logits()).iter().zip(&labels).filter(|(p, l)| p == l).count();
                accumulate(&mut grads, model.backward(&trace, &g, &wanted)?);
                model.commit_running_stats(&trace);
            } else {
                let scale = 1.0 / batch.len() as f32;
                for &i in batch {
                    let owned;
                    let trace = if cached.is_empty() {
                        owned = model.trace(&data[i].input, Exec::Fast, bn)?;
                        &owned
                    } else {
                        model.retrace(&mut cached[i], &data[i].input, &live, Exec::Fast, bn)?;
                        &cached[i]
                    };
                    let label = data[i].label;
                    let (loss, g) = softmax_cross_entropy(trace.logits(), &[label])?;
                    if !loss.is_finite() {
                        return Err(diverged);
                    }
                    loss_sum += loss as f64;
                    correct += usize::from(argmax_rows(trace.logits())[0] == label);
                    accumulate(&mut grads, model.backward(trace, &g.map(|v| v * scale), &wanted)?);
                }
            }
            for (k, g) in grads.into_iter().enumerate() {
                let Some(g) = g else { continue };
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TrainError::Diverged {
                        phase: phase_id,
                        epoch,
                        batch: b,
                    });
                }
                let w = model.params_mut()[k].tensor.data_mut();
                match phase.optimizer {
                    Optimizer::Sgd => sgd_step(w, &g, phase.lr)?,
                    Optimizer::Adam => {
                        let state = adam[k].get_or_insert_with(|| AdamState::new(g.len()));
                        adam_step(w, &g, state, phase.lr, AdamConfig::default())?
                    }
                }
            }
        }
        let record = EpochLog {
            phase: phase_id,
            epoch,
            loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        log::info!(
            "phase {} epoch {}: loss {:.4} acc {:.3} ({:.0} ms)",
            record.phase,
            record.epoch,
            record.loss,
            record.train_acc,
            record.wall_ms
        );
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(&record).expect("log record serializes");
            writeln!(w, "{line}").map_err(TrainError::io("training log"))?;
        }
        records.push(record);
    }
    Ok(records)
}

fn accumulate(into: &mut [Option<Vec<f32>>], grads: Vec<Option<Tensor<f32>>>) {
    for (slot, g) in into.iter_mut().zip(grads) {
        let Some(g) = g else { continue };
        match slot {
            Some(acc) => acc.iter_mut().zip(g.data()).for_each(|(a, v)| *a += v),
            None => *slot = Some(g.into_data()),
        }
    }
}
