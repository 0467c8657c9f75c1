//! Dataset ingestion, a procedural EL-cell image generator, optimizers, the
//! two-phase training protocol and evaluation metrics.

mod data;
mod eval;
mod optim;
mod proxy;
mod synth;
mod trainer;

use thiserror::Error;

use crate::arch::ArchError;
use crate::TensorError;

pub use data::{
    binarize_label, binarize_label_with, image_to_tensor, load_image, load_manifest, load_samples, split_dataset, CellType,
    DefectClass, Sample, SampleRecord, Split, DEFECT_THRESHOLD, PROBABILITY_LEVELS,
};
pub use eval::{evaluate, evaluate_records, EvalFailure, EvalReport};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState};
pub use proxy::{ProxyConfig, ProxyEvaluator};
pub use synth::{synth_dataset, synth_image, synth_samples, SynthImage};
pub use trainer::{train_phase, train_two_phase, EpochLog, Optimizer, PhaseConfig, Scope, TrainConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("i/o error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {msg}")]
    Image { path: String, msg: String },
    #[error("manifest {path}: {}", .issues.iter().map(|(l, m)| format!("line {l}: {m}")).collect::<Vec<_>>().join("; "))]
    Manifest { path: String, issues: Vec<(usize, String)> },
    #[error("split: {0}")]
    Split(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss in phase {phase}, epoch {epoch}, batch {batch}")]
    Diverged { phase: u8, epoch: usize, batch: usize },
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl TrainError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.as_ref().display().to_string();
        move |source| Self::Io { path, source }
    }
}
