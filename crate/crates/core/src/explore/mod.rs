//! Constrained architecture search: a seeded mutation generator, a scalar
//! quality score and an evolutionary loop that keeps the best candidate
//! passing the constraint indicator.

mod mutate;
mod score;
mod search;

use thiserror::Error;

use crate::arch::{ArchError, Violation};

pub use mutate::{generate, mutate, MutationKind, MutationWeights, MAX_ATTEMPTS, MAX_WIDTH, MIN_WIDTH, MUTATION_KINDS};
pub use score::{netscore, ScoreWeights};
pub use search::{
    compare, evaluate_candidate, explore, Candidate, Evaluator, ExploreConfig, ExploreOutcome, GeneratorState, HistoryRecord,
    SeedSet,
};

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error("score: {0}")]
    Score(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no valid mutation of `{parent}` after {attempts} attempts")]
    Exhausted { parent: String, attempts: usize },
    #[error("no feasible architecture; nearest miss `{candidate}` violates: {}", .violations.iter().map(|v| v.id.as_str()).collect::<Vec<_>>().join(", "))]
    NoFeasible { candidate: String, violations: Vec<Violation> },
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
