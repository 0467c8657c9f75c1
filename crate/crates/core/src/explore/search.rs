use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mutate::{generate, MutationKind, MutationWeights};
use super::score::{netscore, ScoreWeights};
use super::ExploreError;
use crate::arch::{count_macs, count_params, indicator, ArchSpec, ConstraintSet, Violation};

/// Proxy accuracy source for candidate architectures.
pub trait Evaluator {
    /// Validation accuracy in percent, or `None` when training diverged.
    fn accuracy(&mut self, spec: &ArchSpec) -> Result<Option<f64>, ExploreError>;
}

impl<F> Evaluator for F
where
    F: FnMut(&ArchSpec) -> Result<Option<f64>, ExploreError>,
{
    fn accuracy(&mut self, spec: &ArchSpec) -> Result<Option<f64>, ExploreError> {
        self(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub spec: ArchSpec,
    pub accuracy_pct: f64,
    pub params: u64,
    pub macs: u64,
    /// `None` when the accuracy is zero and the score is undefined.
    pub score_u: Option<f64>,
    pub feasible: bool,
    pub violations: Vec<Violation>,
    /// Parent ids, nearest first.
    pub lineage: Vec<String>,
    /// Proxy training produced a non-finite loss.
    pub diverged: bool,
}

impl Candidate {
    pub fn hash(&self) -> String {
        self.spec.structural_hash()
    }
}

/// Scores one architecture: proxy accuracy, budget counters, NetScore and
/// the constraint indicator.
pub fn evaluate_candidate(
    id: &str,
    spec: &ArchSpec,
    lineage: Vec<String>,
    evaluator: &mut dyn Evaluator,
    constraints: &ConstraintSet,
    weights: ScoreWeights,
) -> Result<Candidate, ExploreError> {
    let params = count_params(spec)?;
    let macs = count_macs(spec)?;
    let check = indicator(spec, constraints)?;
    let (accuracy_pct, diverged) = match evaluator.accuracy(spec)? {
        Some(a) if a.is_finite() => (a.clamp(0.0, 100.0), false),
        _ => (0.0, true),
    };
    let score_u = (accuracy_pct > 0.0 && params > 0 && macs > 0)
        .then(|| netscore(accuracy_pct, params as f64 / 1e6, macs as f64 / 1e6, weights))
        .transpose()?;
    Ok(Candidate {
        id: id.to_owned(),
        spec: spec.clone(),
        accuracy_pct,
        params,
        macs,
        score_u,
        feasible: check.pass,
        violations: check.violations,
        lineage,
        diverged,
    })
}

/// Total order used for selection: feasible before infeasible; feasible by
/// score, infeasible by violation count then score; then fewer parameters,
/// fewer MACs and the structural hash.
pub fn compare(a: &Candidate, b: &Candidate) -> Ordering {
    let score = |c: &Candidate| c.score_u.unwrap_or(f64::NEG_INFINITY);
    b.feasible
        .cmp(&a.feasible)
        .then_with(|| {
            if a.feasible {
                Ordering::Equal
            } else {
                a.violations.len().cmp(&b.violations.len())
            }
        })
        .then_with(|| score(b).total_cmp(&score(a)))
        .then_with(|| a.params.cmp(&b.params))
        .then_with(|| a.macs.cmp(&b.macs))
        .then_with(|| a.hash().cmp(&b.hash()))
}

#[derive(Debug, Clone)]
pub struct SeedSet {
    pub seeds: Vec<(ArchSpec, String)>,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExploreConfig {
    /// Generation 0 evaluates the seeds (plus children to fill the
    /// population); each further generation mutates the survivors.
    pub generations: usize,
    pub population: usize,
    pub score: ScoreWeights,
    pub mutation: MutationWeights,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        Self {
            generations: 4,
            population: 8,
            score: ScoreWeights::default(),
            mutation: MutationWeights::default(),
        }
    }
}

/// Population and mutation distribution of a running search.
#[derive(Debug, Clone)]
pub struct GeneratorState {
    pub weights: MutationWeights,
    pub population: Vec<Candidate>,
    pub generation: usize,
}

/// One line of the search history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub generation: usize,
    pub id: String,
    pub parent: Option<String>,
    pub mutation: Option<MutationKind>,
    pub accuracy_pct: f64,
    pub params: u64,
    pub macs: u64,
    pub score_u: Option<f64>,
    pub feasible: bool,
    pub violations: Vec<String>,
    pub diverged: bool,
    pub hash: String,
}

#[derive(Debug, Clone)]
pub struct ExploreOutcome {
    pub best: Candidate,
    pub history: Vec<HistoryRecord>,
    /// Best feasible score seen up to and including each generation.
    pub best_per_generation: Vec<Option<f64>>,
}

/// Evolutionary (mu + lambda) search maximizing the score subject to the
/// constraint indicator. Every evaluated candidate is appended to `sink`
/// as one JSON line when a sink is given.
pub fn explore(
    seeds: &SeedSet,
    constraints: &ConstraintSet,
    config: &ExploreConfig,
    evaluator: &mut dyn Evaluator,
    mut sink: Option<&mut dyn Write>,
) -> Result<ExploreOutcome, ExploreError> {
    if seeds.seeds.is_empty() {
        return Err(ExploreError::Config("at least one seed is required".into()));
    }
    if config.generations == 0 || config.population == 0 {
        return Err(ExploreError::Config("generations and population must be >= 1".into()));
    }
    config.mutation.normalized()?;
    constraints.validate().map_err(ExploreError::Config)?;
    for (spec, _) in &seeds.seeds {
        crate::arch::infer_shapes(spec)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seeds.rng_seed);
    let mut cache: HashMap<String, Candidate> = HashMap::new();
    let mut state = GeneratorState {
        weights: config.mutation,
        population: Vec::new(),
        generation: 0,
    };
    let mut history = Vec::new();
    let mut best: Option<Candidate> = None;
    let mut best_per_generation = Vec::with_capacity(config.generations);
    let survivors = (config.population / 2).max(1);

    let mut evaluate = |id: String,
                        spec: &ArchSpec,
                        lineage: Vec<String>,
                        mutation: Option<MutationKind>,
                        generation: usize,
                        history: &mut Vec<HistoryRecord>|
     -> Result<Candidate, ExploreError> {
        let hash = spec.structural_hash();
        let candidate = match cache.get(&hash) {
            Some(c) => Candidate {
                id: id.clone(),
                spec: spec.clone(),
                lineage: lineage.clone(),
                ..c.clone()
            },
            None => {
                let c = evaluate_candidate(&id, spec, lineage.clone(), evaluator, constraints, config.score)?;
                cache.insert(hash.clone(), c.clone());
                c
            }
        };
        let record = HistoryRecord {
            generation,
            id,
            parent: lineage.first().cloned(),
            mutation,
            accuracy_pct: candidate.accuracy_pct,
            params: candidate.params,
            macs: candidate.macs,
            score_u: candidate.score_u,
            feasible: candidate.feasible,
            violations: candidate.violations.iter().map(|v| v.id.clone()).collect(),
            diverged: candidate.diverged,
            hash,
        };
        if let Some(w) = sink.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record).map_err(|e| ExploreError::Io(e.into()))?;
            w.write_all(b"\n")?;
        }
        history.push(record);
        Ok(candidate)
    };

    for generation in 0..config.generations {
        state.generation = generation;
        let mut next: Vec<Candidate> = Vec::new();
        if generation == 0 {
            for (k, (spec, label)) in seeds.seeds.iter().enumerate() {
                let id = if label.is_empty() { format!("seed{k}") } else { label.clone() };
                next.push(evaluate(id, spec, Vec::new(), None, 0, &mut history)?);
            }
        } else {
            state.population.sort_by(compare);
            state.population.truncate(survivors);
            next = state.population.clone();
        }
        let parents = next.clone();
        let mut k = 0;
        while next.len() < config.population {
            let parent = &parents[k % parents.len()];
            let (child, kind) = generate(&parent.spec, &state.weights, &mut rng)?;
            let mut lineage = vec![parent.id.clone()];
            lineage.extend(parent.lineage.iter().cloned());
            let id = format!("g{generation}c{k}");
            next.push(evaluate(id, &child, lineage, Some(kind), generation, &mut history)?);
            k += 1;
        }
        for c in next.iter().filter(|c| c.feasible && c.score_u.is_some()) {
            if best.as_ref().is_none_or(|b| compare(c, b) == Ordering::Less) {
                best = Some(c.clone());
            }
        }
        best_per_generation.push(best.as_ref().and_then(|b| b.score_u));
        state.population = next;
    }

    match best {
        Some(best) => Ok(ExploreOutcome {
            best,
            history,
            best_per_generation,
        }),
        None => {
            let mut pool = state.population;
            pool.sort_by(compare);
            let nearest = pool.into_iter().next().expect("population is non-empty");
            Err(ExploreError::NoFeasible {
                candidate: nearest.id,
                violations: nearest.violations,
            })
        }
    }
}
