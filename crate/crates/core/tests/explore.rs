use std::collections::HashMap;

use celldefect::arch::{count_macs, count_params, indicator, reference_layout, reference_spec, ArchSpec, ConstraintSet, ReferenceWidths};
use celldefect::explore::{explore, netscore, Candidate, ExploreConfig, ExploreError, ScoreWeights, SeedSet};

/// Reference-style network roughly ten times over the compute budget.
fn heavy_spec() -> ArchSpec {
    let mut spec = reference_layout(&ReferenceWidths {
        stem: 48,
        column: 64,
        merge: 192,
        tail: vec![vec![256], vec![256, 256], vec![256, 256, 256]],
    })
    .unwrap();
    spec.name = "heavy".into();
    spec
}

fn toy_pool() -> (SeedSet, HashMap<String, f64>) {
    let a = reference_spec();
    let b = heavy_spec();
    let acc = HashMap::from([(a.structural_hash(), 80.0), (b.structural_hash(), 85.0)]);
    (
        SeedSet {
            seeds: vec![(a, "A".into()), (b, "B".into())],
            rng_seed: 7,
        },
        acc,
    )
}

fn table_evaluator(acc: HashMap<String, f64>) -> impl FnMut(&ArchSpec) -> Result<Option<f64>, ExploreError> {
    move |spec: &ArchSpec| Ok(Some(*acc.get(&spec.structural_hash()).unwrap_or(&50.0)))
}

#[test]
fn toy_pool_returns_the_feasible_maximizer() {
    let (seeds, acc) = toy_pool();
    let b = &seeds.seeds[1].0;
    assert!(count_macs(b).unwrap() > 120_000_000);
    assert!(!indicator(b, &ConstraintSet::default()).unwrap().pass);
    let wide = ConstraintSet {
        flops_center: count_macs(b).unwrap() as f64,
        ..Default::default()
    };
    assert!(indicator(b, &wide).unwrap().pass);

    let config = ExploreConfig {
        generations: 1,
        population: 2,
        ..Default::default()
    };
    let mut eval = table_evaluator(acc);
    let out = explore(&seeds, &ConstraintSet::default(), &config, &mut eval, None).unwrap();
    assert_eq!(out.best.id, "A");
    let a = &seeds.seeds[0].0;
    let expected = netscore(
        80.0,
        count_params(a).unwrap() as f64 / 1e6,
        count_macs(a).unwrap() as f64 / 1e6,
        ScoreWeights::default(),
    )
    .unwrap();
    assert_eq!(out.best.score_u, Some(expected));
    assert_eq!(out.history.len(), 2);
    // B scores higher but is infeasible.
    let b_rec = out.history.iter().find(|r| r.id == "B").unwrap();
    assert!(!b_rec.feasible);
    assert_eq!(b_rec.violations, vec!["flops-budget".to_string()]);
}

fn run(seed: u64) -> (Candidate, Vec<u8>, Vec<Option<f64>>) {
    let (mut seeds, acc) = toy_pool();
    seeds.rng_seed = seed;
    let config = ExploreConfig {
        generations: 3,
        population: 4,
        ..Default::default()
    };
    let mut eval = table_evaluator(acc);
    let mut log = Vec::new();
    let out = explore(&seeds, &ConstraintSet::default(), &config, &mut eval, Some(&mut log)).unwrap();
    (out.best, log, out.best_per_generation)
}

#[test]
fn search_is_reproducible_and_monotone() {
    let (best, log, curve) = run(11);
    let (best2, log2, _) = run(11);
    assert_eq!(best, best2);
    assert_eq!(log, log2);
    assert!(indicator(&best.spec, &ConstraintSet::default()).unwrap().pass);
    let scores: Vec<f64> = curve.iter().map(|s| s.unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[1] >= w[0]), "{scores:?}");
    let lines = String::from_utf8(log).unwrap();
    assert_eq!(lines.lines().count(), 2 + 2 + 2 + 2);
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["generation", "id", "parent", "accuracy_pct", "params", "macs", "score_u", "feasible", "violations"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}

#[test]
fn infeasible_pool_reports_nearest_miss() {
    let seeds = SeedSet {
        seeds: vec![(heavy_spec(), "B".into())],
        rng_seed: 1,
    };
    let config = ExploreConfig {
        generations: 1,
        population: 1,
        ..Default::default()
    };
    let mut eval = |_: &ArchSpec| Ok(Some(70.0));
    match explore(&seeds, &ConstraintSet::default(), &config, &mut eval, None) {
        Err(ExploreError::NoFeasible { candidate, violations }) => {
            assert_eq!(candidate, "B");
            assert_eq!(violations[0].id, "flops-budget");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn diverged_candidates_score_nothing() {
    let seeds = SeedSet {
        seeds: vec![(reference_spec(), "A".into())],
        rng_seed: 1,
    };
    let config = ExploreConfig {
        generations: 1,
        population: 1,
        ..Default::default()
    };
    let mut eval = |_: &ArchSpec| Ok(None);
    let err = explore(&seeds, &ConstraintSet::default(), &config, &mut eval, None).unwrap_err();
    assert!(matches!(err, ExploreError::NoFeasible { .. }));
}
