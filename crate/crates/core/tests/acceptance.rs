//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion to the
//! real stderr (bypassing the harness capture) and fails if any criterion
//! fails.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use celldefect::arch::weights::{decode, encode, load_weights, model_from_tensors, save_weights};
use celldefect::arch::{
    count_macs, count_params, indicator, reference_layout, reference_spec, ArchSpec, ConstraintSet, Model, Op,
    ReferenceWidths, OP_KINDS,
};
use celldefect::bench::{bench_latency, predict_tensor, report_table, ReportRow};
use celldefect::condenser::Exec;
use celldefect::explore::{explore, netscore, ExploreConfig, ExploreError, ScoreWeights, SeedSet};
use celldefect::tensor::{counter, ops};
use celldefect::train::{
    evaluate, synth_samples, train_phase, ProxyConfig, ProxyEvaluator, Sample, TrainConfig,
};
use celldefect::{ParamGroup, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(start: Instant, limit: Duration, detail: String) -> Outcome {
    let t = start.elapsed();
    ensure(t < limit, format!("{detail}; {:.1}s of {}s allowed", t.as_secs_f64(), limit.as_secs()))
}

fn budget_reproduction() -> Outcome {
    let t = Instant::now();
    let spec = reference_spec();
    let params = count_params(&spec).unwrap();
    let macs = count_macs(&spec).unwrap();
    let check = indicator(&spec, &ConstraintSet::default()).unwrap();
    ensure(
        (328_000..=492_000).contains(&params) && (92_000_000..=138_000_000).contains(&macs) && check.pass,
        format!("params {params}, MACs {macs}, check {}", if check.pass { "passes" } else { "fails" }),
    )?;
    within(t, Duration::from_secs(1), format!("params {params}, MACs {macs}, check passes"))
}

fn input_for(spec: &ArchSpec, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.input_shape();
    Tensor::from_vec(s, (0..s.numel()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn counter_oracle() -> Outcome {
    let t = Instant::now();
    let specs: Vec<ArchSpec> = (0..12).map(common::random_spec).collect();
    for kind in OP_KINDS {
        ensure(specs.iter().all(|s| s.nodes.iter().any(|n| n.op.kind() == kind)), format!("{kind} not covered"))?;
    }
    for (i, spec) in specs.iter().enumerate() {
        let model = Model::<f32>::instantiate(spec, i as u64).unwrap();
        let x = input_for(spec, i as u64);
        let (out, counted) = counter::measure(|| model.forward(&x, Exec::Reference));
        out.unwrap();
        let analytic = count_macs(spec).unwrap();
        ensure(analytic == counted, format!("spec {i}: analytic {analytic} vs counted {counted}"))?;
        let (p, q) = (count_params(spec).unwrap(), model.trainable_count());
        ensure(p == q, format!("spec {i}: analytic params {p} vs trainable {q}"))?;
    }
    within(t, Duration::from_secs(60), format!("{} random specs exact, all {} op kinds covered", specs.len(), OP_KINDS.len()))
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for (name, case) in common::grad_cases::CASES {
        worst = worst.max(common::grad_cases::check(name, *case)?);
    }
    within(
        t,
        Duration::from_secs(120),
        format!(
            "{} ops x {} instances, worst relative error {worst:.2e}",
            common::grad_cases::CASES.len(),
            common::grad_cases::INSTANCES
        ),
    )
}

/// Feasible variants of the reference layout plus two over-budget ones.
fn pool() -> Vec<(&'static str, ArchSpec, f64)> {
    let tail = |stages: &[&[usize]]| stages.iter().map(|s| s.to_vec()).collect::<Vec<_>>();
    let variant = |stem, column, merge, t: Vec<Vec<usize>>| {
        reference_layout(&ReferenceWidths { stem, column, merge, tail: t }).unwrap()
    };
    let full = tail(&[&[256], &[256, 256], &[256, 256, 256]]);
    vec![
        ("reference", reference_spec(), 80.0),
        ("slim-tail", variant(12, 16, 64, tail(&[&[192], &[192, 192], &[192, 192]])), 78.0),
        ("narrow-merge", variant(12, 16, 48, full.clone()), 81.0),
        ("wide-column", variant(12, 20, 64, tail(&[&[256], &[256, 256], &[256]])), 79.5),
        ("thin-stem", variant(9, 16, 64, full.clone()), 77.0),
        ("wide-stem", variant(15, 16, 64, full.clone()), 88.0),
        ("heavy", variant(48, 64, 192, full), 90.0),
    ]
}

fn inject_strided_pointwise(spec: &ArchSpec) -> ArchSpec {
    let mut out = spec.clone();
    let node = out.nodes.iter_mut().rev().find(|n| matches!(n.op, Op::PointwiseConv { .. })).unwrap();
    if let Op::PointwiseConv { stride, .. } = &mut node.op {
        *stride = 2;
    }
    out
}

fn constraint_indicator() -> Outcome {
    let t = Instant::now();
    let c = ConstraintSet::default();
    let mut flipped = 0;
    for (name, spec, _) in pool() {
        if !indicator(&spec, &c).unwrap().pass {
            continue;
        }
        let r = indicator(&inject_strided_pointwise(&spec), &c).unwrap();
        ensure(!r.pass && r.violations.iter().any(|v| v.id == "pointwise-strided"), format!("{name} not flipped"))?;
        flipped += 1;
    }
    let (stem, spec) = (12..64)
        .map(|stem| {
            let mut w = ReferenceWidths::default();
            w.stem = stem;
            (stem, reference_layout(&w).unwrap())
        })
        .min_by_key(|(_, s)| count_macs(s).unwrap().abs_diff(130_000_000))
        .unwrap();
    let macs = count_macs(&spec).unwrap();
    ensure(macs.abs_diff(130_000_000) < 5_000_000, format!("closest widened spec has {macs} MACs"))?;
    let r = indicator(&spec, &c).unwrap();
    ensure(!r.pass && r.violations.iter().any(|v| v.id == "flops-budget"), format!("{macs} MACs not rejected"))?;
    within(
        t,
        Duration::from_secs(10),
        format!("{flipped} passing specs flipped by a strided pointwise conv; stem {stem} ({macs} MACs) fails flops-budget"),
    )
}

/// Direct form of the score used as an oracle: 20 log10(a^2 / sqrt(p m)).
fn score_oracle(a: f64, p: f64, m: f64) -> f64 {
    20.0 * (a * a / (p * m).sqrt()).log10()
}

fn explorer() -> Outcome {
    let t = Instant::now();
    let c = ConstraintSet::default();
    let pool = pool();
    let mut expected: Vec<(f64, &str)> = pool
        .iter()
        .filter(|(_, s, _)| indicator(s, &c).unwrap().pass)
        .map(|(n, s, a)| (score_oracle(*a, count_params(s).unwrap() as f64 / 1e6, count_macs(s).unwrap() as f64 / 1e6), *n))
        .collect();
    expected.sort_by(|a, b| b.0.total_cmp(&a.0));
    ensure(expected.len() >= 2 && expected[0].0 > expected[1].0, "toy pool has no unique maximizer".into())?;
    let table: Vec<(String, f64)> = pool.iter().map(|(_, s, a)| (s.structural_hash(), *a)).collect();
    let mut lookup = move |s: &ArchSpec| -> Result<Option<f64>, ExploreError> {
        let h = s.structural_hash();
        Ok(table.iter().find(|(k, _)| *k == h).map(|(_, a)| *a))
    };
    let seeds = SeedSet { seeds: pool.iter().map(|(n, s, _)| (s.clone(), (*n).to_owned())).collect(), rng_seed: 3 };
    let config = ExploreConfig { generations: 1, population: pool.len(), ..Default::default() };
    let out = explore(&seeds, &c, &config, &mut lookup, None).map_err(|e| e.to_string())?;
    ensure(out.best.id == expected[0].1, format!("explore picked {}, oracle {}", out.best.id, expected[0].1))?;
    let got = out.best.score_u.unwrap();
    ensure((got - expected[0].0).abs() < 1e-9, format!("score {got} vs oracle {}", expected[0].0))?;

    let spec = reference_spec();
    let val = synth_samples(8, 0.5, 41, &spec).map_err(|e| e.to_string())?;
    let mut proxy = ProxyConfig::default();
    proxy.phase.epochs = 0;
    let run = || {
        let mut evaluator = ProxyEvaluator::new(val.clone(), val.clone(), proxy);
        let seeds = SeedSet { seeds: vec![(spec.clone(), "reference".into())], rng_seed: 9 };
        let config = ExploreConfig { generations: 3, population: 4, ..Default::default() };
        let mut log = Vec::new();
        let out = explore(&seeds, &c, &config, &mut evaluator, Some(&mut log)).unwrap();
        (out, log)
    };
    let (a, log_a) = run();
    let (_, log_b) = run();
    ensure(log_a == log_b, "reruns differ".into())?;
    let curve: Vec<f64> = a.best_per_generation.iter().map(|s| s.unwrap_or(f64::NEG_INFINITY)).collect();
    ensure(curve.windows(2).all(|w| w[1] >= w[0]), format!("best-so-far decreased: {curve:?}"))?;
    ensure(indicator(&a.best.spec, &c).unwrap().pass, "returned best violates the indicator".into())?;
    within(
        t,
        Duration::from_secs(300),
        format!(
            "toy pool maximizer {} (U {got:.2}); {} proxy candidates bitwise reproducible, best-so-far non-decreasing",
            out.best.id,
            a.history.len()
        ),
    )
}

fn netscore_arithmetic() -> Outcome {
    let u = netscore(86.28, 0.41, 115.0, ScoreWeights::default()).unwrap();
    let oracle = score_oracle(86.28, 0.41, 115.0);
    ensure((u - 60.70).abs() <= 0.01 && (u - oracle).abs() < 1e-9, format!("U = {u:.4}, oracle {oracle:.4}"))
}

fn latency_ordering() -> Outcome {
    let t = Instant::now();
    let mut medians = Vec::new();
    let mut macs = Vec::new();
    for side in [128, 256, 512] {
        let mut spec = reference_spec();
        spec.input_shape = [1, 1, side, side];
        let model = Model::<f32>::instantiate(&spec, 0).unwrap();
        let report = bench_latency(&model, 7, 2, 0).map_err(|e| e.to_string())?;
        medians.push(report.median_ms);
        macs.push(report.macs);
    }
    let ratios: Vec<String> = macs.iter().map(|m| format!("{:.2}", *m as f64 / macs[0] as f64)).collect();
    ensure(
        medians.windows(2).all(|w| w[1] > w[0]),
        format!("medians {medians:.2?} ms not strictly increasing"),
    )?;
    let row = |name: &str, acc, params_m: f64, macs_m: f64, rt| ReportRow {
        name: name.into(),
        accuracy_pct: Some(acc),
        params: (params_m * 1e6).round() as u64,
        macs: (macs_m * 1e6).round() as u64,
        runtime_s: Some(rt),
    };
    let rows = [
        row("VGG-19", 85.06, 140.0, 34570.0, 10.893),
        row("EfficientNet-B0", 85.37, 5.3, 1397.0, 4.479),
        row("MnasNet", 83.69, 3.9, 1074.0, 3.746),
        row("CellDefectNet", 86.28, 0.41, 115.0, 0.347),
    ];
    let table = report_table(&rows, Some(0)).map_err(|e| e.to_string())?;
    let last = table.lines().last().unwrap_or_default().to_owned();
    ensure(
        table.contains("341.46×") && table.contains("~300×") && table.contains("31.39× faster"),
        format!("ratio line: {last}"),
    )?;
    within(
        t,
        Duration::from_secs(120),
        format!("MAC ratios 1:{}:{} medians {medians:.1?} ms; {}", ratios[1], ratios[2], last.split_whitespace().collect::<Vec<_>>().join(" ")),
    )
}

fn non_fc_unchanged(before: &Model<f32>, after: &Model<f32>) -> bool {
    before
        .params()
        .iter()
        .zip(after.params())
        .filter(|(p, _)| p.group != ParamGroup::FullyConnected)
        .all(|(a, b)| a.tensor.data().iter().map(|v| v.to_bits()).eq(b.tensor.data().iter().map(|v| v.to_bits())))
}

/// Trains with the two-phase protocol, checking the phase-1 freeze.
fn two_phase(spec: &ArchSpec, data: &[Sample], cfg: &TrainConfig) -> Result<Model<f32>, String> {
    let mut model = Model::<f32>::instantiate(spec, 0).unwrap();
    let init = model.clone();
    train_phase(&mut model, data, &cfg.phase1, 1, cfg.rng_seed, None).map_err(|e| e.to_string())?;
    ensure(non_fc_unchanged(&init, &model), "phase 1 moved a non-classifier parameter".into())?;
    train_phase(&mut model, data, &cfg.phase2, 2, cfg.rng_seed, None).map_err(|e| e.to_string())?;
    Ok(model)
}

fn training_protocol(trained: &mut Option<(Model<f32>, Vec<Sample>)>) -> Outcome {
    let t = Instant::now();
    let spec = reference_spec();
    let cfg = TrainConfig::default().with_epochs(30, 30);
    let subset = synth_samples(32, 0.5, 8, &spec).map_err(|e| e.to_string())?;
    let small = two_phase(&spec, &subset, &cfg)?;
    let fit = evaluate(&small, &subset).map_err(|e| e.to_string())?.accuracy_pct;
    let train = synth_samples(256, 0.5, 11, &spec).map_err(|e| e.to_string())?;
    let test = synth_samples(64, 0.5, 12, &spec).map_err(|e| e.to_string())?;
    let model = two_phase(&spec, &train, &cfg)?;
    let held_out = evaluate(&model, &test).map_err(|e| e.to_string())?.accuracy_pct;
    *trained = Some((model, test));
    let detail = format!("phase 1 froze the trunk; 32-sample fit {fit:.2}%, held-out {held_out:.2}% on 256/64");
    ensure(fit >= 95.0 && held_out >= 85.0, detail.clone())?;
    within(t, Duration::from_secs(15 * 60), detail)
}

fn with_blur(spec: &ArchSpec, size: usize) -> ArchSpec {
    let mut out = spec.clone();
    for n in &mut out.nodes {
        if let Op::Aads { blur_size, .. } = &mut n.op {
            *blur_size = size;
        }
    }
    out
}

/// Mean over images and shifts of 1 - |p(shifted) - p(original)| for the
/// defective-class probability, and the fraction of unchanged labels.
fn consistency(model: &Model<f32>, images: &[Sample], shifts: &[(isize, isize)]) -> (f64, f64) {
    let (mut prob, mut label, mut n) = (0.0, 0.0, 0.0);
    for s in images {
        let base = predict_tensor(model, &s.input).unwrap();
        for &(dy, dx) in shifts {
            let p = predict_tensor(model, &ops::roll(&s.input, dy, dx)).unwrap();
            prob += 1.0 - (p.probabilities[1] - base.probabilities[1]).abs();
            label += f64::from(u8::from(p.class == base.class));
            n += 1.0;
        }
    }
    (prob / n, label / n)
}

fn shift_consistency(trained: &Option<(Model<f32>, Vec<Sample>)>) -> Outcome {
    let t = Instant::now();
    let (model, _) = trained.as_ref().ok_or("needs the trained reference model")?;
    let spec = model.spec().clone();
    let naive = model_from_tensors(&with_blur(&spec, 1), decode(&encode(model)).unwrap()).unwrap();
    let images = synth_samples(32, 0.5, 31, &spec).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shifts: Vec<(isize, isize)> = (0..16).map(|_| (rng.random_range(1..=8i32) as isize, rng.random_range(1..=8i32) as isize)).collect();
    let (aa, aa_label) = consistency(model, &images, &shifts);
    let (nv, nv_label) = consistency(&naive, &images, &shifts);
    let detail = format!(
        "probability consistency {aa:.4} anti-aliased vs {nv:.4} strided; labels {:.1}% vs {:.1}%",
        aa_label * 100.0,
        nv_label * 100.0
    );
    ensure(aa > nv, detail.clone())?;
    within(t, Duration::from_secs(300), detail)
}

fn serialization(trained: &Option<(Model<f32>, Vec<Sample>)>) -> Outcome {
    let t = Instant::now();
    let (model, test) = trained.as_ref().ok_or("needs the trained reference model")?;
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    save_weights(model, &a).unwrap();
    let loaded = load_weights(model.spec(), &a).unwrap();
    save_weights(&loaded, &b).unwrap();
    let (ba, bb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    ensure(ba == bb, "weights changed across a round trip".into())?;
    let (ra, rb) = (evaluate(model, test).unwrap(), evaluate(&loaded, test).unwrap());
    ensure(ra == rb, format!("reports differ: {ra:?} vs {rb:?}"))?;
    within(t, Duration::from_secs(30), format!("{} weight bytes identical, eval reports identical", ba.len()))
}

fn run(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    })
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "budget reproduction", run(budget_reproduction)),
        (2, "counter oracle", run(counter_oracle)),
        (3, "gradient suite", run(gradient_suite)),
        (4, "constraint indicator", run(constraint_indicator)),
        (6, "explorer correctness", run(explorer)),
        (7, "netscore arithmetic", run(netscore_arithmetic)),
        (9, "latency ordering", run(latency_ordering)),
    ];
    let mut trained = None;
    results.push((8, "training protocol", run(|| training_protocol(&mut trained))));
    results.push((5, "shift consistency", run(|| shift_consistency(&trained))));
    results.push((10, "serialization", run(|| serialization(&trained))));
    results.sort_by_key(|r| r.0);

    let mut err = std::io::stderr().lock();
    let mut failed = Vec::new();
    for (n, name, outcome) in &results {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed.push(*n);
                ("FAIL", d)
            }
        };
        writeln!(err, "criterion {n:>2} {tag} {name}: {detail}").unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
