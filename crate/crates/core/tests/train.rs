mod common;

use std::fs;

use celldefect::arch::Model;
use celldefect::bench::predict;
use celldefect::condenser::Exec;
use celldefect::ParamGroup;
use celldefect::train::{
    evaluate, load_manifest, synth_dataset, synth_samples, train_phase, train_two_phase, DefectClass, EpochLog, Optimizer,
    PhaseConfig, Scope, TrainConfig, TrainError,
};

fn all_params(lr: f32, epochs: usize) -> PhaseConfig {
    PhaseConfig { optimizer: Optimizer::Adam, lr, epochs, batch_size: 16, scope: Scope::All }
}

#[test]
fn two_phase_run_logs_one_line_per_epoch() {
    let spec = celldefect::arch::reference_spec();
    let data = synth_samples(32, 0.5, 3, &spec).unwrap();
    let mut model = Model::<f32>::instantiate(&spec, 0).unwrap();
    let mut sink = Vec::new();
    let records = train_two_phase(&mut model, &data, &TrainConfig::default().with_epochs(1, 1), Some(&mut sink)).unwrap();
    assert_eq!(records.iter().map(|r| (r.phase, r.epoch)).collect::<Vec<_>>(), [(1, 1), (2, 1)]);
    let lines: Vec<EpochLog> =
        String::from_utf8(sink).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), records.len());
    for (a, b) in lines.iter().zip(&records) {
        assert_eq!((a.phase, a.epoch), (b.phase, b.epoch));
        assert!((a.loss - b.loss).abs() <= 1e-12 * b.loss.abs());
    }
    assert!(records.iter().all(|r| r.loss.is_finite() && (0.0..=1.0).contains(&r.train_acc)));
}

#[test]
fn classifier_head_phase_leaves_trunk_untouched() {
    let spec = celldefect::arch::reference_spec();
    let data = synth_samples(16, 0.5, 4, &spec).unwrap();
    let mut model = Model::<f32>::instantiate(&spec, 0).unwrap();
    let before = model.clone();
    train_phase(&mut model, &data, &TrainConfig::default().with_epochs(2, 0).phase1, 1, 0, None).unwrap();
    for (old, new) in before.params().iter().zip(model.params()) {
        let moved = old.tensor.data() != new.tensor.data();
        assert_eq!(moved, old.group == ParamGroup::FullyConnected, "{}", old.name);
    }
}

#[test]
fn small_network_separates_synthetic_classes() {
    let spec = common::small_cnn();
    let train = synth_samples(256, 0.5, 11, &spec).unwrap();
    let test = synth_samples(64, 0.5, 12, &spec).unwrap();
    let mut model = Model::<f32>::instantiate(&spec, 1).unwrap();
    train_phase(&mut model, &train, &all_params(3e-3, 5), 1, 0, None).unwrap();
    let report = evaluate(&model, &test).unwrap();
    println!("held-out accuracy {:.2}%", report.accuracy_pct);
    assert!(report.accuracy_pct >= 90.0, "{report:?}");
}

#[test]
fn overfits_a_tiny_set_and_predicts_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let records = synth_dataset(16, 0.5, 21, dir.path()).unwrap();
    let spec = common::small_cnn();
    let data = celldefect::train::load_samples(&records, &spec).unwrap();
    let mut model = Model::<f32>::instantiate(&spec, 2).unwrap();
    let log = train_phase(&mut model, &data, &all_params(3e-3, 25), 1, 0, None).unwrap();
    let smooth = |xs: &[EpochLog]| xs.iter().map(|r| r.loss).sum::<f64>() / xs.len() as f64;
    assert!(smooth(&log[log.len() - 3..]) < 0.5 * smooth(&log[..3]), "{log:?}");
    assert_eq!(evaluate(&model, &data).unwrap().accuracy_pct, 100.0);
    let defective = records.iter().find(|r| r.class() == DefectClass::Defective).unwrap();
    let p = predict(&model, &defective.image_path).unwrap();
    assert_eq!(p.class, DefectClass::Defective);
    assert_eq!(p.exit_code(), 2);
    assert_eq!(model.classify(&data[0].input, Exec::Reference).unwrap(), [data[0].label]);
}

#[test]
fn synthetic_dataset_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = synth_dataset(6, 0.5, 5, a.path()).unwrap();
    let rb = synth_dataset(6, 0.5, 5, b.path()).unwrap();
    for (x, y) in ra.iter().zip(&rb) {
        assert_eq!(fs::read(&x.image_path).unwrap(), fs::read(&y.image_path).unwrap());
    }
    let loaded = load_manifest(a.path().join("manifest.csv")).unwrap();
    assert_eq!(loaded.len(), 6);
    assert_eq!(loaded.iter().filter(|r| r.class() == DefectClass::Defective).count(), 3);
}

#[test]
fn manifest_problems_are_reported_per_line() {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(2, 0.5, 1, dir.path()).unwrap();
    let path = dir.path().join("bad.csv");
    fs::write(
        &path,
        "path,probability,type\ncell_00000.png,0.0,mono\nmissing.png,1.0,poly\ncell_00001.png,0.5,poly\ncell_00001.png,1.0,amorphous\n",
    )
    .unwrap();
    match load_manifest(&path) {
        Err(TrainError::Manifest { issues, .. }) => {
            assert_eq!(issues.iter().map(|(line, _)| *line).collect::<Vec<_>>(), [3, 4, 5], "{issues:?}");
        }
        other => panic!("expected manifest error, got {other:?}"),
    }
    fs::write(&path, "file,label\nx.png,1\n").unwrap();
    assert!(matches!(load_manifest(&path), Err(TrainError::Manifest { .. })));
}
