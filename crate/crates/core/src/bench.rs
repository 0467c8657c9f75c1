//! Batch-1 latency measurement, complexity tables and single-image
//! inspection.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{argmax_rows, count_macs, count_params, ArchError, Model};
use crate::condenser::Exec;
use crate::tensor::ops::softmax_rows;
use crate::train::{load_image, DefectClass, EvalReport, TrainError};
use crate::Tensor;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("benchmark needs runs >= 3 and warmup >= 1 (got runs {runs}, warmup {warmup})")]
    Budget { runs: usize, warmup: usize },
    #[error("report needs at least one row")]
    EmptyReport,
    #[error("baseline row {0} does not exist")]
    Baseline(usize),
    #[error("model output has {0} classes, expected 2")]
    Classes(usize),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub spec_id: String,
    pub runs: usize,
    pub warmup: usize,
    /// One entry per timed run, warmup excluded.
    pub latencies_ms: Vec<f64>,
    pub median_ms: f64,
    pub p90_ms: f64,
    pub mean_ms: f64,
    pub host: String,
    pub macs: u64,
    pub params: u64,
}

impl BenchReport {
    /// Builds a report whose statistics derive from `latencies_ms` alone.
    pub fn from_latencies(
        spec_id: impl Into<String>,
        warmup: usize,
        latencies_ms: Vec<f64>,
        host: impl Into<String>,
        macs: u64,
        params: u64,
    ) -> Self {
        Self {
            spec_id: spec_id.into(),
            runs: latencies_ms.len(),
            warmup,
            median_ms: median(&latencies_ms),
            p90_ms: percentile(&latencies_ms, 0.9),
            mean_ms: if latencies_ms.is_empty() {
                f64::NAN
            } else {
                latencies_ms.iter().sum::<f64>() / latencies_ms.len() as f64
            },
            latencies_ms,
            host: host.into(),
            macs,
            params,
        }
    }
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Middle value; the mean of the two middle values for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    let v = sorted(xs);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// Nearest-rank percentile, `q` in (0, 1].
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    let v = sorted(xs);
    if v.is_empty() {
        return f64::NAN;
    }
    let rank = (q * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Operating system, architecture, CPU model and logical core count.
pub fn host_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_owned())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{} {cpu} ({cores} logical cores)", std::env::consts::OS, std::env::consts::ARCH)
}

/// Times single-threaded inference on one fixed pseudo-random input.
pub fn bench_latency(model: &Model<f32>, runs: usize, warmup: usize, seed: u64) -> Result<BenchReport, BenchError> {
    if runs < 3 || warmup < 1 {
        return Err(BenchError::Budget { runs, warmup });
    }
    crate::tune_allocator();
    let shape = model.spec().input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x = Tensor::from_vec(shape, data).expect("input shape");
    for _ in 0..warmup {
        std::hint::black_box(model.forward(&x, Exec::Fast)?);
    }
    let mut latencies = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        std::hint::black_box(model.forward(std::hint::black_box(&x), Exec::Fast)?);
        latencies.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let spec = model.spec();
    let id = if spec.name.is_empty() { spec.structural_hash()[..12].to_owned() } else { spec.name.clone() };
    Ok(BenchReport::from_latencies(
        id,
        warmup,
        latencies,
        host_descriptor(),
        count_macs(spec)?,
        count_params(spec)?,
    ))
}

/// One line of a complexity table. Parameter and MAC counts are raw
/// element counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_pct: Option<f64>,
    pub params: u64,
    pub macs: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_s: Option<f64>,
}

impl ReportRow {
    pub fn new(name: impl Into<String>, eval: Option<&EvalReport>, params: u64, macs: u64, bench: Option<&BenchReport>) -> Self {
        Self {
            name: name.into(),
            accuracy_pct: eval.map(|e| e.accuracy_pct),
            params,
            macs,
            runtime_s: bench.map(|b| b.median_ms / 1e3),
        }
    }
}

/// Rounds to two significant figures for the approximate ratio column.
fn approx(r: f64) -> String {
    if !(r.is_finite() && r > 0.0) {
        return "-".into();
    }
    let mag = 10f64.powi(r.log10().floor() as i32 - 1);
    format!("~{}×", (r / mag).round() * mag)
}

/// Fixed-width table with one row per entry. When `baseline` names a row
/// and there are at least two rows, a ratio section lists how many times
/// smaller every other row is than the baseline.
pub fn report_table(rows: &[ReportRow], baseline: Option<usize>) -> Result<String, BenchError> {
    if rows.is_empty() {
        return Err(BenchError::EmptyReport);
    }
    if let Some(b) = baseline.filter(|&b| b >= rows.len()) {
        return Err(BenchError::Baseline(b));
    }
    let name_w = rows.iter().map(|r| r.name.chars().count()).max().unwrap_or(0).max(5);
    let opt = |v: Option<f64>, prec: usize| v.map_or_else(|| "-".to_owned(), |v| format!("{v:.prec$}"));
    let mut out = format!(
        "{:<name_w$}  {:>12}  {:>10}  {:>12}  {:>12}\n",
        "Model", "Test Acc (%)", "Param (M)", "FLOPs (M)", "Run-time (s)"
    );
    for r in rows {
        out += &format!(
            "{:<name_w$}  {:>12}  {:>10.2}  {:>12.2}  {:>12}\n",
            r.name,
            opt(r.accuracy_pct, 2),
            r.params as f64 / 1e6,
            r.macs as f64 / 1e6,
            opt(r.runtime_s, 3),
        );
    }
    if let (Some(b), true) = (baseline, rows.len() > 1) {
        let base = &rows[b];
        out += &format!("\nRelative to {}:\n", base.name);
        for (i, r) in rows.iter().enumerate() {
            if i == b {
                continue;
            }
            let p = base.params as f64 / r.params as f64;
            let m = base.macs as f64 / r.macs as f64;
            out += &format!(
                "{:<name_w$}  params {:.2}× smaller ({}), FLOPs {:.2}× lower ({})",
                r.name,
                p,
                approx(p),
                m,
                approx(m)
            );
            if let (Some(tb), Some(tr)) = (base.runtime_s, r.runtime_s) {
                out += &format!(", run-time {:.2}× faster", tb / tr);
            }
            out.push('\n');
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: DefectClass,
    /// Softmax probability of `class`.
    pub probability: f64,
    /// Softmax probabilities of (functional, defective).
    pub probabilities: [f64; 2],
}

impl Prediction {
    /// Process exit status for scripted inspection: 0 functional, 2 defective.
    pub fn exit_code(&self) -> i32 {
        match self.class {
            DefectClass::Functional => 0,
            DefectClass::Defective => 2,
        }
    }
}

/// Softmax verdict from a pair of logits; ties go to functional.
pub fn prediction_from_logits(logits: &Tensor<f32>) -> Result<Prediction, BenchError> {
    let k = logits.shape().c;
    if k != 2 || logits.shape().n != 1 {
        return Err(BenchError::Classes(k));
    }
    let wide: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    let p = softmax_rows(&wide, 2);
    let class = DefectClass::from_index(argmax_rows(logits)[0]);
    Ok(Prediction {
        class,
        probability: p[class.index()],
        probabilities: [p[0], p[1]],
    })
}

pub fn predict_tensor(model: &Model<f32>, x: &Tensor<f32>) -> Result<Prediction, BenchError> {
    prediction_from_logits(&model.forward(x, Exec::Fast)?)
}

pub fn predict(model: &Model<f32>, image_path: impl AsRef<Path>) -> Result<Prediction, BenchError> {
    let x = load_image(image_path, model.spec())?;
    predict_tensor(model, &x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statistics_of_a_short_list() {
        let r = BenchReport::from_latencies("x", 1, vec![3.0, 1.0, 2.0], "h", 0, 0);
        assert_eq!(r.median_ms, 2.0);
        assert_eq!(r.p90_ms, 3.0);
        assert_eq!(r.mean_ms, 2.0);
        assert_eq!(r.runs, 3);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    fn row(name: &str, params: u64, macs: u64) -> ReportRow {
        ReportRow {
            name: name.into(),
            accuracy_pct: None,
            params,
            macs,
            runtime_s: None,
        }
    }

    #[test]
    fn ratio_section() {
        let rows = [row("VGG-19", 140_000_000, 34_570_000_000), row("ours", 410_000, 115_000_000)];
        let t = report_table(&rows, Some(0)).unwrap();
        assert!(t.contains("341.46×"), "{t}");
        assert!(t.contains("~300×"), "{t}");
        assert_eq!(t, report_table(&rows, Some(0)).unwrap());
    }

    #[test]
    fn single_row_has_no_ratio_section() {
        let t = report_table(&[row("a", 1, 1)], Some(0)).unwrap();
        assert_eq!(t.lines().count(), 2);
        assert!(report_table(&[], None).is_err());
    }

    #[test]
    fn uniform_logits_pick_functional() {
        let p = prediction_from_logits(&Tensor::from_vec([1, 2, 1, 1], vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(p.class, DefectClass::Functional);
        assert_eq!(p.probability, 0.5);
        assert_eq!(p.exit_code(), 0);
    }
}
