//! Python bindings: architecture specs, models, training data generation,
//! evaluation, benchmarking and the design score.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use celldefect::arch::weights::{load_weights, save_weights};
use celldefect::arch::{count_macs, count_params, indicator, parse_spec, reference_spec, ArchSpec, ConstraintSet};
use celldefect::bench::{bench_latency, predict, report_table, ReportRow};
use celldefect::condenser::Exec;
use celldefect::explore::{netscore as score, ScoreWeights};
use celldefect::train::{evaluate_records, load_manifest, synth_dataset as synth};
use celldefect::Tensor;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_json(v: &impl serde::Serialize) -> PyResult<String> {
    serde_json::to_string(v).map_err(runtime_err)
}

/// A validated architecture description.
#[pyclass(name = "Spec", module = "celldefect_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySpec {
    inner: ArchSpec,
}

#[pymethods]
impl PySpec {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: parse_spec(text).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn reference() -> Self {
        Self { inner: reference_spec() }
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize, usize, usize) {
        let [n, c, h, w] = self.inner.input_shape;
        (n, c, h, w)
    }

    fn params(&self) -> PyResult<u64> {
        count_params(&self.inner).map_err(value_err)
    }

    fn macs(&self) -> PyResult<u64> {
        count_macs(&self.inner).map_err(value_err)
    }

    fn structural_hash(&self) -> String {
        self.inner.structural_hash()
    }

    /// Constraint verdict as a JSON object string.
    #[pyo3(signature = (flops_center = 100e6, flops_tolerance = 0.2))]
    fn check(&self, flops_center: f64, flops_tolerance: f64) -> PyResult<String> {
        let constraints = ConstraintSet {
            flops_center,
            flops_tolerance,
            ..ConstraintSet::default()
        };
        to_json(&indicator(&self.inner, &constraints).map_err(value_err)?)
    }

    fn __repr__(&self) -> String {
        format!("Spec(name={:?}, nodes={})", self.inner.name, self.inner.nodes.len())
    }
}

/// An instantiated network with 32-bit weights.
#[pyclass(name = "Model", module = "celldefect_py")]
struct PyModel {
    inner: celldefect::arch::Model<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (spec, seed = 0))]
    fn new(spec: &PySpec, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: celldefect::arch::Model::instantiate(&spec.inner, seed).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(spec: &PySpec, path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_weights(&spec.inner, path).map_err(value_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_weights(&self.inner, path).map_err(runtime_err)
    }

    fn trainable_count(&self) -> u64 {
        self.inner.trainable_count()
    }

    /// Logits for a flat, already normalized input of the spec's shape.
    fn forward(&self, py: Python<'_>, data: Vec<f32>) -> PyResult<Vec<f32>> {
        let shape = self.inner.spec().input_shape();
        let x = Tensor::from_vec(shape, data).map_err(value_err)?;
        py.detach(|| self.inner.forward(&x, Exec::Fast))
            .map(|t| t.into_data())
            .map_err(value_err)
    }

    /// `(class, probability)` for one image file.
    fn predict(&self, py: Python<'_>, image_path: &str) -> PyResult<(String, f64)> {
        let p = py.detach(|| predict(&self.inner, image_path)).map_err(value_err)?;
        Ok((p.class.as_str().to_owned(), p.probability))
    }

    /// Evaluation report over a manifest, as a JSON object string.
    fn evaluate(&self, py: Python<'_>, manifest: &str) -> PyResult<String> {
        let records = load_manifest(manifest).map_err(value_err)?;
        to_json(&py.detach(|| evaluate_records(&self.inner, &records)).map_err(value_err)?)
    }

    /// Latency report as a JSON object string.
    #[pyo3(signature = (runs = 10, warmup = 2))]
    fn bench(&self, py: Python<'_>, runs: usize, warmup: usize) -> PyResult<String> {
        to_json(&py.detach(|| bench_latency(&self.inner, runs, warmup, 0)).map_err(value_err)?)
    }
}

/// Score balancing accuracy (percent) against parameters and MACs (millions).
#[pyfunction]
#[pyo3(signature = (accuracy_pct, params_millions, macs_millions, kappa = 2.0, beta = 0.5, gamma = 0.5))]
fn netscore(accuracy_pct: f64, params_millions: f64, macs_millions: f64, kappa: f64, beta: f64, gamma: f64) -> PyResult<f64> {
    score(accuracy_pct, params_millions, macs_millions, ScoreWeights { kappa, beta, gamma }).map_err(value_err)
}

/// Writes a synthetic dataset and returns the number of images.
#[pyfunction]
fn synth_dataset(count: usize, defect_rate: f64, seed: u64, out_dir: &str) -> PyResult<usize> {
    Ok(synth(count, defect_rate, seed, out_dir).map_err(value_err)?.len())
}

/// Formats a complexity table from a JSON list of rows.
#[pyfunction]
#[pyo3(signature = (rows_json, baseline = None))]
fn report(rows_json: &str, baseline: Option<usize>) -> PyResult<String> {
    let rows: Vec<ReportRow> = serde_json::from_str(rows_json).map_err(value_err)?;
    report_table(&rows, baseline).map_err(value_err)
}

#[pymodule]
fn celldefect_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySpec>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(netscore, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
