//! Python bindings for `splat_inpaint`.

use std::path::PathBuf;

use clap::Parser;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use splat_inpaint::trainer::{load_checkpoint, Trainer, FINAL_CHECKPOINT};
use splat_inpaint::workbench::cli::{error_line, evaluate, run, Cli};
use splat_inpaint::workbench::{load_dataset, metrics, SceneDataset};
use splat_inpaint::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Diverged { .. } => PyRuntimeError::new_err(error_line(&e)),
        _ => PyValueError::new_err(error_line(&e)),
    }
}

fn to_py<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (value.to_string(),))
}

/// Runs a command line such as `["synth", "--out", "scene", "--seed", "1"]`
/// and returns its summary as a dict.
#[pyfunction]
fn run_cli<'py>(py: Python<'py>, args: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    let cli = Cli::try_parse_from(std::iter::once("splat-inpaint".to_string()).chain(args))
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let summary = py.detach(|| run(cli)).map_err(py_err)?;
    to_py(py, &summary)
}

#[pyfunction]
fn psnr(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("inputs differ in length"));
    }
    Ok(metrics::psnr(&a, &b))
}

#[pyfunction]
fn ssim(a: Vec<f64>, b: Vec<f64>, width: usize, height: usize) -> PyResult<f64> {
    if a.len() != b.len() || a.len() != 3 * width * height {
        return Err(PyValueError::new_err("inputs must both hold width·height·3 values"));
    }
    Ok(metrics::ssim(&a, &b, width, height))
}

/// A scene directory on disk.
#[pyclass(frozen)]
struct Dataset {
    inner: SceneDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_dataset(&path).map(|inner| Dataset { inner }).map_err(py_err)
    }

    #[getter]
    fn reference_view_id(&self) -> u32 {
        self.inner.reference_view_id
    }

    #[getter]
    fn train_ids(&self) -> Vec<u32> {
        self.inner.views.iter().map(|v| v.camera_id).collect()
    }

    #[getter]
    fn test_ids(&self) -> Vec<u32> {
        self.inner.test_views.iter().map(|v| v.camera_id).collect()
    }
}

/// `(width, height, color, depth, alpha)`, with row-major flat buffers.
type RenderArrays = (usize, usize, Vec<f64>, Vec<f64>, Vec<f64>);

/// A trained model loaded from a checkpoint.
#[pyclass(frozen)]
struct Model {
    inner: Trainer,
}

#[pymethods]
impl Model {
    /// Accepts a train output directory or a checkpoint directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let dir = if path.join("manifest.json").exists() { path } else { path.join(FINAL_CHECKPOINT) };
        load_checkpoint(&dir).map(|inner| Model { inner }).map_err(py_err)
    }

    #[getter]
    fn step(&self) -> usize {
        self.inner.step
    }

    #[getter]
    fn anchors(&self) -> usize {
        self.inner.scene.anchor_count()
    }

    #[getter]
    fn camera_ids(&self) -> Vec<u32> {
        self.inner.cameras.iter().map(|c| c.id).collect()
    }

    fn render(&self, py: Python<'_>, camera_id: u32) -> PyResult<RenderArrays> {
        let cam = self.inner.camera(camera_id).map_err(py_err)?.clone();
        let out = py.detach(|| self.inner.render(&cam));
        Ok((out.width, out.height, out.color, out.depth, out.alpha))
    }

    /// Metrics on the dataset's held-out views, as a dict.
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &Dataset) -> PyResult<Bound<'py, PyAny>> {
        let report = py.detach(|| evaluate(&self.inner, &dataset.inner)).map_err(py_err)?;
        to_py(py, &serde_json::to_value(&report).expect("metrics serialize"))
    }
}

#[pymodule]
fn splat_inpaint_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    Ok(())
}
