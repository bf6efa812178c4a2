//! Python bindings for the gradcell engine.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use engine::autodiff::{Mode, Tape, Tensor};
use engine::config::RunConfig;
use engine::dac::{max_len_for_budget, verify_gradient_equivalence, MemoryModel, VerifyOptions};
use engine::downstream::metrics;
use engine::encoder::checkpoint::{load_checkpoint, save_checkpoint};
use engine::objectives::info_nce_loss;
use engine::preprocess::{self, SparseProfile};
use engine::Error;

create_exception!(gradcell, GradcellError, PyRuntimeError);
create_exception!(gradcell, NumericalError, GradcellError);
create_exception!(gradcell, ReplayError, GradcellError);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Numerical { .. } | Error::DegenerateInput(_) => NumericalError::new_err(msg),
        Error::Replay { .. } => ReplayError::new_err(msg),
        Error::Io { .. } => PyOSError::new_err(msg),
        Error::Usage(_)
        | Error::Config(_)
        | Error::EmptyCell { .. }
        | Error::Parse { .. }
        | Error::Schema(_)
        | Error::Index { .. }
        | Error::Infeasible(_) => PyValueError::new_err(msg),
    }
}

trait OrPyErr<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> OrPyErr<T> for engine::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).py_err()
}

/// Transformer cell encoder.
#[pyclass(module = "gradcell")]
struct Encoder {
    inner: engine::encoder::Encoder,
}

#[pymethods]
impl Encoder {
    /// Small encoder for `n_genes` genes; `overrides` are `key=value` config entries.
    #[new]
    #[pyo3(signature = (n_genes, seed=0, overrides=None))]
    fn new(n_genes: usize, seed: u64, overrides: Option<Vec<(String, String)>>) -> PyResult<Self> {
        let mut cfg = RunConfig::tiny(n_genes);
        for (k, v) in overrides.unwrap_or_default() {
            cfg.set(&k, &v).py_err()?;
        }
        cfg.encoder.validate().py_err()?;
        Ok(Encoder {
            inner: engine::encoder::Encoder::new(cfg.encoder, seed).py_err()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Encoder {
            inner: load_checkpoint(&path).py_err()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner).py_err()
    }

    #[getter]
    fn n_genes(&self) -> usize {
        self.inner.config.n_genes
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.inner.config.proj_dim
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.params.n_values()
    }

    fn fingerprint(&self) -> u64 {
        self.inner.params.fingerprint()
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (k, v) in self.inner.config.to_pairs() {
            d.set_item(k, v)?;
        }
        Ok(d)
    }

    /// Pooled embedding of one cell given its normalized expression vector.
    fn embed(&self, expression: Vec<f64>) -> PyResult<Vec<f64>> {
        let profile = preprocess::sparsify(&expression).py_err()?;
        self.embed_sparse(profile)
    }

    /// Pooled embedding from non-zero gene positions and their values.
    fn embed_profile(&self, positions: Vec<usize>, values: Vec<f64>) -> PyResult<Vec<f64>> {
        let profile = SparseProfile::new(positions, values, Default::default()).py_err()?;
        self.embed_sparse(profile)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Encoder(n_genes={}, feature_size={}, n_layers={}, n_heads={}, attention={})",
            c.n_genes,
            c.feature_size,
            c.n_layers,
            c.n_heads,
            c.attention_mode.name()
        )
    }
}

impl Encoder {
    fn embed_sparse(&self, profile: SparseProfile) -> PyResult<Vec<f64>> {
        let features = self.inner.feature_bank(0);
        self.inner.cell_embedding(&profile, features.as_ref()).py_err()
    }
}

/// `ln(1 + 10000 · n / Σn)` per gene.
#[pyfunction]
fn normalize(counts: Vec<u64>) -> PyResult<Vec<f64>> {
    preprocess::normalize(&counts).py_err()
}

/// Contrastive loss of two `T × d` views at temperature `tau`.
#[pyfunction]
#[pyo3(signature = (h, h_pos, tau=0.05))]
fn info_nce(h: Vec<Vec<f64>>, h_pos: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let mut tape = Tape::new(Mode::NoGrad);
    let a = tape.constant(matrix(h)?);
    let b = tape.constant(matrix(h_pos)?);
    Ok(info_nce_loss(&mut tape, &a, &b, tau).py_err()?.item())
}

/// Compares chunked and end-to-end contrastive gradients on a synthetic batch.
#[pyfunction]
#[pyo3(signature = (batch=16, chunks=vec![1, 2, 4, 8, 16], seed=0, genes=32, inject_replay_fault=false))]
fn verify<'py>(
    py: Python<'py>,
    batch: usize,
    chunks: Vec<usize>,
    seed: u64,
    genes: usize,
    inject_replay_fault: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfig::tiny(genes);
    let opts = VerifyOptions {
        inject_replay_fault,
        ..VerifyOptions::default()
    };
    let report = verify_gradient_equivalence(&cfg.encoder, batch, &chunks, seed, &opts).py_err()?;
    let d = PyDict::new(py);
    d.set_item("passed", report.passed())?;
    d.set_item("end_to_end_loss", report.end_to_end_loss)?;
    d.set_item("max_pairwise_diff", report.max_pairwise_diff)?;
    let per_t: Vec<(usize, f64)> = report.schedules.iter().map(|s| (s.mini_batch, s.max_rel_diff)).collect();
    d.set_item("max_rel_diff", per_t)?;
    d.set_item("report", report.to_text())?;
    Ok(d)
}

/// Longest sequence that fits `budget_gb` at `mini_batch` under the full-size memory model.
#[pyfunction]
#[pyo3(signature = (mini_batch, budget_gb=40.0))]
fn max_seq_len(mini_batch: usize, budget_gb: f64) -> PyResult<usize> {
    max_len_for_budget(&MemoryModel::full(), budget_gb * 1e9, mini_batch).py_err()
}

#[pyfunction]
fn accuracy(y_true: Vec<usize>, y_pred: Vec<usize>) -> PyResult<f64> {
    metrics::accuracy(&y_true, &y_pred).py_err()
}

#[pyfunction]
fn macro_f1(y_true: Vec<usize>, y_pred: Vec<usize>) -> PyResult<f64> {
    metrics::macro_f1(&y_true, &y_pred).py_err()
}

#[pyfunction]
fn weighted_f1(y_true: Vec<usize>, y_pred: Vec<usize>) -> PyResult<f64> {
    metrics::weighted_f1(&y_true, &y_pred).py_err()
}

#[pyfunction]
fn pearson(y_true: Vec<f64>, y_pred: Vec<f64>) -> PyResult<f64> {
    metrics::pearson(&y_true, &y_pred).py_err()
}

#[pyfunction]
fn r2(y_true: Vec<f64>, y_pred: Vec<f64>) -> PyResult<f64> {
    metrics::r2(&y_true, &y_pred).py_err()
}

#[pyfunction]
fn rmse(y_true: Vec<f64>, y_pred: Vec<f64>) -> PyResult<f64> {
    metrics::rmse(&y_true, &y_pred).py_err()
}

#[pyfunction]
fn mae(y_true: Vec<f64>, y_pred: Vec<f64>) -> PyResult<f64> {
    metrics::mae(&y_true, &y_pred).py_err()
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    engine::cli::run(std::iter::once("gradcell".to_string()).chain(args))
}

#[pymodule]
fn gradcell(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("GradcellError", py.get_type::<GradcellError>())?;
    m.add("NumericalError", py.get_type::<NumericalError>())?;
    m.add("ReplayError", py.get_type::<ReplayError>())?;
    m.add_class::<Encoder>()?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(max_seq_len, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(macro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_f1, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(r2, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
