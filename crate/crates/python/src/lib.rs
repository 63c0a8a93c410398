//! Python bindings: feature files, audio features, alignment, comment
//! cleaning, losses, metrics and the gradient checker.

use cpcl_core::alignment::{self, MmdConfig, RotConfig};
use cpcl_core::audio::{self, MfccConfig};
use cpcl_core::classifier::{self, FocalConfig};
use cpcl_core::comments;
use cpcl_core::evaluation;
use cpcl_core::gradcheck::{self, GradCheckConfig};
use cpcl_core::ingest::{self, CommentRecord, FeatureSequence, Modality};
use cpcl_core::training::{self, TrainConfig};
use cpcl_core::{Error, Matrix};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(py_err)
}

/// Reads a binary feature file; returns `(modality_code, rows)`.
#[pyfunction]
fn read_features(path: &str) -> PyResult<(u8, Vec<Vec<f64>>)> {
    let seq = ingest::read_feature_file(path).map_err(py_err)?;
    Ok((seq.modality.code(), seq.tokens.to_rows()))
}

/// Writes `rows` as a feature file. Codes: 0 video, 1 face, 2 audio, 3 text.
#[pyfunction]
fn write_features(path: &str, modality: u8, rows: Vec<Vec<f64>>) -> PyResult<()> {
    let m = Modality::from_code(modality).map_err(py_err)?;
    let seq = FeatureSequence::new(m, matrix(rows)?).map_err(py_err)?;
    ingest::write_feature_file(&seq, path).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (signal, sample_rate = 16000.0, n_mfcc = 40))]
fn compute_mfcc(signal: Vec<f64>, sample_rate: f64, n_mfcc: usize) -> PyResult<Vec<Vec<f64>>> {
    let cfg = MfccConfig { sample_rate, n_mfcc, ..MfccConfig::default() };
    Ok(audio::compute_mfcc(&signal, &cfg).map_err(py_err)?.to_rows())
}

/// Returns `(plan, converged, iterations_run)`.
#[pyfunction]
#[pyo3(signature = (cost, epsilon = 0.05, tau = Some(1.0), max_iters = 200, tol = 1e-6))]
fn rot_solve(
    cost: Vec<Vec<f64>>,
    epsilon: f64,
    tau: Option<f64>,
    max_iters: usize,
    tol: f64,
) -> PyResult<(Vec<Vec<f64>>, bool, usize)> {
    let cfg = RotConfig { epsilon, tau, max_iters, tol };
    let plan = alignment::rot_solve(&matrix(cost)?, &cfg).map_err(py_err)?;
    Ok((plan.matrix.to_rows(), plan.converged, plan.iterations_run))
}

/// Squared MMD with a Gaussian kernel mixture. Without `bandwidths` the
/// median heuristic is used.
#[pyfunction]
#[pyo3(signature = (x, y, bandwidths = None))]
fn mmd(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, bandwidths: Option<Vec<f64>>) -> PyResult<f64> {
    let cfg = bandwidths.map_or_else(MmdConfig::default, MmdConfig::fixed);
    alignment::mmd(&matrix(x)?, &matrix(y)?, &cfg).map_err(py_err)
}

/// Cleans `(text, level)` pairs; returns the kept pairs and the drop counts.
#[pyfunction]
fn clean_comments<'py>(
    py: Python<'py>,
    comments: Vec<(String, u32)>,
) -> PyResult<(Vec<(String, u32)>, Bound<'py, PyDict>)> {
    let raw: Vec<CommentRecord> = comments.into_iter().map(|(text, level)| CommentRecord { text, level }).collect();
    let (kept, r) = comments::clean_comments_with_report(&raw);
    let report = PyDict::new(py);
    report.set_item("input", r.input)?;
    report.set_item("kept", r.kept)?;
    report.set_item("dropped_dup", r.dropped_dup)?;
    report.set_item("dropped_emoji", r.dropped_emoji)?;
    report.set_item("dropped_meaningless", r.dropped_meaningless)?;
    report.set_item("dropped_level", r.dropped_level)?;
    Ok((kept.into_iter().map(|c| (c.text, c.level)).collect(), report))
}

#[pyfunction]
fn segment(text: &str) -> PyResult<Vec<String>> {
    comments::segment(text).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (probs, label, gamma = 2.0, alpha = (1.0, 1.0)))]
fn focal_loss(probs: (f64, f64), label: u8, gamma: f64, alpha: (f64, f64)) -> PyResult<f64> {
    let cfg = FocalConfig { gamma, alpha: [alpha.0, alpha.1] };
    classifier::focal_loss(&[probs.0, probs.1], label, &cfg).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (t, eta_max = 1e-4, eta_min = 1e-6, t_max = 75))]
fn cosine_lr(t: usize, eta_max: f64, eta_min: f64, t_max: usize) -> f64 {
    let cfg = TrainConfig { eta_max, eta_min, t_max, ..TrainConfig::default() };
    training::cosine_lr(t, &cfg)
}

#[pyfunction]
fn compute_metrics<'py>(py: Python<'py>, preds: Vec<u8>, labels: Vec<u8>) -> PyResult<Bound<'py, PyDict>> {
    let m = evaluation::compute_metrics(&preds, &labels).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("macro_f1", m.macro_f1)?;
    d.set_item("recall", m.recall)?;
    d.set_item("precision", m.precision)?;
    d.set_item("tp", m.tp)?;
    d.set_item("fp", m.fp)?;
    d.set_item("tn", m.tn)?;
    d.set_item("fn", m.fn_)?;
    Ok(d)
}

/// Returns `(t, p, df)` for a two-sided paired test.
#[pyfunction]
fn paired_t_test(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64, usize)> {
    let r = evaluation::paired_t_test(&a, &b).map_err(py_err)?;
    Ok((r.t, r.p, r.df))
}

/// Runs the finite-difference check; returns `(op, max_rel_err, passed)` per op.
#[pyfunction]
#[pyo3(signature = (op = None))]
fn grad_check(op: Option<&str>) -> PyResult<Vec<(String, f64, bool)>> {
    let cfg = GradCheckConfig::default();
    let reports = match op {
        Some(name) => vec![gradcheck::grad_check(name, &cfg).map_err(py_err)?],
        None => gradcheck::grad_check_all(&cfg).map_err(py_err)?,
    };
    Ok(reports.into_iter().map(|r| (r.op, r.max_rel_err, r.passed)).collect())
}

#[pymodule]
fn cpcl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(read_features, m)?)?;
    m.add_function(wrap_pyfunction!(write_features, m)?)?;
    m.add_function(wrap_pyfunction!(compute_mfcc, m)?)?;
    m.add_function(wrap_pyfunction!(rot_solve, m)?)?;
    m.add_function(wrap_pyfunction!(mmd, m)?)?;
    m.add_function(wrap_pyfunction!(clean_comments, m)?)?;
    m.add_function(wrap_pyfunction!(segment, m)?)?;
    m.add_function(wrap_pyfunction!(focal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(paired_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add("REGISTERED_OPS", gradcheck::REGISTERED_OPS.to_vec())?;
    Ok(())
}
