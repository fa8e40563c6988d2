//! Thin Python bindings over the core numerics and the command-line tool.

use nat_prosody::align::{self, DurationVector};
use nat_prosody::prosody;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn py_err(e: nat_prosody::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyfunction]
fn softplus(x: f64) -> f64 {
    align::softplus(x)
}

#[pyfunction]
fn sigmoid(x: f64) -> f64 {
    align::sigmoid(x)
}

#[pyfunction]
fn emd2_loss(pred: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    prosody::emd2_loss(&pred, &target).map_err(py_err)
}

#[pyfunction]
fn positional_encoding(mu: f64, dim: usize) -> Vec<f64> {
    align::positional_encoding(mu, dim).0
}

/// Rows of the upsampled alignment for integer durations and ranges.
#[pyfunction]
fn gaussian_upsample(durations: Vec<usize>, ranges: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let d = DurationVector(durations);
    let t = d.total();
    let a = align::gaussian_upsample(&d, &ranges, t).map_err(py_err)?;
    Ok((0..a.rows()).map(|i| a.row(i).to_vec()).collect())
}

#[pyfunction]
fn extract_durations(mus: Vec<f64>, n_enc: usize) -> PyResult<Vec<usize>> {
    align::extract_durations(&mus, n_enc).map(|d| d.0).map_err(py_err)
}

/// Pause class symbol for a pause length and speaking rate.
#[pyfunction]
fn categorize_pause(pause_sec: f64, speaking_rate: f64) -> PyResult<String> {
    prosody::categorize_pause(pause_sec, speaking_rate)
        .map(|c| c.symbol().to_string())
        .map_err(py_err)
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn cli(args: Vec<String>) -> i32 {
    nat_prosody::cli::main_with_args(std::iter::once("nat-prosody".to_string()).chain(args))
}

#[pymodule]
fn nat_prosody_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(softplus, m)?)?;
    m.add_function(wrap_pyfunction!(sigmoid, m)?)?;
    m.add_function(wrap_pyfunction!(emd2_loss, m)?)?;
    m.add_function(wrap_pyfunction!(positional_encoding, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_upsample, m)?)?;
    m.add_function(wrap_pyfunction!(extract_durations, m)?)?;
    m.add_function(wrap_pyfunction!(categorize_pause, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
