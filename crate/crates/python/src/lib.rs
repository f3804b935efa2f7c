//! Python bindings. Results come back as plain dicts; library errors map to
//! `ValueError` for bad inputs and `RuntimeError` for solver failures.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::csmmse::exact::{mc_mmse as mc, Ensemble, McOptions};
use ::csmmse::rmt::RmtCheck;
use ::csmmse::{Error, MmseForm, ModelParams, ScalarContext, SolverConfig, SparsityPrior};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidParameter { .. }
        | Error::Domain(_)
        | Error::Infeasible(_)
        | Error::LengthMismatch(_)
        | Error::EnumerationCap { .. }
        | Error::Parse(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn context(p: f64, rate: f64, beta: f64, sigma2: f64) -> PyResult<ScalarContext> {
    let params = ModelParams::new(rate, beta, sigma2).map_err(to_py)?;
    let prior = SparsityPrior::iid_bernoulli(p).map_err(to_py)?;
    ScalarContext::new(params, prior).map_err(to_py)
}

fn parse_form(form: &str) -> PyResult<MmseForm> {
    match form {
        "derived" => Ok(MmseForm::Derived),
        "as_stated" => Ok(MmseForm::AsStated),
        other => Err(PyValueError::new_err(format!(
            "form must be 'derived' or 'as_stated', got {other:?}"
        ))),
    }
}

/// Selected fixed point and asymptotic MMSE for an i.i.d. Bernoulli(p) support.
#[pyfunction]
#[pyo3(signature = (p, rate, beta, sigma2 = 1.0, form = "derived"))]
fn solve<'py>(py: Python<'py>, p: f64, rate: f64, beta: f64, sigma2: f64, form: &str) -> PyResult<Bound<'py, PyDict>> {
    let ctx = context(p, rate, beta, sigma2)?;
    let cfg = SolverConfig {
        form: parse_form(form)?,
        ..SolverConfig::default()
    };
    let (sols, d) = py.detach(|| ::csmmse::solver::solve_mmse(&ctx, &cfg)).map_err(to_py)?;
    let s = &sols[0];
    let out = PyDict::new(py);
    out.set_item("m_a", ctx.m_a)?;
    out.set_item("m_star", s.m_star)?;
    out.set_item("gamma_star", s.gamma_star)?;
    out.set_item("rho1", s.rho1)?;
    out.set_item("rho2", s.rho2)?;
    out.set_item("rho3", s.rho3)?;
    out.set_item("free_energy", s.free_energy)?;
    out.set_item("D", d)?;
    out.set_item("noise_sensitivity", beta * d)?;
    out.set_item("n_solutions", sols.len())?;
    out.set_item("degenerate_flag", s.degenerate_flag)?;
    Ok(out)
}

/// State-evolution MMSE of the Bernoulli-Gaussian model.
#[pyfunction]
#[pyo3(signature = (p, rate, beta, sigma2 = 1.0))]
fn replica_mmse<'py>(py: Python<'py>, p: f64, rate: f64, beta: f64, sigma2: f64) -> PyResult<Bound<'py, PyDict>> {
    let params = ModelParams::new(rate, beta, sigma2).map_err(to_py)?;
    let r = py
        .detach(|| ::csmmse::replica::replica_mmse(&params, p))
        .map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("tau2", r.selected.tau2)?;
    out.set_item("D_replica", r.selected.d_replica)?;
    out.set_item(
        "branches",
        r.branches.iter().map(|b| (b.tau2, b.d_replica)).collect::<Vec<_>>(),
    )?;
    Ok(out)
}

/// Genie MMSE `E(m)` with known support of magnetization `m`.
#[pyfunction]
#[pyo3(signature = (m, rate, beta, sigma2 = 1.0))]
fn oracle_e(m: f64, rate: f64, beta: f64, sigma2: f64) -> PyResult<f64> {
    let params = ModelParams::new(rate, beta, sigma2).map_err(to_py)?;
    Ok(::csmmse::oracle::oracle_e(m, &params))
}

/// Monte-Carlo average of the exact posterior MMSE at size `n`.
#[pyfunction]
#[pyo3(signature = (p, rate, beta, n, trials, seed = 0, sigma2 = 1.0))]
#[allow(clippy::too_many_arguments)]
fn mc_mmse<'py>(
    py: Python<'py>,
    p: f64,
    rate: f64,
    beta: f64,
    n: usize,
    trials: usize,
    seed: u64,
    sigma2: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let params = ModelParams::new(rate, beta, sigma2).map_err(to_py)?;
    let prior = SparsityPrior::iid_bernoulli(p).map_err(to_py)?;
    let r = py
        .detach(|| mc(&prior, &params, n, trials, seed, &McOptions::default()))
        .map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("trials", r.trials)?;
    out.set_item("estimate", r.estimate)?;
    out.set_item("std_error", r.std_error)?;
    out.set_item("direct_estimate", r.direct_estimate)?;
    out.set_item("direct_std_error", r.direct_std_error)?;
    Ok(out)
}

/// The four random-matrix checks on one draw; each maps to `(empirical, equivalent, gap)`.
#[pyfunction]
#[pyo3(signature = (n, m_s, m_r, m_sr, p, rate, beta, seed = 0, sigma2 = 1.0))]
#[allow(clippy::too_many_arguments)]
fn rmt_report<'py>(
    py: Python<'py>,
    n: usize,
    m_s: f64,
    m_r: f64,
    m_sr: f64,
    p: f64,
    rate: f64,
    beta: f64,
    seed: u64,
    sigma2: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let ctx = context(p, rate, beta, sigma2)?;
    let r = py
        .detach(|| ::csmmse::rmt::rmt_report(n, m_s, m_r, m_sr, &ctx, seed, Ensemble::Gaussian))
        .map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("n", r.n)?;
    out.set_item("k", r.k)?;
    let triple = |c: RmtCheck| (c.empirical, c.equivalent, c.gap);
    out.set_item("stieltjes", triple(r.stieltjes))?;
    out.set_item("shannon", triple(r.shannon))?;
    out.set_item("f_n", triple(r.f_n))?;
    out.set_item("q_n", triple(r.q_n))?;
    Ok(out)
}

/// `b(x)`, the positive root of the scalar quadratic.
#[pyfunction]
#[pyo3(signature = (x, rate, beta, sigma2 = 1.0))]
fn b(x: f64, rate: f64, beta: f64, sigma2: f64) -> PyResult<f64> {
    context(0.5, rate, beta, sigma2)?.b(x).map_err(to_py)
}

/// Runs a JSON run configuration; returns `(csv, exit_code)`.
#[pyfunction]
#[pyo3(signature = (config_json, strict = false))]
fn run_config(py: Python<'_>, config_json: &str, strict: bool) -> PyResult<(String, u8)> {
    let config = ::csmmse::cli::RunConfig::from_json(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let out = py
        .detach(|| ::csmmse::cli::run(&config))
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let code = out.exit_code(strict || config.strict);
    Ok((out.csv, code))
}

#[pymodule(name = "csmmse")]
fn csmmse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(replica_mmse, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_e, m)?)?;
    m.add_function(wrap_pyfunction!(mc_mmse, m)?)?;
    m.add_function(wrap_pyfunction!(rmt_report, m)?)?;
    m.add_function(wrap_pyfunction!(b, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
