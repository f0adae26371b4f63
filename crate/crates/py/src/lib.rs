use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mfg_charge::cli::{self, VerifyArgs};
use mfg_charge::config::SolverKind;
use mfg_charge::equilibrium::EquilibriumSolution;
use mfg_charge::population::{simulate_population, SimConfig, Strategy};
use mfg_charge::Error;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::NotConverged { .. } | Error::IntegratorFailure(_) => PyRuntimeError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

/// Equilibrium on the config grid.
#[pyclass(get_all, frozen)]
struct Equilibrium {
    t: Vec<f64>,
    soc: Vec<f64>,
    power: Vec<f64>,
    price: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    method: String,
    iterations: usize,
    residual: f64,
}

impl Equilibrium {
    fn new(sol: &EquilibriumSolution) -> Self {
        let mean = sol.mean.values();
        let s = sol.offset.s.values();
        Self {
            t: sol.grid().times().collect(),
            soc: mean.iter().map(|x| x[0]).collect(),
            power: mean.iter().map(|x| x[1]).collect(),
            price: sol.price.values(),
            s1: s.iter().map(|v| v[0]).collect(),
            s2: s.iter().map(|v| v[1]).collect(),
            method: sol.diagnostics.method.to_string(),
            iterations: sol.diagnostics.iterations,
            residual: sol.diagnostics.residual,
        }
    }
}

/// Population aggregates of one simulation.
#[pyclass(get_all, frozen)]
struct Population {
    t: Vec<f64>,
    mean_soc: Vec<f64>,
    mean_power: Vec<f64>,
    theory_power: Vec<f64>,
    price: Vec<f64>,
    consistency: f64,
    average_cost: f64,
    cost_standard_error: f64,
}

/// Solves the equilibrium described by a TOML config.
#[pyfunction]
#[pyo3(signature = (config, solver=None, overrides=Vec::new()))]
fn solve(config: PathBuf, solver: Option<&str>, overrides: Vec<String>) -> PyResult<Equilibrium> {
    let solver = solver.map(str::parse::<SolverKind>).transpose().map_err(to_py)?;
    let cfg = cli::load_config(&config, &overrides, solver).map_err(to_py)?;
    let (_, sol) = cli::solve(&cfg).map_err(to_py)?;
    Ok(Equilibrium::new(&sol))
}

/// Solves, then simulates the configured population.
#[pyfunction]
#[pyo3(signature = (config, overrides=Vec::new()))]
fn simulate(config: PathBuf, overrides: Vec<String>) -> PyResult<Population> {
    let cfg = cli::load_config(&config, &overrides, None).map_err(to_py)?;
    let (problem, sol) = cli::solve(&cfg).map_err(to_py)?;
    let sim = SimConfig {
        agents: cfg.sim.agents,
        seed: cfg.sim.seed,
        soc_lo: cfg.sim.soc_lo,
        soc_hi: cfg.sim.soc_hi,
        grid: *problem.grid(),
        strategy: Strategy::Equilibrium(Box::new(sol)),
        retain_paths: Some(false),
    };
    let res = simulate_population(&sim, &problem).map_err(to_py)?;
    let mean = res.mean.values();
    Ok(Population {
        t: res.grid.times().collect(),
        mean_soc: mean.iter().map(|x| x[0]).collect(),
        mean_power: mean.iter().map(|x| x[1]).collect(),
        theory_power: res.theory_mean.values().iter().map(|x| x[1]).collect(),
        price: res.price.values(),
        consistency: res.consistency,
        average_cost: res.average_cost(),
        cost_standard_error: res.cost_standard_error(),
    })
}

/// Runs the invariant suites; returns `(passed, [(name, passed, detail)])`.
#[pyfunction]
#[pyo3(signature = (config, quick=true, perturb_s=None, overrides=Vec::new()))]
fn verify(
    config: PathBuf,
    quick: bool,
    perturb_s: Option<f64>,
    overrides: Vec<String>,
) -> PyResult<(bool, Vec<(String, bool, String)>)> {
    let args = VerifyArgs {
        config,
        quick,
        perturb_s,
        overrides,
    };
    let report = cli::cmd_verify(&args).map_err(to_py)?;
    let checks = report
        .checks
        .iter()
        .map(|c| (c.name.clone(), c.passed, c.detail.clone()))
        .collect();
    Ok((report.passed(), checks))
}

#[pymodule]
fn mfg_charge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Equilibrium>()?;
    m.add_class::<Population>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
