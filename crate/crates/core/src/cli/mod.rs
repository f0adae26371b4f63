//! Command implementations behind the `mfg-charge` binary.
//!
//! Exit codes: 0 success, 1 configuration error, 2 solver failure,
//! 3 verification failure.

mod verify;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::affine::solve_affine;
use crate::config::{RunConfig, SolverKind};
use crate::equilibrium::{solve_fixed_point, solve_variational, tpbvp_residual, EquilibriumSolution, MfgProblem};
use crate::error::{Error, Result};
use crate::population::{simulate_population, simulate_uncoordinated, SimConfig, SimResult, Strategy};

pub use verify::{cmd_verify, Check, VerifyArgs, VerifyReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_SOLVER: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NotConverged { .. } | Error::IntegratorFailure(_) => EXIT_SOLVER,
        _ => EXIT_CONFIG,
    }
}

#[derive(Clone, Debug)]
pub struct SolveArgs {
    pub config: PathBuf,
    /// Overrides `solve.solver`.
    pub solver: Option<SolverKind>,
    pub out: PathBuf,
    pub overrides: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct SimulateArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    /// Long-format per-agent CSV.
    pub agents_csv: Option<PathBuf>,
    pub overrides: Vec<String>,
}

/// Reads and validates the config, applying the solver choice.
pub fn load_config(path: &Path, overrides: &[String], solver: Option<SolverKind>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path, overrides)?;
    if let Some(s) = solver {
        cfg.solve.solver = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Solves the equilibrium with the configured solver.
pub fn solve(cfg: &RunConfig) -> Result<(MfgProblem, EquilibriumSolution)> {
    let problem = cfg.problem(cfg.solve.solver)?;
    let sol = match cfg.solve.solver {
        SolverKind::Affine => solve_affine(&problem)?.to_solution(),
        SolverKind::FixedPoint => solve_fixed_point(&problem, &cfg.fixed_point_options())?,
        SolverKind::Variational => solve_variational(&problem, &cfg.variational_options())?,
    };
    Ok((problem, sol))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::Config(format!("cannot create {}: {e}", path.display())))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn num(v: f64) -> String {
    v.to_string()
}

/// Writes `equilibrium.csv`.
pub fn write_equilibrium_csv(path: &Path, sol: &EquilibriumSolution) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "t", "xbar1_kwh", "xbar2_kw", "price", "s1", "s2", "P11", "P12", "P22", "Omega11", "Omega12", "Omega22",
    ])
    .map_err(csv_error)?;
    let grid = sol.grid();
    for k in 0..grid.len() {
        let (x, s, p) = (sol.mean.value(k), sol.offset.s.value(k), sol.riccati.p.value(k));
        let omega = match &sol.omega {
            Some(o) => {
                let o = o.value(k);
                [num(o[(0, 0)]), num(o[(0, 1)]), num(o[(1, 1)])]
            }
            None => Default::default(),
        };
        let [o11, o12, o22] = omega;
        w.write_record([
            num(grid.time(k)),
            num(x[0]),
            num(x[1]),
            num(sol.price.value(k)),
            num(s[0]),
            num(s[1]),
            num(p[(0, 0)]),
            num(p[(0, 1)]),
            num(p[(1, 1)]),
            o11,
            o12,
            o22,
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `diagnostics.json` and returns it as `key=value` lines.
fn write_diagnostics(path: &Path, problem: &MfgProblem, sol: &EquilibriumSolution) -> Result<String> {
    let d = &sol.diagnostics;
    let res = tpbvp_residual(sol, problem)?;
    let value = json!({
        "method": d.method.as_str(),
        "iterations": d.iterations,
        "residual": d.residual,
        "gradient_norm": d.gradient_norm,
        "wall_time_s": d.wall_time.as_secs_f64(),
        "tpbvp_backward": res.backward,
        "tpbvp_forward": res.forward,
        "tpbvp_terminal": res.terminal,
        "nodes": sol.grid().len(),
    });
    let text = serde_json::to_string_pretty(&value).map_err(|e| Error::Io(e.into()))?;
    std::fs::write(path, text + "\n")?;
    let mut lines = String::new();
    for (k, v) in value.as_object().expect("object") {
        lines.push_str(&format!("{k}={v}\n"));
    }
    Ok(lines)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

/// `solve`: writes `equilibrium.csv` and `diagnostics.json` into `out`.
/// Returns the `key=value` report.
pub fn cmd_solve(args: &SolveArgs) -> Result<String> {
    let cfg = load_config(&args.config, &args.overrides, args.solver)?;
    ensure_dir(&args.out)?;
    let (problem, sol) = solve(&cfg)?;
    write_equilibrium_csv(&args.out.join("equilibrium.csv"), &sol)?;
    write_diagnostics(&args.out.join("diagnostics.json"), &problem, &sol)
}

/// `(max - min) / mean` over the middle half of the horizon.
pub fn plateau_statistic(values: &[f64]) -> f64 {
    let n = values.len() - 1;
    let mid = &values[n / 4..=3 * n / 4];
    let (lo, hi) = mid
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let mean = mid.iter().sum::<f64>() / mid.len() as f64;
    (hi - lo) / mean
}

fn write_population_csv(path: &Path, res: &SimResult, sol: &EquilibriumSolution, baseline: Option<&SimResult>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "t",
        "xbar2_emp_kw",
        "xbar2_theory_kw",
        "price_emp",
        "price_theory",
        "soc_q05",
        "soc_q50",
        "soc_q95",
        "pow_q05",
        "pow_q50",
        "pow_q95",
        "baseline_xbar2_kw",
    ])
    .map_err(csv_error)?;
    for k in 0..res.grid.len() {
        let (sq, pq) = (res.soc_quantiles[k], res.power_quantiles[k]);
        w.write_record([
            num(res.grid.time(k)),
            num(res.mean.value(k)[1]),
            num(sol.mean.value(k)[1]),
            num(res.price.value(k)),
            num(sol.price.value(k)),
            num(sq[0]),
            num(sq[1]),
            num(sq[2]),
            num(pq[0]),
            num(pq[1]),
            num(pq[2]),
            baseline.map(|b| num(b.mean.value(k)[1])).unwrap_or_default(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn write_agents_csv(path: &Path, res: &SimResult) -> Result<()> {
    let paths = res
        .paths
        .as_ref()
        .ok_or_else(|| Error::MissingData("per-agent paths were not retained".into()))?;
    let mut w = csv_writer(path)?;
    w.write_record(["t", "agent_id", "soc_kwh", "power_kw", "ramp_kw_per_h"])
        .map_err(csv_error)?;
    for i in 0..paths.agents {
        for k in 0..res.grid.len() {
            let x = paths.state(i, k);
            w.write_record([
                num(res.grid.time(k)),
                i.to_string(),
                num(x[0]),
                num(x[1]),
                num(paths.ramp(i, k)),
            ])
            .map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `simulate`: solves, simulates the population (and the uncoordinated
/// baseline when enabled) and writes `equilibrium.csv`, `population.csv`
/// and optionally the per-agent CSV. Returns the `key=value` report.
pub fn cmd_simulate(args: &SimulateArgs) -> Result<String> {
    let cfg = load_config(&args.config, &args.overrides, None)?;
    ensure_dir(&args.out)?;
    let (problem, sol) = solve(&cfg)?;
    write_equilibrium_csv(&args.out.join("equilibrium.csv"), &sol)?;

    let sim = SimConfig {
        agents: cfg.sim.agents,
        seed: cfg.sim.seed,
        soc_lo: cfg.sim.soc_lo,
        soc_hi: cfg.sim.soc_hi,
        grid: *problem.grid(),
        strategy: Strategy::Equilibrium(Box::new(sol.clone())),
        retain_paths: args.agents_csv.as_ref().map(|_| true),
    };
    let res = simulate_population(&sim, &problem)?;
    let baseline = if cfg.sim.baseline {
        Some(simulate_uncoordinated(
            &SimConfig {
                retain_paths: Some(false),
                ..sim.clone()
            },
            &problem,
        )?)
    } else {
        None
    };
    write_population_csv(&args.out.join("population.csv"), &res, &sol, baseline.as_ref())?;
    if let Some(path) = &args.agents_csv {
        write_agents_csv(path, &res)?;
    }

    let power = |r: &SimResult| r.mean.values().iter().map(|x| x[1]).collect::<Vec<f64>>();
    let theory: Vec<f64> = sol.mean.values().iter().map(|x| x[1]).collect();
    let peak = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut report = String::new();
    let mut line = |k: &str, v: String| report.push_str(&format!("{k}={v}\n"));
    line("method", sol.diagnostics.method.to_string());
    line("agents", cfg.sim.agents.to_string());
    line("consistency_gap_kw", num(res.consistency));
    line("mean_terminal_soc_kwh", num(res.mean.last()[0]));
    line("plateau_statistic", num(plateau_statistic(&theory)));
    line("peak_mean_power_kw", num(peak(&power(&res))));
    line("average_cost", num(res.average_cost()));
    line("average_cost_std_error", num(res.cost_standard_error()));
    if let Some(b) = &baseline {
        line("baseline_peak_mean_power_kw", num(peak(&power(b))));
    }
    Ok(report)
}

/// Writes `text` to stdout, ignoring a closed pipe.
pub fn print(text: &str) {
    let _ = std::io::stdout().write_all(text.as_bytes());
}
