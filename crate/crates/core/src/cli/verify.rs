//! `verify`: invariant suites run against one config.

use std::fmt;
use std::path::PathBuf;

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::affine::{pi_consistency_check, solve_affine};
use crate::config::{RunConfig, SolverKind};
use crate::equilibrium::{
    auxiliary_cost, auxiliary_gradient, directional_derivative, pmp_to_tpbvp, solve_fixed_point, solve_variational,
    tpbvp_residual, tpbvp_to_pmp, EquilibriumSolution, FixedPointOptions, MfgProblem, VariationalOptions,
};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::lqsolve::{integrate_riccati, riccati_for};
use crate::model::{e2, min_eigenvalue, PriceFunction};
use crate::population::{consistency_error, scheme_mean, simulate_population, SimConfig, Strategy};
use crate::trajectory::Trajectory;

use super::load_config;

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const ORDER_RANGE: (f64, f64) = (12.0, 20.0);
const OMEGA_SLACK: f64 = 1e-8;
const PI_TOL: f64 = 1e-6;
const RESIDUAL_TOL: f64 = 1e-5;
const AGREEMENT_TOL: f64 = 1e-4;
const SCALING_RANGE: (f64, f64) = (1.6, 2.6);
const SEEDS: u64 = 20;

#[derive(Clone, Debug)]
pub struct VerifyArgs {
    pub config: PathBuf,
    /// Skip the Monte Carlo checks.
    pub quick: bool,
    /// Added to `s₂` of every solution before its residual check.
    pub perturb_s: Option<f64>,
    pub overrides: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {} {}", self.name, self.detail)
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail,
        });
    }

    /// Records `value <= limit`.
    fn at_most(&mut self, name: impl Into<String>, value: f64, limit: f64) {
        self.push(name, value <= limit, format!("value={value:e} limit={limit:e}"));
    }

    /// Records `lo <= value <= hi`.
    fn within(&mut self, name: impl Into<String>, value: f64, (lo, hi): (f64, f64)) {
        self.push(name, (lo..=hi).contains(&value), format!("value={value} range=[{lo}, {hi}]"));
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        writeln!(f, "checks={} failed={failed}", self.checks.len())
    }
}

/// Runs every suite. Configuration and solver errors are returned as
/// errors; failed invariants are recorded in the report.
pub fn cmd_verify(args: &VerifyArgs) -> Result<VerifyReport> {
    let cfg = load_config(&args.config, &args.overrides, None)?;
    let problem = cfg.problem(SolverKind::Variational)?;
    let affine = cfg.affine_price().ok();
    let mut report = VerifyReport::default();

    let mut prices = vec![("config", problem.price.clone())];
    if let Some(p) = &affine {
        if *p != problem.price {
            prices.push(("affine", p.clone()));
        }
    }
    for (label, price) in &prices {
        let pb = problem.with_price(price.clone());
        gradient_suite(&mut report, label, &pb)?;
        convexity_suite(&mut report, label, &pb)?;
    }

    riccati_suite(&mut report, &cfg, &problem, affine.as_ref())?;

    let var_opts = VariationalOptions {
        tol: 1e-8,
        max_iter: 2000,
        ..Default::default()
    };
    let fp_opts = FixedPointOptions {
        damping: cfg.solve.damping,
        tol: 1e-10,
        max_iter: 5000,
    };
    let reference = solve_variational(&problem, &var_opts)?;
    residual_check(&mut report, "config/variational", &reference, &problem, args.perturb_s)?;
    isomorphism_check(&mut report, &reference, &problem)?;
    match solve_fixed_point(&problem, &fp_opts) {
        Ok(fp) => {
            residual_check(&mut report, "config/fixed_point", &fp, &problem, args.perturb_s)?;
            let d = fp.mean.sup_distance(&reference.mean)?;
            report.at_most("agreement config fixed_point~variational", d, AGREEMENT_TOL);
        }
        // the fixed point may diverge for steep prices; the variational
        // solver is the reference there
        Err(Error::NotConverged { residual, .. }) => report.push(
            "agreement config fixed_point~variational",
            true,
            format!("skipped: fixed point did not converge (change {residual:e})"),
        ),
        Err(e) => return Err(e),
    }

    if let Some(price) = &affine {
        let pb = problem.with_price(price.clone());
        let eq = solve_affine(&pb)?;
        let sol = eq.to_solution();
        residual_check(&mut report, "affine/closed_form", &sol, &pb, args.perturb_s)?;
        report.at_most("pi_consistency", pi_consistency_check(&eq, &pb)?, PI_TOL);
        let var = solve_variational(&pb, &var_opts)?;
        residual_check(&mut report, "affine/variational", &var, &pb, args.perturb_s)?;
        report.at_most(
            "agreement affine closed_form~variational",
            sol.mean.sup_distance(&var.mean)?,
            AGREEMENT_TOL,
        );
        let fp = solve_fixed_point(&pb, &fp_opts)?;
        residual_check(&mut report, "affine/fixed_point", &fp, &pb, args.perturb_s)?;
        report.at_most(
            "agreement affine closed_form~fixed_point",
            sol.mean.sup_distance(&fp.mean)?,
            AGREEMENT_TOL,
        );
    }

    if !args.quick {
        scaling_suite(&mut report, &cfg, &problem, &reference)?;
    }
    Ok(report)
}

fn random_control(grid: TimeGrid, rng: &mut ChaCha8Rng, amp: f64) -> Trajectory<f64> {
    let values = (0..grid.len()).map(|_| rng.random_range(-amp..amp)).collect();
    Trajectory::from_values(grid, values).expect("one value per node")
}

fn gradient_suite(report: &mut VerifyReport, label: &str, problem: &MfgProblem) -> Result<()> {
    let grid = *problem.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let u = random_control(grid, &mut rng, 20.0);
    let g = auxiliary_gradient(&u, problem)?;
    let mut worst = 0.0_f64;
    for _ in 0..10 {
        let dir = random_control(grid, &mut rng, 1.0);
        let cost = |sign: f64| auxiliary_cost(&u.zip_map(&dir, |a, b| a + sign * FD_STEP * b)?, problem);
        let fd = (cost(1.0)? - cost(-1.0)?) / (2.0 * FD_STEP);
        let exact = directional_derivative(problem, &g, &dir)?;
        worst = worst.max((fd - exact).abs() / exact.abs());
    }
    report.at_most(format!("gradient_fd {label}"), worst, FD_TOL);
    Ok(())
}

fn convexity_suite(report: &mut VerifyReport, label: &str, problem: &MfgProblem) -> Result<()> {
    let grid = *problem.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut margin = f64::INFINITY;
    for _ in 0..20 {
        let u1 = random_control(grid, &mut rng, 30.0);
        let u2 = random_control(grid, &mut rng, 30.0);
        let mid = u1.zip_map(&u2, |a, b| 0.5 * a + 0.5 * b)?;
        let gap = 0.5 * auxiliary_cost(&u1, problem)? + 0.5 * auxiliary_cost(&u2, problem)? - auxiliary_cost(&mid, problem)?;
        margin = margin.min(gap);
    }
    report.push(
        format!("convexity {label}"),
        margin > 0.0,
        format!("min_margin={margin:e}"),
    );
    Ok(())
}

/// `|P(0)` on 32 steps − reference| / `|...` on 64 steps − reference|.
fn order_ratio(q_eff: &Matrix2<f64>, problem: &MfgProblem) -> Result<f64> {
    let lq = &problem.lq;
    let horizon = problem.grid().horizon();
    let p0 = |steps: usize| -> Result<Matrix2<f64>> {
        let grid = TimeGrid::with_steps(horizon, steps)?;
        Ok(integrate_riccati(&lq.system.a, &lq.system.b, q_eff, lq.r, &lq.q_terminal, &grid)?
            .p
            .first())
    };
    let exact = p0(2048)?;
    Ok((p0(32)? - exact).norm() / (p0(64)? - exact).norm())
}

fn riccati_suite(
    report: &mut VerifyReport,
    cfg: &RunConfig,
    problem: &MfgProblem,
    affine: Option<&PriceFunction>,
) -> Result<()> {
    let lq = &problem.lq;
    let ric = riccati_for(lq)?;
    let terminal = (ric.p.last() - lq.q_terminal).norm();
    let asym = ric
        .p
        .values()
        .iter()
        .map(|p| (p - p.transpose()).norm())
        .fold(0.0, f64::max);
    report.at_most("riccati terminal", terminal, 0.0);
    report.at_most("riccati symmetry", asym, 0.0);
    report.push(
        "riccati psd",
        ric.min_eigenvalue() >= -1e-9,
        format!("min_eigenvalue={:e}", ric.min_eigenvalue()),
    );
    report.within("riccati order P(0)", order_ratio(&lq.q, problem)?, ORDER_RANGE);

    let Some(&PriceFunction::Affine { slope: c1, .. }) = affine else {
        return Ok(());
    };
    let coupling = |c1: f64| lq.q + e2() * e2().transpose() * c1;
    report.within("riccati order Omega(0)", order_ratio(&coupling(c1), problem)?, ORDER_RANGE);
    let omega = integrate_riccati(&lq.system.a, &lq.system.b, &coupling(c1), lq.r, &lq.q_terminal, problem.grid())?;
    let gap = omega
        .p
        .values()
        .iter()
        .zip(ric.p.values())
        .map(|(w, p)| min_eigenvalue(&(w - p)))
        .fold(f64::INFINITY, f64::min);
    report.push(
        "omega dominates P",
        gap >= -OMEGA_SLACK,
        format!("min_eigenvalue(Omega-P)={gap:e}"),
    );

    // long horizons and strong coupling stay bounded
    let dt = cfg.grid.dt;
    let mut worst = 0.0_f64;
    for horizon in [problem.grid().horizon(), 64.0] {
        let grid = TimeGrid::new(horizon, dt)?;
        for c in [c1, 100.0] {
            let om = integrate_riccati(&lq.system.a, &lq.system.b, &coupling(c), lq.r, &lq.q_terminal, &grid)?;
            worst = worst.max(om.p.sup_norm());
        }
    }
    report.push("omega bounded", worst.is_finite(), format!("sup_norm={worst:e}"));
    Ok(())
}

fn residual_check(
    report: &mut VerifyReport,
    label: &str,
    sol: &EquilibriumSolution,
    problem: &MfgProblem,
    perturb: Option<f64>,
) -> Result<()> {
    let mut sol = sol.clone();
    if let Some(delta) = perturb {
        sol.offset.s = sol.offset.s.map(|s| s + Vector2::new(0.0, delta));
    }
    let res = tpbvp_residual(&sol, problem)?;
    report.at_most(
        format!("residual {label}"),
        res.backward.max(res.forward),
        RESIDUAL_TOL,
    );
    report.at_most(format!("boundary {label}"), res.terminal, 1e-12);
    Ok(())
}

fn isomorphism_check(report: &mut VerifyReport, sol: &EquilibriumSolution, problem: &MfgProblem) -> Result<()> {
    let triplet = tpbvp_to_pmp(&sol.mean, &sol.offset.s, &sol.riccati, problem.lq.r)?;
    let (mean, s) = pmp_to_tpbvp(&triplet, &sol.riccati)?;
    let scale = sol.mean.sup_norm().max(sol.offset.s.sup_norm());
    let err = mean.sup_distance(&sol.mean)?.max(s.sup_distance(&sol.offset.s)?) / scale;
    report.at_most("isomorphism round_trip", err, 1e-12);
    let control = sol.mean_control(problem.lq.r);
    report.at_most(
        "isomorphism control",
        triplet.control.sup_distance(&control)? / control.sup_norm().max(1.0),
        1e-12,
    );
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Monte Carlo checks. Agents step with Euler-Maruyama, whose expected
/// mean is [`scheme_mean`]; the noise around it must shrink like `1/√N`,
/// and its distance to the solver mean must be first order in Δt.
fn scaling_suite(
    report: &mut VerifyReport,
    cfg: &RunConfig,
    problem: &MfgProblem,
    sol: &EquilibriumSolution,
) -> Result<()> {
    let base = |grid: TimeGrid, sol: &EquilibriumSolution| SimConfig {
        agents: 1,
        seed: 0,
        soc_lo: cfg.sim.soc_lo,
        soc_hi: cfg.sim.soc_hi,
        grid,
        strategy: Strategy::Equilibrium(Box::new(sol.clone())),
        retain_paths: Some(false),
    };
    let sim = base(*problem.grid(), sol);
    let expected = scheme_mean(&sim, problem)?;
    let gaps = |agents: usize| -> Result<Vec<f64>> {
        (0..SEEDS)
            .map(|seed| {
                let cfg = SimConfig { agents, seed, ..sim.clone() };
                consistency_error(&simulate_population(&cfg, problem)?, &expected)
            })
            .collect()
    };
    let (small, large) = (median(gaps(200)?), median(gaps(800)?));
    report.within("consistency scaling N=200->800 (scheme mean)", small / large, SCALING_RANGE);

    let bias = |problem: &MfgProblem, sol: &EquilibriumSolution| -> Result<f64> {
        let m = scheme_mean(&base(*problem.grid(), sol), problem)?;
        Ok((0..m.grid().len())
            .map(|k| (m.value(k)[1] - sol.mean.value(k)[1]).abs())
            .fold(0.0, f64::max))
    };
    let mut fine_cfg = cfg.clone();
    fine_cfg.grid.dt /= 2.0;
    let fine = fine_cfg.problem(SolverKind::Variational)?;
    let fine_sol = solve_variational(&fine, &VariationalOptions::default())?;
    let (coarse_bias, fine_bias) = (bias(problem, sol)?, bias(&fine, &fine_sol)?);
    let ratio = coarse_bias / fine_bias;
    report.push(
        "euler bias halving",
        (1.6..=2.4).contains(&ratio),
        format!("value={ratio} range=[1.6, 2.4] bias_kw={coarse_bias}->{fine_bias}"),
    );
    Ok(())
}
