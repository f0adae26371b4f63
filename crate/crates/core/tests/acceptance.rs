//! Acceptance criteria for the reference scenarios. Prints one PASS/FAIL line
//! per criterion. Exits 0 unless `ACCEPTANCE_STRICT=1` is set and a
//! criterion failed.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mfg_charge::affine::{pi_consistency_check, solve_affine};
use mfg_charge::config::{RunConfig, SolverKind};
use mfg_charge::equilibrium::{
    auxiliary_cost, auxiliary_gradient, directional_derivative, solve_fixed_point, solve_variational, tpbvp_residual,
    EquilibriumSolution, FixedPointOptions, MfgProblem, VariationalOptions,
};
use mfg_charge::lqsolve::{best_response, integrate_riccati, value_function};
use mfg_charge::model::{e2, PriceFunction};
use mfg_charge::population::{
    consistency_error, realized_cost, scheme_mean, simulate_population, simulate_uncoordinated, SimConfig, SimResult,
    Strategy,
};
use mfg_charge::{Result, TimeGrid, Trajectory};

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: String) -> Self {
        Self { passed, detail }
    }
}

fn reference_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml")
}

fn config(overrides: &[&str]) -> RunConfig {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::load(&reference_path(), &overrides).expect("shipped config loads")
}

fn problem(cfg: &RunConfig, price: PriceFunction) -> MfgProblem {
    cfg.problem(SolverKind::Variational).unwrap().with_price(price)
}

fn power(mean: &Trajectory<Vector2<f64>>) -> Vec<f64> {
    mean.values().iter().map(|x| x[1]).collect()
}

fn sup_gap(a: &Trajectory<Vector2<f64>>, b: &Trajectory<Vector2<f64>>) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).amax())
        .fold(0.0, f64::max)
}

fn min_eig(m: &Matrix2<f64>) -> f64 {
    SymmetricEigen::new((m + m.transpose()) * 0.5).eigenvalues.min()
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

fn random_control(grid: TimeGrid, rng: &mut ChaCha8Rng, amp: f64) -> Trajectory<f64> {
    let values = (0..grid.len()).map(|_| rng.random_range(-amp..amp)).collect();
    Trajectory::from_values(grid, values).unwrap()
}

fn sim_config(cfg: &RunConfig, pb: &MfgProblem, sol: &EquilibriumSolution, agents: usize, seed: u64) -> SimConfig {
    SimConfig {
        agents,
        seed,
        soc_lo: cfg.sim.soc_lo,
        soc_hi: cfg.sim.soc_hi,
        grid: *pb.grid(),
        strategy: Strategy::Equilibrium(Box::new(sol.clone())),
        retain_paths: Some(false),
    }
}

fn cross_solver() -> Result<Outcome> {
    let cfg = config(&[]);
    let pb = problem(&cfg, cfg.affine_price()?);
    let start = Instant::now();
    let affine = solve_affine(&pb)?.to_solution();
    let fixed = solve_fixed_point(&pb, &FixedPointOptions::default())?;
    let var = solve_variational(&pb, &VariationalOptions::default())?;
    let elapsed = start.elapsed().as_secs_f64();
    let gaps = [
        sup_gap(&affine.mean, &fixed.mean),
        sup_gap(&affine.mean, &var.mean),
        sup_gap(&fixed.mean, &var.mean),
    ];
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    Ok(Outcome::new(
        worst <= 1e-4 && elapsed < 30.0,
        format!("max pairwise sup gap {worst:.2e} kW (limit 1e-4), runtime {elapsed:.2} s (limit 30)"),
    ))
}

fn gradient_oracle() -> Result<Outcome> {
    let cfg = config(&[]);
    let h = 1e-5;
    let mut worst = 0.0_f64;
    for price in [cfg.affine_price()?, cfg.price_function()?] {
        let pb = problem(&cfg, price);
        let grid = *pb.grid();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let u = random_control(grid, &mut rng, 20.0);
        let g = auxiliary_gradient(&u, &pb)?;
        for _ in 0..10 {
            let dir = random_control(grid, &mut rng, 1.0);
            let plus = auxiliary_cost(&u.zip_map(&dir, |a, b| a + h * b)?, &pb)?;
            let minus = auxiliary_cost(&u.zip_map(&dir, |a, b| a - h * b)?, &pb)?;
            let fd = (plus - minus) / (2.0 * h);
            let exact = directional_derivative(&pb, &g, &dir)?;
            worst = worst.max((fd - exact).abs() / exact.abs());
        }
    }
    Ok(Outcome::new(
        worst <= 1e-4,
        format!("worst relative error {worst:.2e} over 2x10 directions (limit 1e-4)"),
    ))
}

fn convexity() -> Result<Outcome> {
    let cfg = config(&[]);
    let mut margin = f64::INFINITY;
    for price in [cfg.affine_price()?, cfg.price_function()?] {
        let pb = problem(&cfg, price);
        let grid = *pb.grid();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let u1 = random_control(grid, &mut rng, 30.0);
            let u2 = random_control(grid, &mut rng, 30.0);
            let mid = u1.zip_map(&u2, |a, b| 0.5 * (a + b))?;
            let avg = 0.5 * (auxiliary_cost(&u1, &pb)? + auxiliary_cost(&u2, &pb)?);
            margin = margin.min(avg - auxiliary_cost(&mid, &pb)?);
        }
    }
    Ok(Outcome::new(
        margin > 0.0,
        format!("smallest midpoint margin {margin:.3e} over 2x20 pairs"),
    ))
}

fn riccati() -> Result<Outcome> {
    let cfg = config(&[]);
    let pb = problem(&cfg, cfg.affine_price()?);
    let lq = &pb.lq;
    let (a, b) = (lq.system.a, lq.system.b);
    let weight = |c1: f64| lq.q + e2() * e2().transpose() * c1;
    let p0 = |q: &Matrix2<f64>, horizon: f64, steps: usize| -> Result<Matrix2<f64>> {
        let grid = TimeGrid::with_steps(horizon, steps)?;
        Ok(integrate_riccati(&a, &b, q, lq.r, &lq.q_terminal, &grid)?.p.first())
    };
    let ratio = |q: &Matrix2<f64>| -> Result<f64> {
        let exact = p0(q, 8.0, 4096)?;
        Ok((p0(q, 8.0, 32)? - exact).norm() / (p0(q, 8.0, 64)? - exact).norm())
    };
    let (ratio_p, ratio_omega) = (ratio(&lq.q)?, ratio(&weight(4.0))?);
    let eq = solve_affine(&pb)?;
    let dominance = eq
        .omega
        .p
        .values()
        .iter()
        .zip(eq.riccati.p.values())
        .map(|(w, p)| min_eig(&(w - p)))
        .fold(f64::INFINITY, f64::min);
    let pi = pi_consistency_check(&eq, &pb)?;
    let mut bounded = true;
    let mut largest = 0.0_f64;
    for horizon in [8.0, 16.0, 32.0, 64.0] {
        for c1 in [0.1, 4.0, 100.0] {
            let grid = TimeGrid::new(horizon, cfg.grid.dt)?;
            match integrate_riccati(&a, &b, &weight(c1), lq.r, &lq.q_terminal, &grid) {
                Ok(om) => {
                    let n = om.p.values().iter().map(|m| m.norm()).fold(0.0, f64::max);
                    largest = largest.max(n);
                    bounded &= n.is_finite();
                }
                Err(_) => bounded = false,
            }
        }
    }
    let in_range = |r: f64| (12.0..=20.0).contains(&r);
    Ok(Outcome::new(
        in_range(ratio_p) && in_range(ratio_omega) && dominance >= -1e-8 && pi <= 1e-6 && bounded,
        format!(
            "order ratios P {ratio_p:.2}, Omega {ratio_omega:.2}; min eig(Omega-P) {dominance:.2e}; \
             Pi defect {pi:.2e}; |Omega| <= {largest:.1} for T<=64, c1<=100"
        ),
    ))
}

fn residuals() -> Result<Outcome> {
    let cfg = config(&[]);
    let mut worst = 0.0_f64;
    let mut boundary = 0.0_f64;
    let mut count = 0;
    for price in [cfg.affine_price()?, cfg.price_function()?] {
        let pb = problem(&cfg, price.clone());
        let mut sols = vec![solve_variational(&pb, &VariationalOptions::default())?];
        if let Ok(sol) = solve_fixed_point(&pb, &FixedPointOptions::default()) {
            sols.push(sol);
        }
        if price.is_affine() {
            sols.push(solve_affine(&pb)?.to_solution());
        }
        for sol in &sols {
            let r = tpbvp_residual(sol, &pb)?;
            worst = worst.max(r.backward).max(r.forward);
            let terminal = -(pb.lq.q_terminal * pb.lq.terminal_reference);
            boundary = boundary
                .max((sol.offset.s.last() - terminal).amax())
                .max((sol.mean.first() - pb.initial_mean).amax());
            count += 1;
        }
    }
    Ok(Outcome::new(
        worst <= 1e-5 && boundary == 0.0,
        format!("worst defect {worst:.2e} (limit 1e-5), boundary error {boundary:e}, {count} solutions"),
    ))
}

fn plateau(values: &[f64]) -> f64 {
    let n = values.len() - 1;
    let mid = &values[n / 4..=3 * n / 4];
    let hi = mid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = mid.iter().copied().fold(f64::INFINITY, f64::min);
    (hi - lo) / (mid.iter().sum::<f64>() / mid.len() as f64)
}

fn peak(values: &[f64]) -> (usize, f64) {
    values
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (k, v)| if v > best.1 { (k, v) } else { best })
}

fn no_tracking_weight() -> Result<Outcome> {
    let cfg = config(&["cost.q=[0.0, 0.0]"]);
    let mut passed = true;
    let mut detail = Vec::new();
    for (label, price) in [("affine", cfg.affine_price()?), ("sigmoid", cfg.price_function()?)] {
        let pb = problem(&cfg, price);
        let sol = solve_variational(&pb, &VariationalOptions::default())?;
        let coordinated = power(&sol.mean);
        let stat = plateau(&coordinated);
        let sim = sim_config(&cfg, &pb, &sol, cfg.sim.agents, cfg.sim.seed);
        let uncoordinated = simulate_uncoordinated(&sim, &pb)?;
        let (_, coord_peak) = peak(&coordinated);
        let (_, unc_peak) = peak(&power(&uncoordinated.theory_mean));
        let (_, unc_emp_peak) = peak(&power(&uncoordinated.mean));
        let soc: Vec<f64> = sol.mean.values().iter().map(|x| x[0]).collect();
        let monotone = soc.windows(2).all(|w| w[1] >= w[0]) && soc[soc.len() - 1] > soc[0];
        let rg = cfg.cost.grid_target;
        passed &= stat < 0.15 && unc_peak > coord_peak && unc_emp_peak > coord_peak && unc_peak > rg && monotone;
        detail.push(format!(
            "{label}: plateau {stat:.2e}, peaks coordinated {coord_peak:.2} < uncoordinated {unc_peak:.2} \
             (empirical {unc_emp_peak:.2}), monotone SOC {monotone}"
        ));
    }
    Ok(Outcome::new(passed, detail.join("; ")))
}

fn with_tracking_weight() -> Result<Outcome> {
    let cfg = config(&[]);
    let mut passed = true;
    let mut detail = Vec::new();
    for (label, price) in [("affine", cfg.affine_price()?), ("sigmoid", cfg.price_function()?)] {
        let pb = problem(&cfg, price.clone());
        let sol = solve_variational(&pb, &VariationalOptions::default())?;
        let p = power(&sol.mean);
        let n = p.len() - 1;
        let (k_peak, top) = peak(&p);
        let decays = p[n] < top && p[k_peak..].windows(2).filter(|w| w[1] > w[0]).count() < n / 10;
        let res = simulate_population(&sim_config(&cfg, &pb, &sol, cfg.sim.agents, cfg.sim.seed), &pb)?;
        let terminal_soc = res.mean.last()[0];
        let prices = sol.price.values();
        let mid = median(prices[n / 4..=3 * n / 4].to_vec());
        let end = prices[n];
        let price_ok = match price {
            PriceFunction::Affine { .. } => end > 2.0 * mid,
            _ => prices.iter().all(|&v| v <= cfg.price.d_max.unwrap()),
        };
        passed &= k_peak <= n / 4 && decays && (terminal_soc - 54.0).abs() <= 1.0 && price_ok;
        detail.push(format!(
            "{label}: peak {top:.2} kW at t={:.3} h, terminal SOC {terminal_soc:.2} kWh, \
             terminal price {end:.2} vs mid median {mid:.2}",
            sol.grid().time(k_peak)
        ));
    }
    Ok(Outcome::new(passed, detail.join("; ")))
}

/// Euler recursion of the closed-loop mean, written out independently.
fn euler_mean(pb: &MfgProblem, sol: &EquilibriumSolution, x0: Vector2<f64>) -> Vec<Vector2<f64>> {
    let lq = &pb.lq;
    let dt = pb.grid().dt();
    let mut x = x0;
    let mut out = Vec::with_capacity(pb.grid().len());
    for k in 0..pb.grid().len() {
        out.push(x);
        let lam = sol.riccati.p.value(k) * x + sol.offset.s.value(k);
        let u = -lam[1] / lq.r;
        x += (lq.system.a * x + lq.system.b * u + lq.system.f.value(k)) * dt;
    }
    out
}

fn consistency() -> Result<Outcome> {
    let cfg = config(&[]);
    let pb = problem(&cfg, cfg.price_function()?);
    let sol = solve_variational(&pb, &VariationalOptions::default())?;
    let medians = |agents: usize| -> Result<(f64, f64)> {
        let base = sim_config(&cfg, &pb, &sol, agents, 0);
        let expected = scheme_mean(&base, &pb)?;
        let mut to_solver = Vec::new();
        let mut to_scheme = Vec::new();
        for seed in 0..20 {
            let res: SimResult = simulate_population(&SimConfig { seed, ..base.clone() }, &pb)?;
            to_solver.push(res.consistency);
            to_scheme.push(consistency_error(&res, &expected)?);
        }
        Ok((median(to_solver), median(to_scheme)))
    };
    let (small, small_scheme) = medians(200)?;
    let (large, large_scheme) = medians(800)?;
    let ratio = small / large;

    let noiseless_gap = |dt: f64| -> Result<f64> {
        let cfg = config(&[&format!("grid.dt={dt}")]);
        let pb = problem(&cfg, cfg.price_function()?);
        let sol = solve_variational(&pb, &VariationalOptions::default())?;
        let x0 = cfg.initial_mean();
        let path = euler_mean(&pb, &sol, x0);
        Ok(path
            .iter()
            .zip(sol.mean.values())
            .map(|(a, b)| (a[1] - b[1]).abs())
            .fold(0.0, f64::max))
    };
    let (g1, g2) = (noiseless_gap(cfg.grid.dt)?, noiseless_gap(cfg.grid.dt / 2.0)?);
    let passed = (1.6..=2.6).contains(&ratio) && g1 <= 0.02 && (1.6..=2.4).contains(&(g1 / g2));
    Ok(Outcome::new(
        passed,
        format!(
            "median gap {small:.4} -> {large:.4} kW, ratio {ratio:.2} (range [1.6, 2.6]); \
             sigma=0 gap {g1:.4} kW (limit 0.02), halving ratio {:.2}; \
             around the Euler mean: {small_scheme:.4} -> {large_scheme:.4}, ratio {:.2}",
            g1 / g2,
            small_scheme / large_scheme
        ),
    ))
}

fn determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let run = |threads: &str, name: &str| -> Result<PathBuf> {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_mfg-charge"))
            .env("MFG_CHARGE_THREADS", threads)
            .arg("simulate")
            .arg(reference_path())
            .arg("--out")
            .arg(&out)
            .arg("--agents-csv")
            .arg(out.join("agents.csv"))
            .output()?
            .status;
        assert!(status.success(), "simulate failed with {threads} threads");
        Ok(out)
    };
    let runs = [run("1", "a")?, run("1", "b")?, run("4", "c")?, run("7", "d")?];
    let mut identical = true;
    for file in ["equilibrium.csv", "population.csv", "agents.csv"] {
        let first = std::fs::read(runs[0].join(file))?;
        for r in &runs[1..] {
            identical &= std::fs::read(r.join(file))? == first;
        }
    }
    Ok(Outcome::new(
        identical,
        "equilibrium, population and agent CSVs over 1, 1, 4 and 7 threads".to_string(),
    ))
}

fn value_function_check() -> Result<Outcome> {
    let cfg = config(&[]);
    let pb = problem(&cfg, cfg.price_function()?);
    let sol = solve_variational(&pb, &VariationalOptions::default())?;
    let x0 = cfg.initial_mean();

    let quiet_cfg = config(&["model.sigma_soc=0.0", "model.sigma_power=0.0"]);
    let quiet = problem(&quiet_cfg, cfg.price_function()?);
    let quiet_sol = solve_variational(&quiet, &VariationalOptions::default())?;
    let single = SimConfig {
        soc_lo: x0[0],
        soc_hi: x0[0],
        retain_paths: Some(true),
        ..sim_config(&cfg, &quiet, &quiet_sol, 1, 0)
    };
    let realized = realized_cost(&simulate_population(&single, &quiet)?, &quiet)?;
    let vq = best_response(&quiet.lq, &quiet_sol.price)?;
    let v = value_function(&vq, 0.0, &x0)?;
    let det_err = (realized - v).abs() / v.abs();

    // E[V(0, x₀)] for SOC uniform on [lo, hi] and zero initial power
    let vq = best_response(&pb.lq, &sol.price)?;
    let spread = (cfg.sim.soc_hi - cfg.sim.soc_lo).powi(2) / 12.0;
    let expected = value_function(&vq, 0.0, &x0)? + 0.5 * vq.p.first()[(0, 0)] * spread;
    let res = simulate_population(&sim_config(&cfg, &pb, &sol, 10_000, cfg.sim.seed), &pb)?;
    let (avg, se) = (res.average_cost(), res.cost_standard_error());
    let z = (avg - expected).abs() / se;
    Ok(Outcome::new(
        det_err <= 1e-3 && z <= 2.0,
        format!(
            "deterministic {realized:.4} vs V {v:.4} (rel {det_err:.2e}, limit 1e-3); \
             N=1e4 average {avg:.3} vs E[V] {expected:.3}, {z:.2} standard errors (limit 2)"
        ),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Result<Outcome>); 10] = [
        ("cross-solver uniqueness", cross_solver),
        ("gradient oracle", gradient_oracle),
        ("strict convexity", convexity),
        ("riccati correctness", riccati),
        ("tpbvp residuals", residuals),
        ("zero tracking weight scenario", no_tracking_weight),
        ("tracking weight scenario", with_tracking_weight),
        ("mean-field consistency", consistency),
        ("determinism", determinism),
        ("value function", value_function_check),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = check().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        let tag = if outcome.passed { "PASS" } else { "FAIL" };
        println!("{tag} {:>2} {name}: {}", i + 1, outcome.detail);
        failures += usize::from(!outcome.passed);
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
