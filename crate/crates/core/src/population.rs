//! Finite-population Monte Carlo under a given feedback strategy.
//!
//! Every agent integrates
//!
//! ```text
//! x_{k+1} = x_k + (A x_k + B γ(t_k, x_k) + f(t_k)) Δt + Σ √Δt ξ_k
//! ```
//!
//! with its own ChaCha8 stream (the run seed, stream = agent index), so an
//! agent's path depends only on `(seed, index, grid, strategy)`. Agents are
//! advanced together one step at a time; cross-agent sums are taken in agent
//! order, which keeps every output independent of the thread count.

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::equilibrium::{EquilibriumSolution, MfgProblem};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::lqsolve::{feedback_from, riccati_for};
use crate::trajectory::Trajectory;

/// Environment variable capping the simulation thread count.
pub const THREADS_ENV: &str = "MFG_CHARGE_THREADS";

/// Above this many agents per-agent paths are dropped unless requested.
pub const DEFAULT_RETENTION_LIMIT: usize = 1000;

#[derive(Clone, Debug)]
pub enum Strategy {
    /// Feedback `-R⁻¹Bᵀ(P z + s)` of an equilibrium.
    Equilibrium(Box<EquilibriumSolution>),
    /// Best response to a zero price (no coordination).
    Uncoordinated,
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub agents: usize,
    pub seed: u64,
    /// Initial SOC is uniform on `[soc_lo, soc_hi]` kWh; initial power is 0.
    pub soc_lo: f64,
    pub soc_hi: f64,
    pub grid: TimeGrid,
    pub strategy: Strategy,
    /// Keep per-agent paths; `None` keeps them up to
    /// [`DEFAULT_RETENTION_LIMIT`] agents.
    pub retain_paths: Option<bool>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.agents == 0 {
            return Err(Error::InvalidParameter("the population needs at least one agent".into()));
        }
        if !(self.soc_lo.is_finite() && self.soc_hi.is_finite() && self.soc_lo <= self.soc_hi) {
            return Err(Error::InvalidParameter(format!(
                "initial SOC range must satisfy lo <= hi, got [{}, {}]",
                self.soc_lo, self.soc_hi
            )));
        }
        Ok(())
    }

    fn retains_paths(&self) -> bool {
        self.retain_paths.unwrap_or(self.agents <= DEFAULT_RETENTION_LIMIT)
    }
}

/// Per-agent paths, node-major: entry `k * agents + i` is agent `i` at `t_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentPaths {
    pub agents: usize,
    pub soc: Vec<f64>,
    pub power: Vec<f64>,
    /// Applied ramp rate (kW/h).
    pub ramp: Vec<f64>,
}

impl AgentPaths {
    pub fn state(&self, agent: usize, k: usize) -> Vector2<f64> {
        let j = k * self.agents + agent;
        Vector2::new(self.soc[j], self.power[j])
    }

    pub fn ramp(&self, agent: usize, k: usize) -> f64 {
        self.ramp[k * self.agents + agent]
    }
}

#[derive(Clone, Debug)]
pub struct SimResult {
    pub grid: TimeGrid,
    /// Empirical mean `x̄ᴺ(t_k)`.
    pub mean: Trajectory<Vector2<f64>>,
    /// Mean of the strategy the agents played (the theory the population
    /// should track).
    pub theory_mean: Trajectory<Vector2<f64>>,
    /// 5%, 50%, 95% quantiles across agents at each node.
    pub soc_quantiles: Vec<[f64; 3]>,
    pub power_quantiles: Vec<[f64; 3]>,
    /// `pᴺ(t_k) = α(x̄₂ᴺ(t_k) - r_g(t_k))`.
    pub price: Trajectory<f64>,
    /// `sup_k |x̄₂ᴺ - x̄₂|` against [`Self::theory_mean`].
    pub consistency: f64,
    /// Realized cost of each agent (trapezoidal, price `pᴺ`).
    pub agent_costs: Vec<f64>,
    pub paths: Option<AgentPaths>,
}

impl SimResult {
    pub fn agents(&self) -> usize {
        self.agent_costs.len()
    }

    pub fn average_cost(&self) -> f64 {
        self.agent_costs.iter().sum::<f64>() / self.agents() as f64
    }

    /// Standard error of [`Self::average_cost`] (zero for one agent).
    pub fn cost_standard_error(&self) -> f64 {
        let n = self.agents();
        if n < 2 {
            return 0.0;
        }
        let mean = self.average_cost();
        let var = self.agent_costs.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    }
}

/// Type-7 quantile (linear between order statistics) of unsorted data.
/// Reorders `data`.
pub fn quantile(data: &mut [f64], p: f64) -> f64 {
    let h = (data.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let (_, &mut x_lo, upper) = data.select_nth_unstable_by(lo, f64::total_cmp);
    match upper.iter().copied().min_by(f64::total_cmp) {
        Some(x_hi) => x_lo + (h - lo as f64) * (x_hi - x_lo),
        None => x_lo,
    }
}

const QUANTILES: [f64; 3] = [0.05, 0.5, 0.95];

struct Agent {
    x: Vector2<f64>,
    rng: ChaCha8Rng,
    cost: f64,
    ramp: f64,
}

/// Feedback gains and theory mean of a strategy.
fn strategy_gains(
    cfg: &SimConfig,
    problem: &MfgProblem,
) -> Result<(Trajectory<Matrix2<f64>>, Trajectory<Vector2<f64>>, Trajectory<Vector2<f64>>)> {
    match &cfg.strategy {
        Strategy::Equilibrium(sol) => {
            cfg.grid.ensure_same(sol.grid(), "equilibrium strategy")?;
            Ok((sol.riccati.p.clone(), sol.offset.s.clone(), sol.mean.clone()))
        }
        Strategy::Uncoordinated => {
            let riccati = riccati_for(&problem.lq)?;
            let (offset, mean) = problem.respond(&riccati, &Trajectory::zeros(cfg.grid))?;
            Ok((riccati.p, offset.s, mean))
        }
    }
}

/// Thread pool honouring [`THREADS_ENV`].
fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start simulation threads: {e}")))
}

/// Simulates `cfg.agents` agents playing `cfg.strategy` in `problem`.
pub fn simulate_population(cfg: &SimConfig, problem: &MfgProblem) -> Result<SimResult> {
    cfg.validate()?;
    cfg.grid.ensure_same(problem.grid(), "problem")?;
    let (p, s, theory_mean) = strategy_gains(cfg, problem)?;
    thread_pool()?.install(|| run(cfg, problem, &p, &s, theory_mean))
}

/// [`simulate_population`] with the uncoordinated strategy.
pub fn simulate_uncoordinated(cfg: &SimConfig, problem: &MfgProblem) -> Result<SimResult> {
    let cfg = SimConfig {
        strategy: Strategy::Uncoordinated,
        ..cfg.clone()
    };
    simulate_population(&cfg, problem)
}

/// Expected empirical mean of [`simulate_population`]: the Euler recursion
/// of the closed-loop mean from `E[x₀]`. The feedback is affine, so this is
/// exact for the discrete scheme; its distance to the strategy's mean is
/// the first-order time-stepping bias that no population size removes.
pub fn scheme_mean(cfg: &SimConfig, problem: &MfgProblem) -> Result<Trajectory<Vector2<f64>>> {
    cfg.validate()?;
    cfg.grid.ensure_same(problem.grid(), "problem")?;
    let (p, s, _) = strategy_gains(cfg, problem)?;
    let lq = &problem.lq;
    let dt = cfg.grid.dt();
    let mut x = Vector2::new(0.5 * (cfg.soc_lo + cfg.soc_hi), 0.0);
    let mut values = Vec::with_capacity(cfg.grid.len());
    for k in 0..cfg.grid.len() {
        values.push(x);
        let u = feedback_from(&p.value(k), &s.value(k), lq.r, &x);
        x += (lq.system.a * x + lq.system.b * u + lq.system.f.value(k)) * dt;
    }
    Trajectory::from_values(cfg.grid, values)
}

/// Running cost `½(x - r)ᵀQ(x - r) + p x₂ + ½R u²`.
fn running_cost(problem: &MfgProblem, k: usize, x: &Vector2<f64>, u: f64, price: f64) -> f64 {
    let lq = &problem.lq;
    let e = x - lq.reference.value(k);
    0.5 * e.dot(&(lq.q * e)) + price * x[1] + 0.5 * lq.r * u * u
}

fn trapezoid_weight(grid: &TimeGrid, k: usize) -> f64 {
    if k == 0 || k == grid.steps() {
        0.5 * grid.dt()
    } else {
        grid.dt()
    }
}

fn run(
    cfg: &SimConfig,
    problem: &MfgProblem,
    p: &Trajectory<Matrix2<f64>>,
    s: &Trajectory<Vector2<f64>>,
    theory_mean: Trajectory<Vector2<f64>>,
) -> Result<SimResult> {
    let grid = cfg.grid;
    let n = cfg.agents;
    let lq = &problem.lq;
    let (a, b, sigma) = (lq.system.a, lq.system.b, lq.system.sigma);
    let dt = grid.dt();
    let sqdt = dt.sqrt();

    let mut agents: Vec<Agent> = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let soc = if cfg.soc_lo < cfg.soc_hi {
                rng.random_range(cfg.soc_lo..=cfg.soc_hi)
            } else {
                cfg.soc_lo
            };
            Agent {
                x: Vector2::new(soc, 0.0),
                rng,
                cost: 0.0,
                ramp: 0.0,
            }
        })
        .collect();

    let retain = cfg.retains_paths();
    let mut paths = retain.then(|| AgentPaths {
        agents: n,
        soc: Vec::with_capacity(n * grid.len()),
        power: Vec::with_capacity(n * grid.len()),
        ramp: Vec::with_capacity(n * grid.len()),
    });
    let mut mean = Vec::with_capacity(grid.len());
    let mut price = Vec::with_capacity(grid.len());
    let mut soc_q = Vec::with_capacity(grid.len());
    let mut pow_q = Vec::with_capacity(grid.len());
    let mut scratch = vec![0.0; n];

    for k in 0..grid.len() {
        let sum = agents.iter().fold(Vector2::zeros(), |acc, ag| acc + ag.x);
        let m = sum / n as f64;
        let pk = problem.price.alpha(m[1] - problem.grid_target.value(k));
        if !pk.is_finite() {
            return Err(Error::IntegratorFailure(format!(
                "population diverged at t = {}",
                grid.time(k)
            )));
        }
        mean.push(m);
        price.push(pk);
        for (i, ag) in agents.iter().enumerate() {
            scratch[i] = ag.x[0];
        }
        soc_q.push(QUANTILES.map(|q| quantile(&mut scratch, q)));
        for (i, ag) in agents.iter().enumerate() {
            scratch[i] = ag.x[1];
        }
        pow_q.push(QUANTILES.map(|q| quantile(&mut scratch, q)));
        if let Some(paths) = paths.as_mut() {
            paths.soc.extend(agents.iter().map(|ag| ag.x[0]));
            paths.power.extend(agents.iter().map(|ag| ag.x[1]));
        }

        let (pk_gain, sk) = (p.value(k), s.value(k));
        let w = trapezoid_weight(&grid, k);
        let last = k == grid.steps();
        let f = lq.system.f.value(k);
        agents.par_iter_mut().for_each(|ag| {
            let u = feedback_from(&pk_gain, &sk, lq.r, &ag.x);
            ag.ramp = u;
            ag.cost += w * running_cost(problem, k, &ag.x, u, pk);
            if last {
                ag.cost += lq.terminal_cost(&ag.x);
            } else {
                let xi = Vector2::new(ag.rng.sample(StandardNormal), ag.rng.sample(StandardNormal));
                ag.x += (a * ag.x + b * u + f) * dt + sigma * xi * sqdt;
            }
        });
        if let Some(paths) = paths.as_mut() {
            paths.ramp.extend(agents.iter().map(|ag| ag.ramp));
        }
    }

    let mean = Trajectory::from_values(grid, mean)?;
    let consistency = consistency_error_values(&mean, &theory_mean)?;
    Ok(SimResult {
        grid,
        mean,
        theory_mean,
        soc_quantiles: soc_q,
        power_quantiles: pow_q,
        price: Trajectory::from_values(grid, price)?,
        consistency,
        agent_costs: agents.iter().map(|ag| ag.cost).collect(),
        paths,
    })
}

fn consistency_error_values(empirical: &Trajectory<Vector2<f64>>, theory: &Trajectory<Vector2<f64>>) -> Result<f64> {
    empirical.grid().ensure_same(theory.grid(), "mean trajectory")?;
    Ok((0..empirical.grid().len())
        .map(|k| (empirical.value(k)[1] - theory.value(k)[1]).abs())
        .fold(0.0, f64::max))
}

/// `sup_k |x̄₂ᴺ(t_k) - x̄₂(t_k)|`.
pub fn consistency_error(res: &SimResult, mean: &Trajectory<Vector2<f64>>) -> Result<f64> {
    consistency_error_values(&res.mean, mean)
}

/// Average realized cost recomputed from the retained paths: trapezoidal
/// running cost with the empirical price plus the terminal cost.
pub fn realized_cost(res: &SimResult, problem: &MfgProblem) -> Result<f64> {
    let paths = res
        .paths
        .as_ref()
        .ok_or_else(|| Error::MissingData("per-agent paths were not retained".into()))?;
    res.grid.ensure_same(problem.grid(), "problem")?;
    let grid = res.grid;
    let mut total = 0.0;
    for i in 0..paths.agents {
        let mut cost = 0.0;
        for k in 0..grid.len() {
            let x = paths.state(i, k);
            cost += trapezoid_weight(&grid, k) * running_cost(problem, k, &x, paths.ramp(i, k), res.price.value(k));
        }
        cost += problem.lq.terminal_cost(&paths.state(i, grid.steps()));
        total += cost;
    }
    Ok(total / paths.agents as f64)
}
