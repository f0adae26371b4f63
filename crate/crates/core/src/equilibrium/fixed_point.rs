use std::time::Instant;

use crate::error::{Error, Result};
use crate::lqsolve::riccati_for;

use super::{Diagnostics, EquilibriumSolution, Method, MfgProblem};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedPointOptions {
    /// θ in `x̄ ← (1 - θ) x̄ + θ x̄_new`.
    pub damping: f64,
    /// Stop when the sup change of x̄ is at most this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

/// Damped fixed-point iteration on the mean trajectory.
///
/// Starts from the best response to `α(-r_g)`. Convergence is not
/// guaranteed for steep prices; a non-convergence error carries the last
/// change so the caller can fall back to [`super::solve_variational`].
pub fn solve_fixed_point(problem: &MfgProblem, opts: &FixedPointOptions) -> Result<EquilibriumSolution> {
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "damping must lie in (0, 1], got {}",
            opts.damping
        )));
    }
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(Error::InvalidParameter("tol must be > 0 and max_iter >= 1".into()));
    }
    let start = Instant::now();
    let theta = opts.damping;
    let riccati = riccati_for(&problem.lq)?;
    let initial_price = problem.grid_target.map(|rg| problem.price.alpha(-rg));
    let (_, mut mean) = problem.respond(&riccati, &initial_price)?;

    let mut change = f64::INFINITY;
    for iteration in 1..=opts.max_iter {
        let price = problem.price_path(&mean)?;
        let (_, fresh) = problem.respond(&riccati, &price)?;
        let next = mean.zip_map(&fresh, |a, b| a * (1.0 - theta) + b * theta)?;
        change = next.sup_distance(&mean)?;
        mean = next;
        if !change.is_finite() {
            break;
        }
        if change <= opts.tol {
            let price = problem.price_path(&mean)?;
            let (offset, mean) = problem.respond(&riccati, &price)?;
            let price = problem.price_path(&mean)?;
            return Ok(EquilibriumSolution {
                riccati,
                offset,
                mean,
                price,
                omega: None,
                diagnostics: Diagnostics {
                    method: Method::FixedPoint,
                    iterations: iteration,
                    residual: change,
                    gradient_norm: None,
                    wall_time: start.elapsed(),
                    objective_history: Vec::new(),
                },
            });
        }
    }
    Err(Error::NotConverged {
        method: "fixed-point iteration",
        iterations: opts.max_iter,
        residual: change,
    })
}
