//! Mean-field equilibrium for a general monotone price.
//!
//! The equilibrium is the pair (x̄, s) solving the coupled boundary value
//! problem
//!
//! ```text
//! -ṡ = (Aᵀ - P S) s + P f + α(x̄₂ - r_g) e₂ - Q r_x,   s(T) = -Q_T r_x(T)
//!  ẋ̄ = (A - S P) x̄ - S s + f,                          x̄(0) = E[x₀]
//! ```
//!
//! Two solvers are provided. [`solve_fixed_point`] iterates on x̄ with
//! damping and is fast when it converges. [`solve_variational`] minimises
//! the auxiliary convex control problem, whose optimality system maps onto
//! (x̄, s) through `x̄ = y`, `s = λ - P y`; it is the reference solver.

mod fixed_point;
mod pmp;
mod variational;

use std::time::Duration;

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::lqsolve::{
    compute_phi, feedback_from, integrate_mean_forward, integrate_offset, AdjointOffset, LqData,
    RiccatiSolution, ValueQuadratic,
};
use crate::model::{CostParams, ModelParams, PriceFunction};
use crate::trajectory::Trajectory;

pub use fixed_point::{solve_fixed_point, FixedPointOptions};
pub use pmp::{pmp_to_tpbvp, tpbvp_residual, tpbvp_to_pmp, PmpTriplet, TpbvpResidual};
pub use variational::{
    auxiliary_cost, auxiliary_gradient, directional_derivative, quadrature_weights, solve_pmp,
    solve_variational, solve_variational_from, VariationalOptions,
};

/// Everything that defines one equilibrium problem on one grid.
#[derive(Clone, Debug)]
pub struct MfgProblem {
    pub lq: LqData,
    pub price: PriceFunction,
    /// Grid operator's target r_g(t).
    pub grid_target: Trajectory<f64>,
    /// E[x₀].
    pub initial_mean: Vector2<f64>,
}

impl MfgProblem {
    pub fn new(
        model: &ModelParams,
        cost: &CostParams,
        price: PriceFunction,
        grid: &TimeGrid,
        initial_mean: Vector2<f64>,
    ) -> Result<Self> {
        if !initial_mean.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("initial mean must be finite".into()));
        }
        Ok(Self {
            lq: LqData::new(model, cost, grid)?,
            price,
            grid_target: cost.grid_target.sample(grid),
            initial_mean,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.lq.grid
    }

    /// Same problem with another price function.
    pub fn with_price(&self, price: PriceFunction) -> Self {
        Self {
            price,
            ..self.clone()
        }
    }

    /// `p(t) = α(x̄₂(t) - r_g(t))`.
    pub fn price_path(&self, mean: &Trajectory<Vector2<f64>>) -> Result<Trajectory<f64>> {
        let price = mean.zip_map(&self.grid_target, |x, rg| self.price.alpha(x[1] - rg))?;
        if !price.values().iter().all(|p| p.is_finite()) {
            return Err(Error::Domain("mean trajectory is not finite".into()));
        }
        Ok(price)
    }

    /// Best response of the population to a price path: the offset and the
    /// mean it generates.
    pub fn respond(
        &self,
        riccati: &RiccatiSolution,
        price: &Trajectory<f64>,
    ) -> Result<(AdjointOffset, Trajectory<Vector2<f64>>)> {
        let offset = integrate_offset(&self.lq, riccati, price)?;
        let mean = integrate_mean_forward(&self.lq, riccati, &offset, self.initial_mean)?;
        Ok((offset, mean))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    FixedPoint,
    Variational,
    Affine,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::FixedPoint => "fixed_point",
            Method::Variational => "variational",
            Method::Affine => "affine",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct Diagnostics {
    pub method: Method,
    pub iterations: usize,
    /// Fixed point: last sup change of x̄. Variational: sup |u - u*| at the
    /// minimiser. Affine: Π-consistency defect.
    pub residual: f64,
    /// Sup norm of the auxiliary gradient (variational only).
    pub gradient_norm: Option<f64>,
    pub wall_time: Duration,
    /// Auxiliary cost after each accepted step (variational only).
    pub objective_history: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EquilibriumSolution {
    pub riccati: RiccatiSolution,
    pub offset: AdjointOffset,
    pub mean: Trajectory<Vector2<f64>>,
    pub price: Trajectory<f64>,
    /// `Ω = P + Π` of the affine reduction, when that solver was used.
    pub omega: Option<Trajectory<Matrix2<f64>>>,
    pub diagnostics: Diagnostics,
}

impl EquilibriumSolution {
    pub fn grid(&self) -> &TimeGrid {
        self.mean.grid()
    }

    /// Ramp rate along the mean trajectory, at the grid nodes.
    pub fn mean_control(&self, r: f64) -> Trajectory<f64> {
        let values = (0..self.grid().len())
            .map(|k| {
                feedback_from(
                    &self.riccati.p.value(k),
                    &self.offset.s.value(k),
                    r,
                    &self.mean.value(k),
                )
            })
            .collect();
        Trajectory::from_values(*self.grid(), values).expect("same grid")
    }

    /// Quadratic value function of a representative agent facing this price.
    pub fn value_quadratic(&self, lq: &LqData) -> Result<ValueQuadratic> {
        let phi = compute_phi(lq, &self.riccati, &self.offset)?;
        Ok(ValueQuadratic {
            p: self.riccati.p.clone(),
            s: self.offset.s.clone(),
            phi,
        })
    }

    /// Sup distance between x̄ and the mean regenerated by one undamped
    /// best-response pass through its own price.
    pub fn consistency_residual(&self, problem: &MfgProblem) -> Result<f64> {
        let price = problem.price_path(&self.mean)?;
        let (_, mean) = problem.respond(&self.riccati, &price)?;
        mean.sup_distance(&self.mean)
    }
}
