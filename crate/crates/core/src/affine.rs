//! Closed-form equilibrium for an affine price `α(d) = c₁ d + c₀`.
//!
//! With the decoupling `s = Π x̄ + β` and `Ω = P + Π` the equilibrium
//! reduces to one extra Riccati equation and two linear sweeps:
//!
//! ```text
//! -Ω̇ = AᵀΩ + ΩA - Ω S Ω + Q + c₁ e₂e₂ᵀ,                     Ω(T) = Q_T
//! -β̇ = (Aᵀ - Ω S) β + Ω f - Q r_x - c₁ r_g e₂ + c₀ e₂,       β(T) = -Q_T r_x(T)
//!  ẋ̄ = (A - S Ω) x̄ - S β + f,                                x̄(0) = E[x₀]
//! ```

use std::time::Instant;

use nalgebra::{Matrix2, Vector2};

use crate::equilibrium::{Diagnostics, EquilibriumSolution, Method, MfgProblem};
use crate::error::{Error, Result};
use crate::lqsolve::{integrate_riccati, riccati_for, AdjointOffset, RiccatiSolution};
use crate::model::{e2, PriceFunction};
use crate::trajectory::{rk4_backward, rk4_forward, Trajectory};

#[derive(Clone, Debug)]
pub struct AffineEquilibrium {
    /// Riccati solution with weight `Q`.
    pub riccati: RiccatiSolution,
    /// Riccati solution with weight `Q + c₁ e₂e₂ᵀ`.
    pub omega: RiccatiSolution,
    /// `Π = Ω - P`.
    pub pi: Trajectory<Matrix2<f64>>,
    pub beta: Trajectory<Vector2<f64>>,
    pub mean: Trajectory<Vector2<f64>>,
    /// `s = Π x̄ + β`.
    pub offset: AdjointOffset,
    /// `c₁ (x̄₂ - r_g) + c₀`.
    pub price: Trajectory<f64>,
    pub slope: f64,
    pub baseline: f64,
    pub diagnostics: Diagnostics,
}

impl AffineEquilibrium {
    /// `γ*(t, z) = -R⁻¹Bᵀ(P z + Π x̄ + β)` at node `k`.
    pub fn feedback(&self, k: usize, z: &Vector2<f64>, r: f64) -> f64 {
        crate::lqsolve::feedback_from(&self.riccati.p.value(k), &self.offset.s.value(k), r, z)
    }

    /// The same equilibrium in the form shared with the other solvers.
    pub fn to_solution(&self) -> EquilibriumSolution {
        EquilibriumSolution {
            riccati: self.riccati.clone(),
            offset: self.offset.clone(),
            mean: self.mean.clone(),
            price: self.price.clone(),
            omega: Some(self.omega.p.clone()),
            diagnostics: self.diagnostics.clone(),
        }
    }
}

fn affine_coefficients(price: &PriceFunction) -> Result<(f64, f64)> {
    match *price {
        PriceFunction::Affine { slope, offset } if slope > 0.0 && slope.is_finite() && offset.is_finite() => {
            Ok((slope, offset))
        }
        PriceFunction::Affine { slope, .. } => Err(Error::Assumption(format!(
            "affine price needs a positive slope (with c1>0), got c1 = {slope}"
        ))),
        _ => Err(Error::Assumption("the closed-form solver needs an affine price".into())),
    }
}

/// Solves the equilibrium of `problem`, whose price must be affine.
pub fn solve_affine(problem: &MfgProblem) -> Result<AffineEquilibrium> {
    let start = Instant::now();
    let (c1, c0) = affine_coefficients(&problem.price)?;
    let lq = &problem.lq;
    let grid = problem.grid();
    let (a, b) = (lq.system.a, lq.system.b);
    let sw = lq.control_weight();

    let riccati = riccati_for(lq)?;
    let q_eff = lq.q + e2() * e2().transpose() * c1;
    let omega = integrate_riccati(&a, &b, &q_eff, lq.r, &lq.q_terminal, grid)?;
    let om = &omega.p;

    let beta = rk4_backward(
        grid,
        -(lq.q_terminal * lq.terminal_reference),
        |st, beta: Vector2<f64>| {
            let w = om.stage(st);
            let rg = problem.grid_target.stage(st);
            -((a.transpose() - w * sw) * beta + w * lq.system.f.stage(st) - lq.q * lq.reference.stage(st)
                + e2() * (c0 - c1 * rg))
        },
        Ok,
    )?;
    let mean = rk4_forward(grid, problem.initial_mean, |st, x: Vector2<f64>| {
        (a - sw * om.stage(st)) * x - sw * beta.stage(st) + lq.system.f.stage(st)
    });
    let pi = om.zip_map(&riccati.p, |w, p| w - p)?;
    let s = pi.zip_map(&mean, |pi, x| pi * x)?.zip_map(&beta, |px, b| px + b)?;
    let price = mean.zip_map(&problem.grid_target, |x, rg| c1 * (x[1] - rg) + c0)?;

    let mut eq = AffineEquilibrium {
        riccati,
        omega,
        pi,
        beta,
        mean,
        offset: AdjointOffset { s },
        price,
        slope: c1,
        baseline: c0,
        diagnostics: Diagnostics {
            method: Method::Affine,
            iterations: 1,
            residual: 0.0,
            gradient_norm: None,
            wall_time: Default::default(),
            objective_history: Vec::new(),
        },
    };
    eq.diagnostics.residual = pi_consistency_check(&eq, problem)?;
    eq.diagnostics.wall_time = start.elapsed();
    Ok(eq)
}

/// Integrates `-Π̇ = Π A_cl + A_clᵀΠ - Π S Π + c₁ e₂e₂ᵀ`, `Π(T) = 0`, with
/// `A_cl = A - S P`, and returns the sup-node distance to the stored `Ω - P`.
pub fn pi_consistency_check(eq: &AffineEquilibrium, problem: &MfgProblem) -> Result<f64> {
    let lq = &problem.lq;
    problem.grid().ensure_same(eq.pi.grid(), "affine equilibrium")?;
    let sw = lq.control_weight();
    let source = e2() * e2().transpose() * eq.slope;
    let p = &eq.riccati.p;
    let direct = rk4_backward(
        problem.grid(),
        Matrix2::zeros(),
        |st, pi: Matrix2<f64>| {
            let acl = lq.system.a - sw * p.stage(st);
            -(pi * acl + acl.transpose() * pi - pi * sw * pi + source)
        },
        |pi| Ok((pi + pi.transpose()) * 0.5),
    )?;
    direct.sup_distance(&eq.pi)
}
