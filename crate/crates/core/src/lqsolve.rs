//! Best response of a single agent to a given price path.
//!
//! With the quadratic value function `V(t, z) = ½ zᵀP z + sᵀz + φ`, the
//! coefficients solve, backward from `T`,
//!
//! ```text
//! -Ṗ = AᵀP + PA - P S P + Q,                       P(T) = Q_T
//! -ṡ = (Aᵀ - P S) s + P f + p e₂ - Q r_x,          s(T) = -Q_T r_x(T)
//! -φ̇ = -½ sᵀS s + sᵀf + ½ tr(ΣΣᵀP) + ½ r_xᵀQ r_x,  φ(T) = ½ r_x(T)ᵀQ_T r_x(T)
//! ```
//!
//! with `S = B R⁻¹ Bᵀ`, and the optimal ramp rate is `-R⁻¹Bᵀ(P z + s)`.
//! All sweeps are fixed-step RK4 on the shared grid.

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{build_system, min_eigenvalue, CostParams, LinearSystem, ModelParams};
use crate::trajectory::{rk4_backward, rk4_forward, Trajectory};

const BLOW_UP: f64 = 1e12;

/// System and cost data of the best-response problem, sampled on one grid.
#[derive(Clone, Debug)]
pub struct LqData {
    pub grid: TimeGrid,
    pub system: LinearSystem,
    pub q: Matrix2<f64>,
    pub r: f64,
    pub q_terminal: Matrix2<f64>,
    /// Running reference r_x(t).
    pub reference: Trajectory<Vector2<f64>>,
    /// Terminal reference r_x(T).
    pub terminal_reference: Vector2<f64>,
}

impl LqData {
    pub fn new(model: &ModelParams, cost: &CostParams, grid: &TimeGrid) -> Result<Self> {
        model.validate()?;
        cost.validate()?;
        Ok(Self {
            grid: *grid,
            system: build_system(model, grid),
            q: cost.q,
            r: cost.r,
            q_terminal: cost.q_terminal,
            reference: cost.sample_reference(grid),
            terminal_reference: cost.terminal_reference,
        })
    }

    /// `S = B R⁻¹ Bᵀ`.
    pub fn control_weight(&self) -> Matrix2<f64> {
        self.system.b * self.system.b.transpose() / self.r
    }

    /// Terminal cost `½ (z - r_x(T))ᵀ Q_T (z - r_x(T))`.
    pub fn terminal_cost(&self, z: &Vector2<f64>) -> f64 {
        let e = z - self.terminal_reference;
        0.5 * e.dot(&(self.q_terminal * e))
    }
}

/// Riccati solution `P(t)` with its terminal anchor.
#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    pub p: Trajectory<Matrix2<f64>>,
    pub terminal: Matrix2<f64>,
}

impl RiccatiSolution {
    pub fn grid(&self) -> &TimeGrid {
        self.p.grid()
    }

    /// Smallest eigenvalue over all nodes.
    pub fn min_eigenvalue(&self) -> f64 {
        self.p.values().iter().map(min_eigenvalue).fold(f64::INFINITY, f64::min)
    }
}

/// Linear coefficient `s(t)` of the value function.
#[derive(Clone, Debug)]
pub struct AdjointOffset {
    pub s: Trajectory<Vector2<f64>>,
}

/// All three value-function coefficients.
#[derive(Clone, Debug)]
pub struct ValueQuadratic {
    pub p: Trajectory<Matrix2<f64>>,
    pub s: Trajectory<Vector2<f64>>,
    pub phi: Trajectory<f64>,
}

/// Integrates `-Ṗ = AᵀP + PA - P B R⁻¹ Bᵀ P + Q_eff`, `P(T) = Q_T`.
///
/// Each step is symmetrised. A norm above `1e12` is reported as an
/// integrator failure; for PSD data the solution stays bounded.
pub fn integrate_riccati(
    a: &Matrix2<f64>,
    b: &Vector2<f64>,
    q_eff: &Matrix2<f64>,
    r: f64,
    q_terminal: &Matrix2<f64>,
    grid: &TimeGrid,
) -> Result<RiccatiSolution> {
    if !(r > 0.0) {
        return Err(Error::InvalidParameter(format!("R must be > 0, got {r}")));
    }
    let s = b * b.transpose() / r;
    let at = a.transpose();
    let p = rk4_backward(
        grid,
        *q_terminal,
        |_, p: Matrix2<f64>| -(at * p + p * a - p * s * p + q_eff),
        |p| {
            let p = (p + p.transpose()) * 0.5;
            if !p.iter().all(|v| v.is_finite()) || p.norm() > BLOW_UP {
                Err(Error::IntegratorFailure(format!(
                    "Riccati solution left the bounded region (|P| = {:.3e})",
                    p.norm()
                )))
            } else {
                Ok(p)
            }
        },
    )?;
    Ok(RiccatiSolution {
        p,
        terminal: *q_terminal,
    })
}

/// Riccati solution for the running weight of `lq`.
pub fn riccati_for(lq: &LqData) -> Result<RiccatiSolution> {
    integrate_riccati(&lq.system.a, &lq.system.b, &lq.q, lq.r, &lq.q_terminal, &lq.grid)
}

/// Integrates `-ṡ = (Aᵀ - P S) s + P f + p e₂ - Q r_x`, `s(T) = -Q_T r_x(T)`.
pub fn integrate_offset(
    lq: &LqData,
    riccati: &RiccatiSolution,
    price: &Trajectory<f64>,
) -> Result<AdjointOffset> {
    lq.grid.ensure_same(riccati.grid(), "Riccati solution")?;
    lq.grid.ensure_same(price.grid(), "price path")?;
    let at = lq.system.a.transpose();
    let sw = lq.control_weight();
    let b = lq.system.b;
    let terminal = -(lq.q_terminal * lq.terminal_reference);
    let s = rk4_backward(
        &lq.grid,
        terminal,
        |st, s: Vector2<f64>| {
            let p = riccati.p.stage(st);
            -((at - p * sw) * s + p * lq.system.f.stage(st) + b * price.stage(st)
                - lq.q * lq.reference.stage(st))
        },
        Ok,
    )?;
    Ok(AdjointOffset { s })
}

/// Integrates the mean dynamics `ẋ̄ = (A - S P) x̄ - S s + f`, `x̄(0) = x̄₀`.
pub fn integrate_mean_forward(
    lq: &LqData,
    riccati: &RiccatiSolution,
    offset: &AdjointOffset,
    initial_mean: Vector2<f64>,
) -> Result<Trajectory<Vector2<f64>>> {
    lq.grid.ensure_same(riccati.grid(), "Riccati solution")?;
    lq.grid.ensure_same(offset.s.grid(), "adjoint offset")?;
    let a = lq.system.a;
    let sw = lq.control_weight();
    Ok(rk4_forward(&lq.grid, initial_mean, |st, x: Vector2<f64>| {
        let p = riccati.p.stage(st);
        (a - sw * p) * x - sw * offset.s.stage(st) + lq.system.f.stage(st)
    }))
}

/// Optimal ramp rate `-R⁻¹Bᵀ(P(t) z + s(t))`.
pub fn feedback_control(
    p: &Trajectory<Matrix2<f64>>,
    s: &Trajectory<Vector2<f64>>,
    r: f64,
    t: f64,
    z: &Vector2<f64>,
) -> Result<f64> {
    let p_t = p.at(t)?;
    let s_t = s.at(t)?;
    Ok(feedback_from(&p_t, &s_t, r, z))
}

/// Feedback with the gains already evaluated.
#[inline]
pub fn feedback_from(p: &Matrix2<f64>, s: &Vector2<f64>, r: f64, z: &Vector2<f64>) -> f64 {
    -(p[(1, 0)] * z[0] + p[(1, 1)] * z[1] + s[1]) / r
}

/// Integrates the scalar offset φ of the value function.
pub fn compute_phi(lq: &LqData, riccati: &RiccatiSolution, offset: &AdjointOffset) -> Result<Trajectory<f64>> {
    lq.grid.ensure_same(riccati.grid(), "Riccati solution")?;
    lq.grid.ensure_same(offset.s.grid(), "adjoint offset")?;
    let sw = lq.control_weight();
    let noise = lq.system.sigma * lq.system.sigma.transpose();
    let terminal = 0.5 * lq.terminal_reference.dot(&(lq.q_terminal * lq.terminal_reference));
    rk4_backward(
        &lq.grid,
        terminal,
        |st, _| {
            let s = offset.s.stage(st);
            let rx = lq.reference.stage(st);
            -(-0.5 * s.dot(&(sw * s))
                + s.dot(&lq.system.f.stage(st))
                + 0.5 * (noise * riccati.p.stage(st)).trace()
                + 0.5 * rx.dot(&(lq.q * rx)))
        },
        Ok,
    )
}

/// `V(t, z) = ½ zᵀP(t)z + s(t)ᵀz + φ(t)`.
pub fn value_function(vq: &ValueQuadratic, t: f64, z: &Vector2<f64>) -> Result<f64> {
    let p = vq.p.at(t)?;
    let s = vq.s.at(t)?;
    let phi = vq.phi.at(t)?;
    Ok(0.5 * z.dot(&(p * z)) + s.dot(z) + phi)
}

/// Full best response to a price path: P, s and φ.
pub fn best_response(lq: &LqData, price: &Trajectory<f64>) -> Result<ValueQuadratic> {
    let ric = riccati_for(lq)?;
    let off = integrate_offset(lq, &ric, price)?;
    let phi = compute_phi(lq, &ric, &off)?;
    Ok(ValueQuadratic {
        p: ric.p,
        s: off.s,
        phi,
    })
}
