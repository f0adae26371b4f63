use nalgebra::Vector2;

use crate::error::Result;
use crate::lqsolve::RiccatiSolution;
use crate::model::e2;
use crate::trajectory::{hermite_mid, Stage, Trajectory};

use super::{EquilibriumSolution, MfgProblem};

/// Optimality system of the auxiliary problem: control, state, costate.
#[derive(Clone, Debug, PartialEq)]
pub struct PmpTriplet {
    /// `u* = -R⁻¹Bᵀλ*`.
    pub control: Trajectory<f64>,
    pub state: Trajectory<Vector2<f64>>,
    pub costate: Trajectory<Vector2<f64>>,
}

/// `x̄ = y`, `s = λ - P y`.
pub fn pmp_to_tpbvp(
    triplet: &PmpTriplet,
    riccati: &RiccatiSolution,
) -> Result<(Trajectory<Vector2<f64>>, Trajectory<Vector2<f64>>)> {
    let py = riccati.p.zip_map(&triplet.state, |p, y| p * y)?;
    let s = triplet.costate.zip_map(&py, |l, py| l - py)?;
    Ok((triplet.state.clone(), s))
}

/// `y = x̄`, `λ = P x̄ + s`, `u = -R⁻¹Bᵀλ`.
pub fn tpbvp_to_pmp(
    mean: &Trajectory<Vector2<f64>>,
    s: &Trajectory<Vector2<f64>>,
    riccati: &RiccatiSolution,
    r: f64,
) -> Result<PmpTriplet> {
    let px = riccati.p.zip_map(mean, |p, x| p * x)?;
    let costate = px.zip_map(s, |px, s| px + s)?;
    Ok(PmpTriplet {
        control: costate.map(|l| -l[1] / r),
        state: mean.clone(),
        costate,
    })
}

/// Defects of the equilibrium boundary value problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TpbvpResidual {
    /// Sup defect of the offset equation.
    pub backward: f64,
    /// Sup defect of the mean equation.
    pub forward: f64,
    /// `|s(T) + Q_T r_x(T)| + |x̄(0) - E[x₀]|`.
    pub terminal: f64,
}

impl TpbvpResidual {
    pub fn max(&self) -> f64 {
        self.backward.max(self.forward).max(self.terminal)
    }
}

/// Residual of (x̄, s) in the equilibrium equations, with the price
/// recomputed from x̄.
///
/// On every sample interval of the solution the defect is
/// `(v_{j+1} - v_j)/h - (F_j + 4 F_m + F_{j+1})/6`, where `F` is the
/// right-hand side and the midpoint state is the cubic Hermite value from
/// the interval's end values and end slopes. This is the Hermite-Simpson
/// collocation defect, fourth order for smooth solutions.
pub fn tpbvp_residual(sol: &EquilibriumSolution, problem: &MfgProblem) -> Result<TpbvpResidual> {
    let grid = problem.grid();
    let lq = &problem.lq;
    grid.ensure_same(sol.mean.grid(), "mean")?;
    grid.ensure_same(sol.offset.s.grid(), "offset")?;
    grid.ensure_same(sol.riccati.grid(), "Riccati solution")?;
    let sub = sol
        .mean
        .samples_per_interval()
        .max(sol.offset.s.samples_per_interval());
    let n = grid.steps() * sub;
    let h = grid.dt() / sub as f64;
    let pos = |x: f64| Stage(x / sub as f64);
    let sw = lq.control_weight();
    let at = lq.system.a.transpose();

    // (ṡ, ẋ̄) at a stage position given P there
    let rhs = |st: Stage, s: Vector2<f64>, x: Vector2<f64>| {
        let p = sol.riccati.p.stage(st);
        let f = lq.system.f.stage(st);
        let price = problem.price.alpha(x[1] - problem.grid_target.stage(st));
        let ds = -((at - p * sw) * s + p * f + e2() * price - lq.q * lq.reference.stage(st));
        let dx = (lq.system.a - sw * p) * x - sw * s + f;
        (ds, dx)
    };

    let node = |j: usize| {
        let st = pos(j as f64);
        let s = sol.offset.s.stage(st);
        let x = sol.mean.stage(st);
        let (ds, dx) = rhs(st, s, x);
        (s, x, ds, dx)
    };
    let (mut backward, mut forward) = (0.0f64, 0.0f64);
    let mut left = node(0);
    for j in 0..n {
        let right = node(j + 1);
        let (s0, x0, ds0, dx0) = left;
        let (s1, x1, ds1, dx1) = right;
        let sm = hermite_mid(s0, s1, ds0, ds1, h);
        let xm = hermite_mid(x0, x1, dx0, dx1, h);
        let (dsm, dxm) = rhs(pos(j as f64 + 0.5), sm, xm);
        let ds_defect = (s1 - s0) / h - (ds0 + dsm * 4.0 + ds1) / 6.0;
        let dx_defect = (x1 - x0) / h - (dx0 + dxm * 4.0 + dx1) / 6.0;
        backward = backward.max(ds_defect.norm());
        forward = forward.max(dx_defect.norm());
        left = right;
    }
    let terminal = (sol.offset.s.last() + lq.q_terminal * lq.terminal_reference).norm()
        + (sol.mean.first() - problem.initial_mean).norm();
    Ok(TpbvpResidual {
        backward,
        forward,
        terminal,
    })
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::super::{solve_fixed_point, FixedPointOptions};
    use super::*;
    use crate::grid::TimeGrid;
    use crate::lqsolve::{riccati_for, AdjointOffset};
    use crate::model::PriceFunction;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_path(grid: TimeGrid, rng: &mut ChaCha8Rng) -> Trajectory<Vector2<f64>> {
        let values = (0..grid.len())
            .map(|_| Vector2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)))
            .collect();
        Trajectory::from_values(grid, values).unwrap()
    }

    #[test]
    fn zero_maps_to_zero() {
        let problem = problem(100, affine());
        let ric = riccati_for(&problem.lq).unwrap();
        let grid = *problem.grid();
        let zero = Trajectory::<Vector2<f64>>::zeros(grid);
        let trip = tpbvp_to_pmp(&zero, &zero, &ric, 0.1).unwrap();
        assert_eq!(trip.control.sup_norm(), 0.0);
        assert_eq!(trip.costate.sup_norm(), 0.0);
        let (x, s) = pmp_to_tpbvp(&trip, &ric).unwrap();
        assert_eq!(x.sup_norm(), 0.0);
        assert_eq!(s.sup_norm(), 0.0);
    }

    #[test]
    fn maps_are_inverse() {
        let problem = problem(100, affine());
        let ric = riccati_for(&problem.lq).unwrap();
        let grid = *problem.grid();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let x = random_path(grid, &mut rng);
            let s = random_path(grid, &mut rng);
            let trip = tpbvp_to_pmp(&x, &s, &ric, 0.1).unwrap();
            let (x2, s2) = pmp_to_tpbvp(&trip, &ric).unwrap();
            assert!(x2.sup_distance(&x).unwrap() <= 1e-12);
            assert!(s2.sup_distance(&s).unwrap() <= 1e-12);
            let trip2 = tpbvp_to_pmp(&x2, &s2, &ric, 0.1).unwrap();
            assert!(trip2.costate.sup_distance(&trip.costate).unwrap() <= 1e-12);
            assert!(trip2.control.sup_distance(&trip.control).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn maps_reject_grid_mismatch() {
        let problem = problem(100, affine());
        let ric = riccati_for(&problem.lq).unwrap();
        let other = Trajectory::<Vector2<f64>>::zeros(TimeGrid::with_steps(8.0, 50).unwrap());
        assert!(tpbvp_to_pmp(&other, &other, &ric, 0.1).is_err());
    }

    #[test]
    fn decoupled_solution_has_tiny_residual() {
        let problem = problem(1600, PriceFunction::zero());
        let sol = solve_fixed_point(&problem, &FixedPointOptions::default()).unwrap();
        let res = tpbvp_residual(&sol, &problem).unwrap();
        assert!(res.max() <= 1e-7, "{res:?}");
        assert_eq!(res.terminal, 0.0);
    }

    #[test]
    fn corrupted_offset_is_detected() {
        let problem = problem(400, sigmoid());
        let mut sol = solve_fixed_point(&problem, &FixedPointOptions::default()).unwrap();
        let clean = tpbvp_residual(&sol, &problem).unwrap();
        assert!(clean.max() <= 1e-5, "{clean:?}");
        sol.offset = AdjointOffset {
            s: sol.offset.s.map(|s| s + Vector2::new(0.0, 0.1)),
        };
        let res = tpbvp_residual(&sol, &problem).unwrap();
        assert!(res.backward > 1e-2, "{res:?}");
    }
}
