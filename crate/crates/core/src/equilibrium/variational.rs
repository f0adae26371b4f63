//! Auxiliary convex control problem
//!
//! ```text
//! J(u) = ∫ ½yᵀQy + ½Ru² + Φ(y₂ - r_g) - r_xᵀQy dt + ½(y(T) - r_x(T))ᵀQ_T(y(T) - r_x(T))
//! ẏ = Ay + Bu + f,  y(0) = E[x₀]
//! ```
//!
//! and its minimisation.
//!
//! Discretisation: one control value per grid node, cubic Lagrange
//! interpolation to the RK4 stages, the state integrated with
//! [`SUBSTEPS`] RK4 steps per interval and the state part of the running
//! cost carried as an extra RK4 component. The control part uses the
//! scheme's own node weights `W_k` (the gradient of the discrete ∫u), so
//! `Σ W_k ½ R u_k²`. The gradient is the exact derivative of this discrete
//! cost (reverse mode through RK4), reported as a density `g_k / W_k`,
//! which approximates `R u(t_k) + λ₂(t_k)`.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::lqsolve::{riccati_for, RiccatiSolution};
use crate::model::e2;
use crate::trajectory::{rk4_backward_sub, rk4_forward_sub, with_slopes, Sample, Stage, Trajectory, SUBSTEPS};

use super::pmp::{pmp_to_tpbvp, PmpTriplet};
use super::{Diagnostics, EquilibriumSolution, Method, MfgProblem};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariationalOptions {
    /// Stop when the sup norm of the gradient density is at most this.
    pub tol: f64,
    pub max_iter: usize,
    /// L-BFGS memory.
    pub memory: usize,
}

impl Default for VariationalOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 500,
            memory: 10,
        }
    }
}

/// Cubic Lagrange weights for the four nodes `base..base + 4`.
#[derive(Clone, Copy, Debug)]
struct Interp {
    base: usize,
    w: [f64; 4],
}

fn lagrange(xi: f64) -> [f64; 4] {
    let mut w = [1.0; 4];
    for (i, wi) in w.iter_mut().enumerate() {
        for j in 0..4 {
            if i != j {
                *wi *= (xi - j as f64) / (i as f64 - j as f64);
            }
        }
    }
    w
}

struct Discretization<'a> {
    problem: &'a MfgProblem,
    /// Fine RK4 step.
    h: f64,
    /// RK4 steps per grid interval.
    sub: usize,
    /// Fine steps in total.
    n: usize,
    /// Per half-step position `i = 0..=2n` (even: fine node, odd: fine midpoint).
    interp: Vec<Interp>,
    drift: Vec<Vector2<f64>>,
    q_ref: Vec<Vector2<f64>>,
    target: Vec<f64>,
    /// Simpson weights of the half-step positions.
    simpson: Vec<f64>,
    /// `W_k`.
    weights: Vec<f64>,
    /// Control mass matrix `M_kl = ∫ ℓ_k ℓ_l` under the same quadrature.
    mass: BandCholesky,
}

/// Half-bandwidth of the mass matrix (cubic stencils share at most four nodes).
const BAND: usize = 3;

/// Cholesky factor of a symmetric positive definite band matrix, kept with
/// the matrix itself. Row `k` holds entries `(k, k - j)` for `j = 0..=BAND`.
#[derive(Default)]
struct BandCholesky {
    matrix: Vec<[f64; BAND + 1]>,
    factor: Vec<[f64; BAND + 1]>,
}

impl BandCholesky {
    fn factor(matrix: Vec<[f64; BAND + 1]>) -> Result<Self> {
        let n = matrix.len();
        let mut l = vec![[0.0; BAND + 1]; n];
        for i in 0..n {
            for j in (0..=BAND.min(i)).rev() {
                let c = i - j;
                let mut v = matrix[i][j];
                for k in 1..=BAND.min(c) {
                    if j + k <= BAND {
                        v -= l[i][j + k] * l[c][k];
                    }
                }
                if j == 0 {
                    if !(v > 0.0) {
                        return Err(Error::IntegratorFailure("control mass matrix is singular".into()));
                    }
                    l[i][0] = v.sqrt();
                } else {
                    l[i][j] = v / l[c][0];
                }
            }
        }
        Ok(Self { matrix, factor: l })
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[i] += self.matrix[i][0] * x[i];
            for j in 1..=BAND.min(i) {
                y[i] += self.matrix[i][j] * x[i - j];
                y[i - j] += self.matrix[i][j] * x[i];
            }
        }
        y
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let l = &self.factor;
        let n = b.len();
        let mut z = b.to_vec();
        for i in 0..n {
            for j in 1..=BAND.min(i) {
                z[i] -= l[i][j] * z[i - j];
            }
            z[i] /= l[i][0];
        }
        for i in (0..n).rev() {
            for j in 1..=BAND.min(n - 1 - i) {
                z[i] -= l[i + j][j] * z[i + j];
            }
            z[i] /= l[i][0];
        }
        z
    }
}

/// Kahan-compensated running sum.
struct Compensated<T> {
    sum: T,
    carry: T,
}

impl<T: Sample> Compensated<T> {
    fn new(value: T) -> Self {
        Self {
            sum: value,
            carry: T::zero(),
        }
    }

    fn add(&mut self, x: T) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }
}

struct Evaluation {
    cost: f64,
    /// State part of `∂J/∂u_k` (everything except `R W_k u_k`).
    adjoint: Option<Vec<f64>>,
    states: Vec<Vector2<f64>>,
    controls: Vec<f64>,
}

impl<'a> Discretization<'a> {
    fn new(problem: &'a MfgProblem) -> Result<Self> {
        let grid = problem.grid();
        let m = grid.steps();
        if m < 3 {
            return Err(Error::InvalidParameter(
                "the variational solver needs at least 3 grid steps".into(),
            ));
        }
        let sub = SUBSTEPS;
        let n = m * sub;
        let h = grid.dt() / sub as f64;
        let half = 2 * sub;
        let pos = |i: usize| Stage(i as f64 / half as f64);
        let interp = (0..=2 * n)
            .map(|i| {
                let k = (i / half).min(m - 1);
                let x = (i - k * half) as f64 / half as f64;
                let base = if k == 0 { 0 } else { (k - 1).min(m - 3) };
                Interp {
                    base,
                    w: lagrange((k - base) as f64 + x),
                }
            })
            .collect();
        let lq = &problem.lq;
        let drift = (0..=2 * n).map(|i| lq.system.f.stage(pos(i))).collect();
        let q_ref = (0..=2 * n).map(|i| lq.q * lq.reference.stage(pos(i))).collect();
        let target = (0..=2 * n).map(|i| problem.grid_target.stage(pos(i))).collect();
        let mut disc = Self {
            problem,
            h,
            sub,
            n,
            interp,
            drift,
            q_ref,
            target,
            simpson: vec![0.0; 2 * n + 1],
            weights: Vec::new(),
            mass: BandCholesky::default(),
        };
        for j in 0..n {
            disc.simpson[2 * j] += h / 6.0;
            disc.simpson[2 * j + 1] += 4.0 * h / 6.0;
            disc.simpson[2 * j + 2] += h / 6.0;
        }
        disc.weights = disc.scatter(&disc.simpson);
        let mut band = vec![[0.0; BAND + 1]; m + 1];
        for (ip, &om) in disc.interp.iter().zip(&disc.simpson) {
            for i in 0..4 {
                for j in 0..=i {
                    band[ip.base + i][i - j] += om * ip.w[i] * ip.w[j];
                }
            }
        }
        disc.mass = BandCholesky::factor(band)?;
        Ok(disc)
    }

    fn nodes(&self) -> usize {
        self.problem.grid().len()
    }

    /// Control at every half-step position.
    fn gather(&self, u: &[f64]) -> Vec<f64> {
        self.interp
            .iter()
            .map(|ip| (0..4).map(|i| ip.w[i] * u[ip.base + i]).sum())
            .collect()
    }

    /// Adjoint of [`Self::gather`].
    fn scatter(&self, bar: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.nodes()];
        for (ip, &b) in self.interp.iter().zip(bar) {
            for i in 0..4 {
                out[ip.base + i] += ip.w[i] * b;
            }
        }
        out
    }

    fn running(&self, y: &Vector2<f64>, i: usize) -> f64 {
        let q = &self.problem.lq.q;
        0.5 * y.dot(&(q * y)) + self.problem.price.phi(y[1] - self.target[i]) - self.q_ref[i].dot(y)
    }

    fn running_gradient(&self, y: &Vector2<f64>, i: usize) -> Vector2<f64> {
        self.problem.lq.q * y + e2() * self.problem.price.alpha(y[1] - self.target[i]) - self.q_ref[i]
    }

    fn evaluate(&self, u: &[f64], with_gradient: bool) -> Evaluation {
        let lq = &self.problem.lq;
        let (a, b, h) = (lq.system.a, lq.system.b, self.h);
        let uh = self.gather(u);
        let field = |y: Vector2<f64>, i: usize| a * y + b * uh[i] + self.drift[i];

        // compensated sums keep the cost smooth in u down to ~1e-15 relative,
        // which the line search needs near the minimiser
        let mut states = Vec::with_capacity(self.n + 1);
        let mut y = Compensated::new(self.problem.initial_mean);
        let mut cost = Compensated::new(0.0);
        states.push(y.sum);
        for j in 0..self.n {
            let (i0, im, i1) = (2 * j, 2 * j + 1, 2 * j + 2);
            let y1 = y.sum;
            let k1 = field(y1, i0);
            let y2 = y1 + k1 * (h / 2.0);
            let k2 = field(y2, im);
            let y3 = y1 + k2 * (h / 2.0);
            let k3 = field(y3, im);
            let y4 = y1 + k3 * h;
            let k4 = field(y4, i1);
            cost.add(
                h / 6.0
                    * (self.running(&y1, i0)
                        + 2.0 * (self.running(&y2, im) + self.running(&y3, im))
                        + self.running(&y4, i1)),
            );
            y.add((k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0));
            states.push(y.sum);
        }
        let y = y.sum;
        let rt = lq.terminal_reference;
        cost.add(0.5 * (y - rt).dot(&(lq.q_terminal * (y - rt))));
        for (u, om) in uh.iter().zip(&self.simpson) {
            cost.add(0.5 * lq.r * om * u * u);
        }

        let adjoint = with_gradient.then(|| {
            let at = a.transpose();
            let mut bar = vec![0.0; 2 * self.n + 1];
            let mut mu = lq.q_terminal * (y - rt);
            for j in (0..self.n).rev() {
                let (i0, im, i1) = (2 * j, 2 * j + 1, 2 * j + 2);
                let y1 = states[j];
                let y2 = y1 + field(y1, i0) * (h / 2.0);
                let y3 = y1 + field(y2, im) * (h / 2.0);
                let y4 = y1 + field(y3, im) * h;
                let c = [h / 6.0, h / 3.0, h / 3.0, h / 6.0];
                let mut kb = [mu * c[0], mu * c[1], mu * c[2], mu * c[3]];

                let yb4 = self.running_gradient(&y4, i1) * c[3] + at * kb[3];
                bar[i1] += kb[3][1];
                kb[2] += yb4 * h;
                let yb3 = self.running_gradient(&y3, im) * c[2] + at * kb[2];
                bar[im] += kb[2][1];
                kb[1] += yb3 * (h / 2.0);
                let yb2 = self.running_gradient(&y2, im) * c[1] + at * kb[1];
                bar[im] += kb[1][1];
                kb[0] += yb2 * (h / 2.0);
                let yb1 = self.running_gradient(&y1, i0) * c[0] + at * kb[0];
                bar[i0] += kb[0][1];
                mu += yb1 + yb2 + yb3 + yb4;
            }
            self.scatter(&bar)
        });
        Evaluation {
            cost: cost.sum,
            adjoint,
            states,
            controls: uh,
        }
    }

    /// `∂J/∂u_k`.
    fn gradient(&self, u: &[f64], adjoint: &[f64]) -> Vec<f64> {
        let r = self.problem.lq.r;
        let mu = self.mass.apply(u);
        adjoint.iter().zip(&mu).map(|(a, m)| a + r * m).collect()
    }

    /// `M⁻¹ ∂J/∂u`, the gradient as a nodal function.
    fn density(&self, u: &[f64], adjoint: &[f64]) -> Vec<f64> {
        let r = self.problem.lq.r;
        let v = self.mass.solve(adjoint);
        u.iter().zip(&v).map(|(u, v)| r * u + v).collect()
    }

    /// `⟨a, b⟩_M = aᵀ M b`.
    fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(&self.mass.apply(b)).map(|(a, b)| a * b).sum()
    }

    fn state_trajectory(&self, eval: &Evaluation) -> Trajectory<Vector2<f64>> {
        let lq = &self.problem.lq;
        let slopes: Vec<_> = (0..=self.n)
            .map(|j| lq.system.a * eval.states[j] + lq.system.b * eval.controls[2 * j] + self.drift[2 * j])
            .collect();
        with_slopes(self.problem.grid(), self.sub, eval.states.clone(), &slopes)
    }

    /// PMP triplet at the control `u`: state from `u`, costate by an RK4
    /// sweep along that state, and `u* = -λ₂ / R`.
    fn triplet(&self, eval: &Evaluation) -> Result<PmpTriplet> {
        let lq = &self.problem.lq;
        let problem = self.problem;
        let state = self.state_trajectory(eval);
        let at = lq.system.a.transpose();
        let terminal = lq.q_terminal * (state.last() - lq.terminal_reference);
        let costate = rk4_backward_sub(
            problem.grid(),
            self.sub,
            terminal,
            |st, lam: Vector2<f64>| {
                let y = state.stage(st);
                let d = y[1] - problem.grid_target.stage(st);
                -(lq.q * y + e2() * problem.price.alpha(d) - lq.q * lq.reference.stage(st) + at * lam)
            },
            Ok,
        )?;
        let r = lq.r;
        Ok(PmpTriplet {
            control: costate.map(|l| -l[1] / r),
            state,
            costate,
        })
    }
}

fn node_values(u: &Trajectory<f64>, grid: &TimeGrid) -> Result<Vec<f64>> {
    grid.ensure_same(u.grid(), "control")?;
    let values = u.values();
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain("control is not finite".into()));
    }
    Ok(values)
}

/// Discrete auxiliary cost of the nodal control `u`.
pub fn auxiliary_cost(u: &Trajectory<f64>, problem: &MfgProblem) -> Result<f64> {
    let disc = Discretization::new(problem)?;
    let u = node_values(u, problem.grid())?;
    Ok(disc.evaluate(&u, false).cost)
}

/// Gradient density `M⁻¹ ∂J/∂u` at the grid nodes, which approximates
/// `R u + λ₂`.
pub fn auxiliary_gradient(u: &Trajectory<f64>, problem: &MfgProblem) -> Result<Trajectory<f64>> {
    let disc = Discretization::new(problem)?;
    let u = node_values(u, problem.grid())?;
    let adjoint = disc.evaluate(&u, true).adjoint.expect("requested");
    Trajectory::from_values(*problem.grid(), disc.density(&u, &adjoint))
}

/// Node weights `W_k` of the discrete integral `∫u ≈ Σ W_k u_k`.
pub fn quadrature_weights(problem: &MfgProblem) -> Result<Vec<f64>> {
    Ok(Discretization::new(problem)?.weights)
}

/// `dJ[u](δ) = gᵀ M δ` for a gradient density `g`.
pub fn directional_derivative(
    problem: &MfgProblem,
    gradient: &Trajectory<f64>,
    direction: &Trajectory<f64>,
) -> Result<f64> {
    let disc = Discretization::new(problem)?;
    let g = node_values(gradient, problem.grid())?;
    let d = node_values(direction, problem.grid())?;
    Ok(disc.inner(&g, &d))
}

struct Point {
    u: Vec<f64>,
    eval: Evaluation,
    gradient: Vec<f64>,
    density: Vec<f64>,
}

impl Point {
    fn at(disc: &Discretization, u: Vec<f64>) -> Self {
        let eval = disc.evaluate(&u, true);
        let adjoint = eval.adjoint.as_ref().expect("requested");
        let gradient = disc.gradient(&u, adjoint);
        let density = disc.density(&u, adjoint);
        Self {
            u,
            eval,
            gradient,
            density,
        }
    }

    fn cost(&self) -> f64 {
        self.eval.cost
    }

    fn slope(&self, dir: &[f64]) -> f64 {
        self.gradient.iter().zip(dir).map(|(g, d)| g * d).sum()
    }
}

const MAX_TRIALS: usize = 40;

/// Line search on `φ(α) = J(u + α d)` driven by directional derivatives.
/// Accepts a step with `|φ'(α)| ≤ 0.9 |φ'(0)|` and sufficient decrease (or,
/// when the cost differences are at rounding level, no increase and
/// `φ'(α) ≤ 0`). Brackets the minimiser and refines by secant steps on φ'.
fn line_search(disc: &Discretization, start: &Point, dir: &[f64], slope0: f64) -> Option<Point> {
    let j0 = start.cost();
    let (mut lo, mut slope_lo) = (0.0, slope0);
    let mut hi: Option<(f64, f64)> = None;
    let mut best: Option<Point> = None;
    let mut alpha = 1.0;
    for _ in 0..MAX_TRIALS {
        let u: Vec<f64> = start.u.iter().zip(dir).map(|(u, d)| u + alpha * d).collect();
        let trial = Point::at(disc, u);
        let j = trial.cost();
        let slope = trial.slope(dir);
        if !(j.is_finite() && slope.is_finite()) {
            hi = Some((alpha, f64::INFINITY));
        } else {
            let armijo = j <= j0 + 1e-4 * alpha * slope0;
            let curvature = slope.abs() <= 0.9 * slope0.abs();
            if curvature && (armijo || (slope <= 0.0 && j <= j0)) {
                return Some(trial);
            }
            if slope < 0.0 && j <= j0 {
                lo = alpha;
                slope_lo = slope;
                best = Some(trial);
            } else {
                hi = Some((alpha, slope));
            }
        }
        alpha = match hi {
            None => 4.0 * alpha,
            Some((a_hi, s_hi)) => {
                let width = a_hi - lo;
                let secant = if s_hi.is_finite() && s_hi > slope_lo {
                    lo - slope_lo * width / (s_hi - slope_lo)
                } else {
                    lo + 0.5 * width
                };
                secant.clamp(lo + 0.1 * width, a_hi - 0.1 * width)
            }
        };
    }
    best
}

/// Inverse Hessian of the auxiliary cost without the price term, the
/// initial metric of L-BFGS. Applied to a gradient density `g` it returns
/// `(g + μ₂)/R`, where `μ = P δy + σ` is the costate of the LQ problem with
/// linear control cost `∫ g δu`:
///
/// ```text
/// σ̇ = -(Aᵀ - P S) σ + P B g / R,       σ(T) = 0
/// δẏ = (A - S P) δy - S σ - B g / R,   δy(0) = 0
/// ```
struct Preconditioner<'a> {
    problem: &'a MfgProblem,
    riccati: RiccatiSolution,
}

impl<'a> Preconditioner<'a> {
    fn new(problem: &'a MfgProblem) -> Result<Self> {
        Ok(Self {
            problem,
            riccati: riccati_for(&problem.lq)?,
        })
    }

    fn apply(&self, g: &[f64]) -> Result<Vec<f64>> {
        let lq = &self.problem.lq;
        let grid = self.problem.grid();
        let (a, b, r) = (lq.system.a, lq.system.b, lq.r);
        let sw = lq.control_weight();
        let p = &self.riccati.p;
        let g = Trajectory::from_values(*grid, g.to_vec())?;
        let sigma = rk4_backward_sub(
            grid,
            1,
            Vector2::zeros(),
            |st, sig: Vector2<f64>| {
                let pt = p.stage(st);
                -(a.transpose() - pt * sw) * sig + pt * b * (g.stage(st) / r)
            },
            Ok,
        )?;
        let dy = rk4_forward_sub(grid, 1, Vector2::zeros(), |st, y: Vector2<f64>| {
            (a - sw * p.stage(st)) * y - sw * sigma.stage(st) - b * (g.stage(st) / r)
        });
        Ok((0..grid.len())
            .map(|k| (g.value(k) + (p.value(k) * dy.value(k) + sigma.value(k))[1]) / r)
            .collect())
    }
}

struct Memory {
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    capacity: usize,
}

impl Memory {
    fn push(&mut self, s: Vec<f64>, y: Vec<f64>, sy: f64) {
        if self.capacity == 0 {
            return;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// `-H d` by the two-loop recursion in the `M` inner product.
    fn direction(&self, disc: &Discretization, precond: &Preconditioner, d: &[f64]) -> Result<Vec<f64>> {
        let mut q = d.to_vec();
        let mut coef = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * disc.inner(s, &q);
            q.iter_mut().zip(y).for_each(|(q, y)| *q -= a * y);
            coef.push(a);
        }
        let mut q = precond.apply(&q)?;
        for ((s, y, rho), a) in self.pairs.iter().zip(coef.iter().rev()) {
            let b = rho * disc.inner(y, &q);
            q.iter_mut().zip(s).for_each(|(q, s)| *q += (a - b) * s);
        }
        q.iter_mut().for_each(|q| *q = -*q);
        Ok(q)
    }
}

/// Minimises the auxiliary cost by L-BFGS and returns the PMP triplet at
/// the minimiser. `initial` defaults to `u ≡ 0`.
pub fn solve_pmp(
    problem: &MfgProblem,
    opts: &VariationalOptions,
    initial: Option<&Trajectory<f64>>,
) -> Result<(PmpTriplet, Diagnostics)> {
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(Error::InvalidParameter("tol must be > 0 and max_iter >= 1".into()));
    }
    let start = Instant::now();
    let disc = Discretization::new(problem)?;
    let u0 = match initial {
        Some(u) => node_values(u, problem.grid())?,
        None => vec![0.0; disc.nodes()],
    };
    let mut point = Point::at(&disc, u0);
    let mut history = vec![point.cost()];
    let mut memory = Memory {
        pairs: VecDeque::new(),
        capacity: opts.memory,
    };
    let precond = Preconditioner::new(problem)?;
    let mut iterations = 0;
    let sup = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    loop {
        let gnorm = sup(&point.density);
        if !gnorm.is_finite() {
            return Err(Error::IntegratorFailure("auxiliary gradient is not finite".into()));
        }
        if gnorm <= opts.tol {
            break;
        }
        if iterations == opts.max_iter {
            return Err(Error::NotConverged {
                method: "variational descent",
                iterations,
                residual: gnorm,
            });
        }
        iterations += 1;
        let mut dir = memory.direction(&disc, &precond, &point.density)?;
        let mut slope = point.slope(&dir);
        if !(slope < 0.0) {
            memory.pairs.clear();
            dir = memory.direction(&disc, &precond, &point.density)?;
            slope = point.slope(&dir);
        }
        if !(slope < 0.0) {
            dir = point.density.iter().map(|g| -g).collect();
            slope = point.slope(&dir);
        }
        match line_search(&disc, &point, &dir, slope) {
            Some(next) => {
                let s: Vec<f64> = next.u.iter().zip(&point.u).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = next.density.iter().zip(&point.density).map(|(a, b)| a - b).collect();
                let sy = disc.inner(&s, &y);
                if sy > 0.0 {
                    memory.push(s, y, sy);
                }
                history.push(next.cost());
                point = next;
            }
            None if !memory.pairs.is_empty() => memory.pairs.clear(),
            None => {
                return Err(Error::NotConverged {
                    method: "variational descent",
                    iterations,
                    residual: gnorm,
                })
            }
        }
    }
    let triplet = disc.triplet(&point.eval)?;
    let gap = (0..disc.nodes())
        .map(|k| (point.u[k] - triplet.control.value(k)).abs())
        .fold(0.0, f64::max);
    let diagnostics = Diagnostics {
        method: Method::Variational,
        iterations,
        residual: gap,
        gradient_norm: Some(sup(&point.density)),
        wall_time: start.elapsed(),
        objective_history: history,
    };
    Ok((triplet, diagnostics))
}

/// Reference equilibrium solver: minimise the auxiliary cost from `u ≡ 0`,
/// then map the optimality system onto (x̄, s).
pub fn solve_variational(problem: &MfgProblem, opts: &VariationalOptions) -> Result<EquilibriumSolution> {
    solve_from(problem, opts, None)
}

/// [`solve_variational`] from a given initial control.
pub fn solve_variational_from(
    problem: &MfgProblem,
    opts: &VariationalOptions,
    initial: &Trajectory<f64>,
) -> Result<EquilibriumSolution> {
    solve_from(problem, opts, Some(initial))
}

fn solve_from(
    problem: &MfgProblem,
    opts: &VariationalOptions,
    initial: Option<&Trajectory<f64>>,
) -> Result<EquilibriumSolution> {
    let start = Instant::now();
    let (triplet, mut diagnostics) = solve_pmp(problem, opts, initial)?;
    let riccati = riccati_for(&problem.lq)?;
    let (state, _) = pmp_to_tpbvp(&triplet, &riccati)?;
    // The discrete costate is only as accurate as the control
    // discretization. One best response to the minimiser's own price puts
    // (x̄, s) on the integrators; the mean moves by the consistency gap.
    let (offset, mean) = problem.respond(&riccati, &problem.price_path(&state)?)?;
    diagnostics.residual = mean.sup_distance(&state)?;
    let price = problem.price_path(&mean)?;
    diagnostics.wall_time = start.elapsed();
    Ok(EquilibriumSolution {
        riccati,
        offset,
        mean,
        price,
        omega: None,
        diagnostics,
    })
}
