//! Time-gridded paths and the fixed-step RK4 sweeps that produce them.
//!
//! A [`Trajectory`] is indexed by the nodes of its [`TimeGrid`]. Internally it
//! may hold a finer sampling: ODE sweeps take [`SUBSTEPS`] RK4 steps per grid
//! interval and keep every internal node together with a cubic Hermite value
//! at each internal midpoint. Downstream sweeps read those samples in their
//! half-step stages, so chained sweeps (Riccati, then offset, then mean) keep
//! fourth order and a small error constant at the user-facing step.

use std::ops::{Add, Mul, Sub};

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// RK4 steps per grid interval. A power of two, so internal node and
/// midpoint positions are exact in binary.
pub const SUBSTEPS: usize = 16;

/// Values that can live on a trajectory.
pub trait Sample: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self> {
    fn zero() -> Self;
    /// Magnitude used for sup-norm distances (abs, Euclidean, Frobenius).
    fn magnitude(&self) -> f64;
}

impl Sample for f64 {
    fn zero() -> Self {
        0.0
    }
    fn magnitude(&self) -> f64 {
        self.abs()
    }
}

impl Sample for Vector2<f64> {
    fn zero() -> Self {
        Vector2::zeros()
    }
    fn magnitude(&self) -> f64 {
        self.norm()
    }
}

impl Sample for Matrix2<f64> {
    fn zero() -> Self {
        Matrix2::zeros()
    }
    fn magnitude(&self) -> f64 {
        self.norm()
    }
}

/// Evaluation point of an RK4 stage, in units of grid intervals
/// (`2.5` is the midpoint of interval 2).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage(pub f64);

impl Stage {
    pub fn node(k: usize) -> Self {
        Stage(k as f64)
    }

    pub fn time(self, grid: &TimeGrid) -> f64 {
        grid.horizon() * (self.0 / grid.steps() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    grid: TimeGrid,
    /// Samples per grid interval.
    sub: usize,
    /// `grid.steps() * sub + 1` samples.
    values: Vec<T>,
    /// One per sample interval, if known more accurately than the average.
    mids: Option<Vec<T>>,
}

impl<T: Sample> Trajectory<T> {
    /// One value per grid node; linear in between.
    pub fn from_values(grid: TimeGrid, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self {
            grid,
            sub: 1,
            values,
            mids: None,
        })
    }

    /// Samples `f` at the internal resolution, midpoints included.
    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> T) -> Self {
        let n = grid.steps() * SUBSTEPS;
        let at = |x: f64| f(Stage(x / SUBSTEPS as f64).time(&grid));
        Self {
            grid,
            sub: SUBSTEPS,
            values: (0..=n).map(|j| at(j as f64)).collect(),
            mids: Some((0..n).map(|j| at(j as f64 + 0.5)).collect()),
        }
    }

    pub fn constant(grid: TimeGrid, value: T) -> Self {
        Self {
            grid,
            sub: 1,
            values: vec![value; grid.len()],
            mids: None,
        }
    }

    pub fn zeros(grid: TimeGrid) -> Self {
        Self::constant(grid, T::zero())
    }

    /// Attaches explicit values at the grid-interval midpoints.
    pub fn with_mids(self, mids: Vec<T>) -> Result<Self> {
        if self.sub != 1 {
            return Err(Error::GridMismatch(
                "midpoints can only be attached to node-only trajectories".into(),
            ));
        }
        if mids.len() != self.grid.steps() {
            return Err(Error::GridMismatch(format!(
                "{} midpoints for {} intervals",
                mids.len(),
                self.grid.steps()
            )));
        }
        Ok(Self {
            mids: Some(mids),
            ..self
        })
    }

    /// Keeps the grid nodes only.
    pub fn coarsened(&self) -> Self {
        Self {
            grid: self.grid,
            sub: 1,
            values: self.values(),
            mids: None,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Values at the grid nodes.
    pub fn values(&self) -> Vec<T> {
        self.values.iter().step_by(self.sub).copied().collect()
    }

    pub fn value(&self, k: usize) -> T {
        self.values[k * self.sub]
    }

    pub fn first(&self) -> T {
        self.values[0]
    }

    pub fn last(&self) -> T {
        self.values[self.values.len() - 1]
    }

    /// Value at the midpoint of grid interval `k`.
    pub fn mid(&self, k: usize) -> T {
        self.stage(Stage(k as f64 + 0.5))
    }

    /// Value at an RK4 stage position: stored samples where they exist,
    /// linear between samples otherwise.
    pub fn stage(&self, stage: Stage) -> T {
        let x = stage.0 * self.sub as f64;
        let last = self.values.len() - 1;
        let j = (x.floor().max(0.0) as usize).min(last);
        let frac = x - j as f64;
        if frac == 0.0 {
            self.values[j]
        } else if frac == 0.5 {
            self.sample_mid(j)
        } else {
            self.lerp(j.min(last - 1), x)
        }
    }

    fn sample_mid(&self, j: usize) -> T {
        match &self.mids {
            Some(m) => m[j],
            None => (self.values[j] + self.values[j + 1]) * 0.5,
        }
    }

    fn lerp(&self, j: usize, x: f64) -> T {
        let w = (x - j as f64).clamp(0.0, 1.0);
        self.values[j] * (1.0 - w) + self.values[j + 1] * w
    }

    /// Linear interpolation between samples; errors outside `[0, T]`.
    pub fn at(&self, t: f64) -> Result<T> {
        let (k, w) = self.grid.locate(t)?;
        let x = (k as f64 + w) * self.sub as f64;
        let j = (x.floor() as usize).min(self.values.len() - 2);
        Ok(self.lerp(j, x))
    }

    pub fn map<U: Sample>(&self, f: impl Fn(T) -> U) -> Trajectory<U> {
        Trajectory {
            grid: self.grid,
            sub: self.sub,
            values: self.values.iter().map(|&v| f(v)).collect(),
            mids: self.mids.as_ref().map(|m| m.iter().map(|&v| f(v)).collect()),
        }
    }

    /// Pointwise combination on the same grid, at the finer of the two
    /// resolutions.
    pub fn zip_map<U: Sample, V: Sample>(
        &self,
        other: &Trajectory<U>,
        f: impl Fn(T, U) -> V,
    ) -> Result<Trajectory<V>> {
        self.grid.ensure_same(&other.grid, "zip_map")?;
        let sub = self.sub.max(other.sub);
        let n = self.grid.steps() * sub;
        let pos = |x: f64| Stage(x / sub as f64);
        let values = (0..=n)
            .map(|j| f(self.stage(pos(j as f64)), other.stage(pos(j as f64))))
            .collect();
        let mids = (self.mids.is_some() || other.mids.is_some() || self.sub != other.sub).then(|| {
            (0..n)
                .map(|j| {
                    let p = pos(j as f64 + 0.5);
                    f(self.stage(p), other.stage(p))
                })
                .collect()
        });
        Ok(Trajectory {
            grid: self.grid,
            sub,
            values,
            mids,
        })
    }

    /// `max_k |self(t_k) - other(t_k)|` over grid nodes.
    pub fn sup_distance(&self, other: &Trajectory<T>) -> Result<f64> {
        self.grid.ensure_same(&other.grid, "sup_distance")?;
        Ok((0..self.grid.len())
            .map(|k| (self.value(k) - other.value(k)).magnitude())
            .fold(0.0, f64::max))
    }

    /// `max_k |self(t_k)|` over grid nodes.
    pub fn sup_norm(&self) -> f64 {
        (0..self.grid.len())
            .map(|k| self.value(k).magnitude())
            .fold(0.0, f64::max)
    }

    pub(crate) fn samples_per_interval(&self) -> usize {
        self.sub
    }

}

impl Trajectory<Vector2<f64>> {
    /// One component as a scalar trajectory.
    pub fn component(&self, i: usize) -> Trajectory<f64> {
        self.map(|v| v[i])
    }
}

/// Cubic Hermite value at the interval midpoint.
pub(crate) fn hermite_mid<T: Sample>(a: T, b: T, da: T, db: T, h: f64) -> T {
    (a + b) * 0.5 + (da - db) * (h / 8.0)
}

pub(crate) fn with_slopes<T: Sample>(grid: &TimeGrid, sub: usize, values: Vec<T>, slopes: &[T]) -> Trajectory<T> {
    let h = grid.dt() / sub as f64;
    let mids = (0..values.len() - 1)
        .map(|j| hermite_mid(values[j], values[j + 1], slopes[j], slopes[j + 1], h))
        .collect();
    Trajectory {
        grid: *grid,
        sub,
        values,
        mids: Some(mids),
    }
}

/// Classical RK4 from `t_0` to `t_M`, [`SUBSTEPS`] steps per grid interval.
/// `rhs(stage, y)` is the time derivative.
pub(crate) fn rk4_forward<T: Sample>(
    grid: &TimeGrid,
    initial: T,
    rhs: impl FnMut(Stage, T) -> T,
) -> Trajectory<T> {
    rk4_forward_sub(grid, SUBSTEPS, initial, rhs)
}

pub(crate) fn rk4_forward_sub<T: Sample>(
    grid: &TimeGrid,
    sub: usize,
    initial: T,
    mut rhs: impl FnMut(Stage, T) -> T,
) -> Trajectory<T> {
    let n = grid.steps() * sub;
    let h = grid.dt() / sub as f64;
    let pos = |x: f64| Stage(x / sub as f64);
    let mut values = Vec::with_capacity(n + 1);
    let mut slopes = Vec::with_capacity(n + 1);
    let mut y = initial;
    values.push(y);
    for j in 0..n {
        let x = j as f64;
        let k1 = rhs(pos(x), y);
        let k2 = rhs(pos(x + 0.5), y + k1 * (h / 2.0));
        let k3 = rhs(pos(x + 0.5), y + k2 * (h / 2.0));
        let k4 = rhs(pos(x + 1.0), y + k3 * h);
        slopes.push(k1);
        y = y + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        values.push(y);
    }
    slopes.push(rhs(pos(n as f64), y));
    with_slopes(grid, sub, values, &slopes)
}

/// Classical RK4 from `t_M` back to `t_0`, [`SUBSTEPS`] steps per grid
/// interval; samples are stored in forward order. `post` is applied to every
/// new sample (e.g. symmetrisation) and may reject it.
pub(crate) fn rk4_backward<T: Sample>(
    grid: &TimeGrid,
    terminal: T,
    rhs: impl FnMut(Stage, T) -> T,
    post: impl FnMut(T) -> Result<T>,
) -> Result<Trajectory<T>> {
    rk4_backward_sub(grid, SUBSTEPS, terminal, rhs, post)
}

pub(crate) fn rk4_backward_sub<T: Sample>(
    grid: &TimeGrid,
    sub: usize,
    terminal: T,
    mut rhs: impl FnMut(Stage, T) -> T,
    mut post: impl FnMut(T) -> Result<T>,
) -> Result<Trajectory<T>> {
    let n = grid.steps() * sub;
    let h = grid.dt() / sub as f64;
    let pos = |x: f64| Stage(x / sub as f64);
    let mut values = vec![T::zero(); n + 1];
    let mut slopes = vec![T::zero(); n + 1];
    values[n] = terminal;
    let mut y = terminal;
    for j in (0..n).rev() {
        let x = j as f64;
        let k1 = rhs(pos(x + 1.0), y);
        let k2 = rhs(pos(x + 0.5), y - k1 * (h / 2.0));
        let k3 = rhs(pos(x + 0.5), y - k2 * (h / 2.0));
        let k4 = rhs(pos(x), y - k3 * h);
        slopes[j + 1] = k1;
        y = post(y - (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0))?;
        values[j] = y;
    }
    slopes[0] = rhs(pos(0.0), y);
    Ok(with_slopes(grid, sub, values, &slopes))
}
