//! Uniform time grid shared by every trajectory in a run.

use crate::error::{Error, Result};

/// Uniform grid `t_k = k * dt`, `k = 0..=steps`, with `t_steps = horizon` exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    /// Builds a grid from a horizon and a step. The step must divide the
    /// horizon (up to a relative `1e-9`), and at least two steps are needed.
    pub fn new(horizon: f64, dt: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "horizon must be finite and > 0, got {horizon}"
            )));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "time step must be finite and > 0, got {dt}"
            )));
        }
        let ratio = horizon / dt;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "time step {dt} does not divide the horizon {horizon}"
            )));
        }
        Self::with_steps(horizon, steps as usize)
    }

    pub fn with_steps(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "horizon must be finite and > 0, got {horizon}"
            )));
        }
        if steps < 2 {
            return Err(Error::InvalidParameter(format!(
                "grid needs at least 2 steps, got {steps}"
            )));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Time of node `k`; the last node is pinned to the horizon.
    pub fn time(&self, k: usize) -> f64 {
        if k >= self.steps {
            self.horizon
        } else {
            self.horizon * (k as f64 / self.steps as f64)
        }
    }

    /// Time of the midpoint between node `k` and node `k + 1`.
    pub fn mid_time(&self, k: usize) -> f64 {
        self.horizon * ((k as f64 + 0.5) / self.steps as f64)
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(|k| self.time(k))
    }

    /// Same horizon, half the step.
    pub fn refined(&self) -> Self {
        Self {
            horizon: self.horizon,
            steps: self.steps * 2,
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        t.is_finite() && (0.0..=self.horizon).contains(&t)
    }

    /// Interval index and fractional position of `t`, for `t` in `[0, T]`.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        if !self.contains(t) {
            return Err(Error::Domain(format!(
                "time {t} outside [0, {}]",
                self.horizon
            )));
        }
        let x = t / self.dt();
        let k = (x.floor() as usize).min(self.steps - 1);
        Ok((k, (x - k as f64).clamp(0.0, 1.0)))
    }

    pub fn ensure_same(&self, other: &TimeGrid, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: grid (T={}, M={}) differs from (T={}, M={})",
                other.horizon, other.steps, self.horizon, self.steps
            )))
        }
    }
}
