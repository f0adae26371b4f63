//! Agent dynamics, cost data and price functions.
//!
//! Each agent has state `x = [soc (kWh), power (kW)]` and controls the ramp
//! rate `u = d(power)/dt` (kW/h):
//!
//! ```text
//! dx = (A x + B u + f(t)) dt + Σ dw,   A = [[0, κ], [0, 0]],  B = [0, 1]ᵀ,
//! f(t) = [-b(t), 0]ᵀ,                  Σ = diag(σ₁, σ₂)
//! ```

use std::path::Path;

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::trajectory::Trajectory;

/// `e₂ = [0, 1]ᵀ`, selects the charging power.
pub fn e2() -> Vector2<f64> {
    Vector2::new(0.0, 1.0)
}

/// Scalar time signal: a constant or a piecewise-linear table.
///
/// A jump is written as two rows with the same time; at the jump time the
/// left value is returned.
#[derive(Clone, Debug, PartialEq)]
pub enum Signal {
    Constant(f64),
    Table(Vec<(f64, f64)>),
}

impl Signal {
    pub fn table(rows: Vec<(f64, f64)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidParameter("empty signal table".into()));
        }
        if rows.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite signal table entry".into()));
        }
        if rows.windows(2).any(|w| w[1].0 < w[0].0) {
            return Err(Error::InvalidParameter(
                "signal table times must be nondecreasing".into(),
            ));
        }
        Ok(Signal::Table(rows))
    }

    /// Loads a two-column `(t, value)` CSV. A non-numeric first row is
    /// treated as a header.
    pub fn from_csv(path: &Path) -> Result<Self> {
        Self::table(read_two_column_csv(path)?)
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Signal::Constant(v) => *v,
            Signal::Table(rows) => {
                if t <= rows[0].0 {
                    return rows[0].1;
                }
                // first row with time >= t: left-continuous at jumps
                let i = rows.partition_point(|r| r.0 < t);
                if i == rows.len() {
                    return rows[rows.len() - 1].1;
                }
                let (t1, v1) = rows[i];
                let (t0, v0) = rows[i - 1];
                if t1 == t0 {
                    v0
                } else {
                    v0 + (v1 - v0) * (t - t0) / (t1 - t0)
                }
            }
        }
    }

    pub fn sample(&self, grid: &TimeGrid) -> Trajectory<f64> {
        Trajectory::from_fn(*grid, |t| self.eval(t))
    }

    pub fn min_value(&self) -> f64 {
        match self {
            Signal::Constant(v) => *v,
            Signal::Table(rows) => rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Signal::Constant(v) => v.is_finite(),
            Signal::Table(_) => true,
        }
    }
}

pub(crate) fn read_two_column_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split(',').map(str::trim);
        let (a, b) = match (cols.next(), cols.next(), cols.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                return Err(Error::Config(format!(
                    "{}:{}: expected two columns",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        match (a.parse::<f64>(), b.parse::<f64>()) {
            (Ok(x), Ok(y)) => rows.push((x, y)),
            _ if rows.is_empty() && lineno == 0 => continue,
            _ => {
                return Err(Error::Config(format!(
                    "{}:{}: non-numeric entry",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(rows)
}

/// Physical parameters of one (representative) agent.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Conversion efficiency κ ∈ (0, 1).
    pub kappa: f64,
    /// SOC noise intensity σ₁ (kWh/√h).
    pub sigma_soc: f64,
    /// Power noise intensity σ₂ (kW/√h).
    pub sigma_power: f64,
    /// Exogenous drain b(t) ≥ 0 (kW).
    pub drain: Signal,
    /// Battery capacity (kWh). Reported only; the dynamics never clip to it.
    pub capacity_kwh: f64,
}

impl ModelParams {
    pub fn new(kappa: f64, sigma_soc: f64, sigma_power: f64, drain: Signal, capacity_kwh: f64) -> Result<Self> {
        let mp = Self {
            kappa,
            sigma_soc,
            sigma_power,
            drain,
            capacity_kwh,
        };
        mp.validate()?;
        Ok(mp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "kappa must lie in (0, 1), got {}",
                self.kappa
            )));
        }
        // σ = 0 is accepted as the deterministic limit of the dynamics.
        if !(self.sigma_soc >= 0.0 && self.sigma_soc.is_finite())
            || !(self.sigma_power >= 0.0 && self.sigma_power.is_finite())
        {
            return Err(Error::InvalidParameter(
                "noise intensities must be finite and nonnegative".into(),
            ));
        }
        if !self.drain.is_finite() || self.drain.min_value() < 0.0 {
            return Err(Error::InvalidParameter("drain b(t) must be finite and >= 0".into()));
        }
        if !(self.capacity_kwh > 0.0 && self.capacity_kwh.is_finite()) {
            return Err(Error::InvalidParameter("capacity must be > 0".into()));
        }
        Ok(())
    }

    /// The deterministic variant of these dynamics (σ₁ = σ₂ = 0).
    pub fn noiseless(&self) -> Self {
        Self {
            sigma_soc: 0.0,
            sigma_power: 0.0,
            ..self.clone()
        }
    }
}

/// Quadratic tracking cost with a separate terminal reference.
#[derive(Clone, Debug, PartialEq)]
pub struct CostParams {
    pub q: Matrix2<f64>,
    pub r: f64,
    pub q_terminal: Matrix2<f64>,
    /// Running reference `[r_soc(t), r_power(t)]`.
    pub reference: [Signal; 2],
    /// Terminal reference `r_x(T)`, independent of the running one.
    pub terminal_reference: Vector2<f64>,
    /// Grid operator's target power per agent r_g(t).
    pub grid_target: Signal,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        check_psd(&self.q, "Q")?;
        check_psd(&self.q_terminal, "Q_T")?;
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::InvalidParameter(format!("R must be > 0, got {}", self.r)));
        }
        if !self.reference.iter().all(Signal::is_finite)
            || !self.grid_target.is_finite()
            || !self.terminal_reference.iter().all(|v| v.is_finite())
        {
            return Err(Error::InvalidParameter("references must be finite".into()));
        }
        Ok(())
    }

    pub fn reference_at(&self, t: f64) -> Vector2<f64> {
        Vector2::new(self.reference[0].eval(t), self.reference[1].eval(t))
    }

    pub fn sample_reference(&self, grid: &TimeGrid) -> Trajectory<Vector2<f64>> {
        Trajectory::from_fn(*grid, |t| self.reference_at(t))
    }
}

/// Smallest eigenvalue of a symmetric 2×2 matrix.
pub fn min_eigenvalue(m: &Matrix2<f64>) -> f64 {
    let a = m[(0, 0)];
    let d = m[(1, 1)];
    let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let mean = 0.5 * (a + d);
    let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    mean - rad
}

fn check_psd(m: &Matrix2<f64>, name: &str) -> Result<()> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter(format!("{name} has non-finite entries")));
    }
    let scale = m.norm().max(1.0);
    if (m[(0, 1)] - m[(1, 0)]).abs() > 1e-12 * scale {
        return Err(Error::InvalidParameter(format!("{name} must be symmetric")));
    }
    if min_eigenvalue(m) < -1e-12 * scale {
        return Err(Error::InvalidParameter(format!(
            "{name} must be positive semidefinite"
        )));
    }
    Ok(())
}

/// Monotone price table: piecewise-linear α between nodes, constant beyond.
#[derive(Clone, Debug, PartialEq)]
pub struct PriceTable {
    deviations: Vec<f64>,
    prices: Vec<f64>,
    /// ∫ α from the first node to node i.
    cumulative: Vec<f64>,
    /// ∫ α from the first node to 0; Φ(d) = F(d) - F(0).
    offset: f64,
}

impl PriceTable {
    pub fn new(mut rows: Vec<(f64, f64)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidParameter("empty price table".into()));
        }
        if rows.iter().any(|(d, p)| !d.is_finite() || !p.is_finite()) {
            return Err(Error::InvalidParameter("non-finite price table entry".into()));
        }
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        if rows.windows(2).any(|w| w[1].0 == w[0].0) {
            return Err(Error::InvalidParameter("duplicate deviation in price table".into()));
        }
        if rows.windows(2).any(|w| w[1].1 < w[0].1) {
            return Err(Error::Assumption(
                "price table must be monotonically nondecreasing".into(),
            ));
        }
        let (deviations, prices): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
        let mut cumulative = vec![0.0; deviations.len()];
        for i in 1..deviations.len() {
            cumulative[i] = cumulative[i - 1]
                + 0.5 * (prices[i] + prices[i - 1]) * (deviations[i] - deviations[i - 1]);
        }
        let mut table = Self {
            deviations,
            prices,
            cumulative,
            offset: 0.0,
        };
        table.offset = table.integral_from_start(0.0);
        Ok(table)
    }

    pub fn from_csv(path: &Path) -> Result<Self> {
        Self::new(read_two_column_csv(path)?)
    }

    pub fn rows(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.deviations.iter().copied().zip(self.prices.iter().copied())
    }

    fn value(&self, d: f64) -> f64 {
        let n = self.deviations.len();
        if d <= self.deviations[0] {
            return self.prices[0];
        }
        if d >= self.deviations[n - 1] {
            return self.prices[n - 1];
        }
        let i = self.deviations.partition_point(|&x| x <= d);
        let (d0, d1) = (self.deviations[i - 1], self.deviations[i]);
        let (p0, p1) = (self.prices[i - 1], self.prices[i]);
        p0 + (p1 - p0) * (d - d0) / (d1 - d0)
    }

    fn integral_from_start(&self, d: f64) -> f64 {
        let n = self.deviations.len();
        let d_first = self.deviations[0];
        if d <= d_first {
            return self.prices[0] * (d - d_first);
        }
        if d >= self.deviations[n - 1] {
            return self.cumulative[n - 1] + self.prices[n - 1] * (d - self.deviations[n - 1]);
        }
        let i = self.deviations.partition_point(|&x| x <= d);
        let d0 = self.deviations[i - 1];
        self.cumulative[i - 1] + 0.5 * (self.prices[i - 1] + self.value(d)) * (d - d0)
    }
}

/// Monotone price α(d) of the mean-power deviation `d = x̄₂ - r_g`.
#[derive(Clone, Debug, PartialEq)]
pub enum PriceFunction {
    /// `α(d) = c₁ d + c₀`, `c₁ > 0`.
    Affine { slope: f64, offset: f64 },
    /// `α(d) = d_max / (1 + e^{-a d})`.
    Sigmoid { max_price: f64, steepness: f64 },
    Tabulated(PriceTable),
}

impl PriceFunction {
    pub fn affine(slope: f64, offset: f64) -> Result<Self> {
        if !(slope > 0.0 && slope.is_finite()) || !offset.is_finite() {
            return Err(Error::Assumption(format!(
                "affine price needs a positive slope (with c1>0), got c1 = {slope}"
            )));
        }
        Ok(PriceFunction::Affine { slope, offset })
    }

    pub fn sigmoid(max_price: f64, steepness: f64) -> Result<Self> {
        if !(max_price > 0.0 && max_price.is_finite()) || !(steepness > 0.0 && steepness.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigmoid price requires d_max > 0 and a > 0, got d_max = {max_price}, a = {steepness}"
            )));
        }
        Ok(PriceFunction::Sigmoid {
            max_price,
            steepness,
        })
    }

    pub fn tabulated(rows: Vec<(f64, f64)>) -> Result<Self> {
        Ok(PriceFunction::Tabulated(PriceTable::new(rows)?))
    }

    /// α ≡ 0: removes the price coupling.
    pub fn zero() -> Self {
        PriceFunction::Tabulated(PriceTable::new(vec![(0.0, 0.0)]).expect("static table"))
    }

    /// Price at deviation `d`.
    pub fn price(&self, d: f64) -> Result<f64> {
        if !d.is_finite() {
            return Err(Error::Domain(format!("price evaluated at non-finite deviation {d}")));
        }
        Ok(self.alpha(d))
    }

    /// Primitive `Φ(d) = ∫₀^d α(τ) dτ`.
    pub fn primitive(&self, d: f64) -> Result<f64> {
        if !d.is_finite() {
            return Err(Error::Domain(format!("primitive evaluated at non-finite deviation {d}")));
        }
        Ok(self.phi(d))
    }

    pub(crate) fn alpha(&self, d: f64) -> f64 {
        match self {
            PriceFunction::Affine { slope, offset } => slope * d + offset,
            PriceFunction::Sigmoid {
                max_price,
                steepness,
            } => max_price / (1.0 + (-steepness * d).exp()),
            PriceFunction::Tabulated(t) => t.value(d),
        }
    }

    pub(crate) fn phi(&self, d: f64) -> f64 {
        match self {
            PriceFunction::Affine { slope, offset } => 0.5 * slope * d * d + offset * d,
            PriceFunction::Sigmoid {
                max_price,
                steepness,
            } => {
                // (d_max / a) * (ln(1 + e^{a d}) - ln 2), softplus in overflow-free form
                let x = steepness * d;
                let softplus = x.max(0.0) + (-x.abs()).exp().ln_1p();
                max_price / steepness * (softplus - std::f64::consts::LN_2)
            }
            PriceFunction::Tabulated(t) => t.integral_from_start(d) - t.offset,
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, PriceFunction::Affine { .. })
    }
}

/// System matrices of the agent dynamics on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystem {
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
    /// Drift `f(t) = [-b(t), 0]ᵀ` sampled on nodes and midpoints.
    pub f: Trajectory<Vector2<f64>>,
    pub sigma: Matrix2<f64>,
}

/// `A = [[0, κ], [0, 0]]`, `B = e₂`, `f = [-b, 0]ᵀ`, `Σ = diag(σ₁, σ₂)`.
pub fn build_system(mp: &ModelParams, grid: &TimeGrid) -> LinearSystem {
    LinearSystem {
        a: Matrix2::new(0.0, mp.kappa, 0.0, 0.0),
        b: e2(),
        f: Trajectory::from_fn(*grid, |t| Vector2::new(-mp.drain.eval(t), 0.0)),
        sigma: Matrix2::new(mp.sigma_soc, 0.0, 0.0, mp.sigma_power),
    }
}
