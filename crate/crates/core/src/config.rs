//! Run configuration: TOML file, `section.key=value` overrides, and the
//! conversion into validated model, cost, price and grid values.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::equilibrium::{FixedPointOptions, MfgProblem, VariationalOptions};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{CostParams, ModelParams, PriceFunction, PriceTable, Signal};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub cost: CostSection,
    pub price: PriceSection,
    pub grid: GridSection,
    #[serde(default)]
    pub solve: SolveSection,
    #[serde(default)]
    pub sim: SimSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kappa: f64,
    pub sigma_soc: f64,
    pub sigma_power: f64,
    pub capacity_kwh: f64,
    /// Constant drain b (kW).
    #[serde(default)]
    pub drain: f64,
    /// Two-column CSV `(t, b)`; replaces `drain` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drain_table: Option<PathBuf>,
}

/// A 2×2 weight, either its diagonal or the full matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weight {
    Diagonal([f64; 2]),
    Full([[f64; 2]; 2]),
}

impl Weight {
    pub fn matrix(&self) -> Matrix2<f64> {
        match self {
            Weight::Diagonal([a, b]) => Matrix2::new(*a, 0.0, 0.0, *b),
            Weight::Full([[a, b], [c, d]]) => Matrix2::new(*a, *b, *c, *d),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub q: Weight,
    pub r: f64,
    pub q_terminal: Weight,
    /// Running reference `[soc kWh, power kW]`.
    pub reference: [f64; 2],
    pub terminal_reference: [f64; 2],
    /// Grid target power per agent (kW).
    pub grid_target: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriceKind {
    Affine,
    Sigmoid,
    Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceSection {
    pub kind: PriceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    /// Two-column CSV `(deviation, price)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub horizon: f64,
    pub dt: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverKind {
    #[serde(rename = "affine")]
    Affine,
    #[serde(rename = "fixedpoint")]
    FixedPoint,
    #[serde(rename = "variational")]
    Variational,
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affine" => Ok(SolverKind::Affine),
            "fixedpoint" => Ok(SolverKind::FixedPoint),
            "variational" => Ok(SolverKind::Variational),
            other => Err(Error::Config(format!(
                "unknown solver {other:?} (expected affine, fixedpoint or variational)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSection {
    pub solver: SolverKind,
    /// Defaults: 1e-8 for the fixed point, 1e-6 for the variational solver.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    pub max_iter: usize,
    pub damping: f64,
}

impl Default for SolveSection {
    fn default() -> Self {
        Self {
            solver: SolverKind::Variational,
            tol: None,
            max_iter: 500,
            damping: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub agents: usize,
    pub seed: u64,
    pub soc_lo: f64,
    pub soc_hi: f64,
    /// Also simulate the uncoordinated population.
    pub baseline: bool,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            agents: 200,
            seed: 42,
            soc_lo: 18.0,
            soc_hi: 30.0,
            baseline: true,
        }
    }
}

/// Parses `section.key=value`; the value is read as a TOML value, or as a
/// bare string when it is not one.
fn parse_override(spec: &str) -> Result<(String, String, toml::Value)> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form section.key=value")))?;
    let (section, key) = path
        .trim()
        .split_once('.')
        .ok_or_else(|| Error::Config(format!("override key {path:?} is not of the form section.key")))?;
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((section.to_string(), key.to_string(), value))
}

impl RunConfig {
    /// Parses TOML text after applying `overrides`.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for spec in overrides {
            let (section, key, value) = parse_override(spec)?;
            let entry = table
                .entry(section.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match entry {
                toml::Value::Table(t) => {
                    t.insert(key, value);
                }
                _ => return Err(Error::Config(format!("{section} is not a section"))),
            }
        }
        table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative table paths are taken from the file's
    /// directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        resolve(&mut cfg.model.drain_table);
        resolve(&mut cfg.price.table);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.horizon, self.grid.dt)
    }

    pub fn model_params(&self) -> Result<ModelParams> {
        let m = &self.model;
        let drain = match &m.drain_table {
            Some(path) => Signal::from_csv(path)?,
            None => Signal::Constant(m.drain),
        };
        ModelParams::new(m.kappa, m.sigma_soc, m.sigma_power, drain, m.capacity_kwh)
    }

    pub fn cost_params(&self) -> Result<CostParams> {
        let c = &self.cost;
        let cost = CostParams {
            q: c.q.matrix(),
            r: c.r,
            q_terminal: c.q_terminal.matrix(),
            reference: [Signal::Constant(c.reference[0]), Signal::Constant(c.reference[1])],
            terminal_reference: Vector2::from(c.terminal_reference),
            grid_target: Signal::Constant(c.grid_target),
        };
        cost.validate()?;
        Ok(cost)
    }

    fn need(value: Option<f64>, name: &str) -> Result<f64> {
        value.ok_or_else(|| Error::Config(format!("price.{name} is required for this price kind")))
    }

    /// The affine price `c₁ d + c₀` from the price section.
    pub fn affine_price(&self) -> Result<PriceFunction> {
        PriceFunction::affine(Self::need(self.price.c1, "c1")?, Self::need(self.price.c0, "c0")?)
    }

    /// The price selected by `price.kind`.
    pub fn price_function(&self) -> Result<PriceFunction> {
        let p = &self.price;
        match p.kind {
            PriceKind::Affine => self.affine_price(),
            PriceKind::Sigmoid => PriceFunction::sigmoid(Self::need(p.d_max, "d_max")?, Self::need(p.a, "a")?),
            PriceKind::Table => {
                let path = p
                    .table
                    .as_ref()
                    .ok_or_else(|| Error::Config("price.table is required for kind = \"table\"".into()))?;
                Ok(PriceFunction::Tabulated(PriceTable::from_csv(path)?))
            }
        }
    }

    /// Price used by `solver`: the affine solver always takes `c₁, c₀`.
    pub fn price_for(&self, solver: SolverKind) -> Result<PriceFunction> {
        match solver {
            SolverKind::Affine => self.affine_price(),
            _ => self.price_function(),
        }
    }

    /// `E[x₀]` of the initial distribution.
    pub fn initial_mean(&self) -> Vector2<f64> {
        Vector2::new(0.5 * (self.sim.soc_lo + self.sim.soc_hi), 0.0)
    }

    pub fn problem(&self, solver: SolverKind) -> Result<MfgProblem> {
        MfgProblem::new(
            &self.model_params()?,
            &self.cost_params()?,
            self.price_for(solver)?,
            &self.time_grid()?,
            self.initial_mean(),
        )
    }

    pub fn fixed_point_options(&self) -> FixedPointOptions {
        FixedPointOptions {
            damping: self.solve.damping,
            tol: self.solve.tol.unwrap_or(FixedPointOptions::default().tol),
            max_iter: self.solve.max_iter,
        }
    }

    pub fn variational_options(&self) -> VariationalOptions {
        VariationalOptions {
            tol: self.solve.tol.unwrap_or(VariationalOptions::default().tol),
            max_iter: self.solve.max_iter,
            ..Default::default()
        }
    }

    /// Checks everything that can be checked without solving.
    pub fn validate(&self) -> Result<()> {
        self.time_grid()?;
        self.model_params()?;
        self.cost_params()?;
        self.price_for(self.solve.solver)?;
        if self.price.c1.is_some() || self.price.c0.is_some() {
            self.affine_price()?;
        }
        if !(self.sim.soc_lo.is_finite() && self.sim.soc_hi.is_finite() && self.sim.soc_lo <= self.sim.soc_hi) {
            return Err(Error::Config("sim.soc_lo must not exceed sim.soc_hi".into()));
        }
        if self.sim.agents == 0 {
            return Err(Error::Config("sim.agents must be >= 1".into()));
        }
        Ok(())
    }
}
