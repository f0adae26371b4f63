pub mod affine;
pub mod cli;
pub mod config;
pub mod equilibrium;
pub mod error;
pub mod grid;
pub mod lqsolve;
pub mod model;
pub mod population;
pub mod trajectory;

pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use trajectory::Trajectory;
