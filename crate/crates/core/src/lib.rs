//! Solvers for stationary ergodic mean-field games with aggregating local
//! coupling on truncated boxes in one or two dimensions.

pub mod asymptotics;
pub mod energy;
pub mod error;
pub mod fokker_planck;
pub mod grid;
pub mod hjb;
pub mod linalg;
pub mod mfg;
pub mod model;

pub use asymptotics::{SweepRecord, SweepSettings};
pub use energy::{EnergyBreakdown, KPair};
pub use error::{Error, Result};
pub use grid::{Grid, Location, Point, ScalarField, VectorField};
pub use hjb::HjbOptions;
pub use mfg::{MfgSolution, SolverConfig};
pub use model::{CouplingSpec, HamiltonianSpec, ModelParams, PotentialSpec, RescaledModel};
