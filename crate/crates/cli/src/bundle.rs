use std::collections::BTreeMap;

use mfg_core::{EnergyBreakdown, MfgSolution, ModelParams, SweepRecord};
use serde::{Deserialize, Serialize};

use crate::config::{Command, RunConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub bound: f64,
    pub detail: String,
}

impl Assertion {
    pub fn at_most(name: &str, value: f64, bound: f64) -> Self {
        Self { name: name.into(), passed: value <= bound, value, bound, detail: format!("value <= {bound:e}") }
    }

    pub fn at_least(name: &str, value: f64, bound: f64) -> Self {
        Self { name: name.into(), passed: value >= bound, value, bound, detail: format!("value >= {bound:e}") }
    }

    pub fn holds(name: &str, passed: bool, value: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, value, bound: f64::NAN, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub epsilon: f64,
    pub mass: f64,
    pub lambda: f64,
    pub energy: EnergyBreakdown,
    pub duality_gap: f64,
    pub duality_gap_relative: f64,
    pub optimality_residual: f64,
    pub fixedpoint_iterations: usize,
    pub stalled: bool,
    pub hjb_residual: f64,
    pub cell_peclet: f64,
    pub argmin: Vec<f64>,
    pub sup_m: f64,
    pub grid_points: usize,
}

impl RunSummary {
    pub fn new(label: impl Into<String>, sol: &MfgSolution, model: &ModelParams) -> Self {
        Self {
            label: label.into(),
            epsilon: model.epsilon,
            mass: model.mass,
            lambda: sol.lambda,
            energy: sol.energy,
            duality_gap: sol.duality_gap,
            duality_gap_relative: relative_gap(sol, model),
            optimality_residual: sol.optimality_residual,
            fixedpoint_iterations: sol.fixedpoint_iterations,
            stalled: sol.stalled,
            hjb_residual: sol.hjb_residual,
            cell_peclet: sol.cell_peclet,
            argmin: sol.argmin_point()[..model.dim].to_vec(),
            sup_m: sol.m.max(),
            grid_points: sol.grid().node_count(),
        }
    }
}

pub fn relative_gap(sol: &MfgSolution, model: &ModelParams) -> f64 {
    sol.duality_gap / (sol.lambda * model.mass).abs().max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub label: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub started_unix: f64,
    pub finished_unix: f64,
}

/// Node profiles kept for tables and plots; not part of the summary document.
#[derive(Debug, Clone, Default)]
pub struct Profile {
    pub name: String,
    pub columns: Vec<(String, Vec<f64>)>,
}

/// One curve for a plot.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub markers: bool,
}

#[derive(Debug, Clone)]
pub struct Figure {
    pub file: String,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultBundle {
    pub schema_version: u32,
    pub command: Command,
    pub config: RunConfig,
    pub runs: Vec<RunSummary>,
    pub sweep: Vec<SweepRecord>,
    /// Command-specific reports keyed by name.
    pub reports: BTreeMap<String, serde_json::Value>,
    pub assertions: Vec<Assertion>,
    pub failures: Vec<Failure>,
    pub provenance: Provenance,
    #[serde(skip)]
    pub profiles: Vec<Profile>,
    #[serde(skip)]
    pub figures: Vec<Figure>,
    /// Sweep ε values that failed, for the table rows.
    #[serde(skip)]
    pub failed_epsilons: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    SolverFailure,
    AssertionFailure,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Pass => 0,
            Status::SolverFailure => 1,
            Status::AssertionFailure => 3,
        }
    }
}

impl ResultBundle {
    pub fn status(&self) -> Status {
        if !self.failures.is_empty() {
            Status::SolverFailure
        } else if self.assertions.iter().any(|a| !a.passed) {
            Status::AssertionFailure
        } else {
            Status::Pass
        }
    }

    pub fn passed(&self) -> usize {
        self.assertions.iter().filter(|a| a.passed).count()
    }

    pub fn assertion(&self, name: &str) -> Option<&Assertion> {
        self.assertions.iter().find(|a| a.name == name)
    }

    pub fn report<T: Serialize>(&mut self, name: &str, value: &T) {
        let v = serde_json::to_value(value).expect("reports serialize");
        self.reports.insert(name.to_string(), v);
    }
}
