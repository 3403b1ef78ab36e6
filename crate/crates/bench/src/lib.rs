//! Fixtures shared by the solver benchmarks.

use mfg_core::fokker_planck::{drift_from_value, FpProblem};
use mfg_core::hjb::HjbProblem;
use mfg_core::{CouplingSpec, Grid, HamiltonianSpec, ModelParams, PotentialSpec, ScalarField};

/// Quadratic Hamiltonian, linear coupling, harmonic potential.
pub fn coupled_model(dim: usize, epsilon: f64) -> ModelParams {
    let alpha = if dim == 1 { 1.0 } else { 0.5 };
    ModelParams::new(
        dim,
        HamiltonianSpec::new(1.0, 2.0).expect("valid Hamiltonian"),
        CouplingSpec::new(1.0, alpha).expect("valid coupling"),
        PotentialSpec::Power { coef: 1.0, b: 2.0 },
        1.0,
        epsilon,
    )
    .expect("valid model")
}

pub fn hjb_problem(grid: Grid, epsilon: f64) -> HjbProblem {
    let rhs = ScalarField::from_fn(grid, |p| p[0] * p[0] + p[1] * p[1] + 0.5 * (3.0 * p[0]).sin());
    HjbProblem { rhs, epsilon, hamiltonian: HamiltonianSpec::new(1.0, 2.0).expect("valid Hamiltonian") }
}

pub fn fp_problem(grid: Grid, epsilon: f64) -> FpProblem {
    let u = ScalarField::from_fn(grid, |p| 0.5 * (p[0] * p[0] + p[1] * p[1]) + 0.3 * (2.0 * p[0]).sin());
    let ham = HamiltonianSpec::new(1.0, 2.0).expect("valid Hamiltonian");
    FpProblem { drift: drift_from_value(&u, &ham), epsilon, mass: 1.0 }
}
