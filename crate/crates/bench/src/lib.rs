//! Fixtures shared by the benchmarks.

use wfp_core::{
    build_lattice_2d, build_path_lattice_1d, van_der_pol_drift, Boundary, DensityState, FlowProblem, FreeEnergySpec,
    Interaction, Potential, VanDerPolForm,
};

/// Gaussian bump of the given variance centered at the origin.
pub fn gaussian(problem: &FlowProblem, variance: f64) -> DensityState {
    let g = problem.graph();
    let logs: Vec<f64> = (0..g.n())
        .map(|i| -g.coord(i).iter().map(|x| x * x).sum::<f64>() / (2.0 * variance))
        .collect();
    DensityState::from_log_weights(&logs).unwrap()
}

/// Gradient flow on `[−5, 5]²` at spacing `dx`.
pub fn gradient_2d(dx: f64, potential: Potential, interaction: Interaction) -> FlowProblem {
    let g = build_lattice_2d(-5.0, 5.0, -5.0, 5.0, dx, Boundary::Neumann).unwrap();
    let spec = FreeEnergySpec::from_catalog(&g, potential, interaction, 0.01).unwrap();
    FlowProblem::gradient(g, spec).unwrap()
}

/// Van der Pol flow on `[−10, 10]²` at spacing `dx`.
pub fn van_der_pol(dx: f64) -> FlowProblem {
    let g = build_lattice_2d(-10.0, 10.0, -10.0, 10.0, dx, Boundary::Neumann).unwrap();
    FlowProblem::general(g, van_der_pol_drift(0.125, VanDerPolForm::Oscillator).unwrap()).unwrap()
}

/// Entropy-only flow on an `n`-point path over `[0, 1]`.
pub fn heat_path(n: usize) -> (FlowProblem, FreeEnergySpec) {
    let g = build_path_lattice_1d(0.0, 1.0, n).unwrap();
    let spec = FreeEnergySpec::entropy_only(n, 1.0).unwrap();
    (FlowProblem::gradient(g, spec.clone()).unwrap(), spec)
}
