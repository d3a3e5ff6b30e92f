//! Upwind finite-volume schemes for nonlinear Fokker-Planck equations on
//! graphs, built as gradient flows of a discrete free energy under a
//! Wasserstein-type metric.
//!
//! The crate is organised bottom-up:
//!
//! - [`graph`]: lattice and cycle graphs with directional edge labels
//! - [`energy`]: free energy, its derivatives, Gibbs equilibria
//! - [`metric`]: upwind weights, the Onsager operator and the metric tensor
//! - [`dynamics`]: right-hand sides, dissipation and the explicit integrator
//! - [`drift`]: non-gradient drifts assembled per edge direction
//! - [`rate`]: convergence-rate constants and their estimation

pub mod drift;
pub mod dynamics;
pub mod energy;
pub mod error;
pub mod graph;
pub mod metric;
pub mod numerics;
pub mod rate;

pub use drift::{drift_eval, duffing_drift, van_der_pol_drift, DriftSpec, VanDerPolForm};
pub use dynamics::{
    dissipation, general_rhs, gradient_flow_rhs, integrate, solve_gibbs, write_density_csv, write_trajectory_csv,
    FlowEval, FlowKind, FlowProblem, IntegrateOptions, Sample, StepControl, StopRule, Trajectory,
};

pub use energy::{
    build_interaction_matrix, build_potential_vector, energy_gradient, energy_hessian, free_energy,
    gibbs_fixed_point, gibbs_fixed_point_from, gibbs_map_log, gibbs_residual, DensityState, FreeEnergySpec, GibbsOptions, Interaction,
    Potential,
};
pub use error::{Error, Result};
pub use graph::{build_cycle_1d, build_lattice_2d, build_path_lattice_1d, Boundary, Edge, Graph};
pub use metric::{
    graph_gradient, metric_inner_product, solve_potential, tau_matrix, upwind_weight, upwind_weights,
    weighted_divergence,
};
pub use rate::{
    cycle_matrix_spectrum, fit_asymptotic_rate, fit_exponential_tail, lambda_cycle_entropy_exact, lambda_estimate,
    lambda_lattice_entropy_exact, lambda_objective, second_derivative_diagnostic, RateOptions, RateReport,
};
