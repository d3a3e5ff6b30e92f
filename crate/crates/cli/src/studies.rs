//! Convergence studies on 1-d graphs: spectral gaps and spatial order.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use wfp_core::{
    build_cycle_1d, build_path_lattice_1d, fit_asymptotic_rate, integrate, lambda_cycle_entropy_exact, lambda_estimate,
    lambda_lattice_entropy_exact, DensityState, FlowProblem, FreeEnergySpec, Graph, IntegrateOptions, RateOptions,
    Result, StepControl, StopRule,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Lattice,
    Cycle,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Lattice => "lattice",
            Family::Cycle => "cycle",
        }
    }

    pub fn build(self, n: usize) -> Result<Graph> {
        match self {
            Family::Lattice => build_path_lattice_1d(0.0, 1.0, n),
            Family::Cycle => build_cycle_1d(0.0, 1.0, n),
        }
    }

    pub fn closed_form(self, n: usize) -> Result<f64> {
        match self {
            Family::Lattice => lambda_lattice_entropy_exact(n, 0.0, 1.0),
            Family::Cycle => lambda_cycle_entropy_exact(n, 0.0, 1.0),
        }
    }

    /// Continuum limit of the closed form on `[0, 1]`.
    pub fn limit(self) -> f64 {
        match self {
            Family::Lattice => PI * PI,
            Family::Cycle => 4.0 * PI * PI,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RatesOptions {
    pub restarts: usize,
    pub seed: u64,
    /// Also run a heat flow per `n` and fit its decay.
    pub fit: bool,
}

impl Default for RatesOptions {
    fn default() -> Self {
        RatesOptions { restarts: 32, seed: 0, fit: true }
    }
}

#[derive(Debug, Clone)]
pub struct RateRow {
    pub n: usize,
    pub closed_form: f64,
    pub numeric: f64,
    /// Half the fitted decay of `ℱ − ℱ∞`, or NaN when not requested.
    pub fitted: f64,
    pub fit_r_squared: f64,
    pub limit: f64,
    pub cycle_over_lattice: f64,
}

/// Random positive density, seeded.
pub fn random_density(n: usize, seed: u64) -> Result<DensityState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    DensityState::from_weights(&w)
}

/// Entropy-only heat flow from seeded random data, run long enough for the
/// slowest mode to dominate. Returns `(fitted rate, r²)` of `ℱ − ℱ∞`.
pub fn heat_flow_decay(g: &Graph, lambda_guess: f64, seed: u64) -> Result<(f64, f64)> {
    let spec = FreeEnergySpec::entropy_only(g.n(), 1.0)?;
    let problem = FlowProblem::gradient(g.clone(), spec.clone())?;
    let rho0 = random_density(g.n(), seed)?;
    // keep λ·dt small so Euler's per-step damping does not bias the fit
    let dt = (0.5 * problem.stable_step_bound(&rho0)?).min(0.01 / lambda_guess);
    let opts = IntegrateOptions {
        dt: StepControl::Fixed(dt),
        t_end: 30.0 / (2.0 * lambda_guess),
        stop: StopRule::Time,
        sample_every: 1,
        ..Default::default()
    };
    let traj = integrate(&problem, rho0, &opts)?;
    let f_inf = wfp_core::free_energy(&spec, &DensityState::uniform(g.n()))?;
    fit_asymptotic_rate(&traj, f_inf, 0.5)
}

/// Numeric λ at the uniform density of the entropy-only energy.
pub fn lambda_uniform(g: &Graph, opts: &RateOptions) -> Result<f64> {
    let spec = FreeEnergySpec::entropy_only(g.n(), 1.0)?;
    Ok(lambda_estimate(g, &spec, &DensityState::uniform(g.n()), opts)?.lambda_numeric)
}

pub fn rates_table(family: Family, n_min: usize, n_max: usize, opts: &RatesOptions) -> Result<Vec<RateRow>> {
    if n_min < 3 || n_max < n_min {
        return Err(wfp_core::Error::InvalidArgument(format!(
            "need 3 <= n_min <= n_max, got {n_min}..{n_max}"
        )));
    }
    (n_min..=n_max)
        .into_par_iter()
        .map(|n| {
            let g = family.build(n)?;
            let closed_form = family.closed_form(n)?;
            let rate_opts = RateOptions { restarts: opts.restarts, seed: opts.seed, ..Default::default() };
            let numeric = lambda_uniform(&g, &rate_opts)?;
            let (fitted, fit_r_squared) = if opts.fit {
                let (rate, r2) = heat_flow_decay(&g, closed_form, opts.seed.wrapping_add(n as u64))?;
                (rate / 2.0, r2)
            } else {
                (f64::NAN, f64::NAN)
            };
            let cycle_over_lattice = lambda_cycle_entropy_exact(n, 0.0, 1.0)? / lambda_lattice_entropy_exact(n, 0.0, 1.0)?;
            Ok(RateRow { n, closed_form, numeric, fitted, fit_r_squared, limit: family.limit(), cycle_over_lattice })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct OrderOptions {
    /// Points on the coarsest grid; doubled per level.
    pub n0: usize,
    pub amplitude: f64,
    pub t_end: f64,
    /// Time step as a multiple of `Δx²`.
    pub dt_factor: f64,
}

impl Default for OrderOptions {
    fn default() -> Self {
        OrderOptions { n0: 16, amplitude: 0.01, t_end: 0.1, dt_factor: 0.01 }
    }
}

#[derive(Debug, Clone)]
pub struct OrderRow {
    pub n: usize,
    pub dx: f64,
    pub dt: f64,
    pub error_l1: f64,
    /// `log₂` of the previous level's error over this one.
    pub observed_order: Option<f64>,
}

/// L¹ distance at `t_end` between the periodic heat flow on `n` cells of
/// `[0, 1)` and the exact solution from `1 + ε cos 2πx`, both as cell masses.
pub fn periodic_heat_error(n: usize, dt: f64, amplitude: f64, t_end: f64) -> Result<f64> {
    let g = build_cycle_1d(0.0, 1.0 - 1.0 / n as f64, n)?;
    let dx = g.dx();
    // cell average of cos(2πx) over [x - dx/2, x + dx/2]
    let smear = (PI * dx).sin() / (PI * dx);
    let cell_mass = |x: f64, a: f64| dx * (1.0 + a * smear * (2.0 * PI * x).cos());
    let rho0: Vec<f64> = (0..n).map(|i| cell_mass(g.coord(i)[0], amplitude)).collect();
    let spec = FreeEnergySpec::entropy_only(n, 1.0)?;
    let problem = FlowProblem::gradient(g.clone(), spec)?;
    let opts = IntegrateOptions {
        dt: StepControl::Fixed(dt),
        t_end,
        stop: StopRule::Time,
        sample_every: usize::MAX,
        ..Default::default()
    };
    let traj = integrate(&problem, DensityState::from_weights(&rho0)?, &opts)?;
    let decayed = amplitude * (-4.0 * PI * PI * traj.final_time).exp();
    Ok((0..n)
        .map(|i| (traj.final_state.rho()[i] - cell_mass(g.coord(i)[0], decayed)).abs())
        .sum())
}

pub fn order_study(levels: usize, opts: &OrderOptions) -> Result<Vec<OrderRow>> {
    if levels < 3 {
        return Err(wfp_core::Error::InvalidArgument(format!("need at least 3 levels, got {levels}")));
    }
    let errors: Vec<(usize, f64, f64, f64)> = (0..levels)
        .into_par_iter()
        .map(|k| {
            let n = opts.n0 << k;
            let dx = 1.0 / n as f64;
            let dt = opts.dt_factor * dx * dx;
            periodic_heat_error(n, dt, opts.amplitude, opts.t_end).map(|e| (n, dx, dt, e))
        })
        .collect::<Result<_>>()?;
    Ok(errors
        .iter()
        .enumerate()
        .map(|(k, &(n, dx, dt, error_l1))| OrderRow {
            n,
            dx,
            dt,
            error_l1,
            observed_order: (k > 0).then(|| (errors[k - 1].3 / error_l1).log2()),
        })
        .collect())
}
