//! Upwind semi-discretization, dissipation and the explicit Euler integrator.
//!
//! Both gradient and general flows are written with an edge potential `P`:
//! mass crosses the edge `(i, j)` at rate `ρ_i (P(i) − P(j))₊ / Δx²`. For a
//! gradient flow `P = F`, the energy gradient. For a general drift along
//! direction `v`, `P_v(i) = −u_v(i, ρ)`.

use std::io::{self, Write};

use crate::drift::DriftSpec;
use crate::energy::{gibbs_fixed_point, gibbs_fixed_point_from, DensityState, FreeEnergySpec, GibbsOptions};
use crate::error::{invalid, Error, Result};
use crate::graph::Graph;
use crate::numerics::{log_add_exp, CompensatedSum};

/// Below this log-density the Euler update switches to log-space arithmetic.
const LOG_SPACE_THRESHOLD: f64 = -650.0;

/// Plain-arithmetic results smaller than this are recomputed in log space.
const LINEAR_FLOOR: f64 = 1e-280;

#[derive(Debug, Clone)]
pub enum FlowKind {
    Gradient(FreeEnergySpec),
    General(DriftSpec),
}

/// A graph together with the flow to run on it.
#[derive(Debug, Clone)]
pub struct FlowProblem {
    graph: Graph,
    kind: FlowKind,
    /// General kind: `−u_potential_v` per direction, per vertex.
    base: Vec<Vec<f64>>,
}

impl FlowProblem {
    pub fn gradient(graph: Graph, spec: FreeEnergySpec) -> Result<Self> {
        if spec.n() != graph.n() {
            return Err(invalid(format!(
                "energy has {} vertices, graph has {}",
                spec.n(),
                graph.n()
            )));
        }
        Ok(Self { graph, kind: FlowKind::Gradient(spec), base: Vec::new() })
    }

    pub fn general(graph: Graph, drift: DriftSpec) -> Result<Self> {
        drift.check_graph(&graph)?;
        let base = (0..drift.dim())
            .map(|v| {
                drift
                    .potential_table(&graph, v)
                    .map(|t| t.into_iter().map(|u| -u).collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Ok(Self { graph, kind: FlowKind::General(drift), base })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn kind(&self) -> &FlowKind {
        &self.kind
    }

    pub fn energy(&self) -> Option<&FreeEnergySpec> {
        match &self.kind {
            FlowKind::Gradient(s) => Some(s),
            FlowKind::General(_) => None,
        }
    }

    pub fn is_gradient(&self) -> bool {
        matches!(self.kind, FlowKind::Gradient(_))
    }

    fn check_state(&self, rho: &DensityState) -> Result<()> {
        if rho.len() != self.graph.n() {
            return Err(invalid(format!(
                "density has {} entries, graph has {} vertices",
                rho.len(),
                self.graph.n()
            )));
        }
        Ok(())
    }

    /// Evaluate the right-hand side and everything derived from the same `P`.
    pub fn evaluate(&self, rho: &DensityState) -> Result<FlowEval> {
        self.check_state(rho)?;
        let mut eval = FlowEval::empty(self.graph.n(), self.stride());
        self.evaluate_into(rho, &mut eval);
        Ok(eval)
    }

    fn stride(&self) -> usize {
        match &self.kind {
            FlowKind::Gradient(_) => 1,
            FlowKind::General(d) => d.dim(),
        }
    }

    fn evaluate_into(&self, rho: &DensityState, eval: &mut FlowEval) {
        let g = &self.graph;
        let n = g.n();
        let l = rho.log_rho();
        match &self.kind {
            FlowKind::Gradient(spec) => {
                spec.interaction_field_into(rho.rho(), &mut eval.field);
                spec.gradient_with_field_into(rho, &eval.field, &mut eval.potential);
                eval.free_energy = spec.free_energy_with_field(rho, &eval.field);
            }
            FlowKind::General(drift) => {
                let stride = drift.dim();
                for (v, beta) in drift.diffusion().iter().enumerate() {
                    let base = &self.base[v];
                    for i in 0..n {
                        eval.potential[i * stride + v] = base[i] + beta * l[i];
                    }
                }
                eval.free_energy = f64::NAN;
            }
        }
        let stride = eval.stride;
        // zero for gradient flows, where every direction shares one potential
        let mask = if self.is_gradient() { 0 } else { usize::MAX };
        let pot = &eval.potential[..];
        let inv = 1.0 / (g.dx() * g.dx());
        let r = rho.rho();
        let edges = g.edges();
        let (rhs, outflow) = (&mut eval.rhs[..], &mut eval.outflow[..]);
        let mut dissipation = CompensatedSum::new();
        let mut rhs_inf: f64 = 0.0;
        for i in 0..n {
            let mut acc = 0.0;
            let mut out = 0.0;
            let mut diss = 0.0;
            for e in &edges[g.edge_range(i)] {
                let v = e.direction & mask;
                let (pi, pj) = (pot[i * stride + v], pot[e.to * stride + v]);
                let d = pi - pj;
                // on a tie d = 0, so the mean weight of `upwind_weight` is moot
                let weight = if d > 0.0 { r[i] } else { r[e.to] };
                acc += -(d * weight);
                let up = d.max(0.0);
                out += up;
                diss += up * up * r[i];
            }
            rhs[i] = acc * inv;
            outflow[i] = out * inv;
            dissipation.add(diss * inv);
            rhs_inf = rhs_inf.max((acc * inv).abs());
        }
        eval.dissipation = dissipation.value();
        eval.rhs_inf = rhs_inf;
        eval.max_abs_potential = eval.potential.iter().fold(0.0, |m: f64, p| m.max(p.abs()));
    }

    /// `Δx² / (Δ(G)·M)` with `M = 2 max |P|`; `+∞` when `M = 0`.
    pub fn stable_step_bound(&self, rho: &DensityState) -> Result<f64> {
        Ok(self.step_bound_from(&self.evaluate(rho)?))
    }

    fn step_bound_from(&self, eval: &FlowEval) -> f64 {
        let m = 2.0 * eval.max_abs_potential;
        if m == 0.0 {
            return f64::INFINITY;
        }
        let dx = self.graph.dx();
        dx * dx / (self.graph.max_degree() as f64 * m)
    }

    /// One forward Euler step `ρ' = ρ + Δt·rhs(ρ)`.
    pub fn euler_step(&self, rho: &DensityState, dt: f64) -> Result<DensityState> {
        let eval = self.evaluate(rho)?;
        self.euler_step_with(rho, &eval, dt)
    }

    fn euler_step_with(&self, rho: &DensityState, eval: &FlowEval, dt: f64) -> Result<DensityState> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid(format!("time step must be positive, got {dt}")));
        }
        let g = &self.graph;
        let n = g.n();
        let l = rho.log_rho();
        let r = rho.rho();
        let mut new_l = Vec::with_capacity(n);
        let mut new_r = Vec::with_capacity(n);
        for i in 0..n {
            let plain = l[i] > LOG_SPACE_THRESHOLD
                && g.edges()[g.edge_range(i)].iter().all(|e| l[e.to] > LOG_SPACE_THRESHOLD);
            if plain {
                let next = r[i] + dt * eval.rhs[i];
                if next > LINEAR_FLOOR {
                    new_l.push(next.ln());
                    new_r.push(next);
                    continue;
                }
            }
            let next_l = self.log_space_update(rho, eval, i, dt)?;
            new_l.push(next_l);
            new_r.push(next_l.exp());
        }
        Ok(DensityState::from_parts(new_l, new_r))
    }

    /// `log(ρ_i (1 − Δt·out_i) + Δt·in_i)` without forming tiny products.
    fn log_space_update(&self, rho: &DensityState, eval: &FlowEval, i: usize, dt: f64) -> Result<f64> {
        let g = &self.graph;
        let l = rho.log_rho();
        let stride = eval.stride;
        let mask = if self.is_gradient() { 0 } else { usize::MAX };
        let log_inv = -2.0 * g.dx().ln();
        // streaming log-sum-exp over the inflow terms
        let (mut top, mut scaled) = (f64::NEG_INFINITY, 0.0);
        for e in &g.edges()[g.edge_range(i)] {
            let v = e.direction & mask;
            let (pi, pj) = (eval.potential[i * stride + v], eval.potential[e.to * stride + v]);
            if pj > pi {
                let term = l[e.to] + (pj - pi).ln() + log_inv;
                if term > top {
                    scaled = scaled * (top - term).exp() + 1.0;
                    top = term;
                } else {
                    scaled += (term - top).exp();
                }
            }
        }
        let log_gain = dt.ln() + top + scaled.ln();
        let keep = 1.0 - dt * eval.outflow[i];
        let next = if keep > 0.0 {
            log_add_exp(l[i] + keep.ln(), log_gain)
        } else {
            let loss = if keep == 0.0 { f64::NEG_INFINITY } else { l[i] + (-keep).ln() };
            if log_gain > loss {
                log_gain + (-(loss - log_gain).exp()).ln_1p()
            } else {
                f64::NEG_INFINITY
            }
        };
        if next.is_finite() {
            Ok(next)
        } else {
            Err(Error::StepRejected { vertex: i })
        }
    }
}

/// Right-hand side evaluation together with quantities sharing its `P`.
#[derive(Debug, Clone)]
pub struct FlowEval {
    stride: usize,
    field: Vec<f64>,
    /// Edge potential per vertex (and per direction for general flows).
    potential: Vec<f64>,
    pub rhs: Vec<f64>,
    /// `Σ_j (P(i) − P(j))₊ / Δx²`.
    pub outflow: Vec<f64>,
    /// ℱ(ρ) for gradient flows, NaN otherwise.
    pub free_energy: f64,
    pub dissipation: f64,
    pub rhs_inf: f64,
    pub max_abs_potential: f64,
}

impl FlowEval {
    fn empty(n: usize, stride: usize) -> Self {
        Self {
            stride,
            field: vec![0.0; n],
            potential: vec![0.0; n * stride],
            rhs: vec![0.0; n],
            outflow: vec![0.0; n],
            free_energy: f64::NAN,
            dissipation: 0.0,
            rhs_inf: 0.0,
            max_abs_potential: 0.0,
        }
    }

    /// Edge potential of vertex `i` along direction `v`.
    pub fn potential(&self, i: usize, v: usize) -> f64 {
        if self.stride == 1 {
            self.potential[i]
        } else {
            self.potential[i * self.stride + v]
        }
    }
}

/// `dρ_i/dt = (1/Δx²)[Σ_j ρ_j (F_j − F_i)₊ − ρ_i Σ_j (F_i − F_j)₊]`.
pub fn gradient_flow_rhs(g: &Graph, spec: &FreeEnergySpec, rho: &DensityState) -> Result<Vec<f64>> {
    let p = FlowProblem::gradient(g.clone(), spec.clone())?;
    Ok(p.evaluate(rho)?.rhs)
}

/// Right-hand side of the general upwind flow for a drift specification.
pub fn general_rhs(g: &Graph, drift: &DriftSpec, rho: &DensityState) -> Result<Vec<f64>> {
    let p = FlowProblem::general(g.clone(), drift.clone())?;
    Ok(p.evaluate(rho)?.rhs)
}

/// `D(ρ) = Σ_{(i,j)∈E} ((F_i − F_j)/Δx)₊² ρ_i`.
pub fn dissipation(g: &Graph, spec: &FreeEnergySpec, rho: &DensityState) -> Result<f64> {
    let p = FlowProblem::gradient(g.clone(), spec.clone())?;
    Ok(p.evaluate(rho)?.dissipation)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepControl {
    Fixed(f64),
    /// `safety · stable_step_bound`, recomputed every step.
    Auto { safety: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// Run until `t_end`.
    Time,
    DissipationBelow(f64),
    /// `‖rhs‖∞ < ε`.
    ResidualBelow(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrateOptions {
    pub dt: StepControl,
    pub t_end: f64,
    pub stop: StopRule,
    /// Record a trajectory sample every this many accepted steps.
    pub sample_every: usize,
    /// Store a density checkpoint every this many accepted steps; 0 disables.
    pub density_every: usize,
    pub max_halvings: usize,
    pub mass_tolerance: f64,
    /// Relative slack when counting free-energy increases.
    pub energy_tolerance: f64,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self {
            dt: StepControl::Auto { safety: 0.5 },
            t_end: 1.0,
            stop: StopRule::Time,
            sample_every: 1,
            density_every: 0,
            max_halvings: 60,
            mass_tolerance: 1e-8,
            energy_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub free_energy: f64,
    pub dissipation: f64,
    pub min_rho: f64,
    pub mass_error: f64,
    pub min_log_rho: f64,
    pub rhs_inf: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub checkpoints: Vec<(f64, DensityState)>,
    pub final_state: DensityState,
    pub final_time: f64,
    pub steps: usize,
    pub rejections: usize,
    /// Whether the stop rule fired (always true for [`StopRule::Time`]).
    pub converged: bool,
    /// `min_{i,t} log ρ_i(t)` over every accepted state.
    pub min_log_rho: f64,
    pub max_mass_error: f64,
    /// Largest `(ℱ(ρ^{k+1}) − ℱ(ρ^k)) / |ℱ(ρ^k)|` over accepted steps.
    pub max_energy_increase: f64,
    /// Steps where ℱ rose by more than the configured relative tolerance.
    pub energy_violations: usize,
}

impl Trajectory {
    pub fn min_rho(&self) -> f64 {
        self.min_log_rho.exp()
    }

    pub fn last(&self) -> &Sample {
        self.samples.last().expect("trajectories hold at least one sample")
    }
}

fn sample(t: f64, state: &DensityState, eval: &FlowEval) -> Sample {
    let min_log_rho = state.min_log_rho();
    Sample {
        t,
        free_energy: eval.free_energy,
        dissipation: eval.dissipation,
        min_rho: min_log_rho.exp(),
        mass_error: state.mass_error(),
        min_log_rho,
        rhs_inf: eval.rhs_inf,
    }
}

fn stop_fired(stop: StopRule, eval: &FlowEval) -> bool {
    match stop {
        StopRule::Time => false,
        StopRule::DissipationBelow(eps) => eval.dissipation < eps,
        StopRule::ResidualBelow(eps) => eval.rhs_inf < eps,
    }
}

/// Advance `rho0` with forward Euler until the stop rule fires or `t_end`.
///
/// A step that would make some density nonpositive is retried with half the
/// step size; the nominal step is restored afterwards.
pub fn integrate(problem: &FlowProblem, rho0: DensityState, opts: &IntegrateOptions) -> Result<Trajectory> {
    problem.check_state(&rho0)?;
    match opts.dt {
        StepControl::Fixed(dt) if !(dt > 0.0 && dt.is_finite()) => {
            return Err(invalid(format!("time step must be positive, got {dt}")))
        }
        StepControl::Auto { safety } if !(safety > 0.0 && safety <= 1.0) => {
            return Err(invalid(format!("safety factor must lie in (0, 1], got {safety}")))
        }
        _ => {}
    }
    if !(opts.t_end >= 0.0 && opts.t_end.is_finite()) {
        return Err(invalid("t_end must be finite and nonnegative"));
    }
    let sample_every = opts.sample_every.max(1);
    let mut state = rho0;
    let mut eval = problem.evaluate(&state)?;
    let mut spare = eval.clone();
    let mut clock = CompensatedSum::new();
    let mut t = 0.0;
    let mut samples = vec![sample(t, &state, &eval)];
    let mut checkpoints = Vec::new();
    if opts.density_every > 0 {
        checkpoints.push((t, state.clone()));
    }
    let mut steps = 0usize;
    let mut rejections = 0usize;
    let mut min_log_rho = state.min_log_rho();
    let mut max_mass_error = state.mass_error();
    let mut max_energy_increase = f64::NEG_INFINITY;
    let mut energy_violations = 0usize;
    let mut converged = stop_fired(opts.stop, &eval);
    let mut sampled_last = true;
    while !converged {
        let remaining = opts.t_end - t;
        if remaining <= opts.t_end * 1e-14 {
            converged = opts.stop == StopRule::Time;
            break;
        }
        let nominal = match opts.dt {
            StepControl::Fixed(dt) => dt,
            StepControl::Auto { safety } => safety * problem.step_bound_from(&eval),
        };
        let mut dt = nominal.min(remaining);
        let mut halvings = 0;
        let next = loop {
            match problem.euler_step_with(&state, &eval, dt) {
                Ok(s) => break s,
                Err(Error::StepRejected { .. }) => {
                    halvings += 1;
                    rejections += 1;
                    if halvings > opts.max_halvings {
                        return Err(Error::Stiffness { halvings, t });
                    }
                    dt *= 0.5;
                }
                Err(e) => return Err(e),
            }
        };
        clock.add(dt);
        t = clock.value();
        steps += 1;
        let mass_error = next.mass_error();
        if mass_error > opts.mass_tolerance {
            return Err(Error::Integrity { mass_error, t });
        }
        max_mass_error = max_mass_error.max(mass_error);
        problem.evaluate_into(&next, &mut spare);
        let next_eval = &spare;
        if problem.is_gradient() {
            let (old, new) = (eval.free_energy, next_eval.free_energy);
            let scale = old.abs().max(f64::MIN_POSITIVE);
            max_energy_increase = max_energy_increase.max((new - old) / scale);
            if new > old + opts.energy_tolerance * old.abs() {
                energy_violations += 1;
            }
        }
        state = next;
        std::mem::swap(&mut eval, &mut spare);
        min_log_rho = min_log_rho.min(state.min_log_rho());
        converged = stop_fired(opts.stop, &eval);
        sampled_last = false;
        if steps % sample_every == 0 {
            samples.push(sample(t, &state, &eval));
            sampled_last = true;
        }
        if opts.density_every > 0 && steps % opts.density_every == 0 {
            checkpoints.push((t, state.clone()));
        }
    }
    if !sampled_last {
        samples.push(sample(t, &state, &eval));
    }
    Ok(Trajectory {
        samples,
        checkpoints,
        final_state: state,
        final_time: t,
        steps,
        rejections,
        converged,
        min_log_rho,
        max_mass_error,
        max_energy_increase,
        energy_violations,
    })
}

/// Gibbs equilibrium of `spec` on `g`.
///
/// Runs [`gibbs_fixed_point`] first; when that fails, integrates the gradient
/// flow until the dissipation is small and restarts the fixed-point iteration
/// from there.
pub fn solve_gibbs(g: &Graph, spec: &FreeEnergySpec, opts: GibbsOptions) -> Result<DensityState> {
    match gibbs_fixed_point(spec, opts) {
        Ok(rho) => Ok(rho),
        Err(Error::ConvergenceFailure { .. }) => {
            let problem = FlowProblem::gradient(g.clone(), spec.clone())?;
            let flow = IntegrateOptions {
                dt: StepControl::Auto { safety: 0.5 },
                t_end: 1e6,
                stop: StopRule::DissipationBelow(opts.tol * opts.tol),
                sample_every: usize::MAX,
                ..Default::default()
            };
            let traj = integrate(&problem, DensityState::uniform(g.n()), &flow)?;
            gibbs_fixed_point_from(spec, traj.final_state, opts)
        }
        Err(e) => Err(e),
    }
}

fn fmt_value(x: f64) -> String {
    format!("{x:.14e}")
}

/// CSV with columns `t, free_energy, dissipation, min_rho, mass_error,
/// min_log_rho, rhs_inf`.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, mut out: W) -> io::Result<()> {
    writeln!(out, "t,free_energy,dissipation,min_rho,mass_error,min_log_rho,rhs_inf")?;
    for s in &traj.samples {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            fmt_value(s.t),
            fmt_value(s.free_energy),
            fmt_value(s.dissipation),
            fmt_value(s.min_rho),
            fmt_value(s.mass_error),
            fmt_value(s.min_log_rho),
            fmt_value(s.rhs_inf)
        )?;
    }
    Ok(())
}

/// CSV with columns `vertex, x, y, rho, log_rho`; `y` is 0 on 1-d graphs.
pub fn write_density_csv<W: Write>(g: &Graph, rho: &DensityState, mut out: W) -> io::Result<()> {
    writeln!(out, "vertex,x,y,rho,log_rho")?;
    for i in 0..g.n() {
        let c = g.coord(i);
        let y = c.get(1).copied().unwrap_or(0.0);
        writeln!(
            out,
            "{},{},{},{},{}",
            i,
            fmt_value(c[0]),
            fmt_value(y),
            fmt_value(rho.rho()[i]),
            fmt_value(rho.log_rho()[i])
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{van_der_pol_drift, VanDerPolForm};
    use crate::energy::{build_potential_vector, gibbs_residual, Potential};
    use crate::graph::{build_cycle_1d, build_lattice_2d, build_path_lattice_1d, Boundary};
    use crate::metric::weighted_divergence;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_node() -> (Graph, FreeEnergySpec, DensityState) {
        let g = build_path_lattice_1d(0.0, 1.0, 2).unwrap();
        let spec = FreeEnergySpec::entropy_only(2, 1.0).unwrap();
        let rho = DensityState::from_rho(vec![0.75, 0.25]).unwrap();
        (g, spec, rho)
    }

    fn random_density(rng: &mut ChaCha8Rng, n: usize) -> DensityState {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        DensityState::from_weights(&w).unwrap()
    }

    #[test]
    fn two_node_rhs_and_dissipation() {
        let (g, spec, rho) = two_node();
        let rhs = gradient_flow_rhs(&g, &spec, &rho).unwrap();
        let l3 = 3f64.ln();
        assert_relative_eq!(rhs[0], -0.75 * l3, epsilon = 1e-15);
        assert_relative_eq!(rhs[1], 0.75 * l3, epsilon = 1e-15);
        assert_relative_eq!(rhs[0], -0.8240, epsilon = 1e-4);
        let d = dissipation(&g, &spec, &rho).unwrap();
        assert_relative_eq!(d, l3 * l3 * 0.75, epsilon = 1e-15);
        assert_relative_eq!(d, 0.905212, epsilon = 1e-6);
    }

    #[test]
    fn two_node_step_bound_and_euler() {
        let (g, spec, rho) = two_node();
        let p = FlowProblem::gradient(g, spec).unwrap();
        let m = 2.0 * (1.0 + 0.75f64.ln()).abs().max((1.0 + 0.25f64.ln()).abs());
        assert_relative_eq!(p.stable_step_bound(&rho).unwrap(), 1.0 / m, epsilon = 1e-14);
        let next = p.euler_step(&rho, 0.1).unwrap();
        let shift = 0.1 * 0.75 * 3f64.ln();
        assert_relative_eq!(next.rho()[0], 0.75 - shift, epsilon = 1e-15);
        assert_relative_eq!(next.rho()[1], 0.25 + shift, epsilon = 1e-15);
        assert!((next.mass() - 1.0).abs() <= 1e-15);
        let tiny = p.euler_step(&rho, 1e-300).unwrap();
        assert_eq!(tiny.rho(), rho.rho());
    }

    #[test]
    fn uniform_heat_is_stationary() {
        let g = build_path_lattice_1d(0.0, 1.0, 9).unwrap();
        let spec = FreeEnergySpec::entropy_only(9, 0.7).unwrap();
        let rho = DensityState::uniform(9);
        assert!(gradient_flow_rhs(&g, &spec, &rho).unwrap().iter().all(|&x| x == 0.0));
        let bound = FlowProblem::gradient(g, spec).unwrap().stable_step_bound(&rho).unwrap();
        assert!(bound.is_finite() && bound > 0.0);
    }

    #[test]
    fn step_bound_scales_with_dx_squared() {
        let bound = |n: usize| {
            let g = build_path_lattice_1d(-1.0, 1.0, n).unwrap();
            let v = build_potential_vector(&g, Potential::Quadratic);
            let spec = FreeEnergySpec::new(v, None, 1.0).unwrap();
            let w: Vec<f64> = (0..n).map(|i| (-(g.coord(i)[0]).powi(2)).exp()).collect();
            let rho = DensityState::from_weights(&w).unwrap();
            let p = FlowProblem::gradient(g.clone(), spec.clone()).unwrap();
            let eval = p.evaluate(&rho).unwrap();
            p.stable_step_bound(&rho).unwrap() * eval.max_abs_potential / (g.dx() * g.dx())
        };
        assert_relative_eq!(bound(21), bound(41), epsilon = 1e-12);
    }

    #[test]
    fn rhs_is_minus_tau_of_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let graphs = [
            build_path_lattice_1d(0.0, 1.0, 7).unwrap(),
            build_cycle_1d(0.0, 1.0, 7).unwrap(),
            build_lattice_2d(0.0, 1.0, 0.0, 1.0, 0.25, Boundary::Neumann).unwrap(),
        ];
        for g in graphs {
            let n = g.n();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let spec = FreeEnergySpec::new(v, None, 0.4).unwrap();
            let rho = random_density(&mut rng, n);
            let f = crate::energy::energy_gradient(&spec, &rho).unwrap();
            let tau = weighted_divergence(&g, &rho, &f, &f).unwrap();
            let rhs = gradient_flow_rhs(&g, &spec, &rho).unwrap();
            for i in 0..n {
                assert!((rhs[i] + tau[i]).abs() <= 1e-14 * rhs[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn general_rhs_embeds_gradient_flow() {
        let g = build_lattice_2d(-1.0, 1.0, -1.0, 1.0, 0.25, Boundary::Neumann).unwrap();
        let beta = 0.3;
        let v = build_potential_vector(&g, Potential::DoubleWell);
        let spec = FreeEnergySpec::new(v.clone(), None, beta).unwrap();
        let neg_v: Vec<f64> = v.iter().map(|x| -x).collect();
        let drift = DriftSpec::from_tables("embedded", vec![neg_v.clone(), neg_v], vec![beta, beta]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rho = random_density(&mut rng, g.n());
        let a = gradient_flow_rhs(&g, &spec, &rho).unwrap();
        let b = general_rhs(&g, &drift, &rho).unwrap();
        for i in 0..g.n() {
            assert!((a[i] - b[i]).abs() <= 1e-14 * a[i].abs().max(1.0));
        }
    }

    #[test]
    fn general_rhs_properties() {
        let g = build_lattice_2d(-1.0, 1.0, -1.0, 1.0, 1.0, Boundary::Neumann).unwrap();
        let constant = DriftSpec::from_tables("c", vec![vec![2.0; 9], vec![-1.0; 9]], vec![0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rho = random_density(&mut rng, 9);
        assert!(general_rhs(&g, &constant, &rho).unwrap().iter().all(|&x| x == 0.0));
        let vdp = van_der_pol_drift(0.125, VanDerPolForm::Reduced).unwrap();
        let at_uniform = general_rhs(&g, &vdp, &DensityState::uniform(9)).unwrap();
        assert!(at_uniform.iter().any(|&x| x.abs() > 1e-3));
        for _ in 0..200 {
            let rho = random_density(&mut rng, 9);
            let rhs = general_rhs(&g, &vdp, &rho).unwrap();
            assert!(rhs.iter().sum::<f64>().abs() <= 1e-13);
        }
    }

    #[test]
    fn dissipation_vanishes_at_gibbs() {
        let g = build_path_lattice_1d(-2.0, 2.0, 21).unwrap();
        let spec = FreeEnergySpec::new(build_potential_vector(&g, Potential::DoubleWell), None, 0.5).unwrap();
        let gibbs = gibbs_fixed_point(&spec, GibbsOptions::default()).unwrap();
        assert!(dissipation(&g, &spec, &gibbs).unwrap() <= 1e-12);
        let rhs = gradient_flow_rhs(&g, &spec, &gibbs).unwrap();
        assert!(rhs.iter().all(|x| x.abs() <= 1e-8));
        let p = FlowProblem::gradient(g, spec).unwrap();
        let opts = IntegrateOptions { stop: StopRule::DissipationBelow(1e-12), ..Default::default() };
        let traj = integrate(&p, gibbs.clone(), &opts).unwrap();
        assert_eq!(traj.steps, 0);
        assert!(traj.converged);
        assert_eq!(traj.final_state, gibbs);
    }

    #[test]
    fn energy_slope_matches_dissipation() {
        let g = build_path_lattice_1d(0.0, 1.0, 11).unwrap();
        let spec = FreeEnergySpec::new(build_potential_vector(&g, Potential::Quadratic), None, 0.2).unwrap();
        let p = FlowProblem::gradient(g, spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rho = random_density(&mut rng, 11);
        let eval = p.evaluate(&rho).unwrap();
        let slope = |dt: f64| {
            let next = p.euler_step(&rho, dt).unwrap();
            (p.evaluate(&next).unwrap().free_energy - eval.free_energy) / dt
        };
        let (e1, e2) = ((slope(1e-5) + eval.dissipation).abs(), (slope(5e-6) + eval.dissipation).abs());
        assert!(e1 < 1e-2 * eval.dissipation);
        assert!((e1 / e2 - 2.0).abs() < 0.2, "first-order error ratio {}", e1 / e2);
    }

    #[test]
    fn heat_flow_decreases_free_energy_and_keeps_mass() {
        let g = build_path_lattice_1d(0.0, 1.0, 21).unwrap();
        let spec = FreeEnergySpec::entropy_only(21, 1.0).unwrap();
        let p = FlowProblem::gradient(g, spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rho = random_density(&mut rng, 21);
        let opts = IntegrateOptions { t_end: 0.2, ..Default::default() };
        let traj = integrate(&p, rho, &opts).unwrap();
        assert!(traj.samples.windows(2).all(|w| w[1].free_energy < w[0].free_energy));
        assert!(traj.samples.windows(2).all(|w| w[1].t > w[0].t));
        assert!(traj.max_mass_error <= 1e-13);
        assert_eq!(traj.energy_violations, 0);
        assert!(traj.min_rho() > 0.0);
        assert!((traj.final_time - 0.2).abs() < 1e-14);
    }

    #[test]
    fn halting_on_dissipation_implies_small_gibbs_residual() {
        let g = build_path_lattice_1d(-1.0, 1.0, 15).unwrap();
        let n = g.n();
        let w = DMatrix::from_fn(n, n, |i, j| {
            let d = g.coord(i)[0] - g.coord(j)[0];
            d * d
        });
        let spec = FreeEnergySpec::new(build_potential_vector(&g, Potential::Quadratic), Some(w), 0.3).unwrap();
        let p = FlowProblem::gradient(g.clone(), spec.clone()).unwrap();
        let eps = 1e-10;
        let opts = IntegrateOptions { t_end: 1e3, stop: StopRule::DissipationBelow(eps), sample_every: 100, ..Default::default() };
        let traj = integrate(&p, DensityState::uniform(n), &opts).unwrap();
        assert!(traj.converged);
        assert!(gibbs_residual(&spec, &traj.final_state).unwrap() <= eps.sqrt() * g.dx());
    }

    #[test]
    fn log_space_step_handles_underflowing_tails() {
        let g = build_path_lattice_1d(0.0, 1.0, 5).unwrap();
        let spec = FreeEnergySpec::entropy_only(5, 1.0).unwrap();
        let p = FlowProblem::gradient(g, spec).unwrap();
        let rho = DensityState::from_log_weights(&[0.0, -10.0, -800.0, -2000.0, -3000.0]).unwrap();
        let next = p.euler_step(&rho, 1e-4).unwrap();
        // Inflow from the heavier neighbor dominates each tail vertex.
        assert!(next.log_rho()[2] > rho.log_rho()[2]);
        assert!(next.log_rho()[3] > rho.log_rho()[3]);
        assert!(next.log_rho().iter().all(|l| l.is_finite()));
        assert!((next.mass() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn oversized_step_is_rejected_with_vertex() {
        let (g, spec, rho) = two_node();
        let p = FlowProblem::gradient(g, spec).unwrap();
        assert_eq!(p.euler_step(&rho, 10.0).unwrap_err(), Error::StepRejected { vertex: 0 });
    }

    #[test]
    fn csv_writers() {
        let (g, spec, rho) = two_node();
        let p = FlowProblem::gradient(g.clone(), spec).unwrap();
        let traj = integrate(&p, rho.clone(), &IntegrateOptions { t_end: 0.01, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&traj, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,free_energy,dissipation,min_rho,mass_error"));
        assert_eq!(text.lines().count(), traj.samples.len() + 1);
        let mut buf = Vec::new();
        write_density_csv(&g, &rho, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1).unwrap().split(',').nth(3).unwrap(), "7.50000000000000e-1");
    }
}
