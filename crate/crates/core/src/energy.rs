//! Discrete free energy
//!
//! ```text
//! ℱ(ρ) = Σ v_i ρ_i + ½ Σ Σ w_ij ρ_i ρ_j + β Σ ρ_i log ρ_i
//! ```
//!
//! its derivatives, the potential/interaction catalogs, and the Gibbs
//! fixed-point solver.
//!
//! Densities are carried in log form (see [`DensityState`]): equilibria of
//! realistic problems routinely have entries like `e^{-60000}`, far below the
//! smallest positive `f64`, while remaining strictly positive.

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::graph::Graph;
use crate::numerics::{compensated_sum, log_add_exp, log_softmax, CompensatedSum};

/// Entries at or below this value are treated as nonpositive when a density is
/// given in linear form.
pub const MIN_DENSITY: f64 = 1e-300;

/// A strictly positive probability vector on the vertices.
///
/// The state is stored as `log ρ`; [`DensityState::rho`] holds the
/// exponentiated values, which may underflow to `0.0` for entries that are
/// positive but smaller than `f64` can represent.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityState {
    log_rho: Vec<f64>,
    rho: Vec<f64>,
}

impl DensityState {
    /// Validate and wrap a probability vector.
    pub fn from_rho(rho: Vec<f64>) -> Result<Self> {
        if rho.is_empty() {
            return Err(Error::Domain("empty density".into()));
        }
        if let Some((i, &x)) = rho.iter().enumerate().find(|(_, &x)| !(x > MIN_DENSITY && x.is_finite())) {
            return Err(Error::Domain(format!("rho[{i}] = {x} is not strictly positive")));
        }
        check_mass(compensated_sum(rho.iter().copied()), rho.len())?;
        let log_rho = rho.iter().map(|x| x.ln()).collect();
        Ok(Self { log_rho, rho })
    }

    /// Wrap a vector of log-densities; `Σ e^{ℓ_i}` must be one.
    pub fn from_log_rho(log_rho: Vec<f64>) -> Result<Self> {
        if log_rho.is_empty() {
            return Err(Error::Domain("empty density".into()));
        }
        if let Some((i, &x)) = log_rho.iter().enumerate().find(|(_, x)| !x.is_finite()) {
            return Err(Error::Domain(format!("log rho[{i}] = {x} is not finite")));
        }
        let state = Self::from_log_unchecked(log_rho);
        check_mass(state.mass(), state.len())?;
        Ok(state)
    }

    /// Normalize strictly positive weights into a density.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if let Some((i, &x)) = weights.iter().enumerate().find(|(_, &x)| !(x > 0.0 && x.is_finite())) {
            return Err(Error::Domain(format!("weight[{i}] = {x} is not strictly positive")));
        }
        let logs: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
        Self::from_log_rho(log_softmax(&logs))
    }

    /// Normalize log-weights (any finite values) into a density.
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        Self::from_log_rho(log_softmax(log_weights))
    }

    pub fn uniform(n: usize) -> Self {
        let l = -(n as f64).ln();
        Self::from_log_unchecked(vec![l; n])
    }

    pub(crate) fn from_log_unchecked(log_rho: Vec<f64>) -> Self {
        let rho = log_rho.iter().map(|l| l.exp()).collect();
        Self { log_rho, rho }
    }

    /// Both representations supplied by the caller, which keeps `rho[i]` as
    /// the exact linear value wherever it is representable.
    pub(crate) fn from_parts(log_rho: Vec<f64>, rho: Vec<f64>) -> Self {
        debug_assert_eq!(log_rho.len(), rho.len());
        Self { log_rho, rho }
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn log_rho(&self) -> &[f64] {
        &self.log_rho
    }

    pub fn mass(&self) -> f64 {
        compensated_sum(self.rho.iter().copied())
    }

    pub fn mass_error(&self) -> f64 {
        (self.mass() - 1.0).abs()
    }

    /// `min_i log ρ_i`; finite for every valid state.
    pub fn min_log_rho(&self) -> f64 {
        self.log_rho.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `min_i ρ_i`; may underflow to zero, see [`DensityState::min_log_rho`].
    pub fn min_rho(&self) -> f64 {
        self.min_log_rho().exp()
    }

    /// `Σ |ρ_i − σ_i|`.
    pub fn l1_distance(&self, other: &DensityState) -> f64 {
        compensated_sum(self.rho.iter().zip(&other.rho).map(|(a, b)| (a - b).abs()))
    }
}

fn check_mass(mass: f64, n: usize) -> Result<()> {
    if (mass - 1.0).abs() > 1e-10 * n as f64 {
        return Err(Error::Domain(format!("density has mass {mass}, expected 1")));
    }
    Ok(())
}

/// Confining potentials `V(x)` sampled at the vertex coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Potential {
    Zero,
    /// `‖x‖²/2`
    Quadratic,
    /// `‖x‖⁴/4 − ‖x‖²/2`
    DoubleWell,
}

impl Potential {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|c| c * c).sum();
        match self {
            Potential::Zero => 0.0,
            Potential::Quadratic => 0.5 * r2,
            Potential::DoubleWell => 0.25 * r2 * r2 - 0.5 * r2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Potential::Zero => "zero",
            Potential::Quadratic => "quadratic",
            Potential::DoubleWell => "double_well",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "zero" => Some(Potential::Zero),
            "quadratic" => Some(Potential::Quadratic),
            "double_well" => Some(Potential::DoubleWell),
            _ => None,
        }
    }
}

/// Symmetric interaction kernels `W(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interaction {
    Zero,
    /// `‖x − y‖³/3`
    CubicDistance,
}

impl Interaction {
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Interaction::Zero => 0.0,
            Interaction::CubicDistance => {
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                d2 * d2.sqrt() / 3.0
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Interaction::Zero => "zero",
            Interaction::CubicDistance => "cubic_distance",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "zero" => Some(Interaction::Zero),
            "cubic_distance" => Some(Interaction::CubicDistance),
            _ => None,
        }
    }
}

/// `v_i = V(x(i))`.
pub fn build_potential_vector(g: &Graph, potential: Potential) -> Vec<f64> {
    (0..g.n()).map(|i| potential.eval(g.coord(i))).collect()
}

/// `w_ij = W(x(i), x(j))`, filled from the upper triangle so it is exactly
/// symmetric.
pub fn build_interaction_matrix(g: &Graph, kernel: Interaction) -> DMatrix<f64> {
    let n = g.n();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let value = kernel.eval(g.coord(i), g.coord(j));
            w[(i, j)] = value;
            w[(j, i)] = value;
        }
    }
    w
}

/// Potential vector, interaction matrix and diffusion constant of ℱ.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeEnergySpec {
    v: Vec<f64>,
    w: Option<DMatrix<f64>>,
    beta: f64,
}

impl FreeEnergySpec {
    /// `w = None` means no interaction energy.
    pub fn new(v: Vec<f64>, w: Option<DMatrix<f64>>, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(invalid(format!("beta must be positive, got {beta}")));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(invalid("potential vector has non-finite entries"));
        }
        if let Some(w) = &w {
            let n = v.len();
            if w.nrows() != n || w.ncols() != n {
                return Err(invalid(format!("interaction matrix must be {n}x{n}")));
            }
            for i in 0..n {
                for j in i + 1..n {
                    if w[(i, j)] != w[(j, i)] {
                        return Err(invalid(format!("interaction matrix not symmetric at ({i}, {j})")));
                    }
                }
            }
        }
        Ok(Self { v, w, beta })
    }

    /// Pure entropy `β Σ ρ_i log ρ_i` on `n` vertices.
    pub fn entropy_only(n: usize, beta: f64) -> Result<Self> {
        Self::new(vec![0.0; n], None, beta)
    }

    /// Sample catalog entries on the graph.
    pub fn from_catalog(g: &Graph, potential: Potential, interaction: Interaction, beta: f64) -> Result<Self> {
        let w = match interaction {
            Interaction::Zero => None,
            k => Some(build_interaction_matrix(g, k)),
        };
        Self::new(build_potential_vector(g, potential), w, beta)
    }

    pub fn n(&self) -> usize {
        self.v.len()
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn w(&self) -> Option<&DMatrix<f64>> {
        self.w.as_ref()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub(crate) fn check_len(&self, rho: &DensityState) -> Result<()> {
        if rho.len() != self.n() {
            return Err(invalid(format!(
                "density has {} entries, energy expects {}",
                rho.len(),
                self.n()
            )));
        }
        Ok(())
    }

    /// `(Wρ)_i`, zero without interaction.
    pub fn interaction_field(&self, rho: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; rho.len()];
        self.interaction_field_into(rho, &mut out);
        out
    }

    pub(crate) fn interaction_field_into(&self, rho: &[f64], out: &mut [f64]) {
        match &self.w {
            None => out.iter_mut().for_each(|x| *x = 0.0),
            Some(w) => {
                // W is symmetric, so row i is column i (contiguous in storage).
                for (i, o) in out.iter_mut().enumerate() {
                    *o = dot(w.column(i).as_slice(), rho);
                }
            }
        }
    }

    /// `ℱ = Σ v_i ρ_i + ½ ρᵀWρ + β Σ ρ_i log ρ_i` given a precomputed `Wρ`.
    pub(crate) fn free_energy_with_field(&self, rho: &DensityState, field: &[f64]) -> f64 {
        let r = rho.rho();
        let mut acc = CompensatedSum::new();
        for i in 0..r.len() {
            acc.add(r[i] * (self.v[i] + 0.5 * field[i]));
        }
        let entropy = compensated_sum(r.iter().zip(rho.log_rho()).map(|(p, l)| p * l));
        acc.add(self.beta * entropy);
        acc.value()
    }

    /// `F_i = v_i + (Wρ)_i + β log ρ_i + β` given a precomputed `Wρ`.
    pub(crate) fn gradient_with_field_into(&self, rho: &DensityState, field: &[f64], out: &mut [f64]) {
        let l = rho.log_rho();
        for i in 0..out.len() {
            out[i] = self.v[i] + field[i] + self.beta * l[i] + self.beta;
        }
    }
}

#[inline]
/// Eight independent partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    lanes.iter().sum::<f64>() + tail
}

pub fn free_energy(spec: &FreeEnergySpec, rho: &DensityState) -> Result<f64> {
    spec.check_len(rho)?;
    let field = spec.interaction_field(rho.rho());
    Ok(spec.free_energy_with_field(rho, &field))
}

/// `F_i(ρ) = ∂ℱ/∂ρ_i`.
pub fn energy_gradient(spec: &FreeEnergySpec, rho: &DensityState) -> Result<Vec<f64>> {
    spec.check_len(rho)?;
    let field = spec.interaction_field(rho.rho());
    let mut out = vec![0.0; rho.len()];
    spec.gradient_with_field_into(rho, &field, &mut out);
    Ok(out)
}

/// `f_ij = w_ij + β δ_ij / ρ_i`.
pub fn energy_hessian(spec: &FreeEnergySpec, rho: &DensityState) -> Result<DMatrix<f64>> {
    spec.check_len(rho)?;
    let n = rho.len();
    let mut h = spec.w.clone().unwrap_or_else(|| DMatrix::zeros(n, n));
    for (i, l) in rho.log_rho().iter().enumerate() {
        h[(i, i)] += spec.beta * (-l).exp();
    }
    Ok(h)
}

/// Log of the Gibbs map `Φ(ρ)_i = e^{−(v_i + (Wρ)_i)/β} / K`.
pub fn gibbs_map_log(spec: &FreeEnergySpec, rho: &DensityState) -> Result<Vec<f64>> {
    spec.check_len(rho)?;
    let field = spec.interaction_field(rho.rho());
    Ok(gibbs_log_from_field(spec, &field))
}

fn gibbs_log_from_field(spec: &FreeEnergySpec, field: &[f64]) -> Vec<f64> {
    let exponents: Vec<f64> = spec
        .v
        .iter()
        .zip(field)
        .map(|(v, f)| -(v + f) / spec.beta)
        .collect();
    log_softmax(&exponents)
}

/// Fixed-point residual `max_i |ρ_i − Φ(ρ)_i|`.
pub fn gibbs_residual(spec: &FreeEnergySpec, rho: &DensityState) -> Result<f64> {
    let target = gibbs_map_log(spec, rho)?;
    Ok(max_abs_diff(rho.rho(), &target))
}

fn max_abs_diff(rho: &[f64], log_target: &[f64]) -> f64 {
    rho.iter()
        .zip(log_target)
        .map(|(r, l)| (r - l.exp()).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GibbsOptions {
    pub tol: f64,
    /// Relaxation θ ∈ (0, 1].
    pub theta: f64,
    pub max_iter: usize,
}

impl Default for GibbsOptions {
    fn default() -> Self {
        Self { tol: 1e-12, theta: 0.5, max_iter: 100_000 }
    }
}

/// Damped fixed-point iteration `ρ ← (1−θ)ρ + θ Φ(ρ)` from the uniform density.
///
/// Stops once the residual of the current iterate is at most `tol`.
pub fn gibbs_fixed_point(spec: &FreeEnergySpec, opts: GibbsOptions) -> Result<DensityState> {
    gibbs_fixed_point_from(spec, DensityState::uniform(spec.n()), opts)
}

/// [`gibbs_fixed_point`] started from `init` instead of the uniform density.
pub fn gibbs_fixed_point_from(
    spec: &FreeEnergySpec,
    init: DensityState,
    opts: GibbsOptions,
) -> Result<DensityState> {
    spec.check_len(&init)?;
    if !(opts.theta > 0.0 && opts.theta <= 1.0) {
        return Err(invalid(format!("relaxation must lie in (0, 1], got {}", opts.theta)));
    }
    if !(opts.tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    let n = spec.n();
    let mut state = init;
    let keep = (1.0 - opts.theta).ln();
    let take = opts.theta.ln();
    let mut field = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_iter {
        spec.interaction_field_into(state.rho(), &mut field);
        let target = gibbs_log_from_field(spec, &field);
        residual = max_abs_diff(state.rho(), &target);
        if residual <= opts.tol {
            return Ok(state);
        }
        let next: Vec<f64> = if opts.theta == 1.0 {
            target
        } else {
            state
                .log_rho()
                .iter()
                .zip(&target)
                .map(|(l, t)| log_add_exp(keep + l, take + t))
                .collect()
        };
        state = DensityState::from_log_unchecked(next);
    }
    Err(Error::ConvergenceFailure { iterations: opts.max_iter, residual })
}
