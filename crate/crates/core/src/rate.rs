//! Convergence-rate constants.
//!
//! `λ_ℱ(ρ)` is the minimum of `σ̃ᵀ Hess ℱ(ρ) σ̃` over potentials `Φ` with unit
//! one-sided dissipation, where
//!
//! ```text
//! σ̃_i = (1/Δx²) [Σ_j (Φ_i − Φ_j)₊ ρ_i − Σ_j (Φ_j − Φ_i)₊ ρ_j]
//! ```
//!
//! Inside a fixed sign pattern of `Φ` across edges, `σ̃ = L Φ / Δx²` for a
//! weighted Laplacian `L` and the constraint is `Φᵀ L Φ / Δx²`, so the
//! problem is piecewise a generalized eigenvalue problem. The estimator runs
//! projected subgradient descent from random starts and then solves the
//! eigenproblem of the best sign pattern until the pattern stops changing.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dynamics::{FlowProblem, Trajectory};
use crate::energy::{DensityState, FreeEnergySpec};
use crate::error::{invalid, Error, Result};
use crate::graph::Graph;
use crate::metric::upwind_weight;
use crate::numerics::positive_part;

fn check_sizes(g: &Graph, spec: &FreeEnergySpec, rho: &DensityState, phi: &[f64]) -> Result<()> {
    if spec.n() != g.n() || rho.len() != g.n() || phi.len() != g.n() {
        return Err(invalid("graph, energy, density and potential sizes differ"));
    }
    Ok(())
}

/// `σ̃` for potential `Φ`: the divergence with weights upwinded by `Φ` itself.
pub fn one_sided_divergence(g: &Graph, rho: &DensityState, phi: &[f64]) -> Vec<f64> {
    let inv = 1.0 / (g.dx() * g.dx());
    let r = rho.rho();
    let edges = g.edges();
    (0..g.n())
        .map(|i| {
            edges[g.edge_range(i)]
                .iter()
                .map(|e| {
                    let j = e.to;
                    positive_part(phi[i] - phi[j]) * r[i] - positive_part(phi[j] - phi[i]) * r[j]
                })
                .sum::<f64>()
                * inv
        })
        .collect()
}

/// `σᵀ Hess ℱ(ρ) σ`, skipping `0·∞` products on underflowed densities.
fn hessian_form(spec: &FreeEnergySpec, rho: &DensityState, sigma: &[f64]) -> f64 {
    let mut total = 0.0;
    if let Some(w) = spec.w() {
        for (j, sj) in sigma.iter().enumerate() {
            if *sj != 0.0 {
                let col: f64 = w.column(j).iter().zip(sigma).map(|(a, b)| a * b).sum();
                total += sj * col;
            }
        }
    }
    let beta = spec.beta();
    for (s, l) in sigma.iter().zip(rho.log_rho()) {
        if *s != 0.0 {
            // s²/ρ in log form: s² alone underflows where ρ does
            total += beta * (2.0 * s.abs().ln() - l).exp();
        }
    }
    total
}

/// `(σ̃ᵀ H σ̃, Σ_{(i,j)∈E} ((Φ_i − Φ_j)/Δx)₊² ρ_i)`.
pub fn lambda_objective(g: &Graph, spec: &FreeEnergySpec, rho: &DensityState, phi: &[f64]) -> Result<(f64, f64)> {
    check_sizes(g, spec, rho, phi)?;
    if rho.log_rho().iter().any(|l| !l.is_finite()) {
        return Err(Error::Domain("density has a nonpositive entry".into()));
    }
    let sigma = one_sided_divergence(g, rho, phi);
    Ok((hessian_form(spec, rho, &sigma), constraint(g, rho, phi)))
}

fn constraint(g: &Graph, rho: &DensityState, phi: &[f64]) -> f64 {
    let inv = 1.0 / (g.dx() * g.dx());
    let r = rho.rho();
    g.edges()
        .iter()
        .map(|e| {
            let d = positive_part(phi[e.from] - phi[e.to]);
            d * d * r[e.from]
        })
        .sum::<f64>()
        * inv
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateOptions {
    pub restarts: usize,
    /// Subgradient iterations per restart.
    pub iterations: usize,
    /// Initial normalized step; iteration `k` uses `step / √k`.
    pub step: f64,
    pub seed: u64,
    /// Maximum sign-pattern refinements of the eigen polish.
    pub polish_rounds: usize,
    /// How many of the best restarts get polished.
    pub polish_candidates: usize,
}

impl Default for RateOptions {
    fn default() -> Self {
        Self { restarts: 64, iterations: 300, step: 0.5, seed: 0, polish_rounds: 20, polish_candidates: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub lambda_numeric: f64,
    pub lambda_closed_form: Option<f64>,
    pub fitted_decay: Option<f64>,
    /// `2 · lambda_numeric`.
    pub predicted_decay: f64,
    pub restarts_used: usize,
    pub best_phi: Vec<f64>,
}

struct Candidate {
    ratio: f64,
    phi: Vec<f64>,
    restart: usize,
}

fn remove_mean(phi: &mut [f64]) {
    let mean = phi.iter().sum::<f64>() / phi.len() as f64;
    phi.iter_mut().for_each(|x| *x -= mean);
}

/// Scale `Φ` to unit constraint; `None` when the constraint vanishes.
fn normalize(g: &Graph, rho: &DensityState, phi: &mut [f64]) -> Option<()> {
    remove_mean(phi);
    let c = constraint(g, rho, phi);
    if !(c > 0.0 && c.is_finite()) {
        return None;
    }
    let s = c.sqrt().recip();
    phi.iter_mut().for_each(|x| *x *= s);
    Some(())
}

fn ratio(g: &Graph, spec: &FreeEnergySpec, rho: &DensityState, phi: &[f64]) -> Option<f64> {
    let c = constraint(g, rho, phi);
    if !(c > 0.0) {
        return None;
    }
    let v = hessian_form(spec, rho, &one_sided_divergence(g, rho, phi));
    let r = v / c;
    r.is_finite().then_some(r)
}

/// `H σ` with the same `0·∞` guard as [`hessian_form`].
fn hessian_apply(spec: &FreeEnergySpec, rho: &DensityState, sigma: &[f64]) -> Vec<f64> {
    let mut out = spec.interaction_field(sigma);
    let beta = spec.beta();
    for ((o, s), l) in out.iter_mut().zip(sigma).zip(rho.log_rho()) {
        if *s != 0.0 {
            *o += beta * s * (-l).exp();
        }
    }
    out
}

/// `L x / Δx²` for the Laplacian weighted by `Φ`-upwinded densities.
fn cone_laplacian_apply(g: &Graph, rho: &DensityState, phi: &[f64], x: &[f64]) -> Vec<f64> {
    let inv = 1.0 / (g.dx() * g.dx());
    let r = rho.rho();
    let edges = g.edges();
    (0..g.n())
        .map(|i| {
            edges[g.edge_range(i)]
                .iter()
                .map(|e| upwind_weight(r[i], r[e.to], phi[i], phi[e.to]) * (x[i] - x[e.to]))
                .sum::<f64>()
                * inv
        })
        .collect()
}

fn subgradient_run(
    g: &Graph,
    spec: &FreeEnergySpec,
    rho: &DensityState,
    opts: &RateOptions,
    restart: usize,
) -> Option<Candidate> {
    let n = g.n();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(restart as u64));
    let mut phi: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(g, rho, &mut phi)?;
    let mut best_ratio = ratio(g, spec, rho, &phi)?;
    let mut best = phi.clone();
    for k in 1..=opts.iterations {
        // Gradients within the current sign cone (subgradient 0 at kinks).
        let sigma = one_sided_divergence(g, rho, &phi);
        let h_sigma = hessian_apply(spec, rho, &sigma);
        let grad_value = cone_laplacian_apply(g, rho, &phi, &h_sigma);
        let grad_c = &sigma;
        let cc: f64 = grad_c.iter().map(|x| x * x).sum();
        let vc: f64 = grad_value.iter().zip(grad_c).map(|(a, b)| a * b).sum();
        let mut dir: Vec<f64> = grad_value
            .iter()
            .zip(grad_c)
            .map(|(a, b)| if cc > 0.0 { a - vc / cc * b } else { *a })
            .collect();
        remove_mean(&mut dir);
        let dn = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(dn > 0.0 && dn.is_finite()) {
            break;
        }
        let pn = phi.iter().map(|x| x * x).sum::<f64>().sqrt();
        let eta = opts.step / (k as f64).sqrt() * pn / dn;
        let mut next: Vec<f64> = phi.iter().zip(&dir).map(|(p, d)| p - eta * d).collect();
        if normalize(g, rho, &mut next).is_none() {
            break;
        }
        phi = next;
        if let Some(r) = ratio(g, spec, rho, &phi) {
            if r < best_ratio {
                best_ratio = r;
                best.clone_from(&phi);
            }
        }
    }
    Some(Candidate { ratio: best_ratio, phi: best, restart })
}

/// Dense `L / Δx²` for the sign pattern of `phi`.
fn cone_laplacian(g: &Graph, rho: &DensityState, phi: &[f64]) -> DMatrix<f64> {
    let n = g.n();
    let inv = 1.0 / (g.dx() * g.dx());
    let r = rho.rho();
    let mut l = DMatrix::zeros(n, n);
    for e in g.edges() {
        let w = upwind_weight(r[e.from], r[e.to], phi[e.from], phi[e.to]) * inv;
        l[(e.from, e.from)] += w;
        l[(e.from, e.to)] -= w;
    }
    l
}

/// Minimizer of the Rayleigh quotient `ΦᵀLHLΦ / ΦᵀLΦ` for the cone of `phi`.
fn cone_minimizer(g: &Graph, spec: &FreeEnergySpec, rho: &DensityState, phi: &[f64]) -> Option<Vec<f64>> {
    let n = g.n();
    let l = cone_laplacian(g, rho, phi);
    let eig = SymmetricEigen::new(l);
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let cutoff = top * 1e-13;
    let q = &eig.eigenvectors;
    let sqrt_diag = DVector::from_iterator(n, eig.eigenvalues.iter().map(|&x| if x > cutoff { x.sqrt() } else { 0.0 }));
    let inv_sqrt_diag =
        DVector::from_iterator(n, eig.eigenvalues.iter().map(|&x| if x > cutoff { x.sqrt().recip() } else { 0.0 }));
    let half = q * DMatrix::from_diagonal(&sqrt_diag) * q.transpose();
    let inv_half = q * DMatrix::from_diagonal(&inv_sqrt_diag) * q.transpose();
    let mut h = spec.w().cloned().unwrap_or_else(|| DMatrix::zeros(n, n));
    for (i, lr) in rho.log_rho().iter().enumerate() {
        h[(i, i)] += spec.beta() * (-lr).exp();
    }
    let mut m = &half * h * &half;
    if m.iter().any(|x| !x.is_finite()) {
        return None;
    }
    // Push the null directions of L to the top of the spectrum.
    let shift = m.trace().abs() + 1.0;
    let null_count = eig.eigenvalues.iter().filter(|&&x| x <= cutoff).count();
    if null_count != 1 {
        return None;
    }
    m = (&m + m.transpose()) * 0.5;
    let ones = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    m += &ones * ones.transpose() * shift;
    let me = SymmetricEigen::new(m);
    let (k, _) = me
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let y = me.eigenvectors.column(k).into_owned();
    let mut out: Vec<f64> = (inv_half * y).iter().copied().collect();
    normalize(g, rho, &mut out)?;
    Some(out)
}

/// Iterate the cone eigen-solve until the sign pattern of the minimizer is
/// stable, returning the best potential seen.
fn polish(g: &Graph, spec: &FreeEnergySpec, rho: &DensityState, start: Candidate, rounds: usize) -> Candidate {
    let mut best = start;
    let mut phi = best.phi.clone();
    for _ in 0..rounds {
        let Some(next) = cone_minimizer(g, spec, rho, &phi) else { break };
        let same_cone = g.edges().iter().all(|e| {
            (phi[e.from] - phi[e.to]).signum() == (next[e.from] - next[e.to]).signum()
                || phi[e.from] == phi[e.to]
                || next[e.from] == next[e.to]
        });
        if let Some(r) = ratio(g, spec, rho, &next) {
            if r < best.ratio {
                best = Candidate { ratio: r, phi: next.clone(), restart: best.restart };
            }
        }
        if same_cone {
            break;
        }
        phi = next;
    }
    best
}

/// Multi-start estimate of `λ_ℱ(ρ)`; deterministic for a fixed seed.
pub fn lambda_estimate(g: &Graph, spec: &FreeEnergySpec, rho: &DensityState, opts: &RateOptions) -> Result<RateReport> {
    if spec.n() != g.n() || rho.len() != g.n() {
        return Err(invalid("graph, energy and density sizes differ"));
    }
    if opts.restarts == 0 {
        return Err(invalid("need at least one restart"));
    }
    if g.n() < 2 {
        return Err(Error::Estimation("need at least two vertices".into()));
    }
    let mut candidates: Vec<Candidate> = (0..opts.restarts)
        .into_par_iter()
        .filter_map(|k| subgradient_run(g, spec, rho, opts, k))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Estimation("every restart has vanishing dissipation".into()));
    }
    candidates.sort_by(|a, b| a.ratio.total_cmp(&b.ratio).then(a.restart.cmp(&b.restart)));
    let restarts_used = candidates.len();
    candidates.truncate(opts.polish_candidates.max(1));
    let best = candidates
        .into_par_iter()
        .map(|c| polish(g, spec, rho, c, opts.polish_rounds))
        .collect::<Vec<_>>()
        .into_iter()
        .min_by(|a, b| a.ratio.total_cmp(&b.ratio).then(a.restart.cmp(&b.restart)))
        .expect("at least one candidate");
    Ok(RateReport {
        lambda_numeric: best.ratio,
        lambda_closed_form: None,
        fitted_decay: None,
        predicted_decay: 2.0 * best.ratio,
        restarts_used,
        best_phi: best.phi,
    })
}

fn spacing(n: usize, a: f64, b: f64) -> Result<f64> {
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(invalid(format!("need a < b, got [{a}, {b}]")));
    }
    Ok((b - a) / (n - 1) as f64)
}

/// `λ_ℋ` of the uniform density on the path `L_n` over `[a, b]`:
/// `(2 − 2cos(π/n)) / Δx²`, the second eigenvalue of the path Laplacian.
pub fn lambda_lattice_entropy_exact(n: usize, a: f64, b: f64) -> Result<f64> {
    if n < 2 {
        return Err(invalid(format!("lattice needs n >= 2, got {n}")));
    }
    let dx = spacing(n, a, b)?;
    Ok((2.0 - 2.0 * (std::f64::consts::PI / n as f64).cos()) / (dx * dx))
}

/// `λ_ℋ` of the uniform density on the cycle `C_n`: `(2 − 2cos(2π/n)) / Δx²`.
pub fn lambda_cycle_entropy_exact(n: usize, a: f64, b: f64) -> Result<f64> {
    if n < 3 {
        return Err(invalid(format!("cycle needs n >= 3, got {n}")));
    }
    let dx = spacing(n, a, b)?;
    Ok((2.0 - 2.0 * (2.0 * std::f64::consts::PI / n as f64).cos()) / (dx * dx))
}

/// Spectrum of `B = [[A, bᵀ], [b, 2]]`, `A` the `(n−1)×(n−1)` tridiagonal
/// `(−1, 2, −1)` matrix and `b = (1, 0, …, 0, 1)`; ascending, eigenvectors as
/// columns.
pub fn cycle_matrix_spectrum(n: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if n < 3 {
        return Err(invalid(format!("need n >= 3, got {n}")));
    }
    let mut b = DMatrix::zeros(n, n);
    for i in 0..n {
        b[(i, i)] = 2.0;
    }
    for i in 0..n - 2 {
        b[(i, i + 1)] = -1.0;
        b[(i + 1, i)] = -1.0;
    }
    let last = n - 1;
    b[(0, last)] += 1.0;
    b[(last, 0)] += 1.0;
    b[(n - 2, last)] += 1.0;
    b[(last, n - 2)] += 1.0;
    let eig: SymmetricEigen<f64, nalgebra::Dyn> = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Least-squares decay rate of `ℱ(ρ(t)) − ℱ∞` over the tail of a trajectory.
///
/// Returns `(rate, r²)` with `rate = −slope` of the log residual.
pub fn fit_asymptotic_rate(traj: &Trajectory, f_infinity: f64, tail_fraction: f64) -> Result<(f64, f64)> {
    let t: Vec<f64> = traj.samples.iter().map(|s| s.t).collect();
    let f: Vec<f64> = traj.samples.iter().map(|s| s.free_energy).collect();
    fit_exponential_tail(&t, &f, f_infinity, tail_fraction)
}

/// [`fit_asymptotic_rate`] on raw `(t, ℱ)` samples.
pub fn fit_exponential_tail(t: &[f64], f: &[f64], f_infinity: f64, tail_fraction: f64) -> Result<(f64, f64)> {
    if !(tail_fraction > 0.0 && tail_fraction < 1.0) {
        return Err(invalid(format!("tail fraction must lie in (0, 1), got {tail_fraction}")));
    }
    if t.len() != f.len() {
        return Err(invalid("time and value arrays differ in length"));
    }
    let floor = 100.0 * f64::EPSILON * f_infinity.abs();
    let usable: Vec<(f64, f64)> = t
        .iter()
        .zip(f)
        .filter(|(_, &y)| y.is_finite() && y - f_infinity > floor)
        .map(|(&x, &y)| (x, (y - f_infinity).ln()))
        .collect();
    let take = ((usable.len() as f64) * tail_fraction).ceil() as usize;
    if take < 20 {
        return Err(Error::Fit(format!("only {take} usable tail samples, need 20")));
    }
    let tail = &usable[usable.len() - take..];
    let m = tail.len() as f64;
    let (mx, my) = tail.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / m, b + y / m));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in tail {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if !(sxx > 0.0) || !(syy > 0.0) {
        return Err(Error::Fit("degenerate tail: no variation".into()));
    }
    let slope = sxy / sxx;
    let r2 = sxy * sxy / (sxx * syy);
    if slope >= 0.0 {
        return Err(Error::Fit(format!("residual does not decay (slope {slope:e})")));
    }
    Ok((-slope, r2))
}

/// `♠ = 2 σᵀ Hess ℱ σ` with `σ = −rhs(ρ)`, the dominant term of `d²ℱ/dt²`
/// near equilibrium. Along the flow `♠ / D(ρ)` tends to the decay rate
/// `2λ_ℱ(ρ^∞)`.
pub fn second_derivative_diagnostic(g: &Graph, spec: &FreeEnergySpec, rho: &DensityState) -> Result<f64> {
    let problem = FlowProblem::gradient(g.clone(), spec.clone())?;
    let eval = problem.evaluate(rho)?;
    Ok(2.0 * hessian_form(spec, rho, &eval.rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::energy_hessian;
    use crate::graph::{build_cycle_1d, build_path_lattice_1d};
    use approx::assert_relative_eq;
    use rand::Rng;
    use std::f64::consts::PI;

    fn random_density(rng: &mut ChaCha8Rng, n: usize) -> DensityState {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        DensityState::from_weights(&w).unwrap()
    }

    // Double edge sum with h_{ij,kl} = (f_ik + f_jl − f_il − f_jk)/Δx².
    fn double_edge_sum(g: &Graph, spec: &FreeEnergySpec, rho: &DensityState, phi: &[f64]) -> f64 {
        let f = energy_hessian(spec, rho).unwrap();
        let dx = g.dx();
        let r = rho.rho();
        let mut total = 0.0;
        for a in g.edges() {
            let wa = positive_part((phi[a.from] - phi[a.to]) / dx) * r[a.from];
            if wa == 0.0 {
                continue;
            }
            for b in g.edges() {
                let wb = positive_part((phi[b.from] - phi[b.to]) / dx) * r[b.from];
                let (i, j, k, l) = (a.from, a.to, b.from, b.to);
                let h = (f[(i, k)] + f[(j, l)] - f[(i, l)] - f[(j, k)]) / (dx * dx);
                total += h * wa * wb;
            }
        }
        total
    }

    #[test]
    fn objective_matches_double_edge_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = rng.random_range(3..7);
            let g = build_path_lattice_1d(0.0, rng.random_range(0.5..2.0), n).unwrap();
            let w = DMatrix::from_fn(n, n, |i, j| ((i + j) as f64).sin());
            let w = (&w + w.transpose()) * 0.5;
            let spec = FreeEnergySpec::new(vec![0.0; n], Some(w), rng.random_range(0.1..2.0)).unwrap();
            let rho = random_density(&mut rng, n);
            let phi: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (value, _) = lambda_objective(&g, &spec, &rho, &phi).unwrap();
            let oracle = double_edge_sum(&g, &spec, &rho, &phi);
            assert!((value - oracle).abs() <= 1e-10 * oracle.abs().max(1.0), "{value} vs {oracle}");
        }
    }

    #[test]
    fn constant_potential_is_degenerate() {
        let g = build_path_lattice_1d(0.0, 1.0, 5).unwrap();
        let spec = FreeEnergySpec::entropy_only(5, 1.0).unwrap();
        let rho = DensityState::uniform(5);
        assert_eq!(lambda_objective(&g, &spec, &rho, &[2.0; 5]).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn monotone_potential_reduces_to_tridiagonal_form() {
        let n = 7;
        let g = build_path_lattice_1d(0.0, 1.0, n).unwrap();
        let spec = FreeEnergySpec::entropy_only(n, 1.0).unwrap();
        let rho = DensityState::uniform(n);
        let phi: Vec<f64> = (0..n).map(|i| -((i * i) as f64)).collect();
        // ξ_k = (Φ_k − Φ_{k+1}) ρ / Δx, A = tridiag(−1, 2, −1) of size n−1.
        let dx = g.dx();
        let xi: Vec<f64> = (0..n - 1).map(|k| (phi[k] - phi[k + 1]) / (n as f64) / dx).collect();
        let mut form = 0.0;
        for k in 0..n - 1 {
            form += 2.0 * xi[k] * xi[k];
            if k + 1 < n - 1 {
                form -= 2.0 * xi[k] * xi[k + 1];
            }
        }
        let expected = form * n as f64 / (dx * dx);
        let (value, _) = lambda_objective(&g, &spec, &rho, &phi).unwrap();
        assert_relative_eq!(value, expected, max_relative = 1e-12);
    }

    #[test]
    fn estimate_matches_closed_forms() {
        let opts = RateOptions { restarts: 8, ..Default::default() };
        let g = build_path_lattice_1d(0.0, 1.0, 21).unwrap();
        let spec = FreeEnergySpec::entropy_only(21, 1.0).unwrap();
        let report = lambda_estimate(&g, &spec, &DensityState::uniform(21), &opts).unwrap();
        let exact = lambda_lattice_entropy_exact(21, 0.0, 1.0).unwrap();
        assert_relative_eq!(report.lambda_numeric, exact, max_relative = 1e-3);
        let g = build_cycle_1d(0.0, 1.0, 12).unwrap();
        let spec = FreeEnergySpec::entropy_only(12, 1.0).unwrap();
        let report = lambda_estimate(&g, &spec, &DensityState::uniform(12), &opts).unwrap();
        assert_relative_eq!(report.lambda_numeric, lambda_cycle_entropy_exact(12, 0.0, 1.0).unwrap(), max_relative = 1e-3);
    }

    #[test]
    fn estimate_scales_with_beta_and_is_deterministic() {
        let g = build_path_lattice_1d(0.0, 1.0, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rho = random_density(&mut rng, 9);
        let opts = RateOptions { restarts: 6, seed: 42, ..Default::default() };
        let one = lambda_estimate(&g, &FreeEnergySpec::entropy_only(9, 1.0).unwrap(), &rho, &opts).unwrap();
        let two = lambda_estimate(&g, &FreeEnergySpec::entropy_only(9, 2.0).unwrap(), &rho, &opts).unwrap();
        assert_relative_eq!(two.lambda_numeric, 2.0 * one.lambda_numeric, max_relative = 1e-6);
        let again = lambda_estimate(&g, &FreeEnergySpec::entropy_only(9, 1.0).unwrap(), &rho, &opts).unwrap();
        assert_eq!(one, again);
    }

    #[test]
    fn closed_forms() {
        assert_relative_eq!(lambda_lattice_entropy_exact(21, 0.0, 1.0).unwrap(), 8.935339, max_relative = 1e-6);
        let big = lambda_cycle_entropy_exact(2000, 0.0, 1.0).unwrap();
        assert!((big - 4.0 * PI * PI).abs() / (4.0 * PI * PI) < 2e-3);
        let ratio = lambda_cycle_entropy_exact(400, 0.0, 1.0).unwrap() / lambda_lattice_entropy_exact(400, 0.0, 1.0).unwrap();
        assert!((ratio - 4.0).abs() < 0.01);
        assert!(lambda_lattice_entropy_exact(1, 0.0, 1.0).is_err());
        assert!(lambda_cycle_entropy_exact(2, 0.0, 1.0).is_err());
    }

    #[test]
    fn lattice_closed_form_increases_to_pi_squared() {
        let vals: Vec<f64> = [11, 21, 41, 81].iter().map(|&n| lambda_lattice_entropy_exact(n, 0.0, 1.0).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[0] < w[1] && w[1] < PI * PI));
        // First-order approach: the gap roughly halves when n doubles.
        let gaps: Vec<f64> = vals.iter().map(|v| PI * PI - v).collect();
        for w in gaps.windows(2) {
            assert!((w[0] / w[1] - 2.0).abs() < 0.15, "gap ratio {}", w[0] / w[1]);
        }
    }

    #[test]
    fn spectrum_small_cases() {
        let (vals, _) = cycle_matrix_spectrum(6).unwrap();
        for (a, b) in vals.iter().zip([0.0, 1.0, 1.0, 3.0, 3.0, 4.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let (vals, vecs) = cycle_matrix_spectrum(4).unwrap();
        for (a, b) in vals.iter().zip([0.0, 2.0, 2.0, 4.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let v0 = vecs.column(0);
        let scale = v0[0];
        for i in 0..3 {
            assert_relative_eq!(v0[i] / scale, 1.0, epsilon = 1e-10);
        }
        assert_relative_eq!(v0[3] / scale, -1.0, epsilon = 1e-10);
    }

    #[test]
    fn fit_exact_exponential() {
        let t: Vec<f64> = (0..100).map(|k| k as f64 * 0.05).collect();
        let f: Vec<f64> = t.iter().map(|x| 1.0 + 5.0 * (-3.0 * x).exp()).collect();
        let (rate, r2) = fit_exponential_tail(&t, &f, 1.0, 0.5).unwrap();
        assert_relative_eq!(rate, 3.0, max_relative = 1e-9);
        assert_relative_eq!(r2, 1.0, max_relative = 1e-12);
        let flat = vec![2.0; 100];
        assert!(matches!(fit_exponential_tail(&t, &flat, 1.0, 0.5), Err(Error::Fit(_))));
        assert!(matches!(fit_exponential_tail(&t[..30], &f[..30], 1.0, 0.5), Err(Error::Fit(_))));
    }

    #[test]
    fn spade_vanishes_at_gibbs_and_is_nonnegative_nearby() {
        let g = build_path_lattice_1d(-1.0, 1.0, 11).unwrap();
        let v = crate::energy::build_potential_vector(&g, crate::energy::Potential::Quadratic);
        let spec = FreeEnergySpec::new(v, None, 0.5).unwrap();
        let gibbs = crate::energy::gibbs_fixed_point(&spec, Default::default()).unwrap();
        assert!(second_derivative_diagnostic(&g, &spec, &gibbs).unwrap() < 1e-20);
        let mut l = gibbs.log_rho().to_vec();
        l[3] += 1e-3;
        let near = DensityState::from_log_weights(&l).unwrap();
        assert!(second_derivative_diagnostic(&g, &spec, &near).unwrap() >= 0.0);
    }
}
