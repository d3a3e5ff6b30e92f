//! Upwind weights, the Onsager map `τ` and the induced metric on the
//! probability simplex.
//!
//! Per-edge fields are slices aligned with [`Graph::edges`]; both orientations
//! of every undirected edge are present.

use nalgebra::{DMatrix, DVector};

use crate::energy::DensityState;
use crate::error::{invalid, Error, Result};
use crate::graph::Graph;

fn check_len(g: &Graph, what: &str, len: usize) -> Result<()> {
    if len != g.n() {
        return Err(invalid(format!("{what} has {len} entries, graph has {} vertices", g.n())));
    }
    Ok(())
}

/// `(Φ_i − Φ_j)/Δx` on every directed edge `(i, j)`.
pub fn graph_gradient(g: &Graph, phi: &[f64]) -> Result<Vec<f64>> {
    check_len(g, "potential", phi.len())?;
    let dx = g.dx();
    Ok(g.edges().iter().map(|e| (phi[e.from] - phi[e.to]) / dx).collect())
}

/// `g_ij = ρ_i` if `F_i > F_j`, `ρ_j` if `F_i < F_j`, the mean on exact ties.
#[inline]
pub fn upwind_weight(rho_i: f64, rho_j: f64, f_i: f64, f_j: f64) -> f64 {
    if f_i > f_j {
        rho_i
    } else if f_i < f_j {
        rho_j
    } else {
        0.5 * (rho_i + rho_j)
    }
}

/// Upwind weights on every directed edge; symmetric under edge reversal.
pub fn upwind_weights(g: &Graph, rho: &DensityState, f: &[f64]) -> Result<Vec<f64>> {
    check_len(g, "density", rho.len())?;
    check_len(g, "gradient", f.len())?;
    let r = rho.rho();
    Ok(g.edges()
        .iter()
        .map(|e| upwind_weight(r[e.from], r[e.to], f[e.from], f[e.to]))
        .collect())
}

/// `τ(Φ)_i = (1/Δx²) Σ_{j∈N(i)} (Φ_i − Φ_j) g_ij(ρ)`, with `g` upwinded by `F`.
pub fn weighted_divergence(g: &Graph, rho: &DensityState, phi: &[f64], f: &[f64]) -> Result<Vec<f64>> {
    check_len(g, "potential", phi.len())?;
    let weights = upwind_weights(g, rho, f)?;
    Ok(apply_tau(g, &weights, phi))
}

pub(crate) fn apply_tau(g: &Graph, weights: &[f64], phi: &[f64]) -> Vec<f64> {
    let inv = 1.0 / (g.dx() * g.dx());
    let edges = g.edges();
    (0..g.n())
        .map(|i| {
            g.edge_range(i)
                .map(|k| (phi[i] - phi[edges[k].to]) * weights[k])
                .sum::<f64>()
                * inv
        })
        .collect()
}

/// Matrix of `τ` for fixed edge weights: a weighted graph Laplacian scaled by
/// `1/Δx²`.
pub fn tau_matrix(g: &Graph, weights: &[f64]) -> Result<DMatrix<f64>> {
    if weights.len() != g.edges().len() {
        return Err(invalid(format!(
            "expected {} edge weights, got {}",
            g.edges().len(),
            weights.len()
        )));
    }
    let n = g.n();
    let inv = 1.0 / (g.dx() * g.dx());
    let mut m = DMatrix::zeros(n, n);
    for (e, &w) in g.edges().iter().zip(weights) {
        m[(e.from, e.from)] += w * inv;
        m[(e.from, e.to)] -= w * inv;
    }
    Ok(m)
}

/// Invert `τ` on the quotient by constants, pinning `Φ_0 = 0`.
pub fn solve_potential(g: &Graph, rho: &DensityState, f: &[f64], sigma: &[f64]) -> Result<Vec<f64>> {
    check_len(g, "tangent vector", sigma.len())?;
    let total: f64 = sigma.iter().sum();
    let scale = sigma.iter().map(|s| s.abs()).fold(0.0, f64::max).max(1.0);
    if total.abs() > 1e-12 * g.n() as f64 * scale {
        return Err(Error::Domain(format!("tangent vector has nonzero sum {total:e}")));
    }
    if !g.is_connected() {
        return Err(Error::Structural("graph is disconnected; tau is not invertible".into()));
    }
    let weights = upwind_weights(g, rho, f)?;
    let n = g.n();
    if n == 1 {
        return Ok(vec![0.0]);
    }
    let full = tau_matrix(g, &weights)?;
    let reduced = full.view((1, 1), (n - 1, n - 1)).into_owned();
    let rhs = DVector::from_column_slice(&sigma[1..]);
    let sol = reduced
        .lu()
        .solve(&rhs)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Structural("singular potential system".into()))?;
    let mut phi = Vec::with_capacity(n);
    phi.push(0.0);
    phi.extend(sol.iter().copied());
    Ok(phi)
}

/// `(1/(2Δx²)) Σ_{(i,j)∈E} g_ij (Φ¹_i − Φ¹_j)(Φ²_i − Φ²_j)` for given potentials.
pub fn metric_from_potentials(g: &Graph, weights: &[f64], phi1: &[f64], phi2: &[f64]) -> f64 {
    let inv = 1.0 / (2.0 * g.dx() * g.dx());
    g.edges()
        .iter()
        .zip(weights)
        .map(|(e, w)| w * (phi1[e.from] - phi1[e.to]) * (phi2[e.from] - phi2[e.to]))
        .sum::<f64>()
        * inv
}

/// The metric `g_ρ(σ¹, σ²)` on tangent vectors.
pub fn metric_inner_product(
    g: &Graph,
    rho: &DensityState,
    f: &[f64],
    sigma1: &[f64],
    sigma2: &[f64],
) -> Result<f64> {
    let phi1 = solve_potential(g, rho, f, sigma1)?;
    let phi2 = solve_potential(g, rho, f, sigma2)?;
    let weights = upwind_weights(g, rho, f)?;
    Ok(metric_from_potentials(g, &weights, &phi1, &phi2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_cycle_1d, build_lattice_2d, build_path_lattice_1d, Boundary};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_density(rng: &mut ChaCha8Rng, n: usize) -> DensityState {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        DensityState::from_weights(&w).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn topologies() -> Vec<Graph> {
        vec![
            build_path_lattice_1d(0.0, 1.0, 5).unwrap(),
            build_cycle_1d(0.0, 1.0, 6).unwrap(),
            build_lattice_2d(0.0, 1.0, 0.0, 1.0, 0.25, Boundary::Neumann).unwrap(),
            build_lattice_2d(0.0, 1.0, 0.0, 1.0, 0.25, Boundary::Periodic).unwrap(),
        ]
    }

    fn edge(g: &Graph, from: usize, to: usize) -> usize {
        g.edges().iter().position(|e| e.from == from && e.to == to).unwrap()
    }

    #[test]
    fn gradient_of_constant_vanishes() {
        let g = build_path_lattice_1d(0.0, 1.0, 7).unwrap();
        assert!(graph_gradient(&g, &[3.0; 7]).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_on_three_point_path() {
        let g = build_path_lattice_1d(0.0, 2.0, 3).unwrap();
        let grad = graph_gradient(&g, &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(grad[edge(&g, 1, 0)], 1.0);
        assert_eq!(grad[edge(&g, 0, 1)], -1.0);
    }

    #[test]
    fn gradient_is_antisymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for g in topologies() {
            let grad = graph_gradient(&g, &random_vec(&mut rng, g.n())).unwrap();
            for k in 0..g.edges().len() {
                assert_eq!(grad[k], -grad[g.reverse_edge(k)]);
            }
        }
    }

    #[test]
    fn upwind_cases() {
        assert_eq!(upwind_weight(0.3, 0.7, 2.0, 1.0), 0.3);
        assert_eq!(upwind_weight(0.3, 0.7, 1.0, 2.0), 0.7);
        assert_eq!(upwind_weight(0.3, 0.7, 1.0, 1.0), 0.5);
    }

    #[test]
    fn upwind_weights_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for g in topologies() {
            let rho = random_density(&mut rng, g.n());
            let w = upwind_weights(&g, &rho, &random_vec(&mut rng, g.n())).unwrap();
            for k in 0..w.len() {
                assert_eq!(w[k], w[g.reverse_edge(k)]);
            }
        }
    }

    #[test]
    fn divergence_single_edge() {
        let g = build_path_lattice_1d(0.0, 1.0, 2).unwrap();
        let rho = DensityState::from_rho(vec![0.5, 0.5]).unwrap();
        let s = weighted_divergence(&g, &rho, &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_relative_eq!(s[0], 0.5);
        assert_relative_eq!(s[1], -0.5);
    }

    #[test]
    fn divergence_is_mass_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for g in topologies() {
            for _ in 0..1000 {
                let rho = random_density(&mut rng, g.n());
                let phi = random_vec(&mut rng, g.n());
                let f = random_vec(&mut rng, g.n());
                let s = weighted_divergence(&g, &rho, &phi, &f).unwrap();
                // Scale by Δx² so the bound is independent of the mesh.
                let total: f64 = s.iter().sum::<f64>() * g.dx() * g.dx();
                assert!(total.abs() <= 1e-13, "sum {total}");
            }
            let rho = random_density(&mut rng, g.n());
            let s = weighted_divergence(&g, &rho, &vec![2.5; g.n()], &random_vec(&mut rng, g.n())).unwrap();
            assert!(s.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn tau_has_one_dimensional_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for g in topologies() {
            let rho = random_density(&mut rng, g.n());
            let w = upwind_weights(&g, &rho, &random_vec(&mut rng, g.n())).unwrap();
            let m = tau_matrix(&g, &w).unwrap();
            let sym = (&m + m.transpose()) * 0.5;
            assert_relative_eq!(sym, m, epsilon = 1e-14);
            let mut eig: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
            eig.sort_by(f64::total_cmp);
            let top = eig[eig.len() - 1];
            assert!(eig[0].abs() <= 1e-10 * top);
            assert!(eig[1] > 1e-8 * top);
        }
    }

    #[test]
    fn solve_potential_zero_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for g in topologies() {
            let n = g.n();
            let rho = random_density(&mut rng, n);
            let f = random_vec(&mut rng, n);
            let zero = solve_potential(&g, &rho, &f, &vec![0.0; n]).unwrap();
            assert!(zero.iter().all(|&x| x.abs() < 1e-14));
            let phi = random_vec(&mut rng, n);
            let sigma = weighted_divergence(&g, &rho, &phi, &f).unwrap();
            let back = solve_potential(&g, &rho, &f, &sigma).unwrap();
            let shift = phi[0] - back[0];
            for i in 0..n {
                assert!((back[i] + shift - phi[i]).abs() < 1e-9);
            }
            let resid = weighted_divergence(&g, &rho, &back, &f).unwrap();
            for i in 0..n {
                assert!((resid[i] - sigma[i]).abs() < 1e-10 * (1.0 / (g.dx() * g.dx())));
            }
        }
    }

    #[test]
    fn solve_potential_rejects_bad_input() {
        let g = build_path_lattice_1d(0.0, 1.0, 3).unwrap();
        let rho = DensityState::uniform(3);
        let err = solve_potential(&g, &rho, &[0.0; 3], &[1.0, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn metric_expressions_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for g in topologies() {
            let n = g.n();
            for _ in 0..20 {
                let rho = random_density(&mut rng, n);
                let f = random_vec(&mut rng, n);
                let phi1 = random_vec(&mut rng, n);
                let phi2 = random_vec(&mut rng, n);
                let s1 = weighted_divergence(&g, &rho, &phi1, &f).unwrap();
                let s2 = weighted_divergence(&g, &rho, &phi2, &f).unwrap();
                let via_solve = metric_inner_product(&g, &rho, &f, &s1, &s2).unwrap();
                let dual_1: f64 = s1.iter().zip(&phi2).map(|(a, b)| a * b).sum();
                let dual_2: f64 = s2.iter().zip(&phi1).map(|(a, b)| a * b).sum();
                let w = upwind_weights(&g, &rho, &f).unwrap();
                let edge_sum = metric_from_potentials(&g, &w, &phi1, &phi2);
                let scale = edge_sum.abs().max(1.0);
                assert!((via_solve - edge_sum).abs() <= 1e-10 * scale);
                assert!((dual_1 - edge_sum).abs() <= 1e-10 * scale);
                assert!((dual_2 - edge_sum).abs() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn metric_is_positive_and_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = build_path_lattice_1d(0.0, 1.0, 6).unwrap();
        let rho = random_density(&mut rng, 6);
        let f = random_vec(&mut rng, 6);
        let tangent = |rng: &mut ChaCha8Rng| {
            let mut s = random_vec(rng, 6);
            let mean = s.iter().sum::<f64>() / 6.0;
            s.iter_mut().for_each(|x| *x -= mean);
            s
        };
        let (s1, s2, s3) = (tangent(&mut rng), tangent(&mut rng), tangent(&mut rng));
        assert!(metric_inner_product(&g, &rho, &f, &s1, &s1).unwrap() > 0.0);
        assert_eq!(metric_inner_product(&g, &rho, &f, &[0.0; 6], &[0.0; 6]).unwrap(), 0.0);
        let (a, b) = (0.7, -1.3);
        let combo: Vec<f64> = s1.iter().zip(&s3).map(|(x, y)| a * x + b * y).collect();
        let lhs = metric_inner_product(&g, &rho, &f, &combo, &s2).unwrap();
        let rhs = a * metric_inner_product(&g, &rho, &f, &s1, &s2).unwrap()
            + b * metric_inner_product(&g, &rho, &f, &s3, &s2).unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
        let sym = metric_inner_product(&g, &rho, &f, &s2, &s1).unwrap();
        assert!((sym - metric_inner_product(&g, &rho, &f, &s1, &s2).unwrap()).abs() < 1e-10);
    }
}
