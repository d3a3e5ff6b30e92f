//! Non-gradient drifts given by per-direction antiderivatives.
//!
//! A drift field `f = (f_1, …, f_d)` enters the scheme through functions
//! `u_v` with `∂u_v/∂x_v = f_v`. Mass moves along direction `v` toward larger
//! `u_v`, so diffusion with coefficient `β_v` enters as
//!
//! ```text
//! u_v(i, ρ) = u_potential_v(x(i)) − β_v log ρ_i
//! ```

use std::fmt;
use std::sync::Arc;

use crate::energy::DensityState;
use crate::error::{invalid, Error, Result};
use crate::graph::Graph;

type Antiderivative = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
enum Term {
    Function(Antiderivative),
    /// One value per vertex of a specific graph.
    Table(Arc<Vec<f64>>),
}

/// Per-direction antiderivatives plus per-direction diffusion coefficients.
#[derive(Clone)]
pub struct DriftSpec {
    name: String,
    terms: Vec<Term>,
    diffusion: Vec<f64>,
}

impl fmt::Debug for DriftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriftSpec")
            .field("name", &self.name)
            .field("dim", &self.terms.len())
            .field("diffusion", &self.diffusion)
            .finish()
    }
}

fn check_diffusion(diffusion: &[f64]) -> Result<()> {
    if let Some(b) = diffusion.iter().find(|b| !(**b >= 0.0 && b.is_finite())) {
        return Err(invalid(format!("diffusion coefficients must be nonnegative, got {b}")));
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(invalid(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}

impl DriftSpec {
    /// Build from closed-form antiderivatives, one per direction.
    pub fn from_functions(
        name: impl Into<String>,
        potentials: Vec<Antiderivative>,
        diffusion: Vec<f64>,
    ) -> Result<Self> {
        if potentials.len() != diffusion.len() || potentials.is_empty() {
            return Err(invalid("need one diffusion coefficient per direction"));
        }
        check_diffusion(&diffusion)?;
        Ok(Self {
            name: name.into(),
            terms: potentials.into_iter().map(Term::Function).collect(),
            diffusion,
        })
    }

    /// Build from tabulated vertex values, `tables[v][i] = u_potential_v(x(i))`.
    pub fn from_tables(name: impl Into<String>, tables: Vec<Vec<f64>>, diffusion: Vec<f64>) -> Result<Self> {
        if tables.len() != diffusion.len() || tables.is_empty() {
            return Err(invalid("need one diffusion coefficient per direction"));
        }
        check_diffusion(&diffusion)?;
        let n = tables[0].len();
        if tables.iter().any(|t| t.len() != n) {
            return Err(invalid("drift tables have different lengths"));
        }
        Ok(Self {
            name: name.into(),
            terms: tables.into_iter().map(|t| Term::Table(Arc::new(t))).collect(),
            diffusion,
        })
    }

    /// Constant zero drift with pure diffusion in every direction.
    pub fn zero(dim: usize, beta: f64) -> Result<Self> {
        let zero: Antiderivative = Arc::new(|_: &[f64]| 0.0);
        Self::from_functions("zero", vec![zero; dim], vec![beta; dim])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    pub fn diffusion(&self) -> &[f64] {
        &self.diffusion
    }

    /// Deterministic part `u_potential_v` at every vertex of `g`.
    pub fn potential_table(&self, g: &Graph, v: usize) -> Result<Vec<f64>> {
        self.check_graph(g)?;
        let term = self
            .terms
            .get(v)
            .ok_or_else(|| invalid(format!("direction {v} out of range")))?;
        Ok(match term {
            Term::Function(f) => (0..g.n()).map(|i| f(g.coord(i))).collect(),
            Term::Table(t) => t.as_ref().clone(),
        })
    }

    pub(crate) fn check_graph(&self, g: &Graph) -> Result<()> {
        if g.num_directions() != self.dim() {
            return Err(invalid(format!(
                "drift has {} directions, graph has {}",
                self.dim(),
                g.num_directions()
            )));
        }
        for t in &self.terms {
            if let Term::Table(t) = t {
                if t.len() != g.n() {
                    return Err(invalid("drift table does not match graph size"));
                }
            }
        }
        Ok(())
    }
}

/// `u_v(i, ρ) = u_potential_v(x(i)) − β_v log ρ_i`.
pub fn drift_eval(spec: &DriftSpec, g: &Graph, rho: &DensityState, v: usize, i: usize) -> Result<f64> {
    spec.check_graph(g)?;
    if i >= g.n() || rho.len() != g.n() {
        return Err(invalid(format!("vertex {i} out of range")));
    }
    let term = spec
        .terms
        .get(v)
        .ok_or_else(|| invalid(format!("direction {v} out of range")))?;
    let base = match term {
        Term::Function(f) => f(g.coord(i)),
        Term::Table(t) => t[i],
    };
    let beta = spec.diffusion[v];
    if beta == 0.0 {
        return Ok(base);
    }
    let l = rho.log_rho()[i];
    if !l.is_finite() {
        return Err(Error::Domain(format!("density at vertex {i} is not positive")));
    }
    Ok(base - beta * l)
}

/// Which antiderivative of the van der Pol drift to use in the `x₂` direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VanDerPolForm {
    /// `u₂ = (1 − x₁²) x₂²/2 − x₁ x₂`, the antiderivative of the oscillator
    /// drift `(1 − x₁²) x₂ − x₁`.
    Oscillator,
    /// `u₂ = (1 − x₁²) x₂ − x₂²/2`.
    Reduced,
}

impl VanDerPolForm {
    pub fn name(&self) -> &'static str {
        match self {
            VanDerPolForm::Oscillator => "oscillator",
            VanDerPolForm::Reduced => "reduced",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "oscillator" => Some(VanDerPolForm::Oscillator),
            "reduced" => Some(VanDerPolForm::Reduced),
            _ => None,
        }
    }
}

/// Stochastic van der Pol oscillator with noise of strength `beta` in `x₂`.
pub fn van_der_pol_drift(beta: f64, form: VanDerPolForm) -> Result<DriftSpec> {
    check_beta(beta)?;
    let u1: Antiderivative = Arc::new(|x: &[f64]| x[0] * x[1]);
    let u2: Antiderivative = match form {
        VanDerPolForm::Oscillator => Arc::new(|x: &[f64]| (1.0 - x[0] * x[0]) * x[1] * x[1] / 2.0 - x[0] * x[1]),
        VanDerPolForm::Reduced => Arc::new(|x: &[f64]| (1.0 - x[0] * x[0]) * x[1] - x[1] * x[1] / 2.0),
    };
    DriftSpec::from_functions("van_der_pol", vec![u1, u2], vec![0.0, beta])
}

/// Stochastic Duffing oscillator, drift `(x₂, −2ξωx₂ + ωx₁ − ω²r x₁³)`.
pub fn duffing_drift(xi: f64, omega: f64, r: f64, beta: f64) -> Result<DriftSpec> {
    check_beta(beta)?;
    if ![xi, omega, r].iter().all(|p| p.is_finite()) {
        return Err(invalid("Duffing parameters must be finite"));
    }
    let u1: Antiderivative = Arc::new(|x: &[f64]| x[0] * x[1]);
    let u2: Antiderivative = Arc::new(move |x: &[f64]| {
        let (x1, x2) = (x[0], x[1]);
        -xi * omega * x2 * x2 + omega * x1 * x2 - omega * omega * r * x1 * x1 * x1 * x2
    });
    DriftSpec::from_functions("duffing", vec![u1, u2], vec![0.0, beta])
}
