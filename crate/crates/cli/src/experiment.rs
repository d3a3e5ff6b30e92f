//! Turn a parsed config into a run and write its artifacts.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use wfp_core::{
    build_cycle_1d, build_lattice_2d, build_path_lattice_1d, duffing_drift, fit_asymptotic_rate, free_energy,
    gibbs_fixed_point, gibbs_residual, lambda_estimate, second_derivative_diagnostic, van_der_pol_drift,
    write_density_csv, write_trajectory_csv, DensityState, FlowProblem, FreeEnergySpec, GibbsOptions, Graph,
    IntegrateOptions, RateOptions, StepControl, StopRule, Trajectory,
};

use crate::config::{ConfigErrors, DriftConfig, DtConfig, ExperimentConfig, GraphConfig, InitConfig, ModelConfig, StopConfig};

/// Overrides the directory that relative `output.dir` paths resolve against.
pub const OUTPUT_ROOT_ENV: &str = "WFP_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Config(#[from] ConfigErrors),
    /// Parameters that parse but do not describe a valid problem.
    #[error("invalid experiment: {0}")]
    Setup(String),
    #[error(transparent)]
    Numerical(#[from] wfp_core::Error),
    #[error("stop rule did not fire before t = {t_end}")]
    NotConverged { t_end: f64 },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl RunError {
    /// 2 for configuration problems, 1 for numerical or i/o failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Setup(_) => 2,
            RunError::Numerical(wfp_core::Error::InvalidArgument(_)) => 2,
            _ => 1,
        }
    }
}

fn setup(e: wfp_core::Error) -> RunError {
    RunError::Setup(e.to_string())
}

pub fn build_graph(cfg: &GraphConfig) -> Result<Graph, RunError> {
    match *cfg {
        GraphConfig::Path { a, b, n } => build_path_lattice_1d(a, b, n),
        GraphConfig::Cycle { a, b, n } => build_cycle_1d(a, b, n),
        GraphConfig::Lattice2d { xlo, xhi, ylo, yhi, dx, boundary } => build_lattice_2d(xlo, xhi, ylo, yhi, dx, boundary),
    }
    .map_err(setup)
}

pub fn build_problem(cfg: &ExperimentConfig) -> Result<FlowProblem, RunError> {
    let g = build_graph(&cfg.graph)?;
    match &cfg.model {
        ModelConfig::Gradient { potential, interaction, beta } => {
            let spec = FreeEnergySpec::from_catalog(&g, *potential, *interaction, *beta).map_err(setup)?;
            FlowProblem::gradient(g, spec).map_err(setup)
        }
        ModelConfig::General { drift, beta } => {
            let drift = match *drift {
                DriftConfig::VanDerPol { form } => van_der_pol_drift(*beta, form),
                DriftConfig::Duffing { xi, omega, r } => duffing_drift(xi, omega, r, *beta),
            }
            .map_err(setup)?;
            FlowProblem::general(g, drift).map_err(setup)
        }
    }
}

pub fn initial_density(cfg: &ExperimentConfig, g: &Graph) -> Result<DensityState, RunError> {
    match &cfg.init {
        InitConfig::Uniform => Ok(DensityState::uniform(g.n())),
        InitConfig::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let w: Vec<f64> = (0..g.n()).map(|_| rng.random_range(0.5..1.5)).collect();
            DensityState::from_weights(&w).map_err(setup)
        }
        InitConfig::Gaussian { center, variance } => {
            let logs: Vec<f64> = (0..g.n())
                .map(|i| {
                    let d2: f64 = g.coord(i).iter().zip(center).map(|(x, c)| (x - c) * (x - c)).sum();
                    -d2 / (2.0 * variance)
                })
                .collect();
            DensityState::from_log_weights(&logs).map_err(setup)
        }
        InitConfig::Csv { path } => read_density_csv(Path::new(path), g.n()),
    }
}

/// Read a density CSV with a `log_rho` or `rho` column.
pub fn read_density_csv(path: &Path, n: usize) -> Result<DensityState, RunError> {
    let text = fs::read_to_string(path)
        .map_err(|e| RunError::Setup(format!("cannot read initial density {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').map(str::trim).collect();
    let (col, is_log) = match header.iter().position(|h| *h == "log_rho") {
        Some(c) => (c, true),
        None => match header.iter().position(|h| *h == "rho") {
            Some(c) => (c, false),
            None => return Err(RunError::Setup(format!("{} has no rho or log_rho column", path.display()))),
        },
    };
    let mut values = Vec::with_capacity(n);
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let field = line.split(',').nth(col).map(str::trim).unwrap_or("");
        let v: f64 = field
            .parse()
            .map_err(|_| RunError::Setup(format!("{} line {}: bad value `{field}`", path.display(), k + 2)))?;
        values.push(v);
    }
    if values.len() != n {
        return Err(RunError::Setup(format!(
            "{} has {} densities, graph has {n} vertices",
            path.display(),
            values.len()
        )));
    }
    if is_log {
        DensityState::from_log_weights(&values).map_err(setup)
    } else {
        DensityState::from_weights(&values).map_err(setup)
    }
}

pub fn integrate_options(cfg: &ExperimentConfig) -> IntegrateOptions {
    IntegrateOptions {
        dt: match cfg.time.dt {
            DtConfig::Fixed(dt) => StepControl::Fixed(dt),
            DtConfig::Auto { safety } => StepControl::Auto { safety },
        },
        t_end: cfg.time.t_end,
        stop: match cfg.time.stop {
            StopConfig::Time => StopRule::Time,
            StopConfig::DissipationBelow(eps) => StopRule::DissipationBelow(eps),
            StopConfig::ResidualBelow(eps) => StopRule::ResidualBelow(eps),
        },
        sample_every: cfg.output.sample_every,
        density_every: cfg.output.density_every,
        ..Default::default()
    }
}

/// Directory a config writes to, honoring [`OUTPUT_ROOT_ENV`].
pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    root.join(&cfg.output.dir)
}

/// Vertices whose density exceeds every neighbor's and is at least
/// `rel_floor · max ρ`.
pub fn strict_local_maxima(g: &Graph, rho: &DensityState, rel_floor: f64) -> Vec<usize> {
    let l = rho.log_rho();
    let top = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor = top + rel_floor.ln();
    (0..g.n())
        .filter(|&i| l[i] >= floor && g.edges()[g.edge_range(i)].iter().all(|e| l[i] > l[e.to]))
        .collect()
}

#[derive(Debug, Clone)]
pub struct RateSummary {
    pub f_infinity: f64,
    /// Whether `f_infinity` came from the fixed-point solver (else the final state).
    pub f_infinity_from_gibbs: bool,
    pub gibbs_residual: f64,
    pub fit: Result<(f64, f64), String>,
    pub lambda: Option<Result<f64, String>>,
    /// `♠ / D` at the final state.
    pub spade_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    /// Files written, relative to `dir`.
    pub files: Vec<PathBuf>,
    pub problem: FlowProblem,
    pub trajectory: Trajectory,
    pub rate: Option<RateSummary>,
    pub local_maxima: Vec<usize>,
}

/// Significance floor for reported density peaks.
pub const PEAK_FLOOR: f64 = 1e-3;

/// Run the experiment and write its artifacts into `dir`.
///
/// A run whose stop rule never fires still returns its outcome, with
/// `trajectory.converged` unset and a `diagnostics.txt` alongside.
pub fn run_experiment_in(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutcome, RunError> {
    let problem = build_problem(cfg)?;
    let rho0 = initial_density(cfg, problem.graph())?;
    fs::create_dir_all(dir)?;
    let traj = match wfp_core::integrate(&problem, rho0, &integrate_options(cfg)) {
        Ok(t) => t,
        Err(e) => {
            write_diagnostics(dir, cfg, &e.to_string())?;
            return Err(e.into());
        }
    };
    let rate = match problem.energy() {
        Some(spec) => Some(rate_summary(problem.graph(), spec, &traj, cfg)?),
        None => None,
    };
    let local_maxima = strict_local_maxima(problem.graph(), &traj.final_state, PEAK_FLOOR);
    let mut files = Vec::new();
    write_file(dir, "trajectory.csv", &mut files, |w| write_trajectory_csv(&traj, w))?;
    write_file(dir, "density_final.csv", &mut files, |w| write_density_csv(problem.graph(), &traj.final_state, w))?;
    if !traj.checkpoints.is_empty() {
        fs::create_dir_all(dir.join("checkpoints"))?;
        for (k, (_, state)) in traj.checkpoints.iter().enumerate() {
            let name = format!("checkpoints/density_{k:05}.csv");
            write_file(dir, &name, &mut files, |w| write_density_csv(problem.graph(), state, w))?;
        }
    }
    if let Some(rate) = &rate {
        write_file(dir, "rate_report.txt", &mut files, |w| write_rate_report(rate, w))?;
    }
    write_file(dir, "summary.txt", &mut files, |w| write_summary(cfg, &traj, &local_maxima, w))?;
    write_file(dir, "config.cfg", &mut files, |w| w.write_all(cfg.to_text().as_bytes()))?;
    let mut manifest = String::new();
    for f in &files {
        let size = fs::metadata(dir.join(f))?.len();
        manifest.push_str(&format!("{}\t{size}\n", f.display()));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    if !traj.converged {
        let err = RunError::NotConverged { t_end: cfg.time.t_end };
        write_diagnostics(dir, cfg, &err.to_string())?;
    }
    Ok(RunOutcome { dir: dir.to_path_buf(), files, problem, trajectory: traj, rate, local_maxima })
}

/// [`run_experiment_in`] with the directory taken from the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    run_experiment_in(cfg, &output_dir(cfg))
}

fn gibbs_options() -> GibbsOptions {
    GibbsOptions { tol: 1e-12, theta: 0.5, max_iter: 20_000 }
}

/// Gibbs equilibrium via the fixed-point solver, when it converges.
pub fn gibbs_state(spec: &FreeEnergySpec) -> Option<DensityState> {
    gibbs_fixed_point(spec, gibbs_options()).ok()
}

fn rate_summary(g: &Graph, spec: &FreeEnergySpec, traj: &Trajectory, cfg: &ExperimentConfig) -> Result<RateSummary, RunError> {
    let gibbs = gibbs_state(spec);
    let f_infinity_from_gibbs = gibbs.is_some();
    let reference = gibbs.unwrap_or_else(|| traj.final_state.clone());
    let f_infinity = free_energy(spec, &reference)?;
    let fit = fit_asymptotic_rate(traj, f_infinity, cfg.rate.tail_fraction).map_err(|e| e.to_string());
    let lambda = (cfg.rate.restarts > 0).then(|| {
        let opts = RateOptions { restarts: cfg.rate.restarts, seed: cfg.seed, ..Default::default() };
        lambda_estimate(g, spec, &reference, &opts)
            .map(|r| r.lambda_numeric)
            .map_err(|e| e.to_string())
    });
    let final_state = &traj.final_state;
    let spade = second_derivative_diagnostic(g, spec, final_state)?;
    let d = traj.last().dissipation;
    Ok(RateSummary {
        f_infinity,
        f_infinity_from_gibbs,
        gibbs_residual: gibbs_residual(spec, final_state)?,
        fit,
        lambda,
        spade_ratio: if d > 0.0 { spade / d } else { f64::NAN },
    })
}

fn write_file(
    dir: &Path,
    name: &str,
    files: &mut Vec<PathBuf>,
    body: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>,
) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(dir.join(name))?);
    body(&mut w)?;
    w.flush()?;
    files.push(PathBuf::from(name));
    Ok(())
}

fn write_rate_report<W: Write>(r: &RateSummary, w: &mut W) -> io::Result<()> {
    let source = if r.f_infinity_from_gibbs { "gibbs_fixed_point" } else { "final_state" };
    writeln!(w, "free_energy_infinity = {:.14e}", r.f_infinity)?;
    writeln!(w, "free_energy_infinity_source = {source}")?;
    writeln!(w, "gibbs_residual = {:.14e}", r.gibbs_residual)?;
    match &r.lambda {
        Some(Ok(l)) => {
            writeln!(w, "lambda_estimate = {l:.14e}")?;
            writeln!(w, "predicted_decay = {:.14e}", 2.0 * l)?;
        }
        Some(Err(e)) => writeln!(w, "lambda_estimate = unavailable ({e})")?,
        None => writeln!(w, "lambda_estimate = skipped")?,
    }
    match &r.fit {
        Ok((rate, r2)) => {
            writeln!(w, "fitted_decay = {rate:.14e}")?;
            writeln!(w, "fitted_r_squared = {r2:.14e}")?;
        }
        Err(e) => writeln!(w, "fitted_decay = unavailable ({e})")?,
    }
    writeln!(w, "second_derivative_over_dissipation = {:.14e}", r.spade_ratio)
}

fn write_summary<W: Write>(cfg: &ExperimentConfig, t: &Trajectory, peaks: &[usize], w: &mut W) -> io::Result<()> {
    let last = t.last();
    writeln!(w, "name = {}", cfg.name)?;
    writeln!(w, "converged = {}", t.converged)?;
    writeln!(w, "final_time = {:.14e}", t.final_time)?;
    writeln!(w, "steps = {}", t.steps)?;
    writeln!(w, "rejected_steps = {}", t.rejections)?;
    writeln!(w, "min_log_rho = {:.14e}", t.min_log_rho)?;
    writeln!(w, "max_mass_error = {:.14e}", t.max_mass_error)?;
    writeln!(w, "energy_increases = {}", t.energy_violations)?;
    writeln!(w, "final_dissipation = {:.14e}", last.dissipation)?;
    writeln!(w, "final_rhs_inf = {:.14e}", last.rhs_inf)?;
    let list: Vec<String> = peaks.iter().map(|p| p.to_string()).collect();
    writeln!(w, "local_maxima = {}", list.join(" "))
}

fn write_diagnostics(dir: &Path, cfg: &ExperimentConfig, message: &str) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("diagnostics.txt"), format!("error: {message}\n\n# config\n{}", cfg.to_text()))
}
