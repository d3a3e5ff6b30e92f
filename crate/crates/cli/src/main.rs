use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use wfp_cli::config::{parse_config, ExperimentConfig, ModelConfig};
use wfp_cli::experiment::{build_graph, output_dir, run_experiment, RunError};
use wfp_cli::studies::{order_study, rates_table, Family, OrderOptions, RatesOptions};
use wfp_core::{gibbs_residual, solve_gibbs, write_density_csv, FreeEnergySpec, GibbsOptions};

#[derive(Parser)]
#[command(name = "wfp", version, about = "Upwind gradient-flow solver for Fokker-Planck equations on graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate an experiment config and write its CSV artifacts.
    Run { config: PathBuf },
    /// Spectral-gap table for the 1-d heat flow.
    Rates {
        #[arg(long, value_enum)]
        family: FamilyArg,
        #[arg(long, default_value_t = 3)]
        n_min: usize,
        #[arg(long, default_value_t = 40)]
        n_max: usize,
        #[arg(long, default_value_t = 32)]
        restarts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip the heat-flow runs and the fitted column.
        #[arg(long)]
        no_fit: bool,
    },
    /// Spatial refinement study for periodic heat flow.
    Order {
        #[arg(long, default_value_t = 4)]
        levels: usize,
        #[arg(long, default_value_t = 16)]
        n0: usize,
        #[arg(long, default_value_t = 0.01)]
        dt_factor: f64,
        /// Amplitude ε of the initial mode `1 + ε cos 2πx`.
        #[arg(long, default_value_t = OrderOptions::default().amplitude)]
        amplitude: f64,
    },
    /// Solve for the Gibbs equilibrium of a gradient config.
    Gibbs { config: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Lattice,
    Cycle,
}

fn load(path: &Path) -> Result<ExperimentConfig, RunError> {
    let text = fs::read_to_string(path).map_err(|e| RunError::Setup(format!("cannot read {}: {e}", path.display())))?;
    Ok(parse_config(&text)?)
}

fn run(path: &Path) -> Result<(), RunError> {
    let cfg = load(path)?;
    let out = run_experiment(&cfg)?;
    let t = &out.trajectory;
    if !t.converged {
        return Err(RunError::NotConverged { t_end: cfg.time.t_end });
    }
    println!(
        "{}: {} steps to t = {:.6}, min log rho = {:.6e}, max mass error = {:.3e}",
        cfg.name, t.steps, t.final_time, t.min_log_rho, t.max_mass_error
    );
    println!("artifacts in {}", out.dir.display());
    Ok(())
}

fn gibbs(path: &Path) -> Result<(), RunError> {
    let cfg = load(path)?;
    let ModelConfig::Gradient { potential, interaction, beta } = cfg.model else {
        return Err(RunError::Setup("gibbs needs a gradient model".into()));
    };
    let g = build_graph(&cfg.graph)?;
    let spec = FreeEnergySpec::from_catalog(&g, potential, interaction, beta).map_err(|e| RunError::Setup(e.to_string()))?;
    let rho = solve_gibbs(&g, &spec, GibbsOptions::default())?;
    let dir = output_dir(&cfg);
    fs::create_dir_all(&dir)?;
    let file = dir.join("gibbs.csv");
    write_density_csv(&g, &rho, std::io::BufWriter::new(fs::File::create(&file)?))?;
    println!("gibbs residual {:.3e}, written to {}", gibbs_residual(&spec, &rho)?, file.display());
    Ok(())
}

fn rates(family: Family, n_min: usize, n_max: usize, opts: RatesOptions) -> Result<(), RunError> {
    let rows = rates_table(family, n_min, n_max, &opts)?;
    println!("n,closed_form,numeric,fitted,fit_r_squared,limit,cycle_over_lattice");
    for r in rows {
        println!(
            "{},{:.14e},{:.14e},{:.14e},{:.14e},{:.14e},{:.14e}",
            r.n, r.closed_form, r.numeric, r.fitted, r.fit_r_squared, r.limit, r.cycle_over_lattice
        );
    }
    Ok(())
}

fn order(levels: usize, opts: OrderOptions) -> Result<(), RunError> {
    println!("n,dx,dt,error_l1,observed_order");
    for r in order_study(levels, &opts)? {
        let order = r.observed_order.map_or(String::new(), |o| format!("{o:.6}"));
        println!("{},{:.14e},{:.14e},{:.14e},{order}", r.n, r.dx, r.dt, r.error_l1);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config } => run(&config),
        Command::Gibbs { config } => gibbs(&config),
        Command::Rates { family, n_min, n_max, restarts, seed, no_fit } => {
            let family = match family {
                FamilyArg::Lattice => Family::Lattice,
                FamilyArg::Cycle => Family::Cycle,
            };
            rates(family, n_min, n_max, RatesOptions { restarts, seed, fit: !no_fit })
        }
        Command::Order { levels, n0, dt_factor, amplitude } => {
            order(levels, OrderOptions { n0, dt_factor, amplitude, ..Default::default() })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
