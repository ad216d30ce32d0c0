use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use projfpe_core::harness::{self, ExperimentConfig};
use projfpe_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "projfpe",
    version,
    about = "Exponential-family projection of Fokker–Planck evolutions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory (overrides the config's output_dir).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Monte Carlo seed (overrides monte_carlo.seed).
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Approximate quadrature node count; sets grid.panels = ceil(N / nodes_per_panel).
    #[arg(long, global = true, value_name = "N")]
    grid_nodes: Option<usize>,
    /// Suppress the summary on stdout.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate the projected parameter ODE.
    Project { config: PathBuf },
    /// Reconstruct the drift and simulate the diffusion that realizes the projected law.
    Reconstruct { config: PathBuf },
    /// Nested-family convergence sweep against a reference solution.
    Converge { config: PathBuf },
    /// Finite-difference and exact Gaussian reference solutions.
    Oracle { config: PathBuf },
    /// Numerical identities of the exponential-manifold geometry.
    GeometryCheck,
}

fn load(path: &Path, cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.monte_carlo.seed = seed;
    }
    if let Some(n) = cli.grid_nodes {
        if n == 0 {
            return Err(Error::Usage("--grid-nodes must be positive".into()));
        }
        cfg.grid.panels = n.div_ceil(cfg.grid.nodes_per_panel.max(1));
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Project { config } => {
            let cfg = load(config, cli)?;
            let run = harness::run_projection(&cfg, Some(&cfg.output_dir))?;
            let s = &run.summary;
            Ok(format!(
                "{}: {} steps, theta_T = {:?}, mean {:.6}, variance {:.6}, max residual {:.3e}, regrids {}\nwrote {}",
                s.name,
                s.steps,
                s.theta_final,
                s.mean_final,
                s.variance_final,
                s.max_residual,
                s.regrids,
                cfg.output_dir.display()
            ))
        }
        Command::Reconstruct { config } => {
            let cfg = load(config, cli)?;
            let run = harness::run_reconstruction(&cfg, Some(&cfg.output_dir))?;
            let s = &run.summary;
            Ok(format!(
                "{}: {} paths ({} excluded), L1 {:.5}, Hellinger {:.5}, drift PDE residual {:.3e}\nwrote {}",
                s.name,
                s.paths,
                s.excluded,
                s.distance.l1,
                s.distance.hellinger,
                s.ustar.max_pde_residual,
                cfg.output_dir.display()
            ))
        }
        Command::Converge { config } => {
            let cfg = load(config, cli)?;
            let report = harness::run_convergence(&cfg, Some(&cfg.output_dir))?;
            let mut text = format!(
                "{} vs {}\n   m          L1   Hellinger          KL  residual(t=0)\n",
                report.name, report.reference
            );
            for r in &report.rows {
                match &r.error {
                    None => text.push_str(&format!(
                        "{:>4} {:>11.3e} {:>11.3e} {:>11.3e} {:>14.3e}\n",
                        r.m, r.l1, r.hellinger, r.kl, r.residual_t0
                    )),
                    Some(e) => text.push_str(&format!("{:>4} failed: {e}\n", r.m)),
                }
            }
            text.push_str(&format!(
                "t=0 residual nonincreasing: {}\nwrote {}",
                report.residual_t0_monotone,
                cfg.output_dir.display()
            ));
            Ok(text)
        }
        Command::Oracle { config } => {
            let cfg = load(config, cli)?;
            let s = harness::run_oracle(&cfg, Some(&cfg.output_dir))?;
            let exact = match &s.fd_vs_exact {
                Some(d) => format!(", L1 to exact {:.3e}", d.l1),
                None => String::new(),
            };
            Ok(format!(
                "{}: {} nodes, dt {}, mass drift {:.3e}{exact}\nwrote {}",
                s.name,
                s.fd_nodes,
                s.fd_dt,
                s.fd_mass_drift,
                cfg.output_dir.display()
            ))
        }
        Command::GeometryCheck => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            let checks = harness::geometry_check(Some(&out))?;
            let mut text = String::new();
            for c in &checks {
                text.push_str(&format!(
                    "{} {:<44} {:>11.3e} (tol {:.0e})\n",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.tolerance
                ));
            }
            if let Some(bad) = checks.iter().find(|c| !c.passed) {
                return Err(Error::Numerical(format!(
                    "geometry check {} failed",
                    bad.name
                )));
            }
            text.push_str(&format!("wrote {}", out.display()));
            Ok(text)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(text) => {
            if !cli.quiet {
                println!("{text}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
