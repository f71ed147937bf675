use clap::{Args, Parser, Subcommand};
use eqst_cli::runner::{Command as RunCommand, ConvergenceAxis};
use eqst_cli::{load_scenario, Overrides};
use std::path::PathBuf;
use std::process::ExitCode;

/// Coupled transient electroquasistatic-thermal solver with adjoint
/// sensitivities.
#[derive(Parser)]
#[command(name = "eqst", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for CSV/VTK artifacts and the manifest.
    #[arg(long, default_value = "eqst_out")]
    out: PathBuf,
    /// Override the maximum electric time step (seconds).
    #[arg(long = "dt-el")]
    dt_el: Option<f64>,
    /// Override the maximum thermal time step (seconds).
    #[arg(long = "dt-th")]
    dt_th: Option<f64>,
    /// Override the mesh target edge length (meters).
    #[arg(long = "h")]
    h_target: Option<f64>,
    /// Worker threads for study levels (1 = fully deterministic ordering).
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Sub {
    /// Solve the transient problem and report the quantities of interest.
    Forward {
        #[command(flatten)]
        common: Common,
        /// Also write VTK legacy snapshots at every thermal grid point.
        #[arg(long)]
        vtk: bool,
    },
    /// Adjoint sensitivities of every QoI with respect to every parameter.
    Avm {
        #[command(flatten)]
        common: Common,
    },
    /// Direct (forward-linearized) sensitivities, one solve per parameter.
    Dsm {
        #[command(flatten)]
        common: Common,
    },
    /// Three-way AVM / DSM / finite-difference comparison table.
    FdCheck {
        #[command(flatten)]
        common: Common,
        /// Relative finite-difference step.
        #[arg(long, default_value_t = 1e-4)]
        fd_step: f64,
    },
    /// Convergence study of the leading sensitivity along one axis.
    Convergence {
        #[command(flatten)]
        common: Common,
        /// mesh_h | dt | dt_thermal_ratio
        #[arg(long)]
        axis: String,
        #[arg(long, default_value_t = 4)]
        levels: usize,
    },
    /// QoI sweep around the nominal parameter value with the AVM tangent.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Parameter label (defaults to the first designated parameter).
        #[arg(long)]
        parameter: Option<String>,
        /// Relative half-width of the sweep (0.01 = +-1%).
        #[arg(long, default_value_t = 0.01)]
        span: f64,
        #[arg(long, default_value_t = 5)]
        points: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, cmd) = match cli.command {
        Sub::Forward { common, vtk } => (common, RunCommand::Forward { vtk }),
        Sub::Avm { common } => (common, RunCommand::Avm),
        Sub::Dsm { common } => (common, RunCommand::Dsm),
        Sub::FdCheck { common, fd_step } => (common, RunCommand::FdCheck { rel_step: fd_step }),
        Sub::Convergence {
            common,
            axis,
            levels,
        } => {
            let axis = match ConvergenceAxis::parse(&axis) {
                Ok(a) => a,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::FAILURE;
                }
            };
            (common, RunCommand::Convergence { axis, levels })
        }
        Sub::Sweep {
            common,
            parameter,
            span,
            points,
        } => (
            common,
            RunCommand::Sweep {
                parameter,
                span,
                points,
            },
        ),
    };

    let overrides = Overrides {
        dt_el_max: common.dt_el,
        dt_th_max: common.dt_th,
        h_target: common.h_target,
    };
    let loaded = match load_scenario(&common.config, &overrides) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match eqst_cli::run(&cmd, &loaded, &common.out, common.threads.max(1)) {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            println!("artifacts written to {}", outcome.out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
