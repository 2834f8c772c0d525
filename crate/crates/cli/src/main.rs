use std::path::PathBuf;
use std::process::ExitCode;

use adjoint_deis::json;
use adjoint_deis_cli::{
    load_config, run_convergence, run_cycle_check, run_grad, run_optimize, run_sample, CliResult,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(version, about = "Adjoint sensitivities for diffusion samplers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sampler and write the trajectory as JSON
    Sample(Common),
    /// Solve the adjoint and write gradients at t = 1
    Grad(Common),
    /// Sweep adjoint step counts and fit the convergence order
    Convergence(Common),
    /// Guided generation by gradient descent through the sampler
    Optimize(Common),
    /// Cycle-SDE invert-then-replay reconstruction check
    CycleCheck(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,

    /// Output path (a directory for `optimize`)
    #[arg(long)]
    out: Option<PathBuf>,

    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> CliResult<()> {
    let args = match &cli.command {
        Command::Sample(a)
        | Command::Grad(a)
        | Command::Convergence(a)
        | Command::Optimize(a)
        | Command::CycleCheck(a) => a,
    };
    let config = load_config(&args.config, args.seed)?;
    let out = args.out.as_deref();
    match cli.command {
        Command::Sample(_) => {
            let traj = run_sample(&config, out)?;
            eprintln!("wrote {} states", traj.states.len());
        }
        Command::Grad(_) => {
            run_grad(&config, out)?;
        }
        Command::Convergence(_) => {
            println!("{}", json::to_string(&run_convergence(&config, out)?)?)
        }
        Command::Optimize(_) => {
            let state = run_optimize(&config, out)?;
            eprintln!(
                "loss {:.6e} -> {:.6e}",
                state.initial_loss, state.final_loss
            );
        }
        Command::CycleCheck(_) => println!("{}", json::to_string(&run_cycle_check(&config, out)?)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
