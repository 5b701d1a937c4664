//! Experiment runner: deterministic CSV artifacts from the closed forms and
//! their Monte Carlo verification.
//!
//! Exit codes: 0 success, 1 configuration or i/o error, 2 verification
//! failure (some Monte Carlo check landed outside tolerance or an identity
//! failed its z-test).

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use iclgd_cli::args::{Cli, Command};
use iclgd_cli::commands::{self, CliError};

fn run(cli: &Cli) -> Result<bool, CliError> {
    match &cli.command {
        Command::SweepExpectedLoss(args) => {
            init_workers(args.run.workers);
            commands::sweep_expected_loss(args)
        }
        Command::SweepSecondMoment(args) => {
            init_workers(args.run.workers);
            commands::sweep_second_moment(args)
        }
        Command::BoundCdf(args) => {
            init_workers(args.run.workers);
            commands::bound_cdf(args)
        }
        Command::OptimalEta(args) => {
            init_workers(args.run.workers);
            commands::optimal_eta(args)
        }
        Command::Breakdown(args) => {
            init_workers(args.run.workers);
            commands::breakdown_cmd(args)
        }
        Command::VerifyIdentities(args) => {
            init_workers(args.run.workers);
            commands::verify_identities(args)
        }
    }
}

/// Cap the worker pool when requested; results are worker-count independent
/// either way.
fn init_workers(workers: Option<usize>) {
    if let Some(k) = workers.filter(|&k| k > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
