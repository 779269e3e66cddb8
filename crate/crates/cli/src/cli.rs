//! Argument parsing. Every flag can also come from a `KINCYCLE_*`
//! environment variable; flags win over the environment.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{self, DomainSpec, Experiment, Overrides};
use crate::{execute, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_PASS};

#[derive(Debug, Parser)]
#[command(name = "kincycle", version, about = "Backward characteristic cycles and grazing-set scans")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    /// Experiment to run.
    #[arg(value_enum, default_value_t = Experiment::All)]
    pub experiment: Experiment,
    /// TOML config file layered over the defaults.
    #[arg(long, env = "KINCYCLE_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "KINCYCLE_SEED")]
    pub seed: Option<u64>,
    /// Rayon worker threads; does not change any output.
    #[arg(long, env = "KINCYCLE_WORKERS", default_value_t = 1)]
    pub workers: usize,
    /// Use the quick defaults (smaller samples, coarser grids).
    #[arg(long, env = "KINCYCLE_QUICK")]
    pub quick: bool,
    #[arg(long, env = "KINCYCLE_OUT", default_value = "kincycle-out")]
    pub out: PathBuf,
    /// Restrict the domain lists to one domain, e.g. `ellipsoid(2,1,1)`.
    #[arg(long, env = "KINCYCLE_DOMAIN")]
    pub domain: Option<DomainSpec>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment and write CSV tables and report.json.
    Run(RunArgs),
    /// Print the resolved config as TOML.
    Config(RunArgs),
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            experiment: Some(self.experiment),
            seed: self.seed,
            quick: self.quick.then_some(true),
            domain: self.domain,
        }
    }
}

/// Parse `args` and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_PASS };
            let _ = e.print();
            return code;
        }
    };
    let (args, print_only) = match cli.command {
        Command::Run(a) => (a, false),
        Command::Config(a) => (a, true),
    };
    let cfg = match config::load(args.config.as_deref(), &args.overrides()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    if print_only {
        print!("{}", cfg.to_toml());
        return EXIT_PASS;
    }
    if args.workers == 0 {
        eprintln!("config error: --workers must be at least 1");
        return EXIT_CONFIG;
    }
    match execute(&cfg, &args.out, args.workers) {
        Ok(outcomes) if outcomes.iter().all(|o| o.passed()) => EXIT_PASS,
        Ok(_) => EXIT_CHECK_FAILED,
        Err(e) => {
            eprintln!("cannot write results to {}: {e}", args.out.display());
            EXIT_CHECK_FAILED
        }
    }
}
