use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sddm_cli::commands::{self, CommonOpts};
use sddm_cli::suites::Suite;
use sddm_cli::CliError;

#[derive(Parser)]
#[command(name = "sddm", version, about = "Score-decomposed diffusion sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Translate a reference image with the guided sampler.
    Translate(Common),
    /// Run the low-pass guided baseline.
    Ilvr(Common),
    /// Run a verification suite; exits 6 if a gate fails.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        suite: Suite,
    },
    /// Sweep one config key and tabulate SSIM, PNI and runtime.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// KEY=V1,V2,...
        #[arg(long)]
        sweep: String,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// KEY=VALUE override with a dotted key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "ref")]
    ref_path: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn opts(&self) -> CommonOpts {
        CommonOpts {
            config: self.config.clone(),
            set: self.set.clone(),
            seed: self.seed,
            ref_path: self.ref_path.clone(),
            out: self.out.clone(),
            report: self.report.clone(),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = match &cli.command {
        Command::Translate(c) | Command::Ilvr(c) => c,
        Command::Verify { common, .. } | Command::Ablate { common, .. } => common,
    };
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            return Err(CliError::config("--jobs must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::config(format!("cannot size worker pool: {e}")))?;
    }
    let opts = common.opts();
    match &cli.command {
        Command::Translate(_) => commands::translate(&opts),
        Command::Ilvr(_) => commands::ilvr(&opts),
        Command::Verify { suite, .. } => commands::verify(&opts, *suite),
        Command::Ablate { sweep, .. } => commands::ablate(&opts, sweep),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
