use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use certibound::problems::list_problems;
use certibound::runner::{run, validate_file, RunError};

#[derive(Parser)]
#[command(name = "certibound", version, about = "Certified bounds and splitting estimates for rare-event probabilities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a run configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory, overriding the one in the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Check a run configuration without executing it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the registered problem ids.
    ListProblems,
}

fn fail(err: RunError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, output } => {
            let (cfg, validation) = match validate_file(&config) {
                Ok(v) => v,
                Err(e) => return fail(e),
            };
            for w in &validation.warnings {
                eprintln!("warning: {w}");
            }
            match run(&cfg, output.as_deref()) {
                Ok(report) => {
                    println!("g calls: {}", report.g_calls);
                    if let Some(b) = report.bounds {
                        println!("bounds: [{}, {}] (gap {})", b.lower, b.upper, b.gap);
                    }
                    if let Some(e) = &report.estimate {
                        println!("estimates: [{}, {}], CI [{}, {}]", e.p_lower_hat, e.p_upper_hat, e.ci[0], e.ci[1]);
                    }
                    if let Some(b) = report.baseline {
                        println!("naive MC: {} ({} hits of {})", b.estimate, b.hits, b.n);
                    }
                    if let Some(a) = &report.adversarial {
                        println!(
                            "identical trees: {}, failure masses {} vs {} (margin {})",
                            a.identical_trees, a.base_failure_mass, a.perturbed_failure_mass, a.margin
                        );
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Validate { config } => match validate_file(&config) {
            Ok((_, validation)) => {
                for w in &validation.warnings {
                    println!("warning: {w}");
                }
                for v in &validation.violations {
                    println!("violation: {v}");
                }
                if validation.is_ok() {
                    println!("ok");
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(2)
                }
            }
            Err(e) => fail(e),
        },
        Command::ListProblems => {
            for (id, description) in list_problems() {
                println!("{id:<22} {description}");
            }
            ExitCode::SUCCESS
        }
    }
}
