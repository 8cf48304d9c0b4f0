use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedsysid_cli::{cmd_compare, cmd_generate, cmd_run, parse_seeds, RunOptions};

#[derive(Parser)]
#[command(name = "fedsysid", version, about = "Federated state-space identification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Seed list overriding the configuration, e.g. `1-20` or `1,4,9`.
    #[arg(long)]
    seeds: Option<String>,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic worker datasets, a manifest and the truth model.
    Generate(Common),
    /// Run every seed and write results.csv and summary.json.
    Run(Common),
    /// Rank-sum comparison of two results files.
    Compare {
        results_a: PathBuf,
        results_b: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn options(c: &Common) -> anyhow::Result<RunOptions> {
    Ok(RunOptions {
        out: c.out.clone(),
        force: c.force,
        seeds: c.seeds.as_deref().map(parse_seeds).transpose()?,
        threads: c.threads,
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(c) => {
            for dir in cmd_generate(&c.config, &options(&c)?)? {
                eprintln!("wrote {}", dir.display());
            }
        }
        Command::Run(c) => {
            for out in cmd_run(&c.config, &options(&c)?)? {
                let s = &out.summary;
                eprintln!(
                    "{}: {} seeds, {} unstable, {} failed to learn -> {}",
                    out.name,
                    s.seeds,
                    s.unstable,
                    s.failed_to_learn,
                    out.dir.display()
                );
            }
        }
        Command::Compare { results_a, results_b, out } => {
            let report = cmd_compare(&results_a, &results_b)?;
            let text = serde_json::to_string_pretty(&report)? + "\n";
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
