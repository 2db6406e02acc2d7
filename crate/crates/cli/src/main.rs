use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use moqgate_core::client::predict_latency_bound;
use moqgate_core::harness::{self, Format, HarnessError};

#[derive(Parser)]
#[command(name = "moqgate", version, about = "Run gated-relay latency scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and report; exits 0 only when every check passes.
    Run {
        scenario: PathBuf,
        /// Write the report into this directory instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "text")]
        format: Format,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Load and check a scenario without running it.
    Validate { scenario: PathBuf },
    /// Print the worst-case latency bound of each filtering client.
    Predict {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Run {
            scenario,
            out,
            format,
            seed,
        } => {
            let mut s = harness::load_scenario(&scenario)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let report = match harness::run_scenario(&s) {
                Ok(r) => r,
                Err(HarnessError::Timeout { cap_ms, partial }) => {
                    eprint!("{}", harness::render_text(&partial));
                    anyhow::bail!("virtual time cap of {cap_ms} ms exceeded");
                }
                Err(e) => return Err(e.into()),
            };
            match out {
                Some(dir) => {
                    let path = harness::report_render(&report, format, &dir)
                        .with_context(|| format!("writing report to {}", dir.display()))?;
                    print!("{}", harness::render_text(&report));
                    println!("wrote {}", path.display());
                }
                None => print!("{}", harness::render(&report, format)),
            }
            Ok(report.passed())
        }
        Command::Validate { scenario } => {
            let s = harness::load_scenario(&scenario)?;
            println!(
                "{}: ok ({} clients, {} groups)",
                s.name,
                s.clients.len(),
                s.source.group_count()
            );
            Ok(true)
        }
        Command::Predict { scenario, seed } => {
            let mut s = harness::load_scenario(&scenario)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let links = harness::resolve_links(&s);
            for (client, model) in harness::latency_models(&s, &links) {
                match predict_latency_bound(&model) {
                    Ok(ms) => println!("{}: {ms} ms", client.name),
                    Err(e) => println!("{}: {e}", client.name),
                }
            }
            Ok(true)
        }
    }
}
