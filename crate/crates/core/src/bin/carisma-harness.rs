use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use carisma_core::harness::{run_scenario, sibling_echo_binary, ScenarioId, ScenarioReport, Topology};

#[derive(Debug, Parser)]
#[command(name = "carisma-harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Runs one scenario, or `all`.
    Run {
        scenario: String,
        /// Topology file; defaults to the fixed-port layout.
        #[arg(long)]
        topology: Option<PathBuf>,
        /// Where to write the JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Echo service binary; defaults to the one next to this executable.
        #[arg(long)]
        echo_bin: Option<PathBuf>,
    },
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .init();
    let Command::Run { scenario, topology, report, echo_bin } = Cli::parse().command;

    let ids: Vec<ScenarioId> = if scenario == "all" {
        ScenarioId::ALL.to_vec()
    } else {
        match scenario.parse() {
            Ok(id) => vec![id],
            Err(err) => {
                eprintln!("carisma-harness: {err}");
                return ExitCode::from(2);
            }
        }
    };
    let topology = match topology {
        Some(path) => match Topology::load(&path) {
            Ok(t) => t,
            Err(err) => {
                eprintln!("carisma-harness: {err}");
                return ExitCode::from(2);
            }
        },
        None => {
            let needed = ids.iter().map(|id| id.min_nodes()).max().unwrap_or(1);
            Topology::standard(needed)
        }
    };
    let echo_bin = match echo_bin.map(Ok).unwrap_or_else(sibling_echo_binary) {
        Ok(path) => path,
        Err(err) => {
            eprintln!("carisma-harness: cannot locate carisma-echo: {err}");
            return ExitCode::FAILURE;
        }
    };

    let mut reports: Vec<ScenarioReport> = Vec::new();
    let mut all_ok = true;
    for id in ids {
        match run_scenario(id, &topology, &echo_bin).await {
            Ok(report) => {
                println!("{report}");
                all_ok &= report.as_expected();
                reports.push(report);
            }
            Err(err) => {
                println!("{id}: error: {err}");
                all_ok = false;
            }
        }
    }

    if let Some(path) = report {
        let json = serde_json::to_string_pretty(&reports).expect("serializable");
        if let Err(err) = std::fs::write(&path, json) {
            eprintln!("carisma-harness: cannot write {}: {err}", path.display());
            return ExitCode::FAILURE;
        }
    }
    if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
