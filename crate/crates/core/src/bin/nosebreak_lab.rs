//! Scenario runner: executes a scripted attack scenario against a fresh
//! simulation and writes a machine-checkable report.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nosebreak_lab::scenario;

#[derive(Parser)]
#[command(name = "nosebreak-lab", about = "Deterministic honeynet laboratory scenario runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file (or a builtin name like "nosebreak-full").
    Run {
        scenario: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also export the honeywall capture as a pcap file.
        #[arg(long)]
        pcap: Option<PathBuf>,
    },
    /// Print a scenario definition as JSON (builtin name).
    Show { name: String },
}

fn main() -> ExitCode {
    match run() {
        Ok(ok) => {
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> nosebreak_lab::Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Show { name } => {
            let s = scenario::builtin(&name)
                .ok_or_else(|| nosebreak_lab::Error::Config(format!("unknown builtin {name}")))?;
            println!("{}", serde_json::to_string_pretty(&s)?);
            Ok(true)
        }
        Command::Run { scenario: which, seed, report, pcap } => {
            let path = PathBuf::from(&which);
            let s = if path.exists() {
                scenario::load_scenario(&path)?
            } else {
                scenario::builtin(&which)
                    .ok_or_else(|| nosebreak_lab::Error::Config(format!("no such file or builtin: {which}")))?
            };
            let (rep, lab) = scenario::run(&s, seed)?;
            for step in &rep.steps {
                println!("step {:>2} {:<16} {:<6} {}", step.index, step.kind, step.status, step.detail);
            }
            for a in &rep.assertions {
                println!("assert {:<28} {} ({})", a.name, if a.pass { "pass" } else { "FAIL" }, a.detail);
            }
            println!("collector: {} records, digest {}", rep.collector_records, rep.collector_digest);
            println!("capture:   {} entries, digest {}", rep.capture_entries, rep.capture_digest);
            if let Some(p) = report {
                scenario::export(&rep, &lab, "json", &p)?;
                println!("report written to {}", p.display());
            }
            if let Some(p) = pcap {
                scenario::export(&rep, &lab, "pcap", &p)?;
                println!("pcap written to {}", p.display());
            }
            let steps_ok = rep.steps.iter().all(|s| s.status == "ok");
            let asserts_ok = rep.assertions.iter().all(|a| a.pass);
            Ok(steps_ok && asserts_ok)
        }
    }
}
