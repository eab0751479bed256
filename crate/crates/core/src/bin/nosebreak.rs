//! Standalone detector: loads a lab state file, runs the requested
//! techniques against it, and emits the reports as a JSON array.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nosebreak_lab::lab::LabState;
use nosebreak_lab::nosebreak::{run_technique, DetectConfig, TECHNIQUES};

#[derive(Parser)]
#[command(name = "nosebreak", about = "Monitor and honeywall detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run detection techniques against a host state file.
    Detect {
        /// Lab state file (JSON). See `write-state` for a template.
        #[arg(long)]
        host: PathBuf,
        /// Run every technique.
        #[arg(long, conflicts_with = "technique")]
        all: bool,
        /// Run one named technique (repeatable).
        #[arg(long)]
        technique: Vec<String>,
        /// Emit reports as a JSON array (default output is one line each).
        #[arg(long)]
        json: bool,
    },
    /// Write the default lab state to a file, as a starting template.
    WriteState { path: PathBuf },
    /// List technique names.
    List,
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> nosebreak_lab::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::List => {
            for t in TECHNIQUES {
                println!("{t}");
            }
            Ok(())
        }
        Command::WriteState { path } => {
            let state = LabState::default_lab();
            std::fs::write(&path, serde_json::to_string_pretty(&state)?)?;
            println!("state written to {}", path.display());
            Ok(())
        }
        Command::Detect { host, all, technique, json } => {
            let mut lab = LabState::load(&host)?.into_lab()?;
            let names: Vec<String> = if all || technique.is_empty() {
                TECHNIQUES.iter().map(|s| s.to_string()).collect()
            } else {
                technique
            };
            let cfg = DetectConfig::default();
            let mut reports = Vec::new();
            for name in &names {
                reports.push(run_technique(&mut lab, name, &cfg)?);
            }
            if json {
                println!("{}", serde_json::to_string_pretty(&reports)?);
            } else {
                for r in &reports {
                    println!("{:<20} {:?}", r.technique, r.verdict);
                }
            }
            Ok(())
        }
    }
}
