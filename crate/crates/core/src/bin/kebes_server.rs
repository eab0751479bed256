//! Kebes server over real TCP, operating a simulated host loaded from a
//! state file. One isolated session handler per accepted connection.

use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use clap::Parser;

use nosebreak_lab::kebes::serve_connection;
use nosebreak_lab::lab::LabState;

#[derive(Parser)]
#[command(name = "kebes-server", about = "Encrypted command server for the simulated host")]
struct Cli {
    /// TCP port to listen on (loopback).
    #[arg(long)]
    listen: u16,
    /// Lab state file describing the host to operate.
    #[arg(long)]
    host: PathBuf,
    /// Uid the server process runs under.
    #[arg(long, default_value_t = 33)]
    uid: u32,
    /// Gather key-exchange entropy with real racing threads instead of the
    /// seeded scheduler.
    #[arg(long)]
    live_entropy: bool,
    /// Exit after handling this many connections (0 = serve forever).
    #[arg(long, default_value_t = 0)]
    max_conns: usize,
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
    let mut host = LabState::load(&cli.host)?.into_host()?;
    let pid = host.spawn(cli.uid, "/tmp/.kebes-srv", Default::default());
    let shared = Arc::new(Mutex::new(host));

    let listener = TcpListener::bind(("127.0.0.1", cli.listen))?;
    eprintln!("listening on 127.0.0.1:{} as pid {pid} uid {}", cli.listen, cli.uid);

    let mut served = 0usize;
    let mut workers = Vec::new();
    for stream in listener.incoming() {
        let mut stream = stream?;
        let shared = Arc::clone(&shared);
        let live = cli.live_entropy;
        workers.push(std::thread::spawn(move || {
            if let Err(e) = serve_connection(&mut stream, &shared, pid, live) {
                eprintln!("session ended with error: {e}");
            }
        }));
        served += 1;
        if cli.max_conns != 0 && served >= cli.max_conns {
            break;
        }
    }
    for w in workers {
        let _ = w.join();
    }
    Ok(())
}
