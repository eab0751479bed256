//! Kebes client over real TCP: key exchange, then a scripted command list,
//! replies printed as JSON.

use std::net::TcpStream;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use nosebreak_lab::kebes::{client_exchange, tcp_handshake, ClientSession, Value, ADDCOMMAND};
use nosebreak_lab::scenario::ScriptedCommand;

#[derive(Parser)]
#[command(name = "kebes-client", about = "Encrypted command client")]
struct Cli {
    /// Server address, host:port.
    #[arg(long)]
    connect: String,
    /// Command script: a JSON array of {"add": {...}} / {"invoke": {...}}
    /// entries.
    #[arg(long)]
    script: PathBuf,
    /// Client entropy seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
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
    let script: Vec<ScriptedCommand> = serde_json::from_str(&std::fs::read_to_string(&cli.script)?)?;

    let seed = if cli.seed != 0 {
        cli.seed
    } else {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(1)
    };
    let mut client = ClientSession::new(seed);
    let mut stream = TcpStream::connect(&cli.connect)?;
    tcp_handshake(&mut stream, &mut client)?;
    eprintln!("key exchange complete with {}", cli.connect);

    let mut out = Vec::new();
    for entry in &script {
        let (name, params) = match entry {
            ScriptedCommand::Add { name, handler } => (
                ADDCOMMAND.to_string(),
                vec![Value::text(name), Value::Bytes(Value::text(handler).encode())],
            ),
            ScriptedCommand::Invoke { name, params } => {
                let vals: Vec<Value> =
                    params.iter().map(Value::from_json).collect::<nosebreak_lab::Result<_>>()?;
                (name.clone(), vals)
            }
        };
        let replies = client_exchange(&mut stream, &mut client, &[(name.clone(), params)])?;
        for r in replies {
            out.push(serde_json::json!({
                "command": name,
                "tag": String::from_utf8_lossy(&r.tag),
                "status": r.status,
                "result": r.result.to_json(),
            }));
        }
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}
