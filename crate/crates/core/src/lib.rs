//! A deterministic, desk-scale honeynet laboratory.
//!
//! The lab models a Linux-style host instrumented with a kernel monitor that
//! hooks the read() syscall and exfiltrates everything it sees over hidden UDP,
//! plus the gateway ("honeywall") that records and rewrites traffic. On top of
//! that substrate it implements the attacker's side in full: detectors for the
//! monitor and the wall, a disabler, a decoy generator, and an encrypted
//! command protocol (`kebes`) that operates the host without ever calling
//! read().
//!
//! Everything is simulation: no real syscalls, no real packets, no real
//! exploitation. Runs are reproducible byte-for-byte from a seed.

pub mod honeywall;
pub mod kebes;
pub mod lab;
pub mod netsim;
pub mod nosebreak;
pub mod scenario;
pub mod sebek;
pub mod simkernel;

pub use lab::Lab;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("resource exhausted: {0}")]
    Resource(String),
    #[error("bad descriptor {fd} for pid {pid}")]
    Descriptor { pid: u32, fd: u32 },
    #[error("no such process: {0}")]
    Process(u32),
    #[error("operation would block")]
    WouldBlock,
    #[error("state error: {0}")]
    State(String),
    #[error("lookup failed: {0}")]
    Lookup(String),
    #[error("unsupported mapping: {0}")]
    UnsupportedMapping(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("permission denied for uid {uid}: {what}")]
    Privilege { uid: u32, what: String },
    #[error("kernel fault at {0:#010x}")]
    Fault(u32),
    #[error("exec failed: {0}")]
    Exec(String),
    #[error("extraction failed: {0}")]
    Extraction(String),
    #[error("handshake error: {0}")]
    Handshake(String),
    #[error("framing error: {0}")]
    Framing(String),
    #[error("channel error: {0}")]
    Channel(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
