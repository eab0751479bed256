//! Live transport: the same session state machines over a real TCP socket,
//! used by the standalone server and client binaries. The host being
//! operated stays simulated; only the bytes are real.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Mutex;

use super::commands::Reply;
use super::value::Value;
use super::{ClientSession, ServerSession};
use crate::simkernel::Host;
use crate::{Error, Result};

fn read_exact_or_framing(stream: &mut TcpStream, buf: &mut [u8], what: &str) -> Result<()> {
    stream
        .read_exact(buf)
        .map_err(|e| Error::Framing(format!("truncated {what}: {e}")))
}

/// Read one length-prefixed message. Ok(None) means the peer closed cleanly
/// at a message boundary; mid-message EOF is a framing error.
fn read_message(stream: &mut TcpStream, extra: usize, what: &str) -> Result<Option<Vec<u8>>> {
    let mut first = [0u8; 1];
    match stream.read(&mut first) {
        Ok(0) => return Ok(None),
        Ok(1) => {}
        Ok(_) => unreachable!(),
        Err(e) => return Err(Error::Framing(format!("reading {what}: {e}"))),
    }
    let mut prefix = [first[0], 0, 0, 0];
    read_exact_or_framing(stream, &mut prefix[1..], what)?;
    let n = u32::from_be_bytes(prefix) as usize;
    if n > (1 << 24) {
        return Err(Error::Framing(format!("{what} of {n} bytes exceeds bound")));
    }
    let mut rest = vec![0u8; extra + n];
    read_exact_or_framing(stream, &mut rest, what)?;
    let mut out = prefix.to_vec();
    out.extend_from_slice(&rest);
    Ok(Some(out))
}

pub fn read_handshake(stream: &mut TcpStream) -> Result<Vec<u8>> {
    read_message(stream, 0, "handshake")?.ok_or_else(|| Error::Framing("peer closed before handshake".into()))
}

pub fn read_frame(stream: &mut TcpStream) -> Result<Option<Vec<u8>>> {
    read_message(stream, 16, "frame")
}

/// Client-side TCP handshake: send our public, absorb the server's.
pub fn tcp_handshake(stream: &mut TcpStream, client: &mut ClientSession) -> Result<()> {
    stream.write_all(&client.hello())?;
    let reply = read_handshake(stream)?;
    client.feed(&reply)?;
    if !client.established() {
        return Err(Error::Handshake("no key after exchange".into()));
    }
    Ok(())
}

/// One sealed request, one reply frame.
pub fn client_exchange(
    stream: &mut TcpStream,
    client: &mut ClientSession,
    cmds: &[(String, Vec<Value>)],
) -> Result<Vec<Reply>> {
    let (frame, tags) = client.request_frame(cmds)?;
    stream.write_all(&frame)?;
    let mut replies = Vec::new();
    while replies.len() < tags.len() {
        let frame =
            read_frame(stream)?.ok_or_else(|| Error::Framing("server closed mid-exchange".into()))?;
        replies.extend(client.feed(&frame)?);
    }
    Ok(replies)
}

/// Drive one accepted connection to completion. The session ends when the
/// peer closes the stream or the channel tears down.
pub fn serve_connection(stream: &mut TcpStream, host: &Mutex<Host>, pid: u32, live_entropy: bool) -> Result<()> {
    let mut session = {
        let mut guard = host.lock().expect("host lock");
        if live_entropy {
            ServerSession::accept_live(&mut guard, pid)
        } else {
            let nonce = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_nanos() as u64)
                .unwrap_or(0);
            ServerSession::accept(&mut guard, pid, nonce)
        }
    };
    let hello = read_handshake(stream)?;
    {
        let mut guard = host.lock().expect("host lock");
        for msg in session.feed(&mut guard, &hello)? {
            stream.write_all(&msg)?;
        }
    }
    loop {
        let frame = match read_frame(stream)? {
            Some(f) => f,
            None => return Ok(()), // peer hung up at a frame boundary
        };
        let mut guard = host.lock().expect("host lock");
        for msg in session.feed(&mut guard, &frame)? {
            stream.write_all(&msg)?;
        }
    }
}
