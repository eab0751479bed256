//! The wiring harness: one simulated host, the gateway, the monitor's
//! collector and the outside endpoints, driven by a single-owner tick loop.
//! All mutation funnels through `Lab::tick`, which keeps runs deterministic.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use crate::honeywall::{ConnLimitPolicy, ForwardResult, Honeywall, RewriteRule};
use crate::netsim::{Delivery, Network, Packet, ProbeState, Proto, TopologyConfig, PING_TIMEOUT_MS};
use crate::sebek::{Collector, SebekConfig};
use crate::simkernel::{Host, HostConfig};
use crate::{Error, Result};

pub const HOST_EP: &str = "host";
pub const COLLECTOR_EP: &str = "collector";
pub const CLIENT_EP: &str = "client";
pub const PEER_EP: &str = "peer";

/// UDP echo service port on the peer endpoint.
pub const ECHO_PORT: u16 = 7;

pub struct LabConfig {
    pub host: HostConfig,
    pub topology: TopologyConfig,
    pub sebek: Option<SebekConfig>,
    pub wall_rules: Option<Vec<RewriteRule>>,
    pub wall_policy: ConnLimitPolicy,
    pub seed: u64,
}

/// On-disk lab state for the standalone binaries: host configuration, an
/// optionally installed monitor, and the topology.
#[derive(serde::Serialize, serde::Deserialize)]
pub struct LabState {
    pub host: HostConfig,
    #[serde(default)]
    pub sebek: Option<SebekConfig>,
    #[serde(default)]
    pub topology: Option<TopologyConfig>,
    #[serde(default = "LabState::default_seed")]
    pub seed: u64,
}

impl LabState {
    fn default_seed() -> u64 {
        1
    }

    pub fn default_lab() -> Self {
        LabState {
            host: HostConfig::default_lab(),
            sebek: Some(SebekConfig::default_lab()),
            topology: None,
            seed: 1,
        }
    }

    pub fn load(path: &std::path::Path) -> Result<LabState> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn into_lab(self) -> Result<Lab> {
        Lab::new(LabConfig {
            host: self.host,
            topology: self.topology.unwrap_or_else(TopologyConfig::default_lab),
            sebek: self.sebek,
            wall_rules: None,
            wall_policy: ConnLimitPolicy::default(),
            seed: self.seed,
        })
    }

    /// Host-only build for the live server binary, which talks real TCP and
    /// needs no simulated network.
    pub fn into_host(self) -> Result<Host> {
        let mut host = Host::boot(self.host)?;
        if let Some(cfg) = self.sebek {
            crate::sebek::install(&mut host, cfg)?;
        }
        Ok(host)
    }
}

impl Default for LabConfig {
    fn default() -> Self {
        LabConfig {
            host: HostConfig::default_lab(),
            topology: TopologyConfig::default_lab(),
            sebek: Some(SebekConfig::default_lab()),
            wall_rules: None,
            wall_policy: ConnLimitPolicy::default(),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientConn {
    pub id: u32,
    pub local_port: u16,
    pub remote_ip: Ipv4Addr,
    pub remote_port: u16,
    pub inbox: Vec<u8>,
}

struct DdLoad {
    pid: u32,
    fd: u32,
    reads_per_tick: u32,
    active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadHandle(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PingOutcome {
    Rtt(f64),
    TimedOut { effective_ms: f64 },
    Unreachable,
}

impl PingOutcome {
    /// Millisecond value a scripted measurement records for this outcome.
    pub fn effective_ms(&self) -> f64 {
        match self {
            PingOutcome::Rtt(ms) => *ms,
            PingOutcome::TimedOut { effective_ms } => *effective_ms,
            PingOutcome::Unreachable => PING_TIMEOUT_MS,
        }
    }
}

pub struct Lab {
    pub host: Host,
    pub net: Network,
    pub wall: Option<Honeywall>,
    pub collector: Collector,
    pub seed: u64,
    wall_ep: Option<String>,
    loads: Vec<DdLoad>,
    pending_sends: Vec<(String, Packet)>,
    pub client_conns: BTreeMap<u32, ClientConn>,
    next_conn: u32,
    next_client_port: u16,
    /// Packets delivered at the host that matched no socket.
    pub host_raw_inbox: Vec<Packet>,
    /// Packets delivered at the client endpoint that matched no connection.
    pub client_raw_inbox: Vec<Packet>,
    /// Kebes server sessions keyed by host socket id.
    pub kebes_servers: BTreeMap<u32, crate::kebes::ServerSession>,
    accept_nonce: u64,
}

impl Lab {
    pub fn new(config: LabConfig) -> Result<Lab> {
        let net = Network::build(&config.topology)?;
        let mut host = Host::boot(config.host)?;
        host.ip = net.endpoint_ip(HOST_EP)?;
        let wall_ep = config.topology.wall.clone();
        let wall = match &wall_ep {
            Some(_) => {
                let rules = config.wall_rules.unwrap_or_else(crate::honeywall::default_rules);
                Some(Honeywall::new(rules, config.wall_policy, vec![host.ip]))
            }
            None => None,
        };
        let (magic, port) = match &config.sebek {
            Some(c) => (c.magic, c.dst_port),
            None => {
                let d = SebekConfig::default_lab();
                (d.magic, d.dst_port)
            }
        };
        if let Some(sebek_cfg) = config.sebek {
            crate::sebek::install(&mut host, sebek_cfg)?;
        }
        Ok(Lab {
            host,
            net,
            wall,
            collector: Collector::new(magic, port),
            seed: config.seed,
            wall_ep,
            loads: Vec::new(),
            pending_sends: Vec::new(),
            client_conns: BTreeMap::new(),
            next_conn: 1,
            next_client_port: 40_000,
            host_raw_inbox: Vec::new(),
            client_raw_inbox: Vec::new(),
            kebes_servers: BTreeMap::new(),
            accept_nonce: 0,
        })
    }

    pub fn default_with_sebek(sebek: Option<SebekConfig>) -> Result<Lab> {
        Lab::new(LabConfig { sebek, ..LabConfig::default() })
    }

    // -- tick loop ------------------------------------------------------------

    /// Sub-steps per tick: load arrivals interleave with link service inside
    /// a tick so that an overprovisioned link drains between bursts, while a
    /// saturated one pins its queue full.
    const SUBSTEPS: u32 = 10;
    /// Manual sends contend for queue space after most of the tick's load
    /// has arrived, like a process getting scheduled mid-flood.
    const INJECT_SUBSTEP: u32 = 7;

    /// Advance the world by one tick: per sub-step the load generators emit
    /// their share, queued manual sends join at their slot, and links service
    /// within the tick's byte budget, cascading same-tick deliveries until
    /// quiescent.
    pub fn tick(&mut self) {
        self.net.begin_tick();
        self.host.clock.tick = self.net.tick;
        for substep in 0..Self::SUBSTEPS {
            self.run_loads(substep);
            self.flush_host_egress();
            if substep == Self::INJECT_SUBSTEP {
                for (at, packet) in std::mem::take(&mut self.pending_sends) {
                    if at == HOST_EP && !packet.hidden {
                        self.host.local_capture.push(packet.clone());
                    }
                    let _ = self.net.enqueue(&at, packet);
                }
            }
            loop {
                let deliveries = self.net.service_once();
                if deliveries.is_empty() {
                    break;
                }
                for d in deliveries {
                    if d.from == HOST_EP {
                        self.host.account_tx(&d.packet);
                    }
                    self.deliver(d);
                }
                self.flush_host_egress();
            }
        }
        self.net.end_tick();
    }

    pub fn run_ticks(&mut self, n: u64) {
        for _ in 0..n {
            self.tick();
        }
    }

    /// Tick until the host-side uplink queue is empty (plus one settling
    /// tick), bounded by `max` ticks.
    pub fn drain(&mut self, max: u64) {
        for _ in 0..max {
            self.tick();
            let busy = self
                .wall_ep
                .as_ref()
                .and_then(|w| self.net.link(HOST_EP, w))
                .is_some_and(|l| l.queue_len() > 0);
            if !busy && self.host.egress.is_empty() {
                self.tick();
                return;
            }
        }
    }

    fn run_loads(&mut self, substep: u32) {
        for i in 0..self.loads.len() {
            if !self.loads[i].active {
                continue;
            }
            let DdLoad { pid, fd, reads_per_tick, .. } = self.loads[i];
            let share = reads_per_tick / Self::SUBSTEPS
                + u32::from(substep < reads_per_tick % Self::SUBSTEPS);
            for _ in 0..share {
                let _ = self.host.sys_read(pid, fd, 1);
            }
        }
    }

    fn flush_host_egress(&mut self) {
        while let Some(p) = self.host.egress.pop_front() {
            let _ = self.net.enqueue(HOST_EP, p);
        }
    }

    fn deliver(&mut self, d: Delivery) {
        // Transit: a packet arriving at an endpoint that is not its
        // destination moves on. The wall endpoint filters and rewrites;
        // anything else forwards transparently.
        let at_ip = self.net.endpoint_ip(&d.at).unwrap();
        if d.packet.dst != at_ip {
            if self.wall_ep.as_deref() == Some(d.at.as_str()) {
                if let Some(wall) = self.wall.as_mut() {
                    let tick = self.net.tick;
                    match wall.forward(tick, d.packet) {
                        ForwardResult::Forwarded(p) => {
                            let _ = self.net.enqueue(&d.at, p);
                        }
                        ForwardResult::Blocked => {}
                    }
                    return;
                }
            }
            let _ = self.net.enqueue(&d.at, d.packet);
            return;
        }

        // Endpoint-local handling.
        if let Proto::IcmpEchoRequest { id } = d.packet.proto {
            let reply = Packet {
                src: d.packet.dst,
                dst: d.packet.src,
                proto: Proto::IcmpEchoReply { id },
                src_port: 0,
                dst_port: 0,
                payload: d.packet.payload.clone(),
                hidden: false,
                device: String::new(),
            };
            if d.at == HOST_EP {
                self.host.account_rx(&d.packet);
            }
            let _ = self.net.enqueue(&d.at, reply);
            return;
        }
        if let Proto::IcmpEchoReply { id } = d.packet.proto {
            self.net.resolve_probe(id);
            if d.at == HOST_EP {
                self.host.account_rx(&d.packet);
            }
            return;
        }

        match d.at.as_str() {
            HOST_EP => self.deliver_to_host(d.packet),
            COLLECTOR_EP => self.collector.receive(&d.packet),
            CLIENT_EP => self.deliver_to_client(d.packet),
            PEER_EP => self.deliver_to_peer(d.packet),
            _ => {}
        }
    }

    fn deliver_to_host(&mut self, packet: Packet) {
        self.host.account_rx(&packet);
        if !packet.hidden {
            self.host.local_capture.push(packet.clone());
        }
        // New connection to a declared listener?
        if let Proto::Tcp { syn: true } = packet.proto {
            if let Some(pos) = self.host.pending_listeners.iter().position(|(_, port)| *port == packet.dst_port) {
                let (pid, port) = self.host.pending_listeners[pos];
                let socket = self.host.socket_create(port, packet.src, packet.src_port);
                self.accept_nonce += 1;
                let session = crate::kebes::ServerSession::accept(
                    &mut self.host,
                    pid,
                    self.seed ^ self.accept_nonce.wrapping_mul(0x9e37_79b9),
                );
                self.kebes_servers.insert(socket, session);
                return;
            }
        }
        // Match an open socket by (local port, peer).
        let sock_id = self
            .host
            .sockets
            .values()
            .find(|s| s.local_port == packet.dst_port && s.peer_ip == packet.src && s.peer_port == packet.src_port)
            .map(|s| s.id);
        match sock_id {
            Some(id) => {
                let _ = self.host.socket_push_inbound(id, &packet.payload);
            }
            None => self.host_raw_inbox.push(packet),
        }
    }

    fn deliver_to_client(&mut self, packet: Packet) {
        let conn = self
            .client_conns
            .values_mut()
            .find(|c| c.local_port == packet.dst_port && c.remote_ip == packet.src);
        match conn {
            Some(c) => c.inbox.extend_from_slice(&packet.payload),
            None => self.client_raw_inbox.push(packet),
        }
    }

    fn deliver_to_peer(&mut self, packet: Packet) {
        match packet.proto {
            Proto::Udp if packet.dst_port == ECHO_PORT => {
                let reply = Packet {
                    src: packet.dst,
                    dst: packet.src,
                    proto: Proto::Udp,
                    src_port: ECHO_PORT,
                    dst_port: packet.src_port,
                    payload: packet.payload.clone(),
                    hidden: false,
                    device: String::new(),
                };
                let _ = self.net.enqueue(PEER_EP, reply);
            }
            Proto::Tcp { syn: true } => {
                let reply = Packet {
                    src: packet.dst,
                    dst: packet.src,
                    proto: Proto::Tcp { syn: false },
                    src_port: packet.dst_port,
                    dst_port: packet.src_port,
                    payload: b"SYNACK".to_vec(),
                    hidden: false,
                    device: String::new(),
                };
                let _ = self.net.enqueue(PEER_EP, reply);
            }
            _ => {}
        }
    }

    // -- manual traffic --------------------------------------------------------

    /// Queue a packet for injection at an endpoint during the next tick,
    /// after the load generators have had their turn.
    pub fn send_from(&mut self, endpoint: &str, packet: Packet) {
        self.pending_sends.push((endpoint.to_string(), packet));
    }

    /// ICMP echo measurement. Tail-dropped echoes resolve as a timeout with
    /// the conventional 5000 ms effective value.
    pub fn ping(&mut self, from: &str, to: &str) -> PingOutcome {
        if from == to {
            return PingOutcome::Rtt(0.0);
        }
        if !self.net.reachable(from, to) {
            return PingOutcome::Unreachable;
        }
        let id = self.net.new_probe();
        let packet = Packet {
            src: self.net.endpoint_ip(from).unwrap(),
            dst: self.net.endpoint_ip(to).unwrap(),
            proto: Proto::IcmpEchoRequest { id },
            src_port: 0,
            dst_port: 0,
            payload: vec![0u8; 56],
            hidden: false,
            device: if from == HOST_EP { self.host.default_device() } else { String::new() },
        };
        self.send_from(from, packet);
        let base = 2.0 * self.net.path_base_latency(from, to).unwrap_or(0.0);
        for _ in 0..(PING_TIMEOUT_MS as u64) {
            self.tick();
            match self.net.probe(id).map(|p| (p.state, p.waited_ticks)) {
                Some((ProbeState::Delivered, waited)) => {
                    return PingOutcome::Rtt(base + waited as f64);
                }
                Some((ProbeState::Dropped, _)) => {
                    return PingOutcome::TimedOut { effective_ms: PING_TIMEOUT_MS };
                }
                _ => {}
            }
        }
        PingOutcome::TimedOut { effective_ms: PING_TIMEOUT_MS }
    }

    /// Schedule a stream of one-byte reads of /dev/zero per tick. With the
    /// monitor installed each read costs ~97 wire bytes of hidden logging;
    /// without it the reads stay local.
    pub fn drive_dd_load(&mut self, reads_per_tick: u32) -> Result<LoadHandle> {
        let pid = self.host.spawn(1000, "/bin/dd", BTreeMap::new());
        let fd = self.host.open(pid, "/dev/zero")?;
        self.loads.push(DdLoad { pid, fd, reads_per_tick, active: true });
        Ok(LoadHandle(self.loads.len() - 1))
    }

    pub fn stop_load(&mut self, handle: LoadHandle) {
        if let Some(l) = self.loads.get_mut(handle.0) {
            l.active = false;
        }
    }

    // -- kebes plumbing --------------------------------------------------------

    /// Open a client-side connection to a host port (SYN goes through the
    /// wall like any other packet).
    pub fn client_connect(&mut self, remote_port: u16) -> u32 {
        let id = self.next_conn;
        self.next_conn += 1;
        let local_port = self.next_client_port;
        self.next_client_port += 1;
        let conn = ClientConn {
            id,
            local_port,
            remote_ip: self.host.ip,
            remote_port,
            inbox: Vec::new(),
        };
        let syn = Packet {
            src: self.net.endpoint_ip(CLIENT_EP).unwrap(),
            dst: self.host.ip,
            proto: Proto::Tcp { syn: true },
            src_port: local_port,
            dst_port: remote_port,
            payload: Vec::new(),
            hidden: false,
            device: String::new(),
        };
        self.send_from(CLIENT_EP, syn);
        self.client_conns.insert(id, conn);
        id
    }

    pub fn client_send(&mut self, conn_id: u32, bytes: &[u8]) -> Result<()> {
        let conn = self.client_conns.get(&conn_id).ok_or_else(|| Error::Lookup(format!("conn {conn_id}")))?;
        let packet = Packet {
            src: self.net.endpoint_ip(CLIENT_EP).unwrap(),
            dst: conn.remote_ip,
            proto: Proto::Tcp { syn: false },
            src_port: conn.local_port,
            dst_port: conn.remote_port,
            payload: bytes.to_vec(),
            hidden: false,
            device: String::new(),
        };
        self.send_from(CLIENT_EP, packet);
        Ok(())
    }

    pub fn client_take_inbox(&mut self, conn_id: u32) -> Vec<u8> {
        self.client_conns.get_mut(&conn_id).map(|c| std::mem::take(&mut c.inbox)).unwrap_or_default()
    }

    /// Let every kebes server session consume its socket backlog and queue
    /// replies. Sessions read via recv(), never through the read hook.
    pub fn pump_kebes(&mut self) {
        let ids: Vec<u32> = self.kebes_servers.keys().copied().collect();
        for socket in ids {
            let mut session = self.kebes_servers.remove(&socket).unwrap();
            while let Ok(bytes) = self.host.recv(session.pid, socket) {
                match session.feed(&mut self.host, &bytes) {
                    Ok(replies) => {
                        for frame in replies {
                            let _ = self.host.socket_send(socket, frame);
                        }
                    }
                    Err(_) => break, // session torn down; stop reading
                }
            }
            self.kebes_servers.insert(socket, session);
        }
    }

    /// One full client/server exchange cadence: deliver client bytes, pump
    /// the sessions, deliver replies.
    pub fn settle(&mut self) {
        for _ in 0..4 {
            self.run_ticks(2);
            self.pump_kebes();
        }
        self.run_ticks(2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lab_with_monitor() -> Lab {
        Lab::new(LabConfig::default()).unwrap()
    }

    fn lab_clean() -> Lab {
        Lab::new(LabConfig { sebek: None, ..LabConfig::default() }).unwrap()
    }

    #[test]
    fn idle_ping_to_gateway_is_exactly_0_7_ms() {
        let mut lab = lab_clean();
        for _ in 0..3 {
            match lab.ping(HOST_EP, "wall") {
                PingOutcome::Rtt(ms) => assert!((ms - 0.7).abs() < 1e-9, "rtt {ms}"),
                other => panic!("expected rtt, got {other:?}"),
            }
        }
    }

    #[test]
    fn self_ping_has_no_queueing_component() {
        let mut lab = lab_clean();
        assert_eq!(lab.ping(HOST_EP, HOST_EP), PingOutcome::Rtt(0.0));
    }

    #[test]
    fn unreachable_endpoint_times_out_distinctly() {
        let mut lab = lab_clean();
        assert_eq!(lab.ping(HOST_EP, "nowhere"), PingOutcome::Unreachable);
    }

    #[test]
    fn hidden_records_reach_collector_through_the_wall() {
        let mut lab = lab_with_monitor();
        let pid = lab.host.spawn(1000, "/bin/dd", BTreeMap::new());
        let fd = lab.host.open(pid, "/dev/zero").unwrap();
        for _ in 0..5 {
            lab.host.sys_read(pid, fd, 1).unwrap();
        }
        lab.run_ticks(3);
        assert_eq!(lab.collector.log.len(), 5);
        // The wall saw the hidden packets; the host-local capture did not.
        let wall = lab.wall.as_ref().unwrap();
        let hidden = wall.capture_query(&crate::honeywall::CaptureFilter {
            stage: Some(crate::honeywall::Stage::Pre),
            hidden: Some(true),
            ..Default::default()
        });
        assert_eq!(hidden.len(), 5);
        assert!(lab.host.local_capture.iter().all(|p| !p.hidden));
    }

    #[test]
    fn dd_load_without_monitor_stays_local() {
        let mut lab = lab_clean();
        let before = lab.host.device_stats("eth0").unwrap();
        lab.drive_dd_load(1000).unwrap();
        lab.run_ticks(3);
        let after = lab.host.device_stats("eth0").unwrap();
        assert_eq!(before.tx_bytes, after.tx_bytes);
        assert_eq!(lab.collector.log.len(), 0);
    }

    #[test]
    fn saturating_dd_load_drops_monitor_packets_within_two_ticks() {
        let mut lab = lab_with_monitor();
        lab.drive_dd_load(10_000).unwrap();
        lab.run_ticks(2);
        let link = lab.net.link(HOST_EP, "wall").unwrap();
        assert!(link.stats.dropped > 0, "expected drops, stats {:?}", link.stats);
        assert!(lab.net.conservation_holds());
    }

    #[test]
    fn single_read_per_tick_leaves_rtt_unchanged_within_one_percent() {
        let mut lab = lab_with_monitor();
        let baseline = match lab.ping(HOST_EP, "wall") {
            PingOutcome::Rtt(ms) => ms,
            other => panic!("{other:?}"),
        };
        lab.drive_dd_load(1).unwrap();
        lab.run_ticks(2);
        let loaded = match lab.ping(HOST_EP, "wall") {
            PingOutcome::Rtt(ms) => ms,
            other => panic!("{other:?}"),
        };
        assert!((loaded - baseline).abs() / baseline < 0.01);
        let link = lab.net.link(HOST_EP, "wall").unwrap();
        assert_eq!(link.stats.dropped, 0);
    }

    #[test]
    fn saturated_queue_times_out_the_echo() {
        let mut lab = lab_with_monitor();
        lab.drive_dd_load(10_000).unwrap();
        lab.run_ticks(2);
        match lab.ping(HOST_EP, "wall") {
            PingOutcome::TimedOut { effective_ms } => assert_eq!(effective_ms, PING_TIMEOUT_MS),
            other => panic!("expected timeout under saturation, got {other:?}"),
        }
    }

    #[test]
    fn amplification_is_at_least_96x_per_read() {
        let mut lab = lab_with_monitor();
        lab.drive_dd_load(100).unwrap();
        lab.run_ticks(1);
        let link = lab.net.link(HOST_EP, "wall").unwrap();
        assert_eq!(link.stats.enqueued, 100);
        // Every read produced a ~97-byte wire packet.
        let wall = lab.wall.as_ref().unwrap();
        lab_assert_wire(wall, 100);
    }

    fn lab_assert_wire(wall: &Honeywall, reads: usize) {
        let hidden = wall.capture_query(&crate::honeywall::CaptureFilter {
            stage: Some(crate::honeywall::Stage::Pre),
            hidden: Some(true),
            ..Default::default()
        });
        let wire: usize = hidden.iter().map(|e| e.packet.wire_len()).sum();
        assert!(wire >= 96 * hidden.len());
        assert!(hidden.len() <= reads);
    }

    #[test]
    fn rtt_is_monotone_in_queue_occupancy() {
        let mut last = 0.0f64;
        let mut seen = Vec::new();
        for load in [0u32, 2_000, 5_000, 10_000] {
            let mut lab = lab_with_monitor();
            if load > 0 {
                lab.drive_dd_load(load).unwrap();
                lab.run_ticks(2);
            }
            let ms = lab.ping(HOST_EP, "wall").effective_ms();
            assert!(ms + 1e-9 >= last, "load {load}: {ms} < {last}");
            seen.push(ms);
            last = ms;
        }
        assert!(seen[3] > seen[0], "saturation must dominate idle");
    }

    #[test]
    fn capture_fidelity_pre_matches_sender_and_post_matches_receiver() {
        let mut lab = lab_clean();
        let peer_ip = lab.net.endpoint_ip(PEER_EP).unwrap();
        let chunks: [&[u8]; 3] = [b"call /bin/sh now", b"plain data", b"and /bin/sh again"];
        for (i, c) in chunks.iter().enumerate() {
            let packet = Packet {
                src: lab.host.ip,
                dst: peer_ip,
                proto: Proto::Udp,
                src_port: 6000 + i as u16,
                dst_port: ECHO_PORT,
                payload: c.to_vec(),
                hidden: false,
                device: lab.host.default_device(),
            };
            lab.send_from(HOST_EP, packet);
            lab.run_ticks(2);
        }
        lab.run_ticks(4);
        let wall = lab.wall.as_ref().unwrap();
        let flow = |stage| {
            let mut out = Vec::new();
            for e in wall.capture_query(&crate::honeywall::CaptureFilter {
                stage: Some(stage),
                direction: Some(crate::honeywall::Direction::Outbound),
                ..Default::default()
            }) {
                out.extend_from_slice(&e.packet.payload);
            }
            out
        };
        let sent: Vec<u8> = chunks.concat();
        assert_eq!(flow(crate::honeywall::Stage::Pre), sent, "pre-rewrite side is what the sender emitted");
        let received: Vec<u8> = lab
            .host_raw_inbox
            .iter()
            .flat_map(|p| p.payload.iter().copied())
            .collect();
        assert_eq!(
            flow(crate::honeywall::Stage::Post),
            received,
            "post-rewrite side is what the receiver observed"
        );
        assert!(crate::honeywall::contains(&received, b"/ben/sh"));
    }

    #[test]
    fn udp_echo_roundtrips_through_the_wall() {
        let mut lab = lab_clean();
        let packet = Packet {
            src: lab.host.ip,
            dst: lab.net.endpoint_ip(PEER_EP).unwrap(),
            proto: Proto::Udp,
            src_port: 5555,
            dst_port: ECHO_PORT,
            payload: b"marker".to_vec(),
            hidden: false,
            device: lab.host.default_device(),
        };
        lab.send_from(HOST_EP, packet);
        lab.run_ticks(4);
        assert_eq!(lab.host_raw_inbox.len(), 1);
        assert_eq!(lab.host_raw_inbox[0].payload, b"marker".to_vec());
    }
}
