//! Packet transport among the lab endpoints with a capacity/queue congestion
//! model. Links are directed bounded FIFOs: per tick at most `capacity`
//! payload bytes dequeue, arrivals beyond `queue_cap` are dropped. That is
//! the entire loss model.

use std::collections::{BTreeMap, VecDeque};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Effective round-trip reported for an echo that was tail-dropped by a
/// saturated queue, matching the measurement convention of a scripted ping
/// with a 5 s timeout.
pub const PING_TIMEOUT_MS: f64 = 5_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proto {
    Tcp { syn: bool },
    Udp,
    IcmpEchoRequest { id: u64 },
    IcmpEchoReply { id: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Packet {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub proto: Proto,
    pub src_port: u16,
    pub dst_port: u16,
    pub payload: Vec<u8>,
    /// Host-invisible monitor emission. Hidden packets never appear in the
    /// host-local capture but always cross the wire (and the wall sees them).
    pub hidden: bool,
    /// Egress device on the emitting host, for counter accounting.
    pub device: String,
}

impl Packet {
    /// On-wire size including IP and transport headers.
    pub fn wire_len(&self) -> usize {
        let overhead = match self.proto {
            Proto::Tcp { .. } => 40,
            Proto::Udp => 28,
            Proto::IcmpEchoRequest { .. } | Proto::IcmpEchoReply { .. } => 28,
        };
        self.payload.len() + overhead
    }
}

// ---------------------------------------------------------------------------
// Topology
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub name: String,
    pub ip: Ipv4Addr,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkConfig {
    pub a: String,
    pub b: String,
    pub capacity_bytes_per_tick: u64,
    pub base_latency_ms: f64,
    pub queue_cap_packets: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub endpoints: Vec<EndpointConfig>,
    pub links: Vec<LinkConfig>,
    /// Endpoint that runs the honeywall, if any. Packets transiting it are
    /// subject to capture, rewriting and the connection limit.
    #[serde(default)]
    pub wall: Option<String>,
}

impl TopologyConfig {
    /// Default calibration: the host-side link gives an idle gateway RTT of
    /// exactly 0.7 ms and saturates under a 10000 reads/tick dd burst.
    pub fn default_lab() -> Self {
        let ep = |name: &str, ip: [u8; 4]| EndpointConfig { name: name.into(), ip: Ipv4Addr::from(ip) };
        let inner = LinkConfig {
            a: "host".into(),
            b: "wall".into(),
            capacity_bytes_per_tick: 100_000,
            base_latency_ms: 0.35,
            queue_cap_packets: 4096,
        };
        let outer = |b: &str| LinkConfig {
            a: "wall".into(),
            b: b.into(),
            capacity_bytes_per_tick: 10_000_000,
            base_latency_ms: 0.35,
            queue_cap_packets: 65_536,
        };
        TopologyConfig {
            endpoints: vec![
                ep("host", [10, 0, 0, 2]),
                ep("wall", [10, 0, 0, 1]),
                ep("collector", [10, 0, 1, 2]),
                ep("client", [10, 0, 1, 3]),
                ep("peer", [10, 0, 1, 4]),
            ],
            links: vec![inner, outer("collector"), outer("client"), outer("peer")],
            wall: Some("wall".into()),
        }
    }

    /// Same shape with the wall removed: host wired straight to the outside.
    pub fn default_unwalled() -> Self {
        let mut t = Self::default_lab();
        t.wall = None;
        t
    }
}

// ---------------------------------------------------------------------------
// Links and the network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub enqueued: u64,
    pub delivered: u64,
    pub dropped: u64,
}

struct Queued {
    packet: Packet,
    first_opportunity: u64,
}

pub struct Link {
    pub from: String,
    pub to: String,
    pub capacity: u64,
    pub base_latency_ms: f64,
    pub queue_cap: usize,
    queue: VecDeque<Queued>,
    budget: u64,
    pub stats: LinkStats,
}

impl Link {
    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeState {
    Pending,
    Delivered,
    Dropped,
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeStatus {
    pub state: ProbeState,
    pub waited_ticks: u64,
}

#[derive(Debug, Clone)]
pub struct Delivery {
    pub from: String,
    pub at: String,
    pub packet: Packet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnqueueOutcome {
    Queued,
    Dropped,
}

pub struct Network {
    pub tick: u64,
    in_tick: bool,
    endpoints: BTreeMap<String, Ipv4Addr>,
    by_ip: BTreeMap<Ipv4Addr, String>,
    links: Vec<Link>,
    next_hop: BTreeMap<(String, String), String>,
    probes: BTreeMap<u64, ProbeStatus>,
    next_probe: u64,
}

impl Network {
    pub fn build(topology: &TopologyConfig) -> Result<Network> {
        let mut endpoints = BTreeMap::new();
        let mut by_ip = BTreeMap::new();
        for e in &topology.endpoints {
            if endpoints.insert(e.name.clone(), e.ip).is_some() {
                return Err(Error::Config(format!("duplicate endpoint {}", e.name)));
            }
            if by_ip.insert(e.ip, e.name.clone()).is_some() {
                return Err(Error::Config(format!("duplicate ip {}", e.ip)));
            }
        }
        let mut links = Vec::new();
        let mut neighbors: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for l in &topology.links {
            for name in [&l.a, &l.b] {
                if !endpoints.contains_key(name) {
                    return Err(Error::Config(format!("link references unknown endpoint {name}")));
                }
            }
            for (from, to) in [(&l.a, &l.b), (&l.b, &l.a)] {
                links.push(Link {
                    from: from.clone(),
                    to: to.clone(),
                    capacity: l.capacity_bytes_per_tick,
                    base_latency_ms: l.base_latency_ms,
                    queue_cap: l.queue_cap_packets,
                    queue: VecDeque::new(),
                    budget: 0,
                    stats: LinkStats::default(),
                });
            }
            neighbors.entry(l.a.clone()).or_default().push(l.b.clone());
            neighbors.entry(l.b.clone()).or_default().push(l.a.clone());
        }

        // Static shortest-path routing by hop count.
        let mut next_hop = BTreeMap::new();
        for src in endpoints.keys() {
            let mut frontier = VecDeque::from([src.clone()]);
            let mut first: BTreeMap<String, String> = BTreeMap::new();
            while let Some(at) = frontier.pop_front() {
                for n in neighbors.get(&at).into_iter().flatten() {
                    if n != src && !first.contains_key(n) {
                        let via = if at == *src { n.clone() } else { first[&at].clone() };
                        first.insert(n.clone(), via);
                        frontier.push_back(n.clone());
                    }
                }
            }
            for (dst, via) in first {
                next_hop.insert((src.clone(), dst), via);
            }
        }

        Ok(Network { tick: 0, in_tick: false, endpoints, by_ip, links, next_hop, probes: BTreeMap::new(), next_probe: 1 })
    }

    pub fn endpoint_ip(&self, name: &str) -> Result<Ipv4Addr> {
        self.endpoints.get(name).copied().ok_or_else(|| Error::Lookup(format!("endpoint {name}")))
    }

    pub fn endpoint_of(&self, ip: Ipv4Addr) -> Option<&str> {
        self.by_ip.get(&ip).map(String::as_str)
    }

    pub fn link(&self, from: &str, to: &str) -> Option<&Link> {
        self.links.iter().find(|l| l.from == from && l.to == to)
    }

    fn link_mut(&mut self, from: &str, to: &str) -> Option<&mut Link> {
        self.links.iter_mut().find(|l| l.from == from && l.to == to)
    }

    pub fn reachable(&self, from: &str, to: &str) -> bool {
        from == to || self.next_hop.contains_key(&(from.to_string(), to.to_string()))
    }

    /// Sum of per-direction base latencies along the routed path.
    pub fn path_base_latency(&self, from: &str, to: &str) -> Option<f64> {
        if from == to {
            return Some(0.0);
        }
        let mut at = from.to_string();
        let mut total = 0.0;
        while at != to {
            let via = self.next_hop.get(&(at.clone(), to.to_string()))?.clone();
            total += self.link(&at, &via)?.base_latency_ms;
            at = via;
        }
        Some(total)
    }

    pub fn new_probe(&mut self) -> u64 {
        let id = self.next_probe;
        self.next_probe += 1;
        self.probes.insert(id, ProbeStatus { state: ProbeState::Pending, waited_ticks: 0 });
        id
    }

    pub fn probe(&self, id: u64) -> Option<ProbeStatus> {
        self.probes.get(&id).copied()
    }

    pub(crate) fn resolve_probe(&mut self, id: u64) {
        if let Some(p) = self.probes.get_mut(&id) {
            p.state = ProbeState::Delivered;
        }
    }

    fn fail_probe(&mut self, id: u64) {
        if let Some(p) = self.probes.get_mut(&id) {
            p.state = ProbeState::Dropped;
        }
    }

    /// Hand a packet to the first link on its route out of `at`. Full queues
    /// tail-drop.
    pub fn enqueue(&mut self, at: &str, packet: Packet) -> Result<EnqueueOutcome> {
        let dst_ep = self
            .by_ip
            .get(&packet.dst)
            .cloned()
            .ok_or_else(|| Error::Lookup(format!("no endpoint at {}", packet.dst)))?;
        if dst_ep == at {
            return Err(Error::Lookup("self enqueue".into()));
        }
        let via = self
            .next_hop
            .get(&(at.to_string(), dst_ep))
            .cloned()
            .ok_or_else(|| Error::Lookup(format!("no route {at} -> {}", packet.dst)))?;
        let first_opportunity = if self.in_tick { self.tick } else { self.tick + 1 };
        let probe_id = match packet.proto {
            Proto::IcmpEchoRequest { id } | Proto::IcmpEchoReply { id } => Some(id),
            _ => None,
        };
        let link = self.link_mut(at, &via).expect("route over missing link");
        link.stats.enqueued += 1;
        if link.queue.len() >= link.queue_cap {
            link.stats.dropped += 1;
            if let Some(id) = probe_id {
                self.fail_probe(id);
            }
            return Ok(EnqueueOutcome::Dropped);
        }
        link.queue.push_back(Queued { packet, first_opportunity });
        Ok(EnqueueOutcome::Queued)
    }

    pub fn begin_tick(&mut self) {
        self.tick += 1;
        self.in_tick = true;
        for l in &mut self.links {
            l.budget = l.capacity;
        }
    }

    pub fn end_tick(&mut self) {
        self.in_tick = false;
    }

    /// One service pass: each link dequeues whatever still fits in this
    /// tick's byte budget. Returns the packets that reached their next hop.
    /// A packet larger than the whole capacity is allowed out only against a
    /// fresh budget, so a link can never wedge.
    pub fn service_once(&mut self) -> Vec<Delivery> {
        let mut out = Vec::new();
        let tick = self.tick;
        let mut probe_waits = Vec::new();
        for link in &mut self.links {
            while let Some(front) = link.queue.front() {
                let need = front.packet.payload.len() as u64;
                let fresh = link.budget == link.capacity;
                if need <= link.budget || (fresh && need > link.capacity) {
                    let q = link.queue.pop_front().unwrap();
                    link.budget = link.budget.saturating_sub(need);
                    link.stats.delivered += 1;
                    let waited = tick.saturating_sub(q.first_opportunity);
                    if let Proto::IcmpEchoRequest { id } | Proto::IcmpEchoReply { id } = q.packet.proto {
                        probe_waits.push((id, waited));
                    }
                    out.push(Delivery { from: link.from.clone(), at: link.to.clone(), packet: q.packet });
                } else {
                    break;
                }
            }
        }
        for (id, waited) in probe_waits {
            if let Some(p) = self.probes.get_mut(&id) {
                p.waited_ticks += waited;
            }
        }
        out
    }

    /// Conservation check per link: every arrival is accounted for exactly
    /// once: enqueued = delivered + dropped + still queued.
    pub fn conservation_holds(&self) -> bool {
        self.links
            .iter()
            .all(|l| l.stats.enqueued == l.stats.delivered + l.stats.dropped + l.queue.len() as u64)
    }

    pub fn links(&self) -> impl Iterator<Item = &Link> {
        self.links.iter()
    }
}
