//! Gateway between the host and the outside world: records all traffic
//! verbatim (hidden monitor packets included), limits outbound TCP
//! connections per window, and rewrites flagged payload patterns in place.

use std::collections::BTreeSet;
use std::io::Write;
use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::netsim::{Packet, Proto};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewriteRule {
    pub label: String,
    pub matches: Vec<u8>,
    pub replacement: Vec<u8>,
}

impl RewriteRule {
    pub fn new(label: &str, matches: Vec<u8>, replacement: Vec<u8>) -> Result<Self> {
        if matches.len() != replacement.len() {
            return Err(Error::Config(format!("rule {label}: match/replacement lengths differ")));
        }
        if matches.is_empty() {
            return Err(Error::Config(format!("rule {label}: empty match")));
        }
        Ok(RewriteRule { label: label.to_string(), matches, replacement })
    }
}

/// The two stock rules: the x86 stealth-NOOP shellcode signature and the
/// classic /bin/sh neutralization.
pub fn default_rules() -> Vec<RewriteRule> {
    vec![
        RewriteRule::new(
            "SHELLCODE x86 stealth NOOP",
            vec![0xeb, 0x02, 0xeb, 0x02, 0xeb, 0x02],
            vec![0x24, 0x00, 0x99, 0xde, 0x6c, 0x3e],
        )
        .unwrap(),
        RewriteRule::new("shell path", b"/bin/sh".to_vec(), b"/ben/sh".to_vec()).unwrap(),
    ]
}

/// Ruleset file entry: hex-encoded match and replacement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuleFileEntry {
    pub label: String,
    pub match_hex: String,
    pub replace_hex: String,
}

pub fn load_rules(path: &Path) -> Result<Vec<RewriteRule>> {
    let text = std::fs::read_to_string(path)?;
    parse_rules(&text)
}

pub fn parse_rules(json: &str) -> Result<Vec<RewriteRule>> {
    let entries: Vec<RuleFileEntry> = serde_json::from_str(json)?;
    entries
        .iter()
        .map(|e| {
            let m = hex::decode(&e.match_hex).map_err(|x| Error::Config(format!("{}: {x}", e.label)))?;
            let r = hex::decode(&e.replace_hex).map_err(|x| Error::Config(format!("{}: {x}", e.label)))?;
            RewriteRule::new(&e.label, m, r)
        })
        .collect()
}

pub fn rules_to_json(rules: &[RewriteRule]) -> String {
    let entries: Vec<RuleFileEntry> = rules
        .iter()
        .map(|r| RuleFileEntry {
            label: r.label.clone(),
            match_hex: hex::encode(&r.matches),
            replace_hex: hex::encode(&r.replacement),
        })
        .collect();
    serde_json::to_string_pretty(&entries).expect("serializable")
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConnLimitPolicy {
    pub max_outbound_per_window: u32,
    pub window_ticks: u64,
}

impl Default for ConnLimitPolicy {
    fn default() -> Self {
        // 15 connections per simulated day at one millisecond per tick.
        ConnLimitPolicy { max_outbound_per_window: 15, window_ticks: 86_400_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Outbound,
    Inbound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pre,
    Post,
}

#[derive(Debug, Clone)]
pub struct CaptureEntry {
    pub tick: u64,
    pub direction: Direction,
    pub stage: Stage,
    pub packet: Packet,
}

#[derive(Debug, Clone, Default)]
pub struct CaptureFilter {
    pub stage: Option<Stage>,
    pub direction: Option<Direction>,
    pub dst_port: Option<u16>,
    pub hidden: Option<bool>,
    pub payload_contains: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ForwardResult {
    Forwarded(Packet),
    Blocked,
}

pub struct Honeywall {
    pub rules: Vec<RewriteRule>,
    pub policy: ConnLimitPolicy,
    pub capture: Vec<CaptureEntry>,
    inside: BTreeSet<Ipv4Addr>,
    allowed: BTreeSet<(Ipv4Addr, Ipv4Addr, u16, u64)>,
    blocked_attempts: u64,
}

impl Honeywall {
    pub fn new(rules: Vec<RewriteRule>, policy: ConnLimitPolicy, inside: Vec<Ipv4Addr>) -> Self {
        Honeywall {
            rules,
            policy,
            capture: Vec::new(),
            inside: inside.into_iter().collect(),
            allowed: BTreeSet::new(),
            blocked_attempts: 0,
        }
    }

    pub fn with_defaults(inside: Vec<Ipv4Addr>) -> Self {
        Self::new(default_rules(), ConnLimitPolicy::default(), inside)
    }

    pub fn blocked_attempts(&self) -> u64 {
        self.blocked_attempts
    }

    fn direction_of(&self, packet: &Packet) -> Direction {
        if self.inside.contains(&packet.src) {
            Direction::Outbound
        } else {
            Direction::Inbound
        }
    }

    /// Pass one packet through the wall. The verbatim packet is captured
    /// first; outbound SYNs are counted against the window policy; surviving
    /// packets have every rule match replaced in place and are captured
    /// again post-rewrite.
    pub fn forward(&mut self, tick: u64, packet: Packet) -> ForwardResult {
        let direction = self.direction_of(&packet);
        self.capture.push(CaptureEntry { tick, direction, stage: Stage::Pre, packet: packet.clone() });

        if direction == Direction::Outbound {
            if let Proto::Tcp { syn: true } = packet.proto {
                let window = tick / self.policy.window_ticks;
                let tuple = (packet.src, packet.dst, packet.dst_port, window);
                if !self.allowed.contains(&tuple) {
                    let in_window = self.allowed.iter().filter(|t| t.3 == window).count() as u32;
                    if in_window >= self.policy.max_outbound_per_window {
                        self.blocked_attempts += 1;
                        return ForwardResult::Blocked;
                    }
                    self.allowed.insert(tuple);
                }
            }
        }

        let mut out = packet;
        for rule in &self.rules {
            let mut i = 0;
            while i + rule.matches.len() <= out.payload.len() {
                if out.payload[i..i + rule.matches.len()] == rule.matches[..] {
                    out.payload[i..i + rule.matches.len()].copy_from_slice(&rule.replacement);
                    i += rule.matches.len();
                } else {
                    i += 1;
                }
            }
        }
        self.capture.push(CaptureEntry { tick, direction, stage: Stage::Post, packet: out.clone() });
        ForwardResult::Forwarded(out)
    }

    pub fn capture_query(&self, filter: &CaptureFilter) -> Vec<&CaptureEntry> {
        self.capture
            .iter()
            .filter(|e| {
                filter.stage.is_none_or(|s| e.stage == s)
                    && filter.direction.is_none_or(|d| e.direction == d)
                    && filter.dst_port.is_none_or(|p| e.packet.dst_port == p)
                    && filter.hidden.is_none_or(|h| e.packet.hidden == h)
                    && filter
                        .payload_contains
                        .as_ref()
                        .is_none_or(|needle| contains(&e.packet.payload, needle))
            })
            .collect()
    }
}

pub fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

// ---------------------------------------------------------------------------
// pcap export (linktype raw IP)
// ---------------------------------------------------------------------------

fn internet_checksum(data: &[u8]) -> u16 {
    let mut sum = 0u32;
    let mut chunks = data.chunks_exact(2);
    for c in &mut chunks {
        sum += u32::from(u16::from_be_bytes([c[0], c[1]]));
    }
    if let [last] = chunks.remainder() {
        sum += u32::from(u16::from_be_bytes([*last, 0]));
    }
    while sum >> 16 != 0 {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Render one simulated packet as a raw IPv4 frame.
pub fn raw_ip_frame(packet: &Packet, ip_id: u16) -> Vec<u8> {
    let (proto_num, transport) = match packet.proto {
        Proto::Udp => {
            let mut t = Vec::with_capacity(8 + packet.payload.len());
            t.extend_from_slice(&packet.src_port.to_be_bytes());
            t.extend_from_slice(&packet.dst_port.to_be_bytes());
            t.extend_from_slice(&((8 + packet.payload.len()) as u16).to_be_bytes());
            t.extend_from_slice(&[0, 0]); // checksum optional for v4
            t.extend_from_slice(&packet.payload);
            (17u8, t)
        }
        Proto::Tcp { syn } => {
            let mut t = Vec::with_capacity(20 + packet.payload.len());
            t.extend_from_slice(&packet.src_port.to_be_bytes());
            t.extend_from_slice(&packet.dst_port.to_be_bytes());
            t.extend_from_slice(&[0; 8]); // seq, ack
            t.push(5 << 4);
            t.push(if syn { 0x02 } else { 0x18 });
            t.extend_from_slice(&0xffffu16.to_be_bytes());
            t.extend_from_slice(&[0, 0, 0, 0]); // checksum, urgent
            t.extend_from_slice(&packet.payload);
            let mut pseudo = Vec::with_capacity(12 + t.len());
            pseudo.extend_from_slice(&packet.src.octets());
            pseudo.extend_from_slice(&packet.dst.octets());
            pseudo.extend_from_slice(&[0, 6]);
            pseudo.extend_from_slice(&(t.len() as u16).to_be_bytes());
            pseudo.extend_from_slice(&t);
            let ck = internet_checksum(&pseudo);
            t[16..18].copy_from_slice(&ck.to_be_bytes());
            (6u8, t)
        }
        Proto::IcmpEchoRequest { id } | Proto::IcmpEchoReply { id } => {
            let request = matches!(packet.proto, Proto::IcmpEchoRequest { .. });
            let mut t = Vec::with_capacity(8 + packet.payload.len());
            t.push(if request { 8 } else { 0 });
            t.push(0);
            t.extend_from_slice(&[0, 0]);
            t.extend_from_slice(&((id & 0xffff) as u16).to_be_bytes());
            t.extend_from_slice(&(((id >> 16) & 0xffff) as u16).to_be_bytes());
            t.extend_from_slice(&packet.payload);
            let ck = internet_checksum(&t);
            t[2..4].copy_from_slice(&ck.to_be_bytes());
            (1u8, t)
        }
    };
    let total_len = 20 + transport.len();
    let mut ip = Vec::with_capacity(total_len);
    ip.push(0x45);
    ip.push(0);
    ip.extend_from_slice(&(total_len as u16).to_be_bytes());
    ip.extend_from_slice(&ip_id.to_be_bytes());
    ip.extend_from_slice(&[0, 0]); // flags/fragment
    ip.push(64);
    ip.push(proto_num);
    ip.extend_from_slice(&[0, 0]); // checksum slot
    ip.extend_from_slice(&packet.src.octets());
    ip.extend_from_slice(&packet.dst.octets());
    let ck = internet_checksum(&ip);
    ip[10..12].copy_from_slice(&ck.to_be_bytes());
    ip.extend_from_slice(&transport);
    ip
}

/// Write the capture log as a pcap file, one record per capture entry.
pub fn export_pcap(entries: &[CaptureEntry], path: &Path) -> Result<usize> {
    let mut out = Vec::new();
    out.extend_from_slice(&0xa1b2_c3d4u32.to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&0i32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&65_535u32.to_le_bytes());
    out.extend_from_slice(&101u32.to_le_bytes()); // raw IP
    for (i, e) in entries.iter().enumerate() {
        let frame = raw_ip_frame(&e.packet, (i & 0xffff) as u16);
        out.extend_from_slice(&((e.tick / 1000) as u32).to_le_bytes());
        out.extend_from_slice(&(((e.tick % 1000) * 1000) as u32).to_le_bytes());
        out.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        out.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        out.extend_from_slice(&frame);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(entries.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inside() -> Ipv4Addr {
        Ipv4Addr::new(10, 0, 0, 2)
    }

    fn outside() -> Ipv4Addr {
        Ipv4Addr::new(10, 0, 1, 4)
    }

    fn wall() -> Honeywall {
        Honeywall::with_defaults(vec![inside()])
    }

    fn data_packet(payload: Vec<u8>) -> Packet {
        Packet {
            src: inside(),
            dst: outside(),
            proto: Proto::Tcp { syn: false },
            src_port: 4000,
            dst_port: 80,
            payload,
            hidden: false,
            device: "eth0".into(),
        }
    }

    fn syn_to(dst_port: u16) -> Packet {
        Packet { proto: Proto::Tcp { syn: true }, dst_port, ..data_packet(vec![]) }
    }

    #[test]
    fn stealth_noop_signature_is_rewritten_byte_exactly() {
        let mut w = wall();
        let payload = [b"xx".as_ref(), &[0xeb, 0x02, 0xeb, 0x02, 0xeb, 0x02], b"yy".as_ref()].concat();
        match w.forward(1, data_packet(payload)) {
            ForwardResult::Forwarded(p) => {
                assert_eq!(&p.payload[2..8], &[0x24, 0x00, 0x99, 0xde, 0x6c, 0x3e]);
                assert_eq!(&p.payload[..2], b"xx");
                assert_eq!(&p.payload[8..], b"yy");
            }
            ForwardResult::Blocked => panic!("data must pass"),
        }
    }

    #[test]
    fn bin_sh_becomes_ben_sh() {
        let mut w = wall();
        match w.forward(1, data_packet(b"exec /bin/sh now".to_vec())) {
            ForwardResult::Forwarded(p) => assert_eq!(p.payload, b"exec /ben/sh now".to_vec()),
            ForwardResult::Blocked => panic!("data must pass"),
        }
    }

    #[test]
    fn sixteenth_distinct_outbound_syn_is_blocked() {
        let mut w = wall();
        for port in 0..15u16 {
            assert!(matches!(w.forward(5, syn_to(10_000 + port)), ForwardResult::Forwarded(_)));
        }
        assert_eq!(w.forward(5, syn_to(10_015)), ForwardResult::Blocked);
        // Retrying an already-allowed tuple still passes and counts once.
        assert!(matches!(w.forward(6, syn_to(10_003)), ForwardResult::Forwarded(_)));
        assert_eq!(w.forward(7, syn_to(10_016)), ForwardResult::Blocked);
        assert_eq!(w.blocked_attempts(), 2);
    }

    #[test]
    fn window_boundary_resets_the_counter() {
        let mut w = wall();
        let window = w.policy.window_ticks;
        for port in 0..15u16 {
            w.forward(1, syn_to(20_000 + port));
        }
        assert_eq!(w.forward(2, syn_to(20_015)), ForwardResult::Blocked);
        assert!(matches!(w.forward(window + 1, syn_to(20_015)), ForwardResult::Forwarded(_)));
    }

    #[test]
    fn inbound_syns_are_not_counted() {
        let mut w = wall();
        for port in 0..40u16 {
            let p = Packet { src: outside(), dst: inside(), ..syn_to(9_000 + port) };
            assert!(matches!(w.forward(1, p), ForwardResult::Forwarded(_)));
        }
    }

    #[test]
    fn capture_records_pre_and_post_and_hidden_packets() {
        let mut w = wall();
        let mut p = data_packet(b"/bin/sh".to_vec());
        p.hidden = true;
        p.proto = Proto::Udp;
        p.dst_port = 1101;
        w.forward(3, p);
        assert_eq!(w.capture.len(), 2);
        let pre = w.capture_query(&CaptureFilter { stage: Some(Stage::Pre), ..Default::default() });
        assert_eq!(pre[0].packet.payload, b"/bin/sh".to_vec());
        let post = w.capture_query(&CaptureFilter { stage: Some(Stage::Post), ..Default::default() });
        assert_eq!(post[0].packet.payload, b"/ben/sh".to_vec());
        let by_port = w.capture_query(&CaptureFilter {
            stage: Some(Stage::Pre),
            dst_port: Some(1101),
            hidden: Some(true),
            ..Default::default()
        });
        assert_eq!(by_port.len(), 1);
    }

    #[test]
    fn empty_capture_queries_empty() {
        let w = wall();
        assert!(w.capture_query(&CaptureFilter::default()).is_empty());
    }

    #[test]
    fn ruleset_file_roundtrip() {
        let json = rules_to_json(&default_rules());
        let rules = parse_rules(&json).unwrap();
        assert_eq!(rules, default_rules());
        assert!(parse_rules(r#"[{"label":"bad","match_hex":"aabb","replace_hex":"aa"}]"#).is_err());
    }

    #[test]
    fn pcap_export_writes_one_record_per_entry() {
        let mut w = wall();
        w.forward(1, data_packet(b"abc".to_vec()));
        w.forward(2, syn_to(10_000));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cap.pcap");
        let n = export_pcap(&w.capture, &path).unwrap();
        assert_eq!(n, w.capture.len());
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], &0xa1b2_c3d4u32.to_le_bytes());
        // Count records by walking the per-packet headers.
        let mut at = 24;
        let mut count = 0;
        while at < bytes.len() {
            let incl = u32::from_le_bytes(bytes[at + 8..at + 12].try_into().unwrap()) as usize;
            at += 16 + incl;
            count += 1;
        }
        assert_eq!(count, n);
    }

    proptest! {
        #[test]
        fn forwarding_preserves_packet_length(payload in proptest::collection::vec(any::<u8>(), 0..512)) {
            let mut w = wall();
            let len = payload.len();
            match w.forward(1, data_packet(payload)) {
                ForwardResult::Forwarded(p) => prop_assert_eq!(p.payload.len(), len),
                ForwardResult::Blocked => prop_assert!(false, "plain data must pass"),
            }
        }

        #[test]
        fn rewrite_output_never_contains_a_match(gap in proptest::collection::vec(any::<u8>(), 0..32)) {
            let mut w = wall();
            let mut payload = vec![0xeb, 0x02, 0xeb, 0x02, 0xeb, 0x02];
            payload.extend_from_slice(&gap);
            payload.extend_from_slice(b"/bin/sh");
            match w.forward(1, data_packet(payload)) {
                ForwardResult::Forwarded(p) => {
                    prop_assert!(!contains(&p.payload, &[0xeb, 0x02, 0xeb, 0x02, 0xeb, 0x02]));
                    prop_assert!(!contains(&p.payload, b"/bin/sh"));
                }
                ForwardResult::Blocked => prop_assert!(false, "plain data must pass"),
            }
        }
    }
}
