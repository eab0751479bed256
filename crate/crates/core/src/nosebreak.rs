//! The attacker's side: every detection technique against the read()-hooking
//! monitor and the gateway, the cleanup-based disabler, and the decoy
//! generator. Detectors return evidence-carrying reports and never consult
//! simulator ground truth; everything is derived from what an on-host
//! program could observe.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::lab::{Lab, PingOutcome, HOST_EP, PEER_EP};
use crate::netsim::{Packet, Proto};
use crate::simkernel::{
    parse_proc_net_dev, Address, FileNode, Host, MemoryImage, MODULE_HEADER_LEN, MODULE_REGION_START,
    MODULE_SYMTAB_OFFSET, NEIGHBOR_GAP_LIMIT, NR_READ, NR_WRITE,
};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct DetectConfig {
    /// Legitimate modules with purely numeric names, like the 8390 driver.
    pub numeric_name_whitelist: Vec<String>,
    /// Loaded/baseline RTT ratio above which the dd probe reports detection.
    pub rtt_ratio_threshold: f64,
    /// Classifier score at or above which a candidate counts as the monitor.
    pub classify_threshold: f64,
    pub burst_reads: u32,
    pub ping_count: usize,
    /// Payload patterns the rewrite probe sends through the wall.
    pub probe_markers: Vec<Vec<u8>>,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            numeric_name_whitelist: vec!["8390".into()],
            rtt_ratio_threshold: 10.0,
            classify_threshold: 0.5,
            burst_reads: 10_000,
            ping_count: 3,
            probe_markers: vec![vec![0xeb, 0x02, 0xeb, 0x02, 0xeb, 0x02], b"/bin/sh".to_vec()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Detected,
    NotDetected,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviceSample {
    pub device: String,
    pub tx_bytes: u64,
    pub tx_packets: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProcDeltaRow {
    pub device: String,
    pub delta_bytes: i64,
    pub delta_packets: i64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EchoPair {
    pub sent_hex: String,
    pub received_hex: String,
    pub modified: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoredCandidate {
    pub candidate: ModuleCandidate,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evidence {
    CounterSamples { before: Vec<DeviceSample>, after: Vec<DeviceSample> },
    ProcDelta { per_device: Vec<ProcDeltaRow> },
    RttProbe { baseline_ms: Vec<f64>, loaded_ms: Vec<f64>, ratio: f64, saturated: bool },
    SyscallAddrs { read: Address, write: Address, delta: u32, read_in_module: bool },
    ModuleScan { scored: Vec<ScoredCandidate>, secrets: Vec<SecretGuess> },
    ConnLimit { attempted: u32, succeeded: u32, observed_limit: Option<u32> },
    RewriteEchoes { pairs: Vec<EchoPair>, modified: usize },
    Note { text: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectionReport {
    pub technique: String,
    pub verdict: Verdict,
    pub evidence: Evidence,
}

impl DetectionReport {
    fn new(technique: &str, verdict: Verdict, evidence: Evidence) -> Self {
        if verdict == Verdict::Detected {
            debug_assert!(!matches!(evidence, Evidence::Note { .. }), "detections carry real evidence");
        }
        DetectionReport { technique: technique.to_string(), verdict, evidence }
    }
}

// ---------------------------------------------------------------------------
// Counter regression (pre-2.1.7)
// ---------------------------------------------------------------------------

/// Sample the ifconfig-visible counters, hammer read(1) in a tight loop, and
/// resample. Backward movement of any transmit counter betrays the monitor.
/// Works for an unprivileged user.
pub fn detect_counter_regression(lab: &mut Lab, cfg: &DetectConfig) -> DetectionReport {
    let sample = |host: &Host| -> Vec<DeviceSample> {
        parse_proc_net_dev(&host.render_proc_net_dev())
            .into_iter()
            .map(|(device, _, _, tx_bytes, tx_packets)| DeviceSample { device, tx_bytes, tx_packets })
            .collect()
    };
    let before = sample(&lab.host);
    let pid = lab.host.spawn(1000, "/bin/dd", BTreeMap::new());
    let fd = lab.host.open(pid, "/dev/zero").expect("/dev/zero");
    for _ in 0..cfg.burst_reads {
        let _ = lab.host.sys_read(pid, fd, 1);
    }
    let after = sample(&lab.host);
    lab.host.kill(pid).ok();
    let decreased = before.iter().zip(&after).any(|(b, a)| a.tx_bytes < b.tx_bytes || a.tx_packets < b.tx_packets);
    lab.drain(64);
    let verdict = if decreased { Verdict::Detected } else { Verdict::NotDetected };
    DetectionReport::new("counter_regression", verdict, Evidence::CounterSamples { before, after })
}

// ---------------------------------------------------------------------------
// /proc/net/dev discrepancy (2.1.7)
// ---------------------------------------------------------------------------

/// Compare the true per-device counters against the parsed /proc/net/dev
/// rendering. Any difference can only come from an output-falsifying monitor.
pub fn detect_proc_discrepancy(lab: &Lab) -> DetectionReport {
    let rendered = parse_proc_net_dev(&lab.host.render_proc_net_dev());
    let mut rows = Vec::new();
    let mut any = false;
    for (device, _, _, tx_bytes, tx_packets) in rendered {
        let truth = lab.host.device_stats(&device).expect("listed device exists");
        let delta_bytes = truth.tx_bytes as i64 - tx_bytes as i64;
        let delta_packets = truth.tx_packets as i64 - tx_packets as i64;
        if delta_bytes != 0 || delta_packets != 0 {
            any = true;
        }
        rows.push(ProcDeltaRow { device, delta_bytes, delta_packets });
    }
    let verdict = if any { Verdict::Detected } else { Verdict::NotDetected };
    DetectionReport::new("proc_discrepancy", verdict, Evidence::ProcDelta { per_device: rows })
}

// ---------------------------------------------------------------------------
// dd-attack RTT
// ---------------------------------------------------------------------------

/// Ping the gateway for a baseline, start the one-byte-read flood, ping
/// again. The ~100x logging amplification congests the uplink and the echo
/// round-trip explodes (or times out outright).
pub fn detect_dd_rtt(lab: &mut Lab, gateway: &str, cfg: &DetectConfig) -> DetectionReport {
    if !lab.net.reachable(HOST_EP, gateway) {
        return DetectionReport::new(
            "dd_rtt",
            Verdict::Inconclusive,
            Evidence::Note { text: format!("gateway {gateway} unreachable") },
        );
    }
    let mut baseline_ms = Vec::new();
    for _ in 0..cfg.ping_count {
        match lab.ping(HOST_EP, gateway) {
            PingOutcome::Unreachable => {
                return DetectionReport::new(
                    "dd_rtt",
                    Verdict::Inconclusive,
                    Evidence::Note { text: format!("gateway {gateway} unreachable") },
                )
            }
            out => baseline_ms.push(out.effective_ms()),
        }
    }
    let load = lab.drive_dd_load(cfg.burst_reads).expect("load driver");
    lab.run_ticks(2);
    let mut loaded_ms = Vec::new();
    let mut saturated = false;
    for _ in 0..cfg.ping_count {
        let out = lab.ping(HOST_EP, gateway);
        if matches!(out, PingOutcome::TimedOut { .. }) {
            saturated = true;
        }
        loaded_ms.push(out.effective_ms());
    }
    lab.stop_load(load);
    lab.drain(256);
    let base_avg = baseline_ms.iter().sum::<f64>() / baseline_ms.len() as f64;
    let load_avg = loaded_ms.iter().sum::<f64>() / loaded_ms.len() as f64;
    let ratio = load_avg / base_avg;
    let verdict = if ratio >= cfg.rtt_ratio_threshold { Verdict::Detected } else { Verdict::NotDetected };
    DetectionReport::new("dd_rtt", verdict, Evidence::RttProbe { baseline_ms, loaded_ms, ratio, saturated })
}

// ---------------------------------------------------------------------------
// Module scanning, classification, secret extraction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ModuleCandidate {
    pub header_addr: Address,
    pub name: String,
    pub base: Address,
    pub size: u32,
    pub init_addr: Address,
    pub cleanup_addr: Address,
    pub confidence: f64,
}

fn printable(b: u8) -> bool {
    b.is_ascii_graphic() || b == b' '
}

/// Read a NUL-terminated printable string, up to `max` bytes.
fn read_cstr(memory: &MemoryImage, addr: Address, max: usize) -> Option<String> {
    let bytes = memory.read_bytes(addr, max)?;
    let end = bytes.iter().position(|&b| b == 0)?;
    if end == 0 || !bytes[..end].iter().all(|&b| printable(b)) {
        return None;
    }
    Some(String::from_utf8_lossy(&bytes[..end]).into_owned())
}

/// Brute-force sweep of the module region at 4-byte stride, accepting every
/// offset whose 24 bytes parse as a well-formed header: all four addresses
/// in a mapped region, a plausible size, and a printable NUL-terminated name.
/// Hidden modules show up like any other.
pub fn scan_hidden_modules(memory: &MemoryImage) -> Vec<ModuleCandidate> {
    let region = memory.module_region();
    let mut out = Vec::new();
    let mapped = |v: u32| Address(v).is_mapped();
    let mut off = 0usize;
    while off + MODULE_HEADER_LEN <= region.len() {
        let word = |at: usize| {
            u32::from_le_bytes([region[off + at], region[off + at + 1], region[off + at + 2], region[off + at + 3]])
        };
        let next = word(0);
        if !mapped(next) {
            off += 4;
            continue;
        }
        let base = MODULE_REGION_START + off as u32;
        let name_addr = word(4);
        let size = word(8);
        let init = word(16);
        let cleanup = word(20);
        let plausible = mapped(name_addr)
            && mapped(init)
            && mapped(cleanup)
            && size >= MODULE_HEADER_LEN as u32
            && base.checked_add(size).is_some_and(|end| end <= crate::simkernel::MODULE_REGION_END);
        if plausible {
            if let Some(name) = read_cstr(memory, Address(name_addr), 64) {
                out.push(ModuleCandidate {
                    header_addr: Address(base),
                    name,
                    base: Address(base),
                    size,
                    init_addr: Address(init),
                    cleanup_addr: Address(cleanup),
                    confidence: 0.0,
                });
            }
        }
        off += 4;
    }
    out
}

fn parse_symbols(memory: &MemoryImage, c: &ModuleCandidate) -> Option<Vec<(String, Address)>> {
    let count = memory.read_u32_le(Address(c.base.0 + MODULE_SYMTAB_OFFSET))?;
    if count == 0 || count > 64 {
        return None;
    }
    let mut at = c.base.0 + MODULE_SYMTAB_OFFSET + 4;
    let mut out = Vec::new();
    for _ in 0..count {
        let addr = memory.read_u32_le(Address(at))?;
        if addr < c.base.0 || addr >= c.base.0 + c.size {
            return None;
        }
        let name = read_cstr(memory, Address(at + 4), 32)?;
        at += 4 + name.len() as u32 + 1;
        out.push((name, Address(addr)));
    }
    Some(out)
}

fn symbol_matches_pattern(name: &str) -> bool {
    let bytes = name.as_bytes();
    (2..=4).contains(&bytes.len())
        && bytes[0].is_ascii_alphabetic()
        && bytes[1..].iter().all(|b| b.is_ascii_digit())
}

/// Longest printable run (single NULs between printables allowed) plus its
/// digit count, over the module body.
fn string_region_stats(memory: &MemoryImage, c: &ModuleCandidate) -> (usize, usize) {
    let Some(bytes) = memory.read_bytes(c.base, c.size as usize) else { return (0, 0) };
    let mut best = (0usize, 0usize);
    let mut run_printable = 0usize;
    let mut run_digits = 0usize;
    let mut pending_nul = false;
    for &b in &bytes {
        if printable(b) {
            run_printable += 1;
            if b.is_ascii_digit() {
                run_digits += 1;
            }
            pending_nul = false;
        } else if b == 0 && run_printable > 0 && !pending_nul {
            pending_nul = true;
        } else {
            if run_printable > best.0 {
                best = (run_printable, run_digits);
            }
            run_printable = 0;
            run_digits = 0;
            pending_nul = false;
        }
    }
    if run_printable > best.0 {
        best = (run_printable, run_digits);
    }
    best
}

/// Score candidates by the monitor's fingerprints: a purely numeric
/// non-whitelisted name below 10^9, symbol names of the letter-plus-digits
/// compile pattern, and the >200-byte string freight the 2.1.7 build keeps
/// for address conversion and /proc falsification.
pub fn classify_sebek(
    candidates: &[ModuleCandidate],
    memory: &MemoryImage,
    cfg: &DetectConfig,
) -> Vec<ScoredCandidate> {
    let mut scored: Vec<ScoredCandidate> = candidates
        .iter()
        .map(|c| {
            let mut score = 0.0;
            if c.name.bytes().all(|b| b.is_ascii_digit())
                && c.name.parse::<u64>().is_ok_and(|n| n < 1_000_000_000)
                && !cfg.numeric_name_whitelist.contains(&c.name)
            {
                score += 0.4;
            }
            if let Some(symbols) = parse_symbols(memory, c) {
                if !symbols.is_empty() && symbols.iter().all(|(n, _)| symbol_matches_pattern(n)) {
                    score += 0.3;
                }
            }
            let (printable_run, digits) = string_region_stats(memory, c);
            if printable_run > 200 && digits * 10 >= printable_run * 3 {
                score += 0.3;
            }
            ScoredCandidate { candidate: ModuleCandidate { confidence: score, ..c.clone() }, score }
        })
        .collect();
    scored.sort_by(|a, b| {
        b.score.partial_cmp(&a.score).unwrap().then(a.candidate.header_addr.0.cmp(&b.candidate.header_addr.0))
    });
    scored
}

#[derive(Debug, Clone, Serialize)]
pub struct SecretGuess {
    pub magic: u32,
    pub src_port: u16,
    pub dst_port: u16,
    pub dst_ip: std::net::Ipv4Addr,
    pub score: f64,
}

/// Locate the variable storage block via the module header (it sits
/// 4-aligned right after the name string) and enumerate plausible
/// assignments of the four secrets to its occupied slots. The block is
/// compile-shuffled, but zero filler plus value plausibility collapses the
/// search to a handful of candidate tuples.
pub fn extract_secrets(candidate: &ModuleCandidate, memory: &MemoryImage) -> Result<Vec<SecretGuess>> {
    let name_addr = memory
        .read_u32_le(Address(candidate.header_addr.0 + 4))
        .ok_or_else(|| Error::Extraction("unreadable header".into()))?;
    let name = read_cstr(memory, Address(name_addr), 64)
        .ok_or_else(|| Error::Extraction("unreadable module name".into()))?;
    let var_addr = (name_addr + name.len() as u32 + 1 + 3) & !3;
    let block = memory
        .read_bytes(Address(var_addr), crate::sebek::VAR_BLOCK_LEN)
        .ok_or_else(|| Error::Extraction("var block outside memory".into()))?;
    if block.iter().all(|&b| b == 0) {
        return Err(Error::Extraction("var block is zeroed".into()));
    }

    let slots: Vec<[u8; 4]> = block.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    let occupied: Vec<usize> =
        (0..slots.len()).filter(|&i| slots[i] != [0, 0, 0, 0]).collect();

    // Strings in the module body anchor the destination address guess.
    let body = memory.read_bytes(candidate.base, candidate.size as usize).unwrap_or_default();

    let mut guesses: Vec<SecretGuess> = Vec::new();
    for &ip_slot in &occupied {
        for &magic_slot in &occupied {
            if magic_slot == ip_slot {
                continue;
            }
            for &sp_slot in &occupied {
                if sp_slot == ip_slot || sp_slot == magic_slot {
                    continue;
                }
                for &dp_slot in &occupied {
                    if [ip_slot, magic_slot, sp_slot].contains(&dp_slot) {
                        continue;
                    }
                    // Every occupied slot must be explained by some field.
                    if occupied.iter().any(|s| ![ip_slot, magic_slot, sp_slot, dp_slot].contains(s)) {
                        continue;
                    }
                    let sport_raw = u32::from_le_bytes(slots[sp_slot]);
                    let dport_raw = u32::from_le_bytes(slots[dp_slot]);
                    if sport_raw == 0 || sport_raw > 0xffff || dport_raw == 0 || dport_raw > 0xffff {
                        continue;
                    }
                    let ip = std::net::Ipv4Addr::new(
                        slots[ip_slot][0],
                        slots[ip_slot][1],
                        slots[ip_slot][2],
                        slots[ip_slot][3],
                    );
                    let magic = u32::from_le_bytes(slots[magic_slot]);
                    let mut score = 0.0;
                    if crate::honeywall::contains(&body, ip.to_string().as_bytes()) {
                        score += 4.0;
                    }
                    let first = ip.octets()[0];
                    if (1..=223).contains(&first) && first != 127 {
                        score += 1.0;
                    }
                    if magic > 0xffff {
                        score += 0.5;
                    }
                    guesses.push(SecretGuess { magic, src_port: sport_raw as u16, dst_port: dport_raw as u16, dst_ip: ip, score });
                }
            }
        }
    }
    if guesses.is_empty() {
        return Err(Error::Extraction("no plausible layout".into()));
    }
    guesses.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.magic.cmp(&b.magic))
            .then(a.src_port.cmp(&b.src_port))
            .then(a.dst_port.cmp(&b.dst_port))
    });
    guesses.dedup_by(|a, b| a.magic == b.magic && a.src_port == b.src_port && a.dst_port == b.dst_port && a.dst_ip == b.dst_ip);
    guesses.truncate(32);
    Ok(guesses)
}

/// 4-aligned words inside the module that point into kernel text. The stored
/// original syscall entry shows up here; evidence only, restoration still
/// goes through cleanup().
pub fn scan_stored_text_pointers(candidate: &ModuleCandidate, memory: &MemoryImage) -> Vec<Address> {
    let mut out = Vec::new();
    let mut at = candidate.base.0;
    while at + 4 <= candidate.base.0 + candidate.size {
        if let Some(v) = memory.read_u32_le(Address(at)) {
            if Address(v).in_kernel_text() {
                out.push(Address(v));
            }
        }
        at += 4;
    }
    out
}

// ---------------------------------------------------------------------------
// Syscall table anomaly
// ---------------------------------------------------------------------------

/// Two independent signals: the read and write entries drifting more than a
/// page apart, and the read entry pointing into (scanned, not advertised)
/// module memory.
pub fn detect_syscall_anomaly(host: &Host) -> DetectionReport {
    let read = host.syscalls.get(NR_READ);
    let write = host.syscalls.get(NR_WRITE);
    let delta = read.0.abs_diff(write.0);
    let read_in_module = scan_hidden_modules(&host.memory)
        .iter()
        .any(|c| read.0 >= c.base.0 && read.0 < c.base.0 + c.size);
    let verdict = if delta > NEIGHBOR_GAP_LIMIT || read_in_module {
        Verdict::Detected
    } else {
        Verdict::NotDetected
    };
    DetectionReport::new(
        "syscall_anomaly",
        verdict,
        Evidence::SyscallAddrs { read, write, delta, read_in_module },
    )
}

// ---------------------------------------------------------------------------
// Kernel jumps, reboot
// ---------------------------------------------------------------------------

/// Jump to an arbitrary kernel address (the minimal helper-module primitive).
/// Root only; unmapped targets crash the host.
pub fn call_kernel_address(host: &mut Host, uid: u32, addr: Address) -> Result<()> {
    if uid != 0 {
        return Err(Error::Privilege { uid, what: format!("jump to {addr}") });
    }
    if !addr.is_mapped() {
        host.crashed = true;
        return Err(Error::Fault(addr.0));
    }
    host.invoke_kernel_function(addr)
}

/// Scan, classify, and jump to the top candidate's cleanup entry. This is
/// the full removal tool a root shell would run.
pub fn run_removal_tool(host: &mut Host, uid: u32) -> Result<Address> {
    let cfg = DetectConfig::default();
    let candidates = scan_hidden_modules(&host.memory);
    let scored = classify_sebek(&candidates, &host.memory, &cfg);
    let top = scored
        .first()
        .filter(|s| s.score >= cfg.classify_threshold)
        .ok_or_else(|| Error::Lookup("no monitor candidate found".into()))?;
    let cleanup = top.candidate.cleanup_addr;
    call_kernel_address(host, uid, cleanup)?;
    Ok(cleanup)
}

/// Disable by rebooting: the monitor has no boot-time auto-load, so a fresh
/// boot comes up clean while the disk persists.
pub fn disable_by_reboot(lab: &mut Lab, uid: u32) -> Result<()> {
    if uid != 0 {
        return Err(Error::Privilege { uid, what: "reboot".into() });
    }
    let ip = lab.host.ip;
    let placeholder = Host::boot(lab.host.config.clone())?;
    let old = std::mem::replace(&mut lab.host, placeholder);
    lab.host = old.reboot()?;
    lab.host.ip = ip;
    lab.kebes_servers.clear();
    Ok(())
}

// ---------------------------------------------------------------------------
// Honeywall probes
// ---------------------------------------------------------------------------

/// Fire `n` outbound connection attempts at distinct ports and look for the
/// block boundary.
pub fn probe_connection_limit(lab: &mut Lab, n: u32) -> DetectionReport {
    lab.host_raw_inbox.clear();
    let peer_ip = match lab.net.endpoint_ip(PEER_EP) {
        Ok(ip) => ip,
        Err(_) => {
            return DetectionReport::new(
                "connection_limit",
                Verdict::Inconclusive,
                Evidence::Note { text: "no probe peer".into() },
            )
        }
    };
    for i in 0..n {
        let syn = Packet {
            src: lab.host.ip,
            dst: peer_ip,
            proto: Proto::Tcp { syn: true },
            src_port: 21_000 + i as u16,
            dst_port: 10_000 + i as u16,
            payload: Vec::new(),
            hidden: false,
            device: lab.host.default_device(),
        };
        lab.send_from(HOST_EP, syn);
    }
    lab.run_ticks(6);
    let succeeded = lab
        .host_raw_inbox
        .iter()
        .filter(|p| p.src == peer_ip && p.payload == b"SYNACK")
        .count() as u32;
    lab.host_raw_inbox.clear();
    let boundary = succeeded > 0 && succeeded < n;
    let verdict = if boundary { Verdict::Detected } else { Verdict::NotDetected };
    DetectionReport::new(
        "connection_limit",
        verdict,
        Evidence::ConnLimit { attempted: n, succeeded, observed_limit: boundary.then_some(succeeded) },
    )
}

/// Send marker-bearing payloads to a cooperative echo peer and compare what
/// comes back. Any difference means an inline rewriting engine sits on the
/// path.
pub fn probe_content_rewrite(lab: &mut Lab, cfg: &DetectConfig) -> DetectionReport {
    if !lab.net.reachable(HOST_EP, PEER_EP) {
        return DetectionReport::new(
            "content_rewrite",
            Verdict::Inconclusive,
            Evidence::Note { text: "echo peer unreachable".into() },
        );
    }
    lab.host_raw_inbox.clear();
    let peer_ip = lab.net.endpoint_ip(PEER_EP).unwrap();
    let mut payloads: Vec<Vec<u8>> = Vec::new();
    for m in &cfg.probe_markers {
        let mut p = b"PROBE[".to_vec();
        p.extend_from_slice(m);
        p.extend_from_slice(b"]END");
        payloads.push(p);
    }
    payloads.push(b"PROBE[benign control payload]END".to_vec());
    for (i, payload) in payloads.iter().enumerate() {
        let packet = Packet {
            src: lab.host.ip,
            dst: peer_ip,
            proto: Proto::Udp,
            src_port: 23_000 + i as u16,
            dst_port: crate::lab::ECHO_PORT,
            payload: payload.clone(),
            hidden: false,
            device: lab.host.default_device(),
        };
        lab.send_from(HOST_EP, packet);
    }
    lab.run_ticks(6);
    let mut pairs = Vec::new();
    let mut modified = 0;
    for (i, sent) in payloads.iter().enumerate() {
        let received = lab
            .host_raw_inbox
            .iter()
            .find(|p| p.dst_port == 23_000 + i as u16 && p.src == peer_ip)
            .map(|p| p.payload.clone());
        match received {
            Some(r) => {
                let differs = r != *sent;
                if differs {
                    modified += 1;
                }
                pairs.push(EchoPair { sent_hex: hex::encode(sent), received_hex: hex::encode(&r), modified: differs });
            }
            None => {
                return DetectionReport::new(
                    "content_rewrite",
                    Verdict::Inconclusive,
                    Evidence::Note { text: "echo peer did not answer".into() },
                )
            }
        }
    }
    lab.host_raw_inbox.clear();
    let verdict = if modified > 0 { Verdict::Detected } else { Verdict::NotDetected };
    DetectionReport::new("content_rewrite", verdict, Evidence::RewriteEchoes { pairs, modified })
}

// ---------------------------------------------------------------------------
// Module scan as a report
// ---------------------------------------------------------------------------

/// Scanner + classifier + secret extraction rolled into one report, the way
/// the standalone detection binary presents it.
pub fn detect_module_scan(lab: &Lab, cfg: &DetectConfig) -> DetectionReport {
    let candidates = scan_hidden_modules(&lab.host.memory);
    let scored = classify_sebek(&candidates, &lab.host.memory, cfg);
    let top_is_monitor = scored.first().is_some_and(|s| s.score >= cfg.classify_threshold);
    let secrets = if top_is_monitor {
        extract_secrets(&scored[0].candidate, &lab.host.memory).unwrap_or_default()
    } else {
        Vec::new()
    };
    let mut shown = secrets;
    shown.truncate(5);
    let verdict = if top_is_monitor { Verdict::Detected } else { Verdict::NotDetected };
    DetectionReport::new("module_scan", verdict, Evidence::ModuleScan { scored, secrets: shown })
}

// ---------------------------------------------------------------------------
// Decoys
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct DecoyPlan {
    /// Plant a shadow-password lookalike in /tmp and read it via the hooked
    /// path, so the collector logs plausible-looking credentials with no way
    /// to tell the file was fake.
    pub shadow_decoy: bool,
    /// Binaries to copy under random names before executing, hiding which
    /// programs really ran.
    pub copy_and_exec: Vec<String>,
    /// fork/terminate cycles keeping the logged PID a moving target.
    pub fork_churn: u32,
    /// Dummy read commands to emit.
    pub dummy_reads: u32,
    /// Real command payloads to interleave among the dummies.
    pub real_payloads: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, Default)]
pub struct DecoyOutcome {
    pub actions: Vec<String>,
    pub final_pid: Option<u32>,
}

pub fn generate_decoys(lab: &mut Lab, plan: &DecoyPlan) -> Result<DecoyOutcome> {
    let mut outcome = DecoyOutcome::default();
    let host = &mut lab.host;
    let driver = if plan.shadow_decoy
        || !plan.copy_and_exec.is_empty()
        || plan.fork_churn > 0
        || plan.dummy_reads > 0
        || !plan.real_payloads.is_empty()
    {
        Some(host.spawn(1000, "/bin/sh", BTreeMap::new()))
    } else {
        None
    };

    if plan.shadow_decoy {
        let name = format!("/tmp/.shadow-{}", host.random_name(8));
        let fake = b"root:$1$decoy$aaaaaaaaaaaaaaaaaaaaaa:12000:0:99999:7:::\nbin:*:12000:0:99999:7:::\n".to_vec();
        host.fs.create(1000, &name, FileNode::regular(fake.clone()))?;
        let cat = host.spawn(1000, "/bin/cat", BTreeMap::new());
        let fd = host.open(cat, &name)?;
        host.sys_read(cat, fd, fake.len())?;
        host.kill(cat)?;
        outcome.actions.push(format!("shadow decoy read ({} bytes)", fake.len()));
    }

    for src in &plan.copy_and_exec {
        let content = host.mmap_read(1, src)?;
        let dst = format!("/tmp/{}", host.random_name(14));
        host.fs.create(1000, &dst, FileNode::regular(content))?;
        host.exec(driver.unwrap(), &dst, &[], &crate::simkernel::FdPlan::null())?;
        outcome.actions.push(format!("copied {src} and executed the copy"));
    }

    // The command stream: dummies with the real payloads spread evenly
    // through them, and the PID churned along the way so the logged process
    // id never sits still.
    let dummies = plan.dummy_reads as usize;
    let reals = plan.real_payloads.len();
    let total = dummies + reals;
    let mut pid = driver.unwrap_or(1);
    if total > 0 {
        let dummy_path = format!("/tmp/.work-{}", host.random_name(8));
        host.fs.create(1000, &dummy_path, FileNode::regular(b"GET /index.html HTTP/1.0\r\n\r\n".to_vec()))?;
        let churn_every = if plan.fork_churn > 0 { total.div_ceil(plan.fork_churn as usize) } else { 0 };
        let mut emitted_real = 0usize;
        let mut churned = 0u32;
        for i in 0..total {
            if churn_every > 0 && i > 0 && i % churn_every == 0 && churned < plan.fork_churn {
                let child = host.fork(pid)?;
                host.kill(pid)?;
                pid = child;
                churned += 1;
            }
            let real_due = reals > 0 && i * reals >= emitted_real * total;
            if real_due && emitted_real < reals {
                let path = format!("/tmp/.r-{}", host.random_name(8));
                host.fs.create(1000, &path, FileNode::regular(plan.real_payloads[emitted_real].clone()))?;
                let fd = host.open(pid, &path)?;
                host.sys_read(pid, fd, plan.real_payloads[emitted_real].len())?;
                host.close(pid, fd)?;
                emitted_real += 1;
            } else {
                let fd = host.open(pid, &dummy_path)?;
                host.sys_read(pid, fd, 28)?;
                host.close(pid, fd)?;
            }
        }
        outcome.actions.push(format!(
            "emitted {dummies} dummy and {emitted_real} real commands across {} pids",
            churned + 1
        ));
    } else if plan.fork_churn > 0 {
        for _ in 0..plan.fork_churn {
            let child = host.fork(pid)?;
            host.kill(pid)?;
            pid = child;
        }
        outcome.actions.push(format!("fork churn x{}", plan.fork_churn));
    }
    if driver.is_some() {
        outcome.final_pid = Some(pid);
    }
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Named technique dispatch (CLI surface)
// ---------------------------------------------------------------------------

pub const TECHNIQUES: [&str; 7] = [
    "counter_regression",
    "proc_discrepancy",
    "dd_rtt",
    "syscall_anomaly",
    "module_scan",
    "connection_limit",
    "content_rewrite",
];

pub fn run_technique(lab: &mut Lab, name: &str, cfg: &DetectConfig) -> Result<DetectionReport> {
    match name {
        "counter_regression" => Ok(detect_counter_regression(lab, cfg)),
        "proc_discrepancy" => Ok(detect_proc_discrepancy(lab)),
        "dd_rtt" => Ok(detect_dd_rtt(lab, "wall", cfg)),
        "syscall_anomaly" => Ok(detect_syscall_anomaly(&lab.host)),
        "module_scan" => Ok(detect_module_scan(lab, cfg)),
        "connection_limit" => Ok(probe_connection_limit(lab, 30)),
        "content_rewrite" => Ok(probe_content_rewrite(lab, cfg)),
        other => Err(Error::Lookup(format!("unknown technique {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::LabConfig;
    use crate::sebek::{SebekConfig, SebekVersion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn lab(version: Option<SebekVersion>) -> Lab {
        let sebek = version.map(|v| SebekConfig { version: v, ..SebekConfig::default_lab() });
        Lab::new(LabConfig { sebek, ..LabConfig::default() }).unwrap()
    }

    #[test]
    fn counter_regression_catches_v216_only() {
        let cfg = DetectConfig::default();
        let mut v216 = lab(Some(SebekVersion::V216));
        let r = detect_counter_regression(&mut v216, &cfg);
        assert_eq!(r.verdict, Verdict::Detected);
        if let Evidence::CounterSamples { before, after } = &r.evidence {
            assert!(after[0].tx_bytes < before[0].tx_bytes);
        } else {
            panic!("wrong evidence kind");
        }

        let mut v217 = lab(Some(SebekVersion::V217));
        assert_eq!(detect_counter_regression(&mut v217, &cfg).verdict, Verdict::NotDetected);

        let mut clean = lab(None);
        assert_eq!(detect_counter_regression(&mut clean, &cfg).verdict, Verdict::NotDetected);
    }

    #[test]
    fn proc_discrepancy_catches_v217_after_first_hidden_packet() {
        let mut l = lab(Some(SebekVersion::V217));
        assert_eq!(detect_proc_discrepancy(&l).verdict, Verdict::NotDetected);

        let pid = l.host.spawn(1000, "/bin/dd", BTreeMap::new());
        let fd = l.host.open(pid, "/dev/zero").unwrap();
        l.host.sys_read(pid, fd, 1).unwrap();
        l.run_ticks(2);
        let r = detect_proc_discrepancy(&l);
        assert_eq!(r.verdict, Verdict::Detected);
        if let Evidence::ProcDelta { per_device } = &r.evidence {
            let row = per_device.iter().find(|r| r.device == "eth0").unwrap();
            assert_eq!(row.delta_bytes, 97);
        } else {
            panic!("wrong evidence kind");
        }
    }

    #[test]
    fn proc_discrepancy_has_no_false_positives_under_clean_traffic() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..100 {
            let mut l = lab(None);
            // Random legitimate traffic.
            let pid = l.host.spawn(33, "/usr/bin/netio", BTreeMap::new());
            let sock = l.host.socket_create(8080, l.net.endpoint_ip(PEER_EP).unwrap(), 80);
            for _ in 0..rng.gen_range(1..20) {
                let n = rng.gen_range(1..900);
                l.host.socket_send(sock, vec![0xaa; n]).unwrap();
            }
            let _ = pid;
            l.run_ticks(3);
            assert_eq!(detect_proc_discrepancy(&l).verdict, Verdict::NotDetected);
            assert_eq!(detect_counter_regression(&mut l, &DetectConfig::default()).verdict, Verdict::NotDetected);
            assert_eq!(detect_syscall_anomaly(&l.host).verdict, Verdict::NotDetected);
        }
    }

    #[test]
    fn dd_rtt_detects_monitor_and_stays_quiet_without_it() {
        let cfg = DetectConfig::default();
        let mut with = lab(Some(SebekVersion::V217));
        let r = detect_dd_rtt(&mut with, "wall", &cfg);
        assert_eq!(r.verdict, Verdict::Detected);
        if let Evidence::RttProbe { baseline_ms, loaded_ms, ratio, saturated } = &r.evidence {
            let base = baseline_ms.iter().sum::<f64>() / baseline_ms.len() as f64;
            let load = loaded_ms.iter().sum::<f64>() / loaded_ms.len() as f64;
            assert!((base - 0.7).abs() < 0.05, "baseline {base}");
            assert!(load > 4800.0, "loaded {load}");
            assert!(*ratio > 1000.0);
            assert!(saturated);
        } else {
            panic!("wrong evidence kind");
        }

        let mut without = lab(None);
        let r = detect_dd_rtt(&mut without, "wall", &cfg);
        assert_eq!(r.verdict, Verdict::NotDetected);
        if let Evidence::RttProbe { ratio, .. } = &r.evidence {
            assert!(*ratio < 2.0);
        }
    }

    #[test]
    fn dd_rtt_on_overprovisioned_link_is_not_detected_and_flagged_unsaturated() {
        let mut topo = crate::netsim::TopologyConfig::default_lab();
        topo.links[0].capacity_bytes_per_tick *= 100;
        let mut l = Lab::new(LabConfig { topology: topo, ..LabConfig::default() }).unwrap();
        let r = detect_dd_rtt(&mut l, "wall", &DetectConfig::default());
        assert_eq!(r.verdict, Verdict::NotDetected);
        if let Evidence::RttProbe { saturated, .. } = &r.evidence {
            assert!(!saturated);
        } else {
            panic!("wrong evidence kind");
        }
    }

    #[test]
    fn dd_rtt_unreachable_gateway_is_inconclusive() {
        let mut l = lab(None);
        assert_eq!(detect_dd_rtt(&mut l, "nowhere", &DetectConfig::default()).verdict, Verdict::Inconclusive);
    }

    #[test]
    fn scanner_finds_hidden_monitor_and_nothing_on_clean_hosts() {
        let l = lab(Some(SebekVersion::V217));
        let candidates = scan_hidden_modules(&l.host.memory);
        let st = l.host.sebek.as_ref().unwrap();
        let module = &l.host.modules[st.module_index];
        assert!(candidates.iter().any(|c| c.header_addr == module.header_addr));
        assert!(candidates.iter().any(|c| c.name == module.name));

        let clean = lab(None);
        assert!(scan_hidden_modules(&clean.host.memory).is_empty());
    }

    #[test]
    fn scanner_oracle_exact_census_with_visible_and_hidden_modules() {
        let mut l = lab(Some(SebekVersion::V217));
        for name in ["8390", "e100", "ext3"] {
            l.host
                .load_module(crate::simkernel::ModuleDescriptor {
                    name: name.into(),
                    size: 0x2000,
                    hidden: false,
                    symbols: vec![("register_netdev".into(), 0x300), ("ei_open".into(), 0x340)],
                    init_offset: 0x300,
                    cleanup_offset: 0x360,
                    data: vec![],
                })
                .unwrap();
        }
        let candidates = scan_hidden_modules(&l.host.memory);
        // Exactly the four planted headers, no accidental ones.
        assert_eq!(candidates.len(), 4);
        let mut found: Vec<u32> = candidates.iter().map(|c| c.header_addr.0).collect();
        let mut planted: Vec<u32> = l.host.modules.iter().map(|m| m.header_addr.0).collect();
        found.sort();
        planted.sort();
        assert_eq!(found, planted);
    }

    #[test]
    fn classifier_ranks_monitor_first_and_whitelists_numeric_drivers() {
        let mut l = lab(Some(SebekVersion::V217));
        l.host
            .load_module(crate::simkernel::ModuleDescriptor {
                name: "8390".into(),
                size: 0x2000,
                hidden: false,
                symbols: vec![("ei_open".into(), 0x300)],
                init_offset: 0x300,
                cleanup_offset: 0x340,
                data: vec![],
            })
            .unwrap();
        let cfg = DetectConfig::default();
        let candidates = scan_hidden_modules(&l.host.memory);
        let scored = classify_sebek(&candidates, &l.host.memory, &cfg);
        let st = l.host.sebek.as_ref().unwrap();
        assert_eq!(scored[0].candidate.header_addr, l.host.modules[st.module_index].header_addr);
        assert!((scored[0].score - 1.0).abs() < 1e-9, "all three signals fire");
        let numeric = scored.iter().find(|s| s.candidate.name == "8390").unwrap();
        assert!(numeric.score < cfg.classify_threshold);
        assert!(classify_sebek(&[], &l.host.memory, &cfg).is_empty());
    }

    #[test]
    fn secrets_surface_within_top_guesses() {
        let l = lab(Some(SebekVersion::V217));
        let cfg = DetectConfig::default();
        let scored = classify_sebek(&scan_hidden_modules(&l.host.memory), &l.host.memory, &cfg);
        let guesses = extract_secrets(&scored[0].candidate, &l.host.memory).unwrap();
        let truth = SebekConfig::default_lab();
        let hit = guesses.iter().take(5).any(|g| {
            g.magic == truth.magic
                && g.src_port == truth.src_port
                && g.dst_port == truth.dst_port
                && g.dst_ip == truth.dst_ip
        });
        assert!(hit, "true tuple not in top 5: {guesses:?}");
    }

    #[test]
    fn secret_extraction_monte_carlo_over_compile_offsets() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let mut hits = 0;
        for _ in 0..100 {
            let cfgm = SebekConfig::randomized(&mut rng, SebekVersion::V217);
            let mut host = Host::boot(crate::simkernel::HostConfig::default_lab()).unwrap();
            crate::sebek::install(&mut host, cfgm.clone()).unwrap();
            let cfg = DetectConfig::default();
            let scored = classify_sebek(&scan_hidden_modules(&host.memory), &host.memory, &cfg);
            let guesses = extract_secrets(&scored[0].candidate, &host.memory).unwrap();
            if guesses.iter().take(5).any(|g| {
                g.magic == cfgm.magic
                    && g.src_port == cfgm.src_port
                    && g.dst_port == cfgm.dst_port
                    && g.dst_ip == cfgm.dst_ip
            }) {
                hits += 1;
            }
        }
        assert!(hits >= 95, "only {hits}/100 within top 5");
    }

    #[test]
    fn zeroed_var_block_is_an_extraction_error() {
        let mut l = lab(Some(SebekVersion::V217));
        let st_addr = l.host.sebek.as_ref().unwrap().var_block_addr;
        l.host.memory.write_bytes(st_addr, &[0u8; crate::sebek::VAR_BLOCK_LEN]).unwrap();
        let cfg = DetectConfig::default();
        let scored = classify_sebek(&scan_hidden_modules(&l.host.memory), &l.host.memory, &cfg);
        assert!(matches!(
            extract_secrets(&scored[0].candidate, &l.host.memory),
            Err(Error::Extraction(_))
        ));
    }

    #[test]
    fn stored_original_read_entry_is_scannable_evidence() {
        let l = lab(Some(SebekVersion::V217));
        let cfg = DetectConfig::default();
        let scored = classify_sebek(&scan_hidden_modules(&l.host.memory), &l.host.memory, &cfg);
        let pointers = scan_stored_text_pointers(&scored[0].candidate, &l.host.memory);
        assert!(pointers.contains(&Address(0xc013_2ecc)));
    }

    #[test]
    fn syscall_anomaly_flips_across_install_and_cleanup() {
        let mut l = lab(None);
        assert_eq!(detect_syscall_anomaly(&l.host).verdict, Verdict::NotDetected);
        crate::sebek::install(&mut l.host, SebekConfig::default_lab()).unwrap();
        let r = detect_syscall_anomaly(&l.host);
        assert_eq!(r.verdict, Verdict::Detected);
        if let Evidence::SyscallAddrs { read, write, delta, read_in_module } = r.evidence {
            assert_eq!(read, Address(0xc884_e748));
            assert_eq!(write, Address(0xc013_2fc8));
            assert!(delta > NEIGHBOR_GAP_LIMIT);
            assert!(read_in_module);
        } else {
            panic!("wrong evidence kind");
        }
        crate::sebek::cleanup(&mut l.host).unwrap();
        assert_eq!(detect_syscall_anomaly(&l.host).verdict, Verdict::NotDetected);
    }

    #[test]
    fn kernel_jump_disables_monitor_and_guards_privilege() {
        let mut l = lab(Some(SebekVersion::V217));
        let cleanup_addr = l.host.sebek.as_ref().unwrap().cleanup_addr;
        assert!(matches!(
            call_kernel_address(&mut l.host, 33, cleanup_addr),
            Err(Error::Privilege { uid: 33, .. })
        ));
        call_kernel_address(&mut l.host, 0, cleanup_addr).unwrap();
        assert_eq!(l.host.syscalls.get(NR_READ), Address(0xc013_2ecc));
        assert!(!l.host.sebek.as_ref().unwrap().active);

        // Unmapped hole: crash.
        let mut l2 = lab(None);
        assert!(matches!(call_kernel_address(&mut l2.host, 0, Address(0xdead_0000)), Err(Error::Fault(_))));
        assert!(l2.host.crashed);
    }

    #[test]
    fn disable_soundness_no_new_records_after_cleanup_jump() {
        let mut l = lab(Some(SebekVersion::V217));
        let cleanup_addr = l.host.sebek.as_ref().unwrap().cleanup_addr;
        call_kernel_address(&mut l.host, 0, cleanup_addr).unwrap();
        let pid = l.host.spawn(1000, "/bin/cat", BTreeMap::new());
        let fd = l.host.open(pid, "/etc/passwd").unwrap();
        l.host.sys_read(pid, fd, 64).unwrap();
        l.run_ticks(3);
        assert!(l.collector.log.is_empty());
        assert_eq!(detect_syscall_anomaly(&l.host).verdict, Verdict::NotDetected);
    }

    #[test]
    fn reboot_disables_monitor_and_keeps_files() {
        let mut l = lab(Some(SebekVersion::V217));
        l.host.fs.create(0, "/tmp/loot", FileNode::regular(b"x".to_vec())).unwrap();
        assert!(matches!(disable_by_reboot(&mut l, 33), Err(Error::Privilege { .. })));
        disable_by_reboot(&mut l, 0).unwrap();
        assert_eq!(l.host.syscalls.get(NR_READ), Address(0xc013_2ecc));
        assert!(l.host.sebek.is_none());
        assert!(l.host.fs.exists("/tmp/loot"));
        // Idempotent.
        disable_by_reboot(&mut l, 0).unwrap();
        assert_eq!(l.host.syscalls.get(NR_READ), Address(0xc013_2ecc));
    }

    #[test]
    fn connection_limit_probe_reads_the_policy_off_the_wall() {
        let mut l = lab(None);
        let r = probe_connection_limit(&mut l, 30);
        assert_eq!(r.verdict, Verdict::Detected);
        if let Evidence::ConnLimit { succeeded, observed_limit, .. } = r.evidence {
            assert_eq!(succeeded, 15);
            assert_eq!(observed_limit, Some(15));
        } else {
            panic!("wrong evidence kind");
        }

        let mut small = lab(None);
        assert_eq!(probe_connection_limit(&mut small, 10).verdict, Verdict::NotDetected);

        let mut unwalled = Lab::new(LabConfig {
            topology: crate::netsim::TopologyConfig::default_unwalled(),
            sebek: None,
            ..LabConfig::default()
        })
        .unwrap();
        assert_eq!(probe_connection_limit(&mut unwalled, 30).verdict, Verdict::NotDetected);
    }

    #[test]
    fn content_rewrite_probe_sees_the_replacement_bytes() {
        let mut l = lab(None);
        let r = probe_content_rewrite(&mut l, &DetectConfig::default());
        assert_eq!(r.verdict, Verdict::Detected);
        if let Evidence::RewriteEchoes { pairs, modified } = &r.evidence {
            assert_eq!(*modified, 2);
            assert!(pairs[0].received_hex.contains("240099de6c3e"));
            assert!(pairs[1].received_hex.contains(&hex::encode(b"/ben/sh")));
            assert!(!pairs[2].modified, "control payload must echo unmodified");
        } else {
            panic!("wrong evidence kind");
        }

        let mut unwalled = Lab::new(LabConfig {
            topology: crate::netsim::TopologyConfig::default_unwalled(),
            sebek: None,
            ..LabConfig::default()
        })
        .unwrap();
        assert_eq!(probe_content_rewrite(&mut unwalled, &DetectConfig::default()).verdict, Verdict::NotDetected);
    }

    #[test]
    fn each_version_is_caught_by_at_least_three_detectors() {
        let cfg = DetectConfig::default();
        for version in [SebekVersion::V216, SebekVersion::V217] {
            let mut l = lab(Some(version));
            let mut caught = 0;
            if detect_dd_rtt(&mut l, "wall", &cfg).verdict == Verdict::Detected {
                caught += 1;
            }
            if detect_syscall_anomaly(&l.host).verdict == Verdict::Detected {
                caught += 1;
            }
            if detect_module_scan(&l, &cfg).verdict == Verdict::Detected {
                caught += 1;
            }
            let version_specific = match version {
                SebekVersion::V216 => detect_counter_regression(&mut l, &cfg).verdict,
                SebekVersion::V217 => {
                    let pid = l.host.spawn(1000, "/bin/dd", BTreeMap::new());
                    let fd = l.host.open(pid, "/dev/zero").unwrap();
                    l.host.sys_read(pid, fd, 1).unwrap();
                    l.run_ticks(2);
                    detect_proc_discrepancy(&l).verdict
                }
            };
            if version_specific == Verdict::Detected {
                caught += 1;
            }
            assert!(caught >= 3, "{version:?} caught by only {caught} detectors");
        }
    }

    #[test]
    fn decoys_flood_the_collector_with_noise() {
        let mut l = lab(Some(SebekVersion::V217));
        let marker = b"REAL-COMMAND-MARKER".to_vec();
        let plan = DecoyPlan {
            shadow_decoy: true,
            copy_and_exec: vec!["/bin/ls".into()],
            fork_churn: 5,
            dummy_reads: 1000,
            real_payloads: vec![marker.clone(); 10],
        };
        let out = generate_decoys(&mut l, &plan).unwrap();
        assert!(out.actions.len() >= 3);
        l.drain(128);
        let total = l.collector.log.len();
        let real = l
            .collector
            .log
            .iter()
            .filter(|r| crate::honeywall::contains(&r.data, &marker))
            .count();
        assert!(total >= 900, "collector saw {total} records");
        assert!(real * 100 <= total, "real commands are {real}/{total}, above 1%");
        // Shadow decoy content reached the collector.
        assert!(l.collector.log.iter().any(|r| crate::honeywall::contains(&r.data, b"root:$1$decoy")));
        // PID churn: distinct pids in the log for the churned session.
        let pids: std::collections::BTreeSet<u32> = l.collector.log.iter().map(|r| r.pid).collect();
        assert!(pids.len() >= 5);
    }

    #[test]
    fn empty_decoy_plan_does_nothing() {
        let mut l = lab(Some(SebekVersion::V217));
        let out = generate_decoys(&mut l, &DecoyPlan::default()).unwrap();
        assert!(out.actions.is_empty());
        assert!(l.host.egress.is_empty());
    }

    #[test]
    fn fork_churn_shows_distinct_pids_in_replayed_records() {
        let mut l = lab(Some(SebekVersion::V217));
        let driver = l.host.spawn(1000, "/bin/sh", BTreeMap::new());
        let mut pid = driver;
        let mut seen = Vec::new();
        for _ in 0..5 {
            let child = l.host.fork(pid).unwrap();
            l.host.kill(pid).unwrap();
            pid = child;
            let fd = l.host.open(pid, "/etc/passwd").unwrap();
            l.host.sys_read(pid, fd, 4).unwrap();
            seen.push(pid);
        }
        l.run_ticks(2);
        let pids: Vec<u32> = l.collector.log.iter().map(|r| r.pid).collect();
        assert_eq!(pids.len(), 5);
        assert_eq!(pids, seen);
        let distinct: std::collections::BTreeSet<u32> = pids.into_iter().collect();
        assert_eq!(distinct.len(), 5);
    }
}
