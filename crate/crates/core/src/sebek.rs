//! The monitor under test: a hidden kernel module that replaces the NR_read
//! table entry, records every read, and ships the records to a collector in
//! hidden UDP packets. Two builds exist: v216 hides its traffic by
//! decrementing the true device counters (observably racy), v217 leaves the
//! counters alone and falsifies only the /proc/net/dev rendering.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::netsim::{Packet, Proto};
use crate::simkernel::{Address, Host, ModuleDescriptor, MODULE_SYMTAB_OFFSET, NR_READ};
use crate::{Error, Result};

/// Fixed function layout of the monitor build. Names and variable placement
/// are randomized per compile; the code layout is not.
pub const SEBEK_MODULE_SIZE: u32 = 0x8000;
pub const SEBEK_INIT_OFFSET: u32 = 0x6a0;
pub const SEBEK_CLEANUP_OFFSET: u32 = 0x700;
pub const SEBEK_HOOK_OFFSET: u32 = 0x748;

/// Record header: all fixed fields through data_len (46 bytes) plus 22
/// reserved bytes. A one-byte read therefore costs 69 payload bytes, which is
/// ~100 on the wire with IP and UDP headers. The field layout is a lab
/// convention (the real monitor never published its record format), but the
/// size arithmetic is what the detectors depend on.
pub const RECORD_HEADER_LEN: usize = 68;
/// Longest data run carried by a single record; longer reads split into
/// consecutive-counter records.
pub const MAX_RECORD_DATA: usize = 1024;

pub const VAR_BLOCK_LEN: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SebekVersion {
    V216,
    V217,
}

impl SebekVersion {
    pub fn wire(self) -> u16 {
        match self {
            SebekVersion::V216 => 216,
            SebekVersion::V217 => 217,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SebekConfig {
    pub version: SebekVersion,
    pub magic: u32,
    pub src_port: u16,
    pub dst_port: u16,
    pub dst_ip: Ipv4Addr,
    /// Decimal string of a random number below 10^9.
    pub module_name: String,
    pub interface: String,
    /// Seed standing in for the per-compile randomization of symbol names and
    /// variable placement.
    #[serde(default)]
    pub compile_seed: u64,
}

impl SebekConfig {
    pub fn default_lab() -> Self {
        SebekConfig {
            version: SebekVersion::V217,
            magic: 0xd0d0_dead,
            src_port: 1101,
            dst_port: 1101,
            dst_ip: Ipv4Addr::new(10, 0, 1, 2),
            module_name: "473819204".into(),
            interface: "eth0".into(),
            compile_seed: 7,
        }
    }

    pub fn randomized(rng: &mut ChaCha12Rng, version: SebekVersion) -> Self {
        SebekConfig {
            version,
            magic: rng.gen_range(1..u32::MAX),
            src_port: rng.gen_range(1024..u16::MAX),
            dst_port: rng.gen_range(1024..u16::MAX),
            dst_ip: Ipv4Addr::new(10, 0, 1, 2),
            module_name: rng.gen_range(0..1_000_000_000u32).to_string(),
            interface: "eth0".into(),
            compile_seed: rng.gen(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self.module_name.parse::<u64>() {
            Ok(n) if n < 1_000_000_000 => {}
            _ => return Err(Error::Config(format!("module name {:?} not a number below 10^9", self.module_name))),
        }
        Ok(())
    }
}

/// Ground-truth offsets of the secret variables within the var block. Oracle
/// data: detectors must rediscover these from memory alone.
#[derive(Debug, Clone, Copy)]
pub struct VarLayout {
    pub magic_off: usize,
    pub src_port_off: usize,
    pub dst_port_off: usize,
    pub dst_ip_off: usize,
}

pub struct SebekState {
    pub config: SebekConfig,
    pub module_index: usize,
    pub hook_addr: Address,
    pub cleanup_addr: Address,
    pub original_read: Address,
    pub var_block_addr: Address,
    pub var_layout: VarLayout,
    pub counter: u32,
    pub active: bool,
    deduction: BTreeMap<String, (u64, u64)>,
}

impl SebekState {
    /// Called at transmission time for every hidden packet. The 2.1.7 build
    /// registers the bytes it must later hide from the /proc rendering.
    pub fn note_hidden_transmitted(&mut self, device: &str, wire_bytes: u64) {
        if self.active && self.config.version == SebekVersion::V217 {
            let e = self.deduction.entry(device.to_string()).or_insert((0, 0));
            e.0 += 1;
            e.1 += wire_bytes;
        }
    }

    /// (packets, bytes) to subtract from the rendering for a device.
    pub fn render_deduction(&self, device: &str) -> (u64, u64) {
        if !self.active || self.config.version != SebekVersion::V217 {
            return (0, 0);
        }
        self.deduction.get(device).copied().unwrap_or((0, 0))
    }

    /// Total hidden bytes accounted on a device, for oracle use.
    pub fn hidden_bytes(&self, device: &str) -> u64 {
        self.deduction.get(device).map(|e| e.1).unwrap_or(0)
    }
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SebekRecord {
    pub magic: u32,
    pub version: u16,
    pub counter: u32,
    pub time_sec: u32,
    pub time_usec: u32,
    pub pid: u32,
    pub uid: u32,
    pub fd: u32,
    pub command: [u8; 12],
    pub data: Vec<u8>,
}

impl SebekRecord {
    pub fn command_str(&self) -> String {
        let end = self.command.iter().position(|&b| b == 0).unwrap_or(12);
        String::from_utf8_lossy(&self.command[..end]).into_owned()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RECORD_HEADER_LEN + self.data.len());
        out.extend_from_slice(&self.magic.to_le_bytes());
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.counter.to_le_bytes());
        out.extend_from_slice(&self.time_sec.to_le_bytes());
        out.extend_from_slice(&self.time_usec.to_le_bytes());
        out.extend_from_slice(&self.pid.to_le_bytes());
        out.extend_from_slice(&self.uid.to_le_bytes());
        out.extend_from_slice(&self.fd.to_le_bytes());
        out.extend_from_slice(&self.command);
        out.extend_from_slice(&(self.data.len() as u32).to_le_bytes());
        out.extend_from_slice(&[0u8; 22]);
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<SebekRecord> {
        if bytes.len() < RECORD_HEADER_LEN {
            return Err(Error::Encoding("short record".into()));
        }
        let u32le = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let data_len = u32le(42) as usize;
        if bytes.len() != RECORD_HEADER_LEN + data_len {
            return Err(Error::Encoding("record length mismatch".into()));
        }
        let mut command = [0u8; 12];
        command.copy_from_slice(&bytes[30..42]);
        Ok(SebekRecord {
            magic: u32le(0),
            version: u16::from_le_bytes(bytes[4..6].try_into().unwrap()),
            counter: u32le(6),
            time_sec: u32le(10),
            time_usec: u32le(14),
            pid: u32le(18),
            uid: u32le(22),
            fd: u32le(26),
            command,
            data: bytes[RECORD_HEADER_LEN..].to_vec(),
        })
    }
}

fn command_field(program_name: &str) -> [u8; 12] {
    let mut out = [0u8; 12];
    for (i, b) in program_name.bytes().take(12).enumerate() {
        out[i] = b;
    }
    out
}

// ---------------------------------------------------------------------------
// Install / hook / cleanup
// ---------------------------------------------------------------------------

/// The in-module string freight of a 2.1.7 build: the integer-to-dotted-quad
/// conversion table, the /proc/net/dev falsification format strings, and the
/// configured destination address.
fn v217_strings(config: &SebekConfig) -> Vec<u8> {
    let mut out = Vec::new();
    for i in 0..256u16 {
        out.extend_from_slice(i.to_string().as_bytes());
        out.push(0);
    }
    for s in [
        "%6s:%8lu %7lu %4lu %4lu %4lu %5lu %10lu %9lu %8lu %7lu %4lu %4lu %4lu %5lu %7lu %10lu",
        "Inter-|   Receive",
        " face |bytes    packets errs drop fifo frame compressed multicast",
        "%d.%d.%d.%d",
    ] {
        out.extend_from_slice(s.as_bytes());
        out.push(0);
    }
    out.extend_from_slice(config.dst_ip.to_string().as_bytes());
    out.push(0);
    out
}

fn align4(v: u32) -> u32 {
    (v + 3) & !3
}

pub fn install(host: &mut Host, config: SebekConfig) -> Result<()> {
    if host.sebek.as_ref().is_some_and(|s| s.active) {
        return Err(Error::State("monitor already installed".into()));
    }
    config.validate()?;
    if host.device_stats(&config.interface).is_err() {
        return Err(Error::Config(format!("no such interface {}", config.interface)));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(config.compile_seed ^ 0x5eb3_4b17);

    // Randomized symbol names: one letter, one to three digits.
    let sym_count = rng.gen_range(6..=10);
    let mut symbols = Vec::new();
    let mut used_names: Vec<String> = Vec::new();
    let mut used_offs: Vec<u32> = Vec::new();
    while symbols.len() < sym_count {
        let letter = (b'a' + rng.gen_range(0..26u8)) as char;
        let name = format!("{letter}{}", rng.gen_range(0..1000u32));
        if used_names.contains(&name) {
            continue;
        }
        let off = 0x600 + 16 * rng.gen_range(0..0x20u32);
        if used_offs.contains(&off) {
            continue;
        }
        used_names.push(name.clone());
        used_offs.push(off);
        symbols.push((name, off));
    }

    let mut desc = ModuleDescriptor {
        name: config.module_name.clone(),
        size: SEBEK_MODULE_SIZE,
        hidden: true,
        symbols,
        init_offset: SEBEK_INIT_OFFSET,
        cleanup_offset: SEBEK_CLEANUP_OFFSET,
        data: Vec::new(),
    };

    // Variable storage block: zero-filled, the four secrets at shuffled
    // 4-aligned slots. Placement differs per compile seed.
    let prefix_len = module_prefix_len(&desc);
    let var_off = align4(MODULE_SYMTAB_OFFSET + prefix_len);
    let mut slots: Vec<usize> = (0..VAR_BLOCK_LEN / 4).collect();
    slots.shuffle(&mut rng);
    let layout = VarLayout {
        magic_off: slots[0] * 4,
        src_port_off: slots[1] * 4,
        dst_port_off: slots[2] * 4,
        dst_ip_off: slots[3] * 4,
    };
    let mut block = vec![0u8; VAR_BLOCK_LEN];
    block[layout.magic_off..layout.magic_off + 4].copy_from_slice(&config.magic.to_le_bytes());
    block[layout.src_port_off..layout.src_port_off + 2].copy_from_slice(&config.src_port.to_le_bytes());
    block[layout.dst_port_off..layout.dst_port_off + 2].copy_from_slice(&config.dst_port.to_le_bytes());
    block[layout.dst_ip_off..layout.dst_ip_off + 4].copy_from_slice(&config.dst_ip.octets());
    desc.data.push((var_off, block));

    // The original NR_read entry is stashed plainly in module data, at a
    // seeded slot after the var block. Cleanup restores from it.
    let original = host.syscalls.get(NR_READ);
    let orig_off = var_off + VAR_BLOCK_LEN as u32 + 4 * rng.gen_range(0..8u32);
    desc.data.push((orig_off, original.0.to_le_bytes().to_vec()));

    if config.version == SebekVersion::V217 {
        let strings = v217_strings(&config);
        let strings_off = orig_off + 4 + 4 * rng.gen_range(1..4u32);
        debug_assert!(strings_off + strings.len() as u32 <= 0x600);
        desc.data.push((strings_off, strings));
    }

    let module_index = host.load_module(desc)?;
    let base = host.modules[module_index].base;
    let hook_addr = Address(base.0 + SEBEK_HOOK_OFFSET);
    let cleanup_addr = host.modules[module_index].cleanup_addr;

    host.kernel_functions.insert(hook_addr, crate::simkernel::KernelFn::SebekReadHook);
    host.kernel_functions.insert(cleanup_addr, crate::simkernel::KernelFn::SebekCleanup);
    host.syscalls.set(NR_READ, hook_addr);

    host.sebek = Some(SebekState {
        config,
        module_index,
        hook_addr,
        cleanup_addr,
        original_read: original,
        var_block_addr: Address(base.0 + var_off),
        var_layout: layout,
        counter: 0,
        active: true,
        deduction: BTreeMap::new(),
    });
    Ok(())
}

fn module_prefix_len(desc: &ModuleDescriptor) -> u32 {
    let mut len = 4u32;
    for (name, _) in &desc.symbols {
        len += 4 + name.len() as u32 + 1;
    }
    len + desc.name.len() as u32 + 1
}

/// The read hook. Builds one record per data chunk and queues the hidden log
/// packets; the v216 build immediately deducts its own emission from the true
/// counters, racing the transmission-time increment.
pub(crate) fn on_read(host: &mut Host, st: &mut SebekState, pid: u32, fd: u32, data: &[u8]) {
    let (uid, program_name) = match host.processes.get(&pid) {
        Some(p) => (p.uid, p.program_name.clone()),
        None => (0, String::new()),
    };
    for chunk in data.chunks(MAX_RECORD_DATA) {
        st.counter += 1;
        let ns = host.clock.hi_res();
        let (time_sec, time_usec) = crate::simkernel::SimClock::sec_usec(ns);
        let record = SebekRecord {
            magic: st.config.magic,
            version: st.config.version.wire(),
            counter: st.counter,
            time_sec,
            time_usec,
            pid,
            uid,
            fd,
            command: command_field(&program_name),
            data: chunk.to_vec(),
        };
        let packet = Packet {
            src: host.ip,
            dst: st.config.dst_ip,
            proto: Proto::Udp,
            src_port: st.config.src_port,
            dst_port: st.config.dst_port,
            payload: record.encode(),
            hidden: true,
            device: st.config.interface.clone(),
        };
        if st.config.version == SebekVersion::V216 {
            let wire = packet.wire_len() as u64;
            if let Some(dev) = host.device_mut(&st.config.interface) {
                dev.tx_packets = dev.tx_packets.saturating_sub(1);
                dev.tx_bytes = dev.tx_bytes.saturating_sub(wire);
            }
        }
        host.emit_packet(packet);
    }
}

/// Restore the stored NR_read entry and stop logging. Module memory is left
/// as is; removal does not scrub the header or the secrets.
pub fn cleanup(host: &mut Host) -> Result<()> {
    let st = host.sebek.as_mut().ok_or_else(|| Error::State("monitor not installed".into()))?;
    if !st.active {
        return Err(Error::State("monitor already removed".into()));
    }
    st.active = false;
    let original = st.original_read;
    host.syscalls.set(NR_READ, original);
    Ok(())
}

// ---------------------------------------------------------------------------
// Collector
// ---------------------------------------------------------------------------

/// The adversary-side receiver. Packets with the wrong magic are dropped
/// silently; everything else lands in the ground-truth log.
pub struct Collector {
    pub magic: u32,
    pub port: u16,
    pub log: Vec<SebekRecord>,
    pub ignored: u64,
}

impl Collector {
    pub fn new(magic: u32, port: u16) -> Self {
        Collector { magic, port, log: Vec::new(), ignored: 0 }
    }

    pub fn receive(&mut self, packet: &Packet) {
        if packet.proto != Proto::Udp || packet.dst_port != self.port {
            return;
        }
        match SebekRecord::decode(&packet.payload) {
            Ok(r) if r.magic == self.magic => self.log.push(r),
            _ => self.ignored += 1,
        }
    }

    /// All captured data bytes in counter order.
    pub fn data_concat(&self) -> Vec<u8> {
        let mut sorted: Vec<&SebekRecord> = self.log.iter().collect();
        sorted.sort_by_key(|r| r.counter);
        sorted.iter().flat_map(|r| r.data.iter().copied()).collect()
    }
}
