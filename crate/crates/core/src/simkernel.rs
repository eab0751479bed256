//! Deterministic model of the target host's kernel-visible state: syscall
//! table, loaded modules, memory image, filesystem, processes, network device
//! counters, and a monotone clock.
//!
//! Nothing here touches the real kernel. Addresses are 32-bit values inside
//! two fixed regions (kernel text and module space), memory is a pair of flat
//! byte arrays, and all randomness flows from the boot seed.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::netsim::{Packet, Proto};
use crate::sebek::SebekState;
use crate::{Error, Result};

pub const KERNEL_TEXT_START: u32 = 0xc010_0000;
pub const KERNEL_TEXT_END: u32 = 0xc040_0000;
pub const MODULE_REGION_START: u32 = 0xc880_0000;
pub const MODULE_REGION_END: u32 = 0xc900_0000;

/// Gap between consecutive syscall entries beyond which the table is
/// considered tampered with.
pub const NEIGHBOR_GAP_LIMIT: u32 = 4096;

pub const NR_READ: usize = 3;
pub const NR_WRITE: usize = 4;
pub const SYSCALL_COUNT: usize = 256;

/// First module allocation slot. The boot allocator leaves a fixed gap at the
/// bottom of the module region, so the first loaded module lands at
/// 0xc884e000.
pub const FIRST_MODULE_BASE: u32 = MODULE_REGION_START + 0x4_e000;

/// A 32-bit kernel virtual address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Address(pub u32);

impl Address {
    pub fn in_kernel_text(self) -> bool {
        (KERNEL_TEXT_START..KERNEL_TEXT_END).contains(&self.0)
    }

    pub fn in_module_region(self) -> bool {
        (MODULE_REGION_START..MODULE_REGION_END).contains(&self.0)
    }

    pub fn is_mapped(self) -> bool {
        self.in_kernel_text() || self.in_module_region()
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#010x}", self.0)
    }
}

// ---------------------------------------------------------------------------
// Clock
// ---------------------------------------------------------------------------

/// Millisecond tick counter plus a seeded high-resolution timestamp source.
///
/// `hi_res()` is strictly increasing across calls within a run and
/// reproducible from the seed.
#[derive(Debug, Clone)]
pub struct SimClock {
    pub tick: u64,
    last_ns: u64,
    jitter: ChaCha12Rng,
}

impl SimClock {
    pub fn new(seed: u64) -> Self {
        SimClock {
            tick: 0,
            last_ns: 0,
            jitter: ChaCha12Rng::seed_from_u64(seed ^ 0x636c6f636b),
        }
    }

    /// Nanosecond timestamp derived from the tick plus seeded jitter.
    pub fn hi_res(&mut self) -> u64 {
        let base = self.tick * 1_000_000;
        let jitter = self.jitter.gen_range(1..1_500u64);
        self.last_ns = self.last_ns.max(base) + jitter;
        self.last_ns
    }

    /// Account elapsed work time (scheduling delays, hash computation). Keeps
    /// hi_res strictly increasing.
    pub fn advance_ns(&mut self, ns: u64) {
        self.last_ns += ns;
    }

    pub fn sec_usec(ns: u64) -> (u32, u32) {
        ((ns / 1_000_000_000) as u32, ((ns % 1_000_000_000) / 1_000) as u32)
    }
}

// ---------------------------------------------------------------------------
// Memory image
// ---------------------------------------------------------------------------

/// Flat byte backing for the two mapped regions.
pub struct MemoryImage {
    text: Vec<u8>,
    modules: Vec<u8>,
}

impl MemoryImage {
    fn new() -> Self {
        MemoryImage {
            text: vec![0; (KERNEL_TEXT_END - KERNEL_TEXT_START) as usize],
            modules: vec![0; (MODULE_REGION_END - MODULE_REGION_START) as usize],
        }
    }

    fn backing(&self, addr: Address) -> Option<(&Vec<u8>, usize)> {
        if addr.in_kernel_text() {
            Some((&self.text, (addr.0 - KERNEL_TEXT_START) as usize))
        } else if addr.in_module_region() {
            Some((&self.modules, (addr.0 - MODULE_REGION_START) as usize))
        } else {
            None
        }
    }

    pub fn is_mapped_range(&self, addr: Address, len: usize) -> bool {
        match self.backing(addr) {
            Some((buf, off)) => off + len <= buf.len(),
            None => false,
        }
    }

    pub fn read_bytes(&self, addr: Address, len: usize) -> Option<Vec<u8>> {
        let (buf, off) = self.backing(addr)?;
        if off + len > buf.len() {
            return None;
        }
        Some(buf[off..off + len].to_vec())
    }

    pub fn read_u32_le(&self, addr: Address) -> Option<u32> {
        let (buf, off) = self.backing(addr)?;
        if off + 4 > buf.len() {
            return None;
        }
        Some(u32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]]))
    }

    pub(crate) fn write_bytes(&mut self, addr: Address, data: &[u8]) -> Result<()> {
        let (off, buf) = if addr.in_kernel_text() {
            ((addr.0 - KERNEL_TEXT_START) as usize, &mut self.text)
        } else if addr.in_module_region() {
            ((addr.0 - MODULE_REGION_START) as usize, &mut self.modules)
        } else {
            return Err(Error::Fault(addr.0));
        };
        if off + data.len() > buf.len() {
            return Err(Error::Fault(addr.0));
        }
        buf[off..off + data.len()].copy_from_slice(data);
        Ok(())
    }

    /// Direct slice of the module region, for the brute-force scanner.
    pub fn module_region(&self) -> &[u8] {
        &self.modules
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(&self.text);
        h.update(&self.modules);
        h.finalize().into()
    }
}

// ---------------------------------------------------------------------------
// Syscall table
// ---------------------------------------------------------------------------

pub struct SyscallTable {
    entries: Vec<Address>,
    boot: Vec<Address>,
}

impl SyscallTable {
    fn new(layout_seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(layout_seed ^ 0x5ca1_1ab1e);
        let mut gaps: Vec<u32> = (0..SYSCALL_COUNT - 1)
            .map(|_| rng.gen_range(0x60..0x180u32) & !3)
            .collect();
        let base = if layout_seed == 0 {
            // Default layout pins the read/write entries to the reference
            // values; the gap between them is 0xfc.
            gaps[NR_READ] = 0xfc;
            0xc013_2ecc - (gaps[0] + gaps[1] + gaps[2])
        } else {
            KERNEL_TEXT_START + 0x3_0000 + (rng.gen_range(0..0x1000u32) & !3)
        };
        let mut entries = Vec::with_capacity(SYSCALL_COUNT);
        let mut at = base;
        entries.push(Address(at));
        for g in &gaps {
            at += g;
            entries.push(Address(at));
        }
        debug_assert!(entries.iter().all(|a| a.in_kernel_text()));
        SyscallTable { boot: entries.clone(), entries }
    }

    pub fn get(&self, nr: usize) -> Address {
        self.entries[nr]
    }

    pub fn set(&mut self, nr: usize, addr: Address) {
        self.entries[nr] = addr;
    }

    /// Boot-time entry for a slot. Oracle access only; the detectors never
    /// consult this.
    pub fn boot_entry(&self, nr: usize) -> Address {
        self.boot[nr]
    }
}

// ---------------------------------------------------------------------------
// Kernel modules
// ---------------------------------------------------------------------------

/// Module header layout (24 bytes, little-endian):
/// next_header | name_string addr | size | flags | init | cleanup.
pub const MODULE_HEADER_LEN: usize = 24;
/// Offset of the symbol table within a module: u32 count, then per symbol a
/// u32 address followed by a NUL-terminated name.
pub const MODULE_SYMTAB_OFFSET: u32 = 0x18;

#[derive(Debug, Clone)]
pub struct KernelModule {
    pub name: String,
    pub base: Address,
    pub size: u32,
    pub header_addr: Address,
    pub init_addr: Address,
    pub cleanup_addr: Address,
    pub hidden: bool,
    pub symbols: Vec<(String, Address)>,
}

/// Everything the loader needs to materialize a module in memory. Offsets are
/// relative to the module base; the loader writes the header, symbol table and
/// name string, then the extra data blobs.
#[derive(Debug, Clone)]
pub struct ModuleDescriptor {
    pub name: String,
    pub size: u32,
    pub hidden: bool,
    pub symbols: Vec<(String, u32)>,
    pub init_offset: u32,
    pub cleanup_offset: u32,
    pub data: Vec<(u32, Vec<u8>)>,
}

// ---------------------------------------------------------------------------
// Filesystem
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    Regular,
    Device,
    Procfs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceRule {
    Zero,
    Null,
}

#[derive(Debug, Clone)]
pub struct FileNode {
    pub kind: FileKind,
    pub content: Vec<u8>,
    pub device_rule: Option<DeviceRule>,
    pub suid_root: bool,
    pub mtime_tick: u64,
}

impl FileNode {
    pub fn regular(content: Vec<u8>) -> Self {
        FileNode { kind: FileKind::Regular, content, device_rule: None, suid_root: false, mtime_tick: 0 }
    }
}

/// One entry in the disk write history. The history is what a forensic
/// examiner could in principle recover, so every content change is recorded
/// verbatim.
#[derive(Debug, Clone)]
pub enum FsEvent {
    Created { seq: u64, path: String, content: Vec<u8> },
    Overwritten { seq: u64, path: String, content: Vec<u8> },
    Renamed { seq: u64, from: String, to: String },
    Unlinked { seq: u64, path: String, last_content: Vec<u8> },
}

impl FsEvent {
    pub fn seq(&self) -> u64 {
        match self {
            FsEvent::Created { seq, .. }
            | FsEvent::Overwritten { seq, .. }
            | FsEvent::Renamed { seq, .. }
            | FsEvent::Unlinked { seq, .. } => *seq,
        }
    }
}

pub struct FileSystem {
    nodes: BTreeMap<String, FileNode>,
    pub history: Vec<FsEvent>,
    seq: u64,
    root_only_prefixes: Vec<String>,
}

impl FileSystem {
    fn new(root_only_prefixes: Vec<String>) -> Self {
        FileSystem { nodes: BTreeMap::new(), history: Vec::new(), seq: 0, root_only_prefixes }
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    fn check_write(&self, uid: u32, path: &str) -> Result<()> {
        if uid != 0 && self.root_only_prefixes.iter().any(|p| path.starts_with(p.as_str())) {
            return Err(Error::Privilege { uid, what: format!("write {path}") });
        }
        Ok(())
    }

    pub fn node(&self, path: &str) -> Option<&FileNode> {
        self.nodes.get(path)
    }

    pub fn exists(&self, path: &str) -> bool {
        self.nodes.contains_key(path)
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.nodes.keys()
    }

    pub fn create(&mut self, uid: u32, path: &str, node: FileNode) -> Result<()> {
        self.check_write(uid, path)?;
        let seq = self.next_seq();
        self.history.push(FsEvent::Created { seq, path: path.to_string(), content: node.content.clone() });
        self.nodes.insert(path.to_string(), node);
        Ok(())
    }

    pub fn overwrite(&mut self, uid: u32, path: &str, content: Vec<u8>, tick: u64) -> Result<()> {
        self.check_write(uid, path)?;
        let node = self.nodes.get_mut(path).ok_or_else(|| Error::NotFound(path.to_string()))?;
        if node.kind != FileKind::Regular {
            return Err(Error::UnsupportedMapping(path.to_string()));
        }
        node.content = content.clone();
        node.mtime_tick = tick;
        let seq = self.next_seq();
        self.history.push(FsEvent::Overwritten { seq, path: path.to_string(), content });
        Ok(())
    }

    pub fn append(&mut self, uid: u32, path: &str, data: &[u8], tick: u64) -> Result<()> {
        let mut content = match self.nodes.get(path) {
            Some(n) => n.content.clone(),
            None => {
                self.create(uid, path, FileNode::regular(Vec::new()))?;
                Vec::new()
            }
        };
        content.extend_from_slice(data);
        self.overwrite(uid, path, content, tick)
    }

    pub fn rename(&mut self, uid: u32, from: &str, to: &str) -> Result<()> {
        self.check_write(uid, from)?;
        self.check_write(uid, to)?;
        let node = self.nodes.remove(from).ok_or_else(|| Error::NotFound(from.to_string()))?;
        self.nodes.insert(to.to_string(), node);
        let seq = self.next_seq();
        self.history.push(FsEvent::Renamed { seq, from: from.to_string(), to: to.to_string() });
        Ok(())
    }

    pub fn unlink(&mut self, uid: u32, path: &str) -> Result<()> {
        self.check_write(uid, path)?;
        let node = self.nodes.remove(path).ok_or_else(|| Error::NotFound(path.to_string()))?;
        let seq = self.next_seq();
        self.history.push(FsEvent::Unlinked { seq, path: path.to_string(), last_content: node.content });
        Ok(())
    }

    /// Immediate directory entries under `dir` (paths are flat keys; a
    /// directory exists when anything lives under it).
    pub fn list_dir(&self, dir: &str) -> Vec<String> {
        let prefix = if dir.ends_with('/') { dir.to_string() } else { format!("{dir}/") };
        let mut out: Vec<String> = Vec::new();
        for path in self.nodes.keys() {
            if let Some(rest) = path.strip_prefix(&prefix) {
                let entry = match rest.split_once('/') {
                    Some((head, _)) => head.to_string(),
                    None => rest.to_string(),
                };
                if !entry.is_empty() && !out.contains(&entry) {
                    out.push(entry);
                }
            }
        }
        out.sort();
        out
    }
}

// ---------------------------------------------------------------------------
// Processes, descriptors, sockets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum FdTarget {
    File { path: String, offset: usize },
    Socket(u32),
    Null,
}

#[derive(Debug, Clone)]
pub struct Process {
    pub pid: u32,
    pub uid: u32,
    pub program_name: String,
    pub argv: Vec<String>,
    pub fds: BTreeMap<u32, FdTarget>,
    pub alive: bool,
    pub exit_status: Option<i32>,
}

#[derive(Debug)]
pub struct Socket {
    pub id: u32,
    pub local_port: u16,
    pub peer_ip: Ipv4Addr,
    pub peer_port: u16,
    pub recv: VecDeque<u8>,
}

// ---------------------------------------------------------------------------
// Network devices
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetDevice {
    pub name: String,
    pub rx_bytes: u64,
    pub rx_packets: u64,
    pub tx_bytes: u64,
    pub tx_packets: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DeviceCounters {
    pub rx_bytes: u64,
    pub rx_packets: u64,
    pub tx_bytes: u64,
    pub tx_packets: u64,
}

impl NetDevice {
    pub fn counters(&self) -> DeviceCounters {
        DeviceCounters {
            rx_bytes: self.rx_bytes,
            rx_packets: self.rx_packets,
            tx_bytes: self.tx_bytes,
            tx_packets: self.tx_packets,
        }
    }
}

// ---------------------------------------------------------------------------
// Simulated executables
// ---------------------------------------------------------------------------

pub const SIM_EXEC_MAGIC: &[u8] = b"#!simx\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadVia {
    Mmap,
    Read,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LibraryPlan {
    pub path: String,
    pub via: LoadVia,
}

/// One scripted action of a simulated program. Programs are tiny declarative
/// scripts: the lab models what a binary does to the kernel surface, not how
/// it computes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgramStep {
    WriteStdout { data: String },
    WriteStderr { data: String },
    EchoStdin,
    ReportUid,
    Exit { code: i32 },
    CreateFile { path: String, data: String },
    /// Scripted parameter-overflow trigger: `--overflow <path> [args..]`
    /// spawns `<path>` with this process's (possibly SUID-elevated) uid.
    SuidSpawn,
    /// Locate the hidden monitor by scanning module memory and jump to its
    /// cleanup entry. Requires root.
    DisableSebekMonitor,
    SpawnKebesServer { port: u16 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimExecutable {
    #[serde(default)]
    pub libraries: Vec<LibraryPlan>,
    #[serde(default)]
    pub program: Vec<ProgramStep>,
}

impl SimExecutable {
    pub fn image(&self) -> Vec<u8> {
        let mut out = SIM_EXEC_MAGIC.to_vec();
        out.extend_from_slice(serde_json::to_string(self).expect("serializable").as_bytes());
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let body = bytes
            .strip_prefix(SIM_EXEC_MAGIC)
            .ok_or_else(|| Error::Exec("not a sim executable image".into()))?;
        serde_json::from_slice(body).map_err(|e| Error::Exec(format!("bad image: {e}")))
    }
}

#[derive(Debug, Clone)]
pub enum FdSpec {
    Inherit,
    Null,
    File(String),
}

#[derive(Debug, Clone)]
pub struct FdPlan {
    pub stdin: FdSpec,
    pub stdout: FdSpec,
    pub stderr: FdSpec,
}

impl FdPlan {
    pub fn inherit() -> Self {
        FdPlan { stdin: FdSpec::Inherit, stdout: FdSpec::Inherit, stderr: FdSpec::Inherit }
    }

    pub fn null() -> Self {
        FdPlan { stdin: FdSpec::Null, stdout: FdSpec::Null, stderr: FdSpec::Null }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExecOutcome {
    pub pid: u32,
    pub status: Option<i32>,
}

// ---------------------------------------------------------------------------
// Kernel function registry
// ---------------------------------------------------------------------------

/// What lives at a given kernel address that can be jumped to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFn {
    SysRead,
    SysWrite,
    SebekReadHook,
    SebekCleanup,
    SebekInit,
    Nop,
}

// ---------------------------------------------------------------------------
// Host configuration
// ---------------------------------------------------------------------------

fn default_hostname() -> String {
    "honey".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub name: String,
    #[serde(default)]
    pub boot_rx_bytes: u64,
    #[serde(default)]
    pub boot_rx_packets: u64,
    #[serde(default)]
    pub boot_tx_bytes: u64,
    #[serde(default)]
    pub boot_tx_packets: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileConfig {
    pub path: String,
    #[serde(default = "FileConfig::default_kind")]
    pub kind: FileKind,
    #[serde(default)]
    pub content: String,
    #[serde(default)]
    pub device_rule: Option<DeviceRule>,
    #[serde(default)]
    pub suid_root: bool,
    #[serde(default)]
    pub executable: Option<SimExecutable>,
}

impl FileConfig {
    fn default_kind() -> FileKind {
        FileKind::Regular
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HostConfig {
    pub seed: u64,
    #[serde(default = "default_hostname")]
    pub hostname: String,
    #[serde(default)]
    pub layout_seed: u64,
    pub devices: Vec<DeviceConfig>,
    #[serde(default)]
    pub files: Vec<FileConfig>,
    #[serde(default)]
    pub root_only_prefixes: Vec<String>,
}

impl HostConfig {
    /// The stock lab host: one ethernet device with plausible boot counters,
    /// a small Unix-ish filesystem, and a few executables with declared
    /// library load plans.
    pub fn default_lab() -> Self {
        let lib_mmap = |path: &str| LibraryPlan { path: path.into(), via: LoadVia::Mmap };
        let lib_read = |path: &str| LibraryPlan { path: path.into(), via: LoadVia::Read };
        let text = |path: &str, content: &str| FileConfig {
            path: path.into(),
            kind: FileKind::Regular,
            content: content.into(),
            device_rule: None,
            suid_root: false,
            executable: None,
        };
        let exec = |path: &str, image: SimExecutable, suid: bool| FileConfig {
            path: path.into(),
            kind: FileKind::Regular,
            content: String::new(),
            device_rule: None,
            suid_root: suid,
            executable: Some(image),
        };
        HostConfig {
            seed: 1,
            hostname: default_hostname(),
            layout_seed: 0,
            devices: vec![DeviceConfig {
                name: "eth0".into(),
                boot_rx_bytes: 1_482_113,
                boot_rx_packets: 9_218,
                boot_tx_bytes: 912_406,
                boot_tx_packets: 6_511,
            }],
            files: vec![
                text("/etc/passwd", "root:x:0:0:root:/root:/bin/sh\nwww-data:x:33:33::/var/www:/bin/false\n"),
                text("/etc/shadow", "root:$1$4fXbManQ$yke3wQ9DM3d9XkwOWBYab/:12345:0:99999:7:::\n"),
                text("/etc/hostname", "honey\n"),
                text("/var/log/messages", "Mar 11 09:14:02 honey kernel: eth0: link up\n"),
                text("/var/run/httpsd.pid", "2\n"),
                text("/tmp/.keep", ""),
                text("/lib/libc.sim.so", "LIBC-SIM-IMAGE 4f2a9c electric fence heap guard 77124\n"),
                text("/lib/libssl.sim.so", "LIBSSL-SIM-IMAGE 91bb03 handshake state machine 5512\n"),
                text("/lib/libnss.sim.so", "LIBNSS-SIM-IMAGE 3d0c41 resolver tables 88210\n"),
                exec(
                    "/bin/ls",
                    SimExecutable {
                        libraries: vec![lib_mmap("/lib/libc.sim.so")],
                        program: vec![ProgramStep::WriteStdout { data: "bin\netc\nlib\ntmp\nvar\n".into() }],
                    },
                    false,
                ),
                exec(
                    "/usr/bin/id",
                    SimExecutable {
                        libraries: vec![lib_mmap("/lib/libc.sim.so")],
                        program: vec![ProgramStep::ReportUid],
                    },
                    false,
                ),
                exec(
                    "/usr/bin/probe",
                    SimExecutable {
                        libraries: vec![lib_mmap("/lib/libc.sim.so"), lib_read("/lib/libnss.sim.so")],
                        program: vec![ProgramStep::WriteStdout { data: "probe ok\n".into() }],
                    },
                    false,
                ),
                exec(
                    "/bin/cat",
                    SimExecutable {
                        libraries: vec![lib_mmap("/lib/libc.sim.so")],
                        program: vec![ProgramStep::EchoStdin],
                    },
                    false,
                ),
                exec(
                    "/usr/local/bin/reportd",
                    SimExecutable {
                        libraries: vec![lib_mmap("/lib/libc.sim.so")],
                        program: vec![ProgramStep::WriteStdout { data: "ok".into() }],
                    },
                    false,
                ),
                exec(
                    "/usr/local/bin/vuln-suid",
                    SimExecutable {
                        libraries: vec![lib_mmap("/lib/libc.sim.so")],
                        program: vec![ProgramStep::SuidSpawn],
                    },
                    true,
                ),
            ],
            root_only_prefixes: vec!["/etc/shadow".into(), "/root/".into()],
        }
    }
}

// ---------------------------------------------------------------------------
// Host
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ReadTraceEntry {
    pub pid: u32,
    pub fd: u32,
    pub len: usize,
}

pub struct Host {
    pub config: HostConfig,
    pub ip: Ipv4Addr,
    pub clock: SimClock,
    pub syscalls: SyscallTable,
    pub memory: MemoryImage,
    pub modules: Vec<KernelModule>,
    next_module_base: u32,
    pub fs: FileSystem,
    pub processes: BTreeMap<u32, Process>,
    next_pid: u32,
    pub devices: Vec<NetDevice>,
    pub sockets: BTreeMap<u32, Socket>,
    next_socket_id: u32,
    pub kernel_functions: BTreeMap<Address, KernelFn>,
    pub sebek: Option<SebekState>,
    /// NIC egress queue; the network drains it each tick.
    pub egress: VecDeque<Packet>,
    /// What a host-local sniffer would see. Hidden packets never land here.
    pub local_capture: Vec<Packet>,
    /// Declared (pid, port) listeners waiting to be wired to connections.
    pub pending_listeners: Vec<(u32, u16)>,
    /// Every sys_read dispatch, for no-read-discipline oracles.
    pub read_trace: Vec<ReadTraceEntry>,
    pub crashed: bool,
    rng: ChaCha12Rng,
}

impl Host {
    pub fn boot(config: HostConfig) -> Result<Host> {
        let mut seen = Vec::new();
        for d in &config.devices {
            if seen.contains(&d.name) {
                return Err(Error::Config(format!("duplicate device {}", d.name)));
            }
            seen.push(d.name.clone());
        }
        let mut paths = Vec::new();
        for f in &config.files {
            if !f.path.starts_with('/') {
                return Err(Error::Config(format!("relative path {}", f.path)));
            }
            if paths.contains(&f.path) {
                return Err(Error::Config(format!("duplicate path {}", f.path)));
            }
            paths.push(f.path.clone());
        }

        let syscalls = SyscallTable::new(config.layout_seed);
        let mut kernel_functions = BTreeMap::new();
        for nr in 0..SYSCALL_COUNT {
            let f = match nr {
                NR_READ => KernelFn::SysRead,
                NR_WRITE => KernelFn::SysWrite,
                _ => KernelFn::Nop,
            };
            kernel_functions.insert(syscalls.get(nr), f);
        }

        let mut fs = FileSystem::new(config.root_only_prefixes.clone());
        for (path, rule) in [("/dev/zero", DeviceRule::Zero), ("/dev/null", DeviceRule::Null)] {
            fs.nodes.insert(
                path.to_string(),
                FileNode {
                    kind: FileKind::Device,
                    content: Vec::new(),
                    device_rule: Some(rule),
                    suid_root: false,
                    mtime_tick: 0,
                },
            );
        }
        for path in ["/proc/net/dev", "/proc/modules"] {
            fs.nodes.insert(
                path.to_string(),
                FileNode {
                    kind: FileKind::Procfs,
                    content: Vec::new(),
                    device_rule: None,
                    suid_root: false,
                    mtime_tick: 0,
                },
            );
        }
        for f in &config.files {
            let content = match &f.executable {
                Some(img) => img.image(),
                None => f.content.clone().into_bytes(),
            };
            fs.nodes.insert(
                f.path.clone(),
                FileNode {
                    kind: f.kind,
                    content,
                    device_rule: f.device_rule,
                    suid_root: f.suid_root,
                    mtime_tick: 0,
                },
            );
        }

        let devices = config
            .devices
            .iter()
            .map(|d| NetDevice {
                name: d.name.clone(),
                rx_bytes: d.boot_rx_bytes,
                rx_packets: d.boot_rx_packets,
                tx_bytes: d.boot_tx_bytes,
                tx_packets: d.boot_tx_packets,
            })
            .collect();

        let mut processes = BTreeMap::new();
        processes.insert(
            1,
            Process {
                pid: 1,
                uid: 0,
                program_name: "/sbin/init".into(),
                argv: vec![],
                fds: BTreeMap::from([(0, FdTarget::Null), (1, FdTarget::Null), (2, FdTarget::Null)]),
                alive: true,
                exit_status: None,
            },
        );

        Ok(Host {
            clock: SimClock::new(config.seed),
            rng: ChaCha12Rng::seed_from_u64(config.seed ^ 0x686f7374),
            ip: Ipv4Addr::new(10, 0, 0, 2),
            syscalls,
            memory: MemoryImage::new(),
            modules: Vec::new(),
            next_module_base: FIRST_MODULE_BASE,
            fs,
            processes,
            next_pid: 2,
            devices,
            sockets: BTreeMap::new(),
            next_socket_id: 1,
            kernel_functions,
            sebek: None,
            egress: VecDeque::new(),
            local_capture: Vec::new(),
            pending_listeners: Vec::new(),
            read_trace: Vec::new(),
            crashed: false,
            config,
        })
    }

    /// Fresh boot of the same configuration. The disk (and its write
    /// history) survives; modules, processes and the monitor do not. Only
    /// kernel-provided nodes (devices, procfs) reappear regardless of what
    /// happened to the disk.
    pub fn reboot(self) -> Result<Host> {
        let fs = self.fs;
        let mut host = Host::boot(self.config)?;
        let boot_fs = std::mem::replace(&mut host.fs, fs);
        for (path, node) in boot_fs.nodes {
            if matches!(node.kind, FileKind::Device | FileKind::Procfs) {
                host.fs.nodes.insert(path, node);
            }
        }
        Ok(host)
    }

    pub fn rng(&mut self) -> &mut ChaCha12Rng {
        &mut self.rng
    }

    pub fn random_name(&mut self, len: usize) -> String {
        const CHARSET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
        (0..len).map(|_| CHARSET[self.rng.gen_range(0..CHARSET.len())] as char).collect()
    }

    // -- modules ------------------------------------------------------------

    pub fn load_module(&mut self, desc: ModuleDescriptor) -> Result<usize> {
        let size = desc.size.max(MODULE_HEADER_LEN as u32);
        let base = self.next_module_base;
        if base.checked_add(size).is_none_or(|end| end > MODULE_REGION_END) {
            return Err(Error::Resource("module region exhausted".into()));
        }
        // Symbol table directly after the header, then the name string.
        let mut prefix = Vec::new();
        prefix.extend_from_slice(&(desc.symbols.len() as u32).to_le_bytes());
        let mut symbols = Vec::new();
        for (name, off) in &desc.symbols {
            if *off >= size {
                return Err(Error::Config(format!("symbol {name} outside module")));
            }
            let addr = Address(base + off);
            prefix.extend_from_slice(&addr.0.to_le_bytes());
            prefix.extend_from_slice(name.as_bytes());
            prefix.push(0);
            symbols.push((name.clone(), addr));
        }
        let name_addr = base + MODULE_SYMTAB_OFFSET + prefix.len() as u32;
        prefix.extend_from_slice(desc.name.as_bytes());
        prefix.push(0);
        let prefix_end = MODULE_SYMTAB_OFFSET as usize + prefix.len();

        let init_addr = Address(base + desc.init_offset);
        let cleanup_addr = Address(base + desc.cleanup_offset);
        for (what, addr) in [("init", init_addr), ("cleanup", cleanup_addr)] {
            if addr.0 < base || addr.0 >= base + size {
                return Err(Error::Config(format!("{what} offset outside module")));
            }
        }

        // The header links to the previously loaded module, or to the kernel
        // side of the list for the first one.
        let next = self.modules.last().map(|m| m.header_addr).unwrap_or(Address(KERNEL_TEXT_START));
        let mut header = Vec::with_capacity(MODULE_HEADER_LEN);
        header.extend_from_slice(&next.0.to_le_bytes());
        header.extend_from_slice(&name_addr.to_le_bytes());
        header.extend_from_slice(&size.to_le_bytes());
        header.extend_from_slice(&1u32.to_le_bytes()); // flags: running
        header.extend_from_slice(&init_addr.0.to_le_bytes());
        header.extend_from_slice(&cleanup_addr.0.to_le_bytes());
        self.memory.write_bytes(Address(base), &header)?;
        self.memory.write_bytes(Address(base + MODULE_SYMTAB_OFFSET), &prefix)?;

        for (off, blob) in &desc.data {
            if (*off as usize) < prefix_end || off + blob.len() as u32 > size {
                return Err(Error::Config(format!("data blob at {off:#x} outside module data area")));
            }
            self.memory.write_bytes(Address(base + off), blob)?;
        }

        self.kernel_functions.insert(init_addr, KernelFn::SebekInit);
        self.kernel_functions.insert(cleanup_addr, KernelFn::Nop);

        let module = KernelModule {
            name: desc.name,
            base: Address(base),
            size,
            header_addr: Address(base),
            init_addr,
            cleanup_addr,
            hidden: desc.hidden,
            symbols,
        };
        self.modules.push(module);
        self.next_module_base = (base + (size + 0xfff)) & !0xfff;
        Ok(self.modules.len() - 1)
    }

    /// The module list as /proc/modules would show it.
    pub fn public_modules(&self) -> Vec<&KernelModule> {
        self.modules.iter().filter(|m| !m.hidden).collect()
    }

    // -- processes ----------------------------------------------------------

    pub fn process(&self, pid: u32) -> Result<&Process> {
        self.processes.get(&pid).filter(|p| p.alive).ok_or(Error::Process(pid))
    }

    fn process_mut(&mut self, pid: u32) -> Result<&mut Process> {
        self.processes.get_mut(&pid).filter(|p| p.alive).ok_or(Error::Process(pid))
    }

    pub fn spawn(&mut self, uid: u32, program_name: &str, fds: BTreeMap<u32, FdTarget>) -> u32 {
        let pid = self.next_pid;
        self.next_pid += 1;
        self.processes.insert(
            pid,
            Process {
                pid,
                uid,
                program_name: program_name.to_string(),
                argv: vec![],
                fds,
                alive: true,
                exit_status: None,
            },
        );
        pid
    }

    pub fn fork(&mut self, pid: u32) -> Result<u32> {
        let parent = self.process(pid)?.clone();
        let child_pid = self.next_pid;
        self.next_pid += 1;
        self.processes.insert(
            child_pid,
            Process {
                pid: child_pid,
                uid: parent.uid,
                program_name: parent.program_name,
                argv: parent.argv,
                fds: parent.fds,
                alive: true,
                exit_status: None,
            },
        );
        Ok(child_pid)
    }

    pub fn kill(&mut self, pid: u32) -> Result<()> {
        let p = self.process_mut(pid)?;
        p.alive = false;
        p.exit_status = Some(137);
        Ok(())
    }

    pub fn open(&mut self, pid: u32, path: &str) -> Result<u32> {
        if !self.fs.exists(path) {
            return Err(Error::NotFound(path.to_string()));
        }
        let proc = self.process_mut(pid)?;
        let fd = proc.fds.keys().max().map_or(3, |m| m + 1);
        proc.fds.insert(fd, FdTarget::File { path: path.to_string(), offset: 0 });
        Ok(fd)
    }

    pub fn close(&mut self, pid: u32, fd: u32) -> Result<()> {
        let proc = self.process_mut(pid)?;
        proc.fds.remove(&fd).ok_or(Error::Descriptor { pid, fd })?;
        Ok(())
    }

    // -- syscalls -----------------------------------------------------------

    /// Dispatch a read through the current NR_read table entry, so any
    /// installed hook observes the call exactly once.
    pub fn sys_read(&mut self, pid: u32, fd: u32, n: usize) -> Result<Vec<u8>> {
        let entry = self.syscalls.get(NR_READ);
        match self.kernel_functions.get(&entry).copied() {
            Some(KernelFn::SysRead) => {
                let data = self.do_read(pid, fd, n)?;
                self.read_trace.push(ReadTraceEntry { pid, fd, len: data.len() });
                Ok(data)
            }
            Some(KernelFn::SebekReadHook) => {
                let data = self.do_read(pid, fd, n)?;
                self.read_trace.push(ReadTraceEntry { pid, fd, len: data.len() });
                if let Some(mut st) = self.sebek.take() {
                    if st.active && !data.is_empty() {
                        crate::sebek::on_read(self, &mut st, pid, fd, &data);
                    }
                    self.sebek = Some(st);
                }
                Ok(data)
            }
            _ => {
                self.crashed = true;
                Err(Error::Fault(entry.0))
            }
        }
    }

    fn do_read(&mut self, pid: u32, fd: u32, n: usize) -> Result<Vec<u8>> {
        self.process(pid)?;
        let target = {
            let proc = self.processes.get(&pid).unwrap();
            proc.fds.get(&fd).cloned().ok_or(Error::Descriptor { pid, fd })?
        };
        match target {
            FdTarget::Null => Ok(Vec::new()),
            FdTarget::Socket(id) => {
                let sock = self.sockets.get_mut(&id).ok_or(Error::Descriptor { pid, fd })?;
                let take = n.min(sock.recv.len());
                Ok(sock.recv.drain(..take).collect())
            }
            FdTarget::File { path, offset } => {
                let content = self.file_bytes(&path)?;
                let data = match self.fs.node(&path).map(|n| (n.kind, n.device_rule)) {
                    Some((FileKind::Device, Some(DeviceRule::Zero))) => vec![0u8; n],
                    Some((FileKind::Device, Some(DeviceRule::Null))) => Vec::new(),
                    _ => {
                        let end = (offset + n).min(content.len());
                        if offset >= content.len() {
                            Vec::new()
                        } else {
                            content[offset..end].to_vec()
                        }
                    }
                };
                let advance = data.len();
                if let Some(FdTarget::File { offset, .. }) =
                    self.processes.get_mut(&pid).unwrap().fds.get_mut(&fd)
                {
                    *offset += advance;
                }
                Ok(data)
            }
        }
    }

    /// Current byte content of a path, rendering procfs nodes on demand.
    fn file_bytes(&mut self, path: &str) -> Result<Vec<u8>> {
        let node = self.fs.node(path).ok_or_else(|| Error::NotFound(path.to_string()))?;
        match node.kind {
            FileKind::Procfs => Ok(self.render_procfs(path)),
            _ => Ok(node.content.clone()),
        }
    }

    fn render_procfs(&mut self, path: &str) -> Vec<u8> {
        match path {
            "/proc/net/dev" => self.render_proc_net_dev().into_bytes(),
            "/proc/modules" => {
                let mut out = String::new();
                for m in self.public_modules() {
                    out.push_str(&format!("{:<20} {:>8}  1\n", m.name, m.size));
                }
                out.into_bytes()
            }
            _ => Vec::new(),
        }
    }

    /// Map a regular file and return its full content. Never dispatches
    /// through the syscall table, so no read hook observes it.
    pub fn mmap_read(&mut self, _pid: u32, path: &str) -> Result<Vec<u8>> {
        let node = self.fs.node(path).ok_or_else(|| Error::NotFound(path.to_string()))?;
        match node.kind {
            FileKind::Regular => Ok(node.content.clone()),
            FileKind::Device | FileKind::Procfs => Err(Error::UnsupportedMapping(path.to_string())),
        }
    }

    /// Drain queued inbound socket bytes. Bypasses the read hook.
    pub fn recv(&mut self, pid: u32, socket_id: u32) -> Result<Vec<u8>> {
        self.process(pid)?;
        let sock = self
            .sockets
            .get_mut(&socket_id)
            .ok_or_else(|| Error::Lookup(format!("socket {socket_id}")))?;
        if sock.recv.is_empty() {
            return Err(Error::WouldBlock);
        }
        Ok(sock.recv.drain(..).collect())
    }

    pub fn write_fd(&mut self, pid: u32, fd: u32, data: &[u8]) -> Result<()> {
        let (uid, target) = {
            let proc = self.process(pid)?;
            (proc.uid, proc.fds.get(&fd).cloned().ok_or(Error::Descriptor { pid, fd })?)
        };
        match target {
            FdTarget::Null => Ok(()),
            FdTarget::File { path, .. } => {
                match self.fs.node(&path).map(|n| (n.kind, n.device_rule)) {
                    Some((FileKind::Device, _)) => Ok(()), // /dev/null sink and friends
                    _ => {
                        let tick = self.clock.tick;
                        self.fs.append(uid, &path, data, tick)
                    }
                }
            }
            FdTarget::Socket(id) => self.socket_send(id, data.to_vec()),
        }
    }

    // -- exec ---------------------------------------------------------------

    pub fn exec(&mut self, parent_pid: u32, path: &str, argv: &[String], plan: &FdPlan) -> Result<ExecOutcome> {
        let parent = self.process(parent_pid)?.clone();
        let node = self.fs.node(path).ok_or_else(|| Error::Exec(format!("{path}: not found")))?;
        let image = SimExecutable::parse(&node.content.clone())?;
        let uid = if node.suid_root { 0 } else { parent.uid };

        let mut fds = BTreeMap::new();
        for (fdnum, spec) in [(0u32, &plan.stdin), (1, &plan.stdout), (2, &plan.stderr)] {
            let target = match spec {
                FdSpec::Inherit => parent.fds.get(&fdnum).cloned().unwrap_or(FdTarget::Null),
                FdSpec::Null => FdTarget::Null,
                FdSpec::File(p) => FdTarget::File { path: p.clone(), offset: 0 },
            };
            fds.insert(fdnum, target);
        }

        let pid = self.spawn(uid, path, fds);
        self.processes.get_mut(&pid).unwrap().argv = argv.to_vec();

        // The dynamic linker touches each configured library: mapped ones via
        // mmap, read-flagged ones via a single read() the hook can see.
        for lib in &image.libraries {
            match lib.via {
                LoadVia::Mmap => {
                    self.mmap_read(pid, &lib.path)
                        .map_err(|e| Error::Exec(format!("library {}: {e}", lib.path)))?;
                }
                LoadVia::Read => {
                    let len = self
                        .fs
                        .node(&lib.path)
                        .ok_or_else(|| Error::Exec(format!("library {}: not found", lib.path)))?
                        .content
                        .len();
                    let fd = self.open(pid, &lib.path)?;
                    self.sys_read(pid, fd, len.max(1))?;
                    self.close(pid, fd)?;
                }
            }
        }

        let status = self.run_program(pid, &image.program)?;
        Ok(ExecOutcome { pid, status })
    }

    fn run_program(&mut self, pid: u32, program: &[ProgramStep]) -> Result<Option<i32>> {
        let mut status = 0i32;
        let mut parked = false;
        for step in program {
            match step {
                ProgramStep::WriteStdout { data } => self.write_fd(pid, 1, data.as_bytes())?,
                ProgramStep::WriteStderr { data } => self.write_fd(pid, 2, data.as_bytes())?,
                ProgramStep::ReportUid => {
                    let uid = self.process(pid)?.uid;
                    self.write_fd(pid, 1, format!("uid={uid}").as_bytes())?;
                }
                ProgramStep::EchoStdin => loop {
                    let data = match self.sys_read(pid, 0, 512) {
                        Ok(d) => d,
                        Err(Error::WouldBlock) => break,
                        Err(e) => return Err(e),
                    };
                    if data.is_empty() {
                        break;
                    }
                    self.write_fd(pid, 1, &data)?;
                },
                ProgramStep::Exit { code } => {
                    status = *code;
                    break;
                }
                ProgramStep::CreateFile { path, data } => {
                    let uid = self.process(pid)?.uid;
                    match self.fs.create(uid, path, FileNode::regular(data.clone().into_bytes())) {
                        Ok(()) => {}
                        Err(Error::Privilege { .. }) => {
                            self.write_fd(pid, 2, format!("{path}: permission denied\n").as_bytes())?;
                            status = 1;
                            break;
                        }
                        Err(e) => return Err(e),
                    }
                }
                ProgramStep::SuidSpawn => {
                    let argv = self.process(pid)?.argv.clone();
                    if argv.first().map(String::as_str) == Some("--overflow") && argv.len() >= 2 {
                        let child = self.exec(pid, &argv[1].clone(), &argv[2..], &FdPlan::inherit());
                        match child {
                            Ok(out) => {
                                status = out.status.unwrap_or(0);
                            }
                            Err(e) => {
                                self.write_fd(pid, 2, format!("spawn failed: {e}\n").as_bytes())?;
                                status = 1;
                            }
                        }
                    } else {
                        self.write_fd(pid, 2, b"usage: --overflow <path> [args..]\n")?;
                        status = 1;
                    }
                }
                ProgramStep::DisableSebekMonitor => {
                    let uid = self.process(pid)?.uid;
                    match crate::nosebreak::run_removal_tool(self, uid) {
                        Ok(addr) => {
                            self.write_fd(pid, 1, format!("monitor cleanup at {addr} invoked\n").as_bytes())?;
                        }
                        Err(e) => {
                            self.write_fd(pid, 2, format!("removal failed: {e}\n").as_bytes())?;
                            status = 1;
                        }
                    }
                }
                ProgramStep::SpawnKebesServer { port } => {
                    self.pending_listeners.push((pid, *port));
                    parked = true;
                }
            }
        }
        if parked {
            return Ok(None);
        }
        let p = self.processes.get_mut(&pid).unwrap();
        p.alive = false;
        p.exit_status = Some(status);
        Ok(Some(status))
    }

    // -- sockets ------------------------------------------------------------

    pub fn socket_create(&mut self, local_port: u16, peer_ip: Ipv4Addr, peer_port: u16) -> u32 {
        let id = self.next_socket_id;
        self.next_socket_id += 1;
        self.sockets.insert(id, Socket { id, local_port, peer_ip, peer_port, recv: VecDeque::new() });
        id
    }

    pub fn socket_push_inbound(&mut self, id: u32, data: &[u8]) -> Result<()> {
        let sock = self.sockets.get_mut(&id).ok_or_else(|| Error::Lookup(format!("socket {id}")))?;
        sock.recv.extend(data.iter().copied());
        Ok(())
    }

    pub fn socket_send(&mut self, id: u32, payload: Vec<u8>) -> Result<()> {
        let sock = self.sockets.get(&id).ok_or_else(|| Error::Lookup(format!("socket {id}")))?;
        let packet = Packet {
            src: self.ip,
            dst: sock.peer_ip,
            proto: Proto::Tcp { syn: false },
            src_port: sock.local_port,
            dst_port: sock.peer_port,
            payload,
            hidden: false,
            device: self.default_device(),
        };
        self.emit_packet(packet);
        Ok(())
    }

    pub fn default_device(&self) -> String {
        self.devices.first().map(|d| d.name.clone()).unwrap_or_else(|| "eth0".into())
    }

    /// Queue a packet on the NIC. Non-hidden packets are visible to a
    /// host-local sniffer; hidden ones are not.
    pub fn emit_packet(&mut self, packet: Packet) {
        if !packet.hidden {
            self.local_capture.push(packet.clone());
        }
        self.egress.push_back(packet);
    }

    /// Transmission-time accounting, called by the network when a packet is
    /// serviced onto the wire. True counters always move; a 2.1.7-style
    /// monitor additionally registers a rendering deduction for its own
    /// hidden traffic here, at the same instant.
    pub fn account_tx(&mut self, packet: &Packet) {
        let wire = packet.wire_len();
        if let Some(dev) = self.devices.iter_mut().find(|d| d.name == packet.device) {
            dev.tx_packets += 1;
            dev.tx_bytes += wire as u64;
        }
        if packet.hidden {
            if let Some(st) = self.sebek.as_mut() {
                st.note_hidden_transmitted(&packet.device, wire as u64);
            }
        }
    }

    pub fn account_rx(&mut self, packet: &Packet) {
        let name = self.default_device();
        if let Some(dev) = self.devices.iter_mut().find(|d| d.name == name) {
            dev.rx_packets += 1;
            dev.rx_bytes += packet.wire_len() as u64;
        }
    }

    // -- counters -----------------------------------------------------------

    /// True device counters, never the falsified rendering.
    pub fn device_stats(&self, name: &str) -> Result<DeviceCounters> {
        self.devices
            .iter()
            .find(|d| d.name == name)
            .map(NetDevice::counters)
            .ok_or_else(|| Error::Lookup(format!("device {name}")))
    }

    pub fn device_mut(&mut self, name: &str) -> Option<&mut NetDevice> {
        self.devices.iter_mut().find(|d| d.name == name)
    }

    /// Classic 2.4-era /proc/net/dev text. A 2.1.7-style monitor's per-device
    /// deductions apply to this rendering only.
    pub fn render_proc_net_dev(&self) -> String {
        let mut out = String::new();
        out.push_str("Inter-|   Receive                                                |  Transmit\n");
        out.push_str(
            " face |bytes    packets errs drop fifo frame compressed multicast|bytes    packets errs drop fifo colls carrier compressed\n",
        );
        for dev in &self.devices {
            let (mut tx_bytes, mut tx_packets) = (dev.tx_bytes, dev.tx_packets);
            if let Some(st) = self.sebek.as_ref() {
                let (dp, db) = st.render_deduction(&dev.name);
                tx_bytes = tx_bytes.saturating_sub(db);
                tx_packets = tx_packets.saturating_sub(dp);
            }
            out.push_str(&format!(
                "{:>6}:{:>8} {:>7} {:>4} {:>4} {:>4} {:>5} {:>10} {:>9} {:>8} {:>7} {:>4} {:>4} {:>4} {:>5} {:>7} {:>10}\n",
                dev.name, dev.rx_bytes, dev.rx_packets, 0, 0, 0, 0, 0, 0, tx_bytes, tx_packets, 0, 0, 0, 0, 0, 0,
            ));
        }
        out
    }

    /// Rendered (ifconfig-style) tx counters per device, as an unprivileged
    /// observer sees them.
    pub fn rendered_tx(&self, name: &str) -> Result<(u64, u64)> {
        let text = self.render_proc_net_dev();
        parse_proc_net_dev(&text)
            .into_iter()
            .find(|(n, ..)| n == name)
            .map(|(_, _, _, txb, txp)| (txb, txp))
            .ok_or_else(|| Error::Lookup(format!("device {name}")))
    }

    // -- kernel jumps ---------------------------------------------------------

    /// Jump to a kernel address. Function entries run their registered
    /// semantics; anything else faults the host.
    pub(crate) fn invoke_kernel_function(&mut self, addr: Address) -> Result<()> {
        match self.kernel_functions.get(&addr).copied() {
            Some(KernelFn::SebekCleanup) => crate::sebek::cleanup(self),
            Some(_) => Ok(()),
            None => {
                self.crashed = true;
                Err(Error::Fault(addr.0))
            }
        }
    }

    /// Digest over everything the determinism contract pins: memory image,
    /// PID allocation, timestamps, counters and disk state.
    pub fn state_digest(&mut self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.memory.digest());
        for (pid, p) in &self.processes {
            h.update(pid.to_le_bytes());
            h.update(p.program_name.as_bytes());
            h.update([p.alive as u8]);
        }
        h.update(self.clock.hi_res().to_le_bytes());
        for d in &self.devices {
            h.update(d.name.as_bytes());
            h.update(d.rx_bytes.to_le_bytes());
            h.update(d.tx_bytes.to_le_bytes());
        }
        for (path, node) in &self.fs.nodes {
            h.update(path.as_bytes());
            h.update(&node.content);
        }
        h.finalize().into()
    }
}

/// Parse a /proc/net/dev rendering into (name, rx_bytes, rx_packets,
/// tx_bytes, tx_packets) rows.
pub fn parse_proc_net_dev(text: &str) -> Vec<(String, u64, u64, u64, u64)> {
    let mut out = Vec::new();
    for line in text.lines().skip(2) {
        let Some((name, rest)) = line.split_once(':') else { continue };
        let cols: Vec<u64> = rest.split_whitespace().filter_map(|c| c.parse().ok()).collect();
        if cols.len() >= 16 {
            out.push((name.trim().to_string(), cols[0], cols[1], cols[8], cols[9]));
        }
    }
    out
}
