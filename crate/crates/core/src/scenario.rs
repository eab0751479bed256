//! Scripted attack scenarios: configuration, orchestration and reporting.
//! A scenario boots a fresh lab, walks its step list (exploit delivery,
//! server start, encrypted command sessions, detector sweeps, disablement,
//! assertions), and emits a machine-checkable report that is byte-identical
//! across runs with the same seed.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::honeywall::{ConnLimitPolicy, RuleFileEntry};
use crate::kebes::{self, HandlerImpl, Value};
use crate::lab::{Lab, LabConfig};
use crate::netsim::{Packet, Proto, TopologyConfig};
use crate::nosebreak::{DetectConfig, Verdict};
use crate::sebek::SebekConfig;
use crate::simkernel::{FileNode, HostConfig, LibraryPlan, LoadVia, ProgramStep, SimExecutable};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedCommand {
    /// ADDCOMMAND sugar: bind a pushed handler code object to a wire name.
    Add { name: String, handler: String },
    /// One command invocation; params use the JSON bridge encoding.
    Invoke { name: String, params: Vec<serde_json::Value> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisableMethod {
    Cleanup,
    Reboot,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssertionCheck {
    UnloggedMarkers,
    SebekDisabled,
    RootServerPresent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    /// Encrypted delivery of the server image through the web endpoint: the
    /// wire carries only noise, the scripted CGI overflow drops the image on
    /// disk under the web service's uid.
    DeliverExploit { web_port: u16, server_port: u16 },
    /// The dropped image is executed, spawning the listener.
    StartKebes,
    ClientCommands { port: u16, commands: Vec<ScriptedCommand>, markers: Vec<String> },
    RunDetectors { techniques: Vec<String> },
    Disable { method: DisableMethod },
    Assertions { checks: Vec<AssertionCheck> },
}

impl Step {
    fn kind(&self) -> &'static str {
        match self {
            Step::DeliverExploit { .. } => "deliver_exploit",
            Step::StartKebes => "start_kebes",
            Step::ClientCommands { .. } => "client_commands",
            Step::RunDetectors { .. } => "run_detectors",
            Step::Disable { .. } => "disable",
            Step::Assertions { .. } => "assertions",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub topology: Option<TopologyConfig>,
    #[serde(default)]
    pub host: Option<HostConfig>,
    #[serde(default)]
    pub sebek: Option<SebekConfig>,
    #[serde(default)]
    pub wall_rules: Option<Vec<RuleFileEntry>>,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub index: usize,
    pub kind: String,
    pub status: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub steps: Vec<StepOutcome>,
    pub detections: Vec<serde_json::Value>,
    pub collector_records: usize,
    pub collector_digest: String,
    pub capture_entries: usize,
    pub capture_digest: String,
    pub assertions: Vec<AssertionResult>,
}

impl RunReport {
    pub fn all_assertions_pass(&self) -> bool {
        !self.assertions.is_empty() && self.assertions.iter().all(|a| a.pass)
    }
}

// ---------------------------------------------------------------------------
// Built-in scenario
// ---------------------------------------------------------------------------

/// Handler set the full scenario pushes into a fresh server.
const TOOLSET: [(&str, HandlerImpl); 9] = [
    ("LISTDIR", HandlerImpl::ListDir),
    ("FILEINFO", HandlerImpl::FileInfo),
    ("CREATEFILE", HandlerImpl::CreateFile),
    ("SYSINFO", HandlerImpl::SysInfo),
    ("READFILE", HandlerImpl::ReadFile),
    ("SECUREDELETE", HandlerImpl::SecureDelete),
    ("EXECUTE", HandlerImpl::Execute),
    ("EXECUTEBINARY", HandlerImpl::ExecuteBinary),
    ("SHELLCODE", HandlerImpl::Shellcode),
];

fn bytes_param(data: &[u8]) -> serde_json::Value {
    serde_json::json!({ "__bytes_hex": hex::encode(data) })
}

fn removal_tool_image() -> SimExecutable {
    SimExecutable {
        libraries: vec![LibraryPlan { path: "/lib/libc.sim.so".into(), via: LoadVia::Mmap }],
        program: vec![ProgramStep::DisableSebekMonitor],
    }
}

fn root_server_image(port: u16) -> SimExecutable {
    SimExecutable {
        libraries: vec![LibraryPlan { path: "/lib/libc.sim.so".into(), via: LoadVia::Mmap }],
        program: vec![ProgramStep::SpawnKebesServer { port }],
    }
}

/// The end-to-end experiment: deliver over an encrypted channel, run the
/// whole toolset as the web uid, escalate through the planted SUID trigger,
/// remove the monitor, restart as root, and assert nothing leaked.
pub fn nosebreak_full() -> Scenario {
    let markers = ["MARKER-alpha-3f91".to_string(),
        "MARKER-bravo-77c2".to_string(),
        "MARKER-root-d004".to_string()];
    let invoke = |name: &str, params: Vec<serde_json::Value>| ScriptedCommand::Invoke {
        name: name.to_string(),
        params,
    };
    let add_all: Vec<ScriptedCommand> = TOOLSET
        .iter()
        .map(|(name, h)| ScriptedCommand::Add { name: name.to_string(), handler: h.code_name().to_string() })
        .collect();

    let mut www_commands = add_all.clone();
    www_commands.extend([
        invoke("SYSINFO", vec![]),
        invoke("LISTDIR", vec!["/tmp".into()]),
        invoke("CREATEFILE", vec!["/tmp/.notes".into(), bytes_param(markers[0].as_bytes())]),
        invoke("READFILE", vec!["/tmp/.notes".into()]),
        invoke("READFILE", vec!["/etc/passwd".into()]),
        invoke("FILEINFO", vec!["/etc/passwd".into()]),
        // A program with one read-loaded library: the only records the
        // monitor is allowed to collect from this whole session.
        invoke("EXECUTE", vec!["/usr/bin/probe".into(), serde_json::json!([]), bytes_param(b"")]),
        invoke("CREATEFILE", vec!["/tmp/.rmtool".into(), bytes_param(&removal_tool_image().image())]),
        invoke(
            "EXECUTE",
            vec![
                "/usr/local/bin/vuln-suid".into(),
                serde_json::json!(["--overflow", "/tmp/.rmtool"]),
                bytes_param(b""),
            ],
        ),
        invoke("CREATEFILE", vec!["/tmp/.rootsrv".into(), bytes_param(&root_server_image(9001).image())]),
        invoke(
            "EXECUTE",
            vec![
                "/usr/local/bin/vuln-suid".into(),
                serde_json::json!(["--overflow", "/tmp/.rootsrv"]),
                bytes_param(b""),
            ],
        ),
        invoke("SECUREDELETE", vec!["/tmp/.rmtool".into()]),
        invoke("SECUREDELETE", vec!["/tmp/.rootsrv".into()]),
        invoke(
            "SHELLCODE",
            vec![bytes_param(&serde_json::to_vec(&vec![ProgramStep::ReportUid]).unwrap())],
        ),
        invoke("EXECUTEBINARY", vec!["copy".into(), "/bin/ls".into()]),
        invoke("CREATEFILE", vec!["/tmp/.notes2".into(), bytes_param(markers[1].as_bytes())]),
    ]);

    let root_commands = vec![
        ScriptedCommand::Add { name: "SYSINFO".into(), handler: HandlerImpl::SysInfo.code_name().into() },
        ScriptedCommand::Add { name: "CREATEFILE".into(), handler: HandlerImpl::CreateFile.code_name().into() },
        invoke("SYSINFO", vec![]),
        invoke("CREATEFILE", vec!["/root/.flag".into(), bytes_param(markers[2].as_bytes())]),
    ];

    Scenario {
        name: "nosebreak-full".into(),
        topology: None,
        host: None,
        sebek: Some(SebekConfig::default_lab()),
        wall_rules: None,
        steps: vec![
            Step::DeliverExploit { web_port: 443, server_port: 9000 },
            Step::StartKebes,
            Step::ClientCommands {
                port: 9000,
                commands: www_commands,
                markers: vec![markers[0].clone(), markers[1].clone()],
            },
            Step::ClientCommands { port: 9001, commands: root_commands, markers: vec![markers[2].clone()] },
            Step::RunDetectors { techniques: vec!["syscall_anomaly".into(), "proc_discrepancy".into()] },
            Step::Assertions {
                checks: vec![
                    AssertionCheck::UnloggedMarkers,
                    AssertionCheck::SebekDisabled,
                    AssertionCheck::RootServerPresent,
                ],
            },
        ],
    }
}

pub fn builtin(name: &str) -> Option<Scenario> {
    match name {
        "nosebreak-full" => Some(nosebreak_full()),
        _ => None,
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    if let Ok(named) = serde_json::from_str::<serde_json::Value>(&text) {
        if let Some(name) = named.get("builtin").and_then(|v| v.as_str()) {
            return builtin(name).ok_or_else(|| Error::Config(format!("unknown builtin scenario {name}")));
        }
    }
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

struct Engine {
    lab: Lab,
    seed: u64,
    dropped_image: Option<String>,
    web_pid: Option<u32>,
    markers: Vec<String>,
    detections: Vec<crate::nosebreak::DetectionReport>,
    assertions: Vec<AssertionResult>,
    session_counter: u64,
}

impl Engine {
    fn run_step(&mut self, step: &Step) -> Result<String> {
        match step {
            Step::DeliverExploit { web_port, server_port } => self.deliver(*web_port, *server_port),
            Step::StartKebes => self.start_kebes(),
            Step::ClientCommands { port, commands, markers } => {
                self.markers.extend(markers.iter().cloned());
                self.client_commands(*port, commands)
            }
            Step::RunDetectors { techniques } => {
                let cfg = DetectConfig::default();
                let mut lines = Vec::new();
                for t in techniques {
                    let report = crate::nosebreak::run_technique(&mut self.lab, t, &cfg)?;
                    lines.push(format!("{t}={:?}", report.verdict));
                    self.detections.push(report);
                }
                Ok(lines.join(" "))
            }
            Step::Disable { method } => match method {
                DisableMethod::Cleanup => {
                    let addr = crate::nosebreak::run_removal_tool(&mut self.lab.host, 0)?;
                    Ok(format!("cleanup invoked at {addr}"))
                }
                DisableMethod::Reboot => {
                    crate::nosebreak::disable_by_reboot(&mut self.lab, 0)?;
                    Ok("rebooted".into())
                }
            },
            Step::Assertions { checks } => self.assertions(checks),
        }
    }

    fn deliver(&mut self, web_port: u16, server_port: u16) -> Result<String> {
        // The web service the exploit rides in on.
        let web_pid = self.lab.host.spawn(33, "/usr/sbin/httpsd", BTreeMap::new());
        self.web_pid = Some(web_pid);

        let image = SimExecutable {
            libraries: vec![LibraryPlan { path: "/lib/libc.sim.so".into(), via: LoadVia::Mmap }],
            program: vec![ProgramStep::SpawnKebesServer { port: server_port }],
        }
        .image();

        // On the wire: an encrypted transport, modeled as seeded noise of the
        // same volume. The capture gets bytes that decode to nothing.
        use rand::{Rng, SeedableRng};
        let mut noise_rng = rand_chacha::ChaCha12Rng::seed_from_u64(self.seed ^ 0x7153);
        let client_ip = self.lab.net.endpoint_ip(crate::lab::CLIENT_EP)?;
        let host_ip = self.lab.host.ip;
        let mut remaining = image.len();
        let mut chunk_no = 0u16;
        while remaining > 0 {
            let n = remaining.min(1200);
            remaining -= n;
            let mut noise = vec![0u8; n];
            noise_rng.fill(&mut noise[..]);
            let packet = Packet {
                src: client_ip,
                dst: host_ip,
                proto: Proto::Tcp { syn: chunk_no == 0 },
                src_port: 38_443,
                dst_port: web_port,
                payload: noise,
                hidden: false,
                device: String::new(),
            };
            self.lab.send_from(crate::lab::CLIENT_EP, packet);
            chunk_no += 1;
        }
        self.lab.run_ticks(3);

        // Semantics of the overflow: the shellcode receives the image via
        // recv() and writes it to disk as the web uid. No read() involved.
        let path = format!("/tmp/.payload-{}", self.lab.host.random_name(10));
        self.lab.host.fs.create(33, &path, FileNode::regular(image))?;
        self.dropped_image = Some(path.clone());
        Ok(format!("image dropped at {path} via port {web_port}"))
    }

    fn start_kebes(&mut self) -> Result<String> {
        let path = self
            .dropped_image
            .clone()
            .ok_or_else(|| Error::State("start_kebes before deliver_exploit".into()))?;
        let web_pid = self.web_pid.ok_or_else(|| Error::State("no web process".into()))?;
        let out = self.lab.host.exec(web_pid, &path, &[], &crate::simkernel::FdPlan::null())?;
        let (pid, port) = *self
            .lab
            .host
            .pending_listeners
            .last()
            .ok_or_else(|| Error::State("server image declared no listener".into()))?;
        debug_assert_eq!(pid, out.pid);
        let uid = self.lab.host.process(pid)?.uid;
        Ok(format!("kebes server pid {pid} uid {uid} listening on {port}"))
    }

    fn client_commands(&mut self, port: u16, commands: &[ScriptedCommand]) -> Result<String> {
        self.session_counter += 1;
        let client_seed = self.seed ^ (0xc11e_5700 + self.session_counter);
        let (conn, mut client) = kebes::sim_connect(&mut self.lab, port, client_seed)?;
        let mut ok = 0usize;
        let mut errors = Vec::new();
        for (i, cmd) in commands.iter().enumerate() {
            let (name, params) = match cmd {
                ScriptedCommand::Add { name, handler } => {
                    let code = Value::text(handler).encode();
                    (
                        kebes::ADDCOMMAND.to_string(),
                        vec![Value::text(name), Value::Bytes(code)],
                    )
                }
                ScriptedCommand::Invoke { name, params } => {
                    let vals: Vec<Value> =
                        params.iter().map(Value::from_json).collect::<Result<_>>()?;
                    (name.clone(), vals)
                }
            };
            let replies = kebes::sim_request(&mut self.lab, conn, &mut client, &[(name.clone(), params)])?;
            if replies[0].is_ok() {
                ok += 1;
            } else {
                errors.push(format!("{i}:{name}={}", replies[0].result.as_text().unwrap_or("?")));
            }
        }
        if errors.is_empty() {
            Ok(format!("{ok}/{} commands ok on port {port}", commands.len()))
        } else {
            Ok(format!("{ok}/{} commands ok on port {port}; errors: {}", commands.len(), errors.join(", ")))
        }
    }

    fn assertions(&mut self, checks: &[AssertionCheck]) -> Result<String> {
        for check in checks {
            match check {
                AssertionCheck::UnloggedMarkers => {
                    let markers: Vec<Vec<u8>> =
                        self.markers.iter().map(|m| m.as_bytes().to_vec()).collect();
                    for (marker, pass) in assert_unlogged(&self.lab, &markers) {
                        self.assertions.push(AssertionResult {
                            name: format!("unlogged:{marker}"),
                            pass,
                            detail: if pass {
                                "absent from collector log and capture".into()
                            } else {
                                "marker observable by the adversary".into()
                            },
                        });
                    }
                }
                AssertionCheck::SebekDisabled => {
                    let inactive = self.lab.host.sebek.as_ref().is_none_or(|s| !s.active);
                    let anomaly = crate::nosebreak::detect_syscall_anomaly(&self.lab.host);
                    let pass = inactive && anomaly.verdict == Verdict::NotDetected;
                    self.assertions.push(AssertionResult {
                        name: "sebek_disabled".into(),
                        pass,
                        detail: format!("monitor inactive: {inactive}, table anomaly: {:?}", anomaly.verdict),
                    });
                }
                AssertionCheck::RootServerPresent => {
                    let root = self
                        .lab
                        .kebes_servers
                        .values()
                        .any(|s| self.lab.host.process(s.pid).is_ok_and(|p| p.uid == 0));
                    self.assertions.push(AssertionResult {
                        name: "root_server_present".into(),
                        pass: root,
                        detail: "a kebes session handler runs with uid 0".into(),
                    });
                }
            }
        }
        let failed = self.assertions.iter().filter(|a| !a.pass).count();
        Ok(format!("{} assertions, {failed} failed", self.assertions.len()))
    }
}

/// Fail iff a marker occurs in any collector record's data or in any
/// captured payload. Pass/fail per marker; an empty set passes vacuously.
pub fn assert_unlogged(lab: &Lab, markers: &[Vec<u8>]) -> Vec<(String, bool)> {
    markers
        .iter()
        .map(|marker| {
            let in_collector = lab.collector.log.iter().any(|r| crate::honeywall::contains(&r.data, marker));
            let in_capture = lab
                .wall
                .as_ref()
                .is_some_and(|w| w.capture.iter().any(|e| crate::honeywall::contains(&e.packet.payload, marker)));
            (String::from_utf8_lossy(marker).into_owned(), !in_collector && !in_capture)
        })
        .collect()
}

/// Execute a scenario on a fresh simulation. Steps run in order; a failing
/// step is recorded and aborts the rest. The lab is returned alongside the
/// report for callers that want to export the capture or inspect state.
pub fn run(scenario: &Scenario, seed: u64) -> Result<(RunReport, Lab)> {
    let mut host = scenario.host.clone().unwrap_or_else(HostConfig::default_lab);
    host.seed = seed;
    let topology = scenario.topology.clone().unwrap_or_else(TopologyConfig::default_lab);
    let wall_rules = match &scenario.wall_rules {
        Some(entries) => {
            Some(crate::honeywall::parse_rules(&serde_json::to_string(entries)?)?)
        }
        None => None,
    };
    let lab = Lab::new(LabConfig {
        host,
        topology,
        sebek: scenario.sebek.clone(),
        wall_rules,
        wall_policy: ConnLimitPolicy::default(),
        seed,
    })?;

    let mut engine = Engine {
        lab,
        seed,
        dropped_image: None,
        web_pid: None,
        markers: Vec::new(),
        detections: Vec::new(),
        assertions: Vec::new(),
        session_counter: 0,
    };

    let mut steps = Vec::new();
    for (index, step) in scenario.steps.iter().enumerate() {
        match engine.run_step(step) {
            Ok(detail) => steps.push(StepOutcome { index, kind: step.kind().into(), status: "ok".into(), detail }),
            Err(e) => {
                steps.push(StepOutcome {
                    index,
                    kind: step.kind().into(),
                    status: "failed".into(),
                    detail: e.to_string(),
                });
                break;
            }
        }
    }
    engine.lab.drain(64);

    let mut collector_hash = Sha256::new();
    for record in &engine.lab.collector.log {
        collector_hash.update(record.encode());
    }
    let mut capture_hash = Sha256::new();
    let capture_entries = engine.lab.wall.as_ref().map_or(0, |w| w.capture.len());
    if let Some(wall) = engine.lab.wall.as_ref() {
        for e in &wall.capture {
            capture_hash.update(e.tick.to_le_bytes());
            capture_hash.update([e.direction as u8, e.stage as u8]);
            capture_hash.update(&e.packet.payload);
        }
    }

    let report = RunReport {
        scenario: scenario.name.clone(),
        seed,
        steps,
        detections: engine
            .detections
            .iter()
            .map(|d| serde_json::to_value(d).expect("reports serialize"))
            .collect(),
        collector_records: engine.lab.collector.log.len(),
        collector_digest: hex::encode(collector_hash.finalize()),
        capture_entries,
        capture_digest: hex::encode(capture_hash.finalize()),
        assertions: engine.assertions,
    };
    Ok((report, engine.lab))
}

/// Write the report (and optionally the capture) to disk. Formats: "json",
/// "pcap".
pub fn export(report: &RunReport, lab: &Lab, format: &str, path: &Path) -> Result<()> {
    match format {
        "json" => {
            let mut bytes = serde_json::to_vec_pretty(report)?;
            bytes.push(b'\n');
            std::fs::write(path, bytes)?;
            Ok(())
        }
        "pcap" => {
            let empty = Vec::new();
            let entries = lab.wall.as_ref().map_or(&empty, |w| &w.capture);
            crate::honeywall::export_pcap(entries, path)?;
            Ok(())
        }
        other => Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            format!("unknown export format {other:?}"),
        ))),
    }
}
