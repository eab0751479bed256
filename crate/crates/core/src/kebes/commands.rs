//! The command layer: a per-session registry that starts out knowing exactly
//! one command, ADDCOMMAND, plus the handler implementations a client can
//! push into it. The server is a communication stub until extended over the
//! encrypted channel, and every handler works through write/stat/mmap/recv
//! primitives, never through read().

use std::collections::BTreeMap;

use rand::Rng;

use super::value::Value;
use crate::simkernel::{FdPlan, FdSpec, FileKind, FileNode, Host, ProgramStep, SimExecutable};
use crate::{Error, Result};

pub const ADDCOMMAND: &str = "ADDCOMMAND";

/// Handler code objects a client can push. On the wire a code object is the
/// value-encoded text name below; installing one binds it to whatever command
/// name the client chose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandlerImpl {
    AddCommand,
    ListDir,
    FileInfo,
    CreateFile,
    SysInfo,
    ReadFile,
    SecureDelete,
    Execute,
    ExecuteBinary,
    Shellcode,
}

impl HandlerImpl {
    pub fn code_name(self) -> &'static str {
        match self {
            HandlerImpl::AddCommand => "builtin:addcommand",
            HandlerImpl::ListDir => "builtin:listdir",
            HandlerImpl::FileInfo => "builtin:fileinfo",
            HandlerImpl::CreateFile => "builtin:createfile",
            HandlerImpl::SysInfo => "builtin:sysinfo",
            HandlerImpl::ReadFile => "builtin:readfile",
            HandlerImpl::SecureDelete => "builtin:securedelete",
            HandlerImpl::Execute => "builtin:execute",
            HandlerImpl::ExecuteBinary => "builtin:executebinary",
            HandlerImpl::Shellcode => "builtin:shellcode",
        }
    }

    /// Serialized code object for ADDCOMMAND's second parameter.
    pub fn code(self) -> Vec<u8> {
        Value::text(self.code_name()).encode()
    }

    pub fn from_code(code: &[u8]) -> Result<HandlerImpl> {
        let v = Value::decode(code)?;
        let name = v.as_text()?;
        for h in [
            HandlerImpl::AddCommand,
            HandlerImpl::ListDir,
            HandlerImpl::FileInfo,
            HandlerImpl::CreateFile,
            HandlerImpl::SysInfo,
            HandlerImpl::ReadFile,
            HandlerImpl::SecureDelete,
            HandlerImpl::Execute,
            HandlerImpl::ExecuteBinary,
            HandlerImpl::Shellcode,
        ] {
            if h.code_name() == name {
                return Ok(h);
            }
        }
        Err(Error::Encoding(format!("unknown handler code {name:?}")))
    }
}

/// Per-session command table. Fresh sessions understand ADDCOMMAND and
/// nothing else.
pub struct CommandRegistry {
    handlers: BTreeMap<String, HandlerImpl>,
}

impl Default for CommandRegistry {
    fn default() -> Self {
        Self::fresh()
    }
}

impl CommandRegistry {
    pub fn fresh() -> CommandRegistry {
        let mut handlers = BTreeMap::new();
        handlers.insert(ADDCOMMAND.to_string(), HandlerImpl::AddCommand);
        CommandRegistry { handlers }
    }

    pub fn names(&self) -> Vec<&str> {
        self.handlers.keys().map(String::as_str).collect()
    }

    pub fn get(&self, name: &str) -> Option<HandlerImpl> {
        self.handlers.get(name).copied()
    }

    pub fn insert(&mut self, name: &str, handler: HandlerImpl) {
        self.handlers.insert(name.to_string(), handler);
    }
}

/// One decoded command invocation.
#[derive(Debug, Clone)]
pub struct Command {
    pub tag: Vec<u8>,
    pub name: String,
    pub params: Vec<Value>,
}

/// One reply: the echoed tag, ok/error status, and a result value.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub tag: Vec<u8>,
    pub status: String,
    pub result: Value,
}

impl Reply {
    fn ok(tag: &[u8], result: Value) -> Reply {
        Reply { tag: tag.to_vec(), status: "ok".into(), result }
    }

    fn error(tag: &[u8], what: &str) -> Reply {
        Reply { tag: tag.to_vec(), status: "error".into(), result: Value::text(what) }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

pub fn encode_command_message(commands: &[Command]) -> Vec<u8> {
    Value::List(
        commands
            .iter()
            .map(|c| {
                Value::List(vec![
                    Value::Bytes(c.tag.clone()),
                    Value::Text(c.name.clone()),
                    Value::List(c.params.clone()),
                ])
            })
            .collect(),
    )
    .encode()
}

pub fn decode_command_message(bytes: &[u8]) -> Result<Vec<Command>> {
    let msg = Value::decode(bytes)?;
    let mut out = Vec::new();
    for triple in msg.as_list()? {
        let t = triple.as_list()?;
        if t.len() != 3 {
            return Err(Error::Encoding("command triple must have 3 elements".into()));
        }
        out.push(Command {
            tag: t[0].as_bytes()?.to_vec(),
            name: t[1].as_text()?.to_string(),
            params: t[2].as_list()?.to_vec(),
        });
    }
    Ok(out)
}

pub fn encode_reply_message(replies: &[Reply]) -> Vec<u8> {
    Value::List(
        replies
            .iter()
            .map(|r| {
                Value::List(vec![Value::Bytes(r.tag.clone()), Value::Text(r.status.clone()), r.result.clone()])
            })
            .collect(),
    )
    .encode()
}

pub fn decode_reply_message(bytes: &[u8]) -> Result<Vec<Reply>> {
    let msg = Value::decode(bytes)?;
    let mut out = Vec::new();
    for triple in msg.as_list()? {
        let t = triple.as_list()?;
        if t.len() != 3 {
            return Err(Error::Encoding("reply triple must have 3 elements".into()));
        }
        out.push(Reply {
            tag: t[0].as_bytes()?.to_vec(),
            status: t[1].as_text()?.to_string(),
            result: t[2].clone(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// Run one command against the host as the server process. Handler failures
/// come back in-band as error replies; only transport-level problems are
/// real errors.
pub fn dispatch(host: &mut Host, server_pid: u32, registry: &mut CommandRegistry, cmd: &Command) -> Reply {
    let Some(handler) = registry.get(&cmd.name) else {
        return Reply::error(&cmd.tag, "unknown-command");
    };
    let outcome = match handler {
        HandlerImpl::AddCommand => cmd_addcommand(registry, &cmd.params),
        HandlerImpl::ListDir => cmd_listdir(host, &cmd.params),
        HandlerImpl::FileInfo => cmd_fileinfo(host, &cmd.params),
        HandlerImpl::CreateFile => cmd_createfile(host, server_pid, &cmd.params),
        HandlerImpl::SysInfo => cmd_sysinfo(host, server_pid),
        HandlerImpl::ReadFile => cmd_readfile(host, server_pid, &cmd.params),
        HandlerImpl::SecureDelete => params_path(&cmd.params).and_then(|p| {
            let uid = host.process(server_pid).map(|pr| pr.uid)?;
            cmd_secure_delete(host, uid, &p).map(|_| Value::Null)
        }),
        HandlerImpl::Execute => cmd_execute_params(host, server_pid, &cmd.params),
        HandlerImpl::ExecuteBinary => cmd_execute_binary_params(host, server_pid, &cmd.params),
        HandlerImpl::Shellcode => cmd_shellcode_params(host, server_pid, &cmd.params),
    };
    match outcome {
        Ok(result) => Reply::ok(&cmd.tag, result),
        Err(e) => Reply::error(&cmd.tag, &e.to_string()),
    }
}

fn params_path(params: &[Value]) -> Result<String> {
    params
        .first()
        .ok_or_else(|| Error::Encoding("missing path parameter".into()))?
        .as_text()
        .map(str::to_string)
}

fn cmd_addcommand(registry: &mut CommandRegistry, params: &[Value]) -> Result<Value> {
    if params.len() != 2 {
        return Err(Error::Encoding("ADDCOMMAND takes (name, code)".into()));
    }
    let name = params[0].as_text()?;
    let handler = HandlerImpl::from_code(params[1].as_bytes()?)?;
    registry.insert(name, handler);
    Ok(Value::Null)
}

fn cmd_listdir(host: &Host, params: &[Value]) -> Result<Value> {
    let path = params_path(params)?;
    let entries = host.fs.list_dir(&path);
    if entries.is_empty() && !host.fs.exists(&path) {
        return Err(Error::NotFound(path));
    }
    Ok(Value::List(entries.into_iter().map(Value::Text).collect()))
}

fn cmd_fileinfo(host: &Host, params: &[Value]) -> Result<Value> {
    let path = params_path(params)?;
    if let Some(node) = host.fs.node(&path) {
        let kind = match node.kind {
            FileKind::Regular => "regular",
            FileKind::Device => "device",
            FileKind::Procfs => "procfs",
        };
        return Ok(Value::Map(vec![
            (Value::text("size"), Value::Int(node.content.len() as i64)),
            (Value::text("kind"), Value::text(kind)),
            (Value::text("mtime_tick"), Value::Int(node.mtime_tick as i64)),
        ]));
    }
    let children = host.fs.list_dir(&path);
    if !children.is_empty() {
        return Ok(Value::Map(vec![
            (Value::text("size"), Value::Int(children.len() as i64)),
            (Value::text("kind"), Value::text("directory")),
            (Value::text("mtime_tick"), Value::Int(0)),
        ]));
    }
    Err(Error::NotFound(path))
}

fn cmd_createfile(host: &mut Host, server_pid: u32, params: &[Value]) -> Result<Value> {
    if params.len() != 2 {
        return Err(Error::Encoding("CREATEFILE takes (path, bytes)".into()));
    }
    let path = params[0].as_text()?.to_string();
    let content = params[1].as_bytes()?.to_vec();
    let uid = host.process(server_pid)?.uid;
    let tick = host.clock.tick;
    if host.fs.exists(&path) {
        host.fs.overwrite(uid, &path, content, tick)?;
    } else {
        host.fs.create(uid, &path, FileNode::regular(content))?;
    }
    Ok(Value::Null)
}

fn cmd_sysinfo(host: &Host, server_pid: u32) -> Result<Value> {
    let proc = host.process(server_pid)?;
    Ok(Value::Map(vec![
        (Value::text("uid"), Value::Int(proc.uid as i64)),
        (Value::text("pid"), Value::Int(proc.pid as i64)),
        (Value::text("hostname"), Value::text(&host.config.hostname)),
        (Value::text("kernel"), Value::text("2.4.20-lab")),
        (
            Value::text("devices"),
            Value::List(host.devices.iter().map(|d| Value::text(&d.name)).collect()),
        ),
    ]))
}

/// File content over the channel via mmap. The read hook never sees it;
/// device and procfs nodes are honestly unsupported.
fn cmd_readfile(host: &mut Host, server_pid: u32, params: &[Value]) -> Result<Value> {
    let path = params_path(params)?;
    let content = host.mmap_read(server_pid, &path)?;
    Ok(Value::Bytes(content))
}

/// Rename to a random name, overwrite with a slightly longer random pattern,
/// sync, repeat, unlink. All through ordinary write paths.
pub const SECURE_DELETE_PASSES: usize = 8;

pub fn cmd_secure_delete(host: &mut Host, uid: u32, path: &str) -> Result<()> {
    let node = host.fs.node(path).ok_or_else(|| Error::NotFound(path.to_string()))?;
    if node.kind != FileKind::Regular {
        return Err(Error::UnsupportedMapping(path.to_string()));
    }
    let original_len = node.content.len();
    let dir = match path.rfind('/') {
        Some(0) | None => "".to_string(),
        Some(at) => path[..at].to_string(),
    };
    let mut current = path.to_string();
    for _ in 0..SECURE_DELETE_PASSES {
        let renamed = loop {
            let candidate = format!("{dir}/.{}", host.random_name(12));
            if !host.fs.exists(&candidate) {
                break candidate;
            }
        };
        host.fs.rename(uid, &current, &renamed)?;
        let extra = host.rng().gen_range(1..=64usize);
        let mut pattern = vec![0u8; original_len + extra];
        host.rng().fill(&mut pattern[..]);
        let tick = host.clock.tick;
        host.fs.overwrite(uid, &renamed, pattern, tick)?;
        current = renamed;
    }
    host.fs.unlink(uid, &current)?;
    Ok(())
}

/// Execution result as the wire triple [pid, status, output].
fn exec_result(pid: u32, status: i32, output: Vec<u8>) -> Value {
    Value::List(vec![Value::Int(pid as i64), Value::Int(status as i64), Value::Bytes(output)])
}

#[derive(Debug)]
pub struct ExecCapture {
    pub pid: u32,
    pub status: i32,
    pub output: Vec<u8>,
}

/// Stage stdin from bytes, redirect stdout/stderr to files, fork+exec, read
/// the outputs back via mmap, and securely delete all three staging files.
pub fn cmd_execute(
    host: &mut Host,
    server_pid: u32,
    path: &str,
    argv: &[String],
    stdin_bytes: &[u8],
) -> Result<ExecCapture> {
    let uid = host.process(server_pid)?.uid;
    let base = format!("/tmp/.kb-{}", host.random_name(10));
    let stdin_path = format!("{base}.in");
    let stdout_path = format!("{base}.out");
    let stderr_path = format!("{base}.err");
    host.fs.create(uid, &stdin_path, FileNode::regular(stdin_bytes.to_vec()))?;
    host.fs.create(uid, &stdout_path, FileNode::regular(Vec::new()))?;
    host.fs.create(uid, &stderr_path, FileNode::regular(Vec::new()))?;
    let plan = FdPlan {
        stdin: FdSpec::File(stdin_path.clone()),
        stdout: FdSpec::File(stdout_path.clone()),
        stderr: FdSpec::File(stderr_path.clone()),
    };
    let run = host.exec(server_pid, path, argv, &plan);
    let outcome = match run {
        Ok(o) => o,
        Err(e) => {
            for p in [&stdin_path, &stdout_path, &stderr_path] {
                let _ = cmd_secure_delete(host, uid, p);
            }
            return Err(e);
        }
    };
    let mut output = host.mmap_read(server_pid, &stdout_path)?;
    output.extend_from_slice(&host.mmap_read(server_pid, &stderr_path)?);
    for p in [&stdin_path, &stdout_path, &stderr_path] {
        cmd_secure_delete(host, uid, p)?;
    }
    Ok(ExecCapture { pid: outcome.pid, status: outcome.status.unwrap_or(-1), output })
}

fn cmd_execute_params(host: &mut Host, server_pid: u32, params: &[Value]) -> Result<Value> {
    if params.len() != 3 {
        return Err(Error::Encoding("EXECUTE takes (path, argv, stdin)".into()));
    }
    let path = params[0].as_text()?.to_string();
    let argv: Vec<String> =
        params[1].as_list()?.iter().map(|v| v.as_text().map(str::to_string)).collect::<Result<_>>()?;
    let stdin_bytes = params[2].as_bytes()?.to_vec();
    let cap = cmd_execute(host, server_pid, &path, &argv, &stdin_bytes)?;
    Ok(exec_result(cap.pid, cap.status, cap.output))
}

/// Push-a-binary / copy-a-binary execution. Either way the on-disk image
/// lives under a throwaway name and is securely deleted after it runs, so
/// the logged command field never shows the real tool.
pub fn cmd_execute_binary(
    host: &mut Host,
    server_pid: u32,
    mode: BinarySource<'_>,
    name_hint: Option<&str>,
) -> Result<ExecCapture> {
    let uid = host.process(server_pid)?.uid;
    let content = match mode {
        BinarySource::Push(blob) => {
            SimExecutable::parse(blob)?;
            blob.to_vec()
        }
        BinarySource::CopyOf(src) => {
            let bytes = host.mmap_read(server_pid, src)?;
            SimExecutable::parse(&bytes)?;
            bytes
        }
    };
    let path = match name_hint {
        Some(hint) => hint.to_string(),
        None => format!("/tmp/.{}", host.random_name(14)),
    };
    host.fs.create(uid, &path, FileNode::regular(content))?;
    let result = cmd_execute(host, server_pid, &path, &[], &[]);
    cmd_secure_delete(host, uid, &path)?;
    result
}

pub enum BinarySource<'a> {
    Push(&'a [u8]),
    CopyOf(&'a str),
}

fn cmd_execute_binary_params(host: &mut Host, server_pid: u32, params: &[Value]) -> Result<Value> {
    let mode = params_path(params)?;
    let cap = match mode.as_str() {
        "push" => {
            if params.len() < 2 {
                return Err(Error::Encoding("push mode takes (\"push\", blob, [hint])".into()));
            }
            let blob = params[1].as_bytes()?;
            let hint = params.get(2).and_then(|v| v.as_text().ok());
            cmd_execute_binary(host, server_pid, BinarySource::Push(blob), hint)?
        }
        "copy" => {
            if params.len() != 2 {
                return Err(Error::Encoding("copy mode takes (\"copy\", src)".into()));
            }
            let src = params[1].as_text()?;
            cmd_execute_binary(host, server_pid, BinarySource::CopyOf(src), None)?
        }
        other => return Err(Error::Encoding(format!("unknown binary mode {other:?}"))),
    };
    Ok(exec_result(cap.pid, cap.status, cap.output))
}

/// Steps the no-disk blob interpreter accepts.
fn shellcode_step_allowed(step: &ProgramStep) -> bool {
    matches!(
        step,
        ProgramStep::WriteStdout { .. }
            | ProgramStep::WriteStderr { .. }
            | ProgramStep::ReportUid
            | ProgramStep::Exit { .. }
            | ProgramStep::DisableSebekMonitor
    )
}

/// Run a serialized action blob entirely in memory: no staging files, no
/// filesystem writes, nothing for disk forensics to find.
pub fn cmd_shellcode_exec(host: &mut Host, server_pid: u32, blob: &[u8]) -> Result<Vec<u8>> {
    let steps: Vec<ProgramStep> =
        serde_json::from_slice(blob).map_err(|e| Error::Encoding(format!("malformed blob: {e}")))?;
    if let Some(bad) = steps.iter().find(|s| !shellcode_step_allowed(s)) {
        return Err(Error::State(format!("blob action rejected by no-disk policy: {bad:?}")));
    }
    let uid = host.process(server_pid)?.uid;
    let mut out = Vec::new();
    for step in steps {
        match step {
            ProgramStep::WriteStdout { data } | ProgramStep::WriteStderr { data } => {
                out.extend_from_slice(data.as_bytes());
            }
            ProgramStep::ReportUid => out.extend_from_slice(format!("uid={uid}").as_bytes()),
            ProgramStep::Exit { .. } => break,
            ProgramStep::DisableSebekMonitor => {
                let addr = crate::nosebreak::run_removal_tool(host, uid)?;
                out.extend_from_slice(format!("monitor cleanup at {addr} invoked").as_bytes());
            }
            _ => unreachable!("filtered by policy"),
        }
    }
    Ok(out)
}

fn cmd_shellcode_params(host: &mut Host, server_pid: u32, params: &[Value]) -> Result<Value> {
    let blob = params
        .first()
        .ok_or_else(|| Error::Encoding("SHELLCODE takes (blob)".into()))?
        .as_bytes()?;
    cmd_shellcode_exec(host, server_pid, blob).map(Value::Bytes)
}
