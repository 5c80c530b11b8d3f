//! Engine side of the code-tool runner protocol.
//!
//! Generated CODE tools are never executed in the engine process. They are
//! sent to a separate interpreter process that speaks this protocol over its
//! stdin/stdout:
//!
//! * On start the runner writes one handshake line, `featurist-runner 1\n`.
//! * Every message after that is a frame: the payload length in bytes as
//!   ASCII decimal, a `\n`, then exactly that many bytes of UTF-8 JSON.
//! * The engine sends one request frame and reads one response frame.
//!
//! The full field list is in `docs/runner-protocol.md`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;
pub const HANDSHAKE_PREFIX: &str = "featurist-runner";
const MAX_FRAME: usize = 256 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextItem {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum RunnerRequest {
    Probe { tool_id: String, source: String },
    Annotate { tool_id: String, texts: Vec<TextItem> },
    Shutdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunnerStatus {
    Ok,
    CompileError,
    RuntimeError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueItem {
    pub id: String,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerResponse {
    pub status: RunnerStatus,
    #[serde(default)]
    pub values: Vec<ValueItem>,
    #[serde(default)]
    pub message: Option<String>,
    /// Result of the probe call on the fixed probe string.
    #[serde(default)]
    pub probe_value: Option<f64>,
}

pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> std::io::Result<()> {
    writeln!(w, "{}", payload.len())?;
    w.write_all(payload)?;
    w.flush()
}

pub fn read_frame(r: &mut impl BufRead) -> std::io::Result<Vec<u8>> {
    let mut header = String::new();
    if r.read_line(&mut header)? == 0 {
        return Err(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "runner closed its output",
        ));
    }
    let len: usize = header.trim_end().parse().map_err(|_| {
        std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("bad frame header {header:?}"),
        )
    })?;
    if len > MAX_FRAME {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds limit"),
        ));
    }
    let mut buf = vec![0; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Protocol client over any byte stream pair.
pub struct RunnerClient<R, W> {
    reader: BufReader<R>,
    writer: W,
}

impl<R: Read, W: Write> RunnerClient<R, W> {
    /// Consumes the handshake line and checks the protocol version.
    pub fn connect(reader: R, writer: W) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut line = String::new();
        reader
            .read_line(&mut line)
            .map_err(|e| Error::Runner(format!("handshake read failed: {e}")))?;
        let expected = format!("{HANDSHAKE_PREFIX} {PROTOCOL_VERSION}");
        if line.trim_end() != expected {
            return Err(Error::Runner(format!(
                "bad handshake {:?}, expected {expected:?}",
                line.trim_end()
            )));
        }
        Ok(RunnerClient { reader, writer })
    }

    pub fn call(&mut self, request: &RunnerRequest) -> std::io::Result<RunnerResponse> {
        let payload = serde_json::to_vec(request)?;
        write_frame(&mut self.writer, &payload)?;
        let frame = read_frame(&mut self.reader)?;
        serde_json::from_slice(&frame).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("bad response: {e}"))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub status: RunnerStatus,
    pub message: Option<String>,
    pub probe_value: Option<f64>,
}

impl ProbeOutcome {
    pub fn is_ok(&self) -> bool {
        self.status == RunnerStatus::Ok
    }
}

/// Something that can check and run CODE tools.
pub trait CodeRunner: Send + Sync {
    fn probe(&self, tool_id: &str, source: &str) -> Result<ProbeOutcome>;
    /// One value per input text, in input order; `None` for texts the tool
    /// failed on.
    fn annotate(&self, tool_id: &str, texts: &[TextItem]) -> Result<Vec<Option<f64>>>;
}

struct Session {
    child: Child,
    client: RunnerClient<ChildStdout, ChildStdin>,
}

/// Spawns the runner as a subprocess and restarts it once if it dies
/// mid-request.
pub struct SubprocessRunner {
    command: Vec<String>,
    session: Mutex<Option<Session>>,
    sources: Mutex<HashMap<String, String>>,
}

impl SubprocessRunner {
    pub fn new(command: Vec<String>) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::Config("runner command is empty".into()));
        }
        Ok(SubprocessRunner {
            command,
            session: Mutex::new(None),
            sources: Mutex::new(HashMap::new()),
        })
    }

    fn spawn(&self) -> Result<Session> {
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Runner(format!("cannot start {:?}: {e}", self.command)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let client = RunnerClient::connect(stdout, stdin)?;
        Ok(Session { child, client })
    }

    fn call(&self, request: &RunnerRequest, reprobe: Option<(&str, &str)>) -> Result<RunnerResponse> {
        let mut guard = self.session.lock().unwrap();
        for attempt in 0..2 {
            if guard.is_none() {
                let mut s = self.spawn()?;
                if attempt > 0 {
                    if let Some((id, src)) = reprobe {
                        let probe = RunnerRequest::Probe {
                            tool_id: id.to_string(),
                            source: src.to_string(),
                        };
                        s.client
                            .call(&probe)
                            .map_err(|e| Error::Runner(format!("re-probe after restart failed: {e}")))?;
                    }
                }
                *guard = Some(s);
            }
            let session = guard.as_mut().expect("session present");
            match session.client.call(request) {
                Ok(r) => return Ok(r),
                Err(e) => {
                    log::warn!("runner request failed ({e}); restarting runner");
                    let _ = session.child.kill();
                    let _ = session.child.wait();
                    *guard = None;
                    if attempt == 1 {
                        return Err(Error::Runner(format!("runner died twice: {e}")));
                    }
                }
            }
        }
        unreachable!("loop returns on every path")
    }
}

impl CodeRunner for SubprocessRunner {
    fn probe(&self, tool_id: &str, source: &str) -> Result<ProbeOutcome> {
        let req = RunnerRequest::Probe {
            tool_id: tool_id.to_string(),
            source: source.to_string(),
        };
        let resp = self.call(&req, None)?;
        if resp.status == RunnerStatus::Ok {
            self.sources
                .lock()
                .unwrap()
                .insert(tool_id.to_string(), source.to_string());
        }
        Ok(ProbeOutcome {
            status: resp.status,
            message: resp.message,
            probe_value: resp.probe_value,
        })
    }

    fn annotate(&self, tool_id: &str, texts: &[TextItem]) -> Result<Vec<Option<f64>>> {
        let source = self.sources.lock().unwrap().get(tool_id).cloned().ok_or_else(|| {
            Error::Runner(format!("tool `{tool_id}` has not been probed successfully"))
        })?;
        let req = RunnerRequest::Annotate {
            tool_id: tool_id.to_string(),
            texts: texts.to_vec(),
        };
        let resp = self.call(&req, Some((tool_id, &source)))?;
        align_values(texts, resp)
    }
}

/// Maps a response onto request order, checking the one-to-one contract.
pub fn align_values(texts: &[TextItem], resp: RunnerResponse) -> Result<Vec<Option<f64>>> {
    if resp.status != RunnerStatus::Ok {
        return Err(Error::Runner(format!(
            "annotate failed ({:?}): {}",
            resp.status,
            resp.message.unwrap_or_default()
        )));
    }
    if resp.values.len() != texts.len() {
        return Err(Error::Runner(format!(
            "runner returned {} values for {} texts",
            resp.values.len(),
            texts.len()
        )));
    }
    let by_id: HashMap<&str, Option<f64>> =
        resp.values.iter().map(|v| (v.id.as_str(), v.value)).collect();
    texts
        .iter()
        .map(|t| {
            by_id
                .get(t.id.as_str())
                .copied()
                .ok_or_else(|| Error::Runner(format!("no value for id `{}`", t.id)))
                .map(|v| v.filter(|x| x.is_finite()))
        })
        .collect()
}

impl Drop for SubprocessRunner {
    fn drop(&mut self) {
        if let Some(mut s) = self.session.lock().unwrap().take() {
            let _ = s.client.call(&RunnerRequest::Shutdown);
            let _ = s.child.kill();
            let _ = s.child.wait();
        }
    }
}
