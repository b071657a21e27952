//! Client for external score servers.
//!
//! Wire format: newline-delimited JSON, one object per line, over either a
//! TCP stream or the stdin/stdout of a child process.
//!
//! ```text
//! -> {"op":"ping"}                                   <- {"ok":true}
//! -> {"op":"score","t":17,"shape":[C,H,W],"data":B}  <- {"ok":true,"data":B}
//!                                                    <- {"ok":false,"error":"..."}
//! ```
//!
//! `B` is base64 of little-endian `f32` values in `C, H, W` row-major order.
//! The client may attach `"schedule_hash"` to its ping; a server that runs a
//! different schedule answers `ok:false` and the connection is refused.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schedule::Schedule;
use crate::tensor::{shape_of, Image};

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("cannot connect to score server {endpoint}: {source}")]
    Connect {
        endpoint: String,
        #[source]
        source: std::io::Error,
    },
    #[error("score server i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed message from score server: {0}")]
    Protocol(String),
    #[error("score server reported an error: {0}")]
    Remote(String),
    #[error("score server refused the handshake: {0}")]
    Refused(String),
    #[error("score payload has {actual} values, expected {expected}")]
    Shape { expected: usize, actual: usize },
}

/// Where a score server lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `host:port`, optionally written `tcp://host:port`.
    Tcp(String),
    /// A child process speaking the protocol on stdin/stdout,
    /// written `exec:program arg1 arg2`.
    Command { program: String, args: Vec<String> },
}

impl FromStr for Endpoint {
    type Err = BridgeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(cmd) = s.strip_prefix("exec:") {
            let mut parts = cmd.split_whitespace().map(str::to_owned);
            let program = parts
                .next()
                .ok_or_else(|| BridgeError::Protocol("empty exec endpoint".into()))?;
            return Ok(Endpoint::Command {
                program,
                args: parts.collect(),
            });
        }
        let addr = s.strip_prefix("tcp://").unwrap_or(s);
        if addr.rsplit_once(':').is_none_or(|(h, p)| h.is_empty() || p.parse::<u16>().is_err()) {
            return Err(BridgeError::Protocol(format!("bad endpoint {s:?}")));
        }
        Ok(Endpoint::Tcp(addr.to_owned()))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(addr) => write!(f, "tcp://{addr}"),
            Endpoint::Command { program, args } => {
                write!(f, "exec:{program}")?;
                for a in args {
                    write!(f, " {a}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase", deny_unknown_fields)]
pub enum Request {
    Ping {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        schedule_hash: Option<String>,
    },
    Score {
        t: usize,
        shape: [usize; 3],
        data: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    pub fn ok() -> Self {
        Self {
            ok: true,
            data: None,
            error: None,
        }
    }

    pub fn with_data(data: String) -> Self {
        Self {
            ok: true,
            data: Some(data),
            error: None,
        }
    }

    pub fn error(msg: impl Into<String>) -> Self {
        Self {
            ok: false,
            data: None,
            error: Some(msg.into()),
        }
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("response serialises");
        s.push('\n');
        s
    }
}

impl Request {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("request serialises");
        s.push('\n');
        s
    }

    pub fn score(x: &Image, t: usize) -> Self {
        Request::Score {
            t,
            shape: shape_of(x),
            data: encode_f32(x),
        }
    }
}

fn parse_line<T: for<'de> Deserialize<'de>>(line: &str) -> Result<T, BridgeError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    if line.contains('\n') {
        return Err(BridgeError::Protocol("more than one line".into()));
    }
    serde_json::from_str(line).map_err(|e| BridgeError::Protocol(e.to_string()))
}

/// Parses one request line (server side).
pub fn parse_request(line: &str) -> Result<Request, BridgeError> {
    parse_line(line)
}

/// Parses one response line (client side).
pub fn parse_response(line: &str) -> Result<Response, BridgeError> {
    let resp: Response = parse_line(line)?;
    if !resp.ok && resp.error.is_none() {
        return Err(BridgeError::Protocol("ok:false without error message".into()));
    }
    Ok(resp)
}

pub fn encode_f32(x: &Image) -> String {
    let mut bytes = Vec::with_capacity(x.len() * 4);
    for v in x.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    STANDARD.encode(bytes)
}

/// Decodes a base64 `f32` payload into an image of the given shape.
pub fn decode_f32(data: &str, shape: [usize; 3]) -> Result<Image, BridgeError> {
    let bytes = STANDARD
        .decode(data)
        .map_err(|e| BridgeError::Protocol(format!("bad base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(BridgeError::Protocol(format!(
            "payload of {} bytes is not a whole number of f32",
            bytes.len()
        )));
    }
    let expected = shape[0]
        .checked_mul(shape[1])
        .and_then(|v| v.checked_mul(shape[2]))
        .ok_or_else(|| BridgeError::Protocol("shape overflows".into()))?;
    let actual = bytes.len() / 4;
    if actual != expected {
        return Err(BridgeError::Shape { expected, actual });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(BridgeError::Protocol("non-finite value in payload".into()));
    }
    Ok(Image::from_shape_vec((shape[0], shape[1], shape[2]), values).expect("length checked"))
}

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
}

impl Connection {
    fn exchange(&mut self, req: &Request) -> Result<Response, BridgeError> {
        self.writer.write_all(req.to_line().as_bytes())?;
        self.writer.flush()?;
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(BridgeError::Io(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "score server closed the connection",
            )));
        }
        parse_response(&line)
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Score model backed by an external server. Requests on one client are
/// strictly sequential; parallel chains should each open their own client.
pub struct BridgeScore {
    conn: Mutex<Connection>,
}

impl fmt::Debug for BridgeScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BridgeScore").finish_non_exhaustive()
    }
}

impl BridgeScore {
    /// Connects and performs the ping handshake, sending the schedule
    /// fingerprint when a schedule is given.
    pub fn connect(endpoint: &Endpoint, schedule: Option<&Schedule>) -> Result<Self, BridgeError> {
        let connect_err = |source| BridgeError::Connect {
            endpoint: endpoint.to_string(),
            source,
        };
        let conn = match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr).map_err(connect_err)?;
                stream.set_nodelay(true).map_err(connect_err)?;
                let reader = BufReader::new(stream.try_clone().map_err(connect_err)?);
                Connection {
                    reader: Box::new(reader),
                    writer: Box::new(stream),
                    child: None,
                }
            }
            Endpoint::Command { program, args } => {
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(connect_err)?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Connection {
                    reader: Box::new(BufReader::new(stdout)),
                    writer: Box::new(stdin),
                    child: Some(child),
                }
            }
        };
        Self::handshake(conn, schedule)
    }

    /// Client over an already-open pair of streams.
    pub fn from_streams(
        reader: impl BufRead + Send + 'static,
        writer: impl Write + Send + 'static,
        schedule: Option<&Schedule>,
    ) -> Result<Self, BridgeError> {
        let conn = Connection {
            reader: Box::new(reader),
            writer: Box::new(writer),
            child: None,
        };
        Self::handshake(conn, schedule)
    }

    fn handshake(mut conn: Connection, schedule: Option<&Schedule>) -> Result<Self, BridgeError> {
        let resp = conn.exchange(&Request::Ping {
            schedule_hash: schedule.map(Schedule::fingerprint),
        })?;
        if !resp.ok {
            return Err(BridgeError::Refused(resp.error.unwrap_or_default()));
        }
        Ok(Self {
            conn: Mutex::new(conn),
        })
    }

    pub fn ping(&self) -> Result<(), BridgeError> {
        let resp = self.lock().exchange(&Request::Ping {
            schedule_hash: None,
        })?;
        if resp.ok {
            Ok(())
        } else {
            Err(BridgeError::Remote(resp.error.unwrap_or_default()))
        }
    }

    pub fn request_score(&self, x: &Image, t: usize) -> Result<Image, BridgeError> {
        let resp = self.lock().exchange(&Request::score(x, t))?;
        if !resp.ok {
            return Err(BridgeError::Remote(resp.error.unwrap_or_default()));
        }
        let data = resp
            .data
            .ok_or_else(|| BridgeError::Protocol("score response without data".into()))?;
        decode_f32(&data, shape_of(x))
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Connection> {
        // a panic mid-exchange leaves the stream unusable either way
        self.conn.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl super::ScoreModel for BridgeScore {
    fn score(&self, x: &Image, t: usize) -> crate::Result<Image> {
        Ok(self.request_score(x, t)?)
    }
}
