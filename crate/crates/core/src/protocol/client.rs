//! Blocking clients for both connection disciplines.
//!
//! [`call_dynamic`] pays a full connect/send/receive/close cycle per call.
//! [`Session`] attaches once and reuses the connection for every call.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde_json::{Map, Value};

use super::{decode_response, encode_request, Request, Response, ATTACH, MAX_LINE};
use crate::command::Command;
use crate::error::{ErrorCode, ServerError};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const READ_TIMEOUT: Duration = Duration::from_secs(300);

fn conn_err(msg: impl Into<String>) -> ServerError {
    ServerError::new(ErrorCode::Conn, msg)
}

fn connect(host: &str, port: u16) -> Result<TcpStream, ServerError> {
    let addrs = (host, port)
        .to_socket_addrs()
        .map_err(|e| conn_err(format!("cannot resolve {host}:{port}: {e}")))?;
    let mut last = None;
    for addr in addrs {
        match TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT) {
            Ok(s) => {
                let _ = s.set_nodelay(true);
                let _ = s.set_read_timeout(Some(READ_TIMEOUT));
                return Ok(s);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(conn_err(match last {
        Some(e) => format!("cannot connect to {host}:{port}: {e}"),
        None => format!("no address for {host}:{port}"),
    }))
}

fn read_response<R: BufRead>(reader: &mut R) -> Result<Response, ServerError> {
    let mut line = Vec::new();
    let n = std::io::Read::take(reader, MAX_LINE as u64 * 64)
        .read_until(b'\n', &mut line)
        .map_err(|e| conn_err(format!("read failed: {e}")))?;
    if n == 0 {
        return Err(conn_err("connection closed by server"));
    }
    decode_response(&line).map_err(|e| e.error)
}

/// One request over a fresh connection, closed afterwards.
pub fn call_dynamic(host: &str, port: u16, req: &Request) -> Result<Response, ServerError> {
    let mut stream = connect(host, port)?;
    stream
        .write_all(encode_request(req).as_bytes())
        .map_err(|e| conn_err(format!("write failed: {e}")))?;
    let mut reader = BufReader::new(stream);
    read_response(&mut reader)
}

/// A persistent attached connection.
pub struct Session {
    reader: BufReader<TcpStream>,
    writer: Option<TcpStream>,
    next_id: u64,
    last_id: u64,
    session_no: u64,
}

impl Session {
    /// Connects and performs the `attach` handshake.
    pub fn open(host: &str, port: u16) -> Result<Self, ServerError> {
        let stream = connect(host, port)?;
        let writer = stream.try_clone().map_err(|e| conn_err(e.to_string()))?;
        let mut s = Self {
            reader: BufReader::new(stream),
            writer: Some(writer),
            next_id: 1,
            last_id: 0,
            session_no: 0,
        };
        let hello = s.call_request(&Request::new(1, ATTACH, None))?;
        match hello.outcome {
            Ok(r) => {
                s.session_no = r.get("session").and_then(Value::as_u64).unwrap_or(0);
                Ok(s)
            }
            Err(e) => Err(e),
        }
    }

    pub fn session_number(&self) -> u64 {
        self.session_no
    }

    pub fn is_open(&self) -> bool {
        self.writer.is_some()
    }

    /// Sends `req` as-is. Its id must exceed every id sent before on this session.
    pub fn call_request(&mut self, req: &Request) -> Result<Response, ServerError> {
        let Some(writer) = self.writer.as_mut() else {
            return Err(conn_err("session is closed"));
        };
        if req.id <= self.last_id {
            return Err(ServerError::new(
                ErrorCode::Proto,
                format!("request id {} not above {}", req.id, self.last_id),
            ));
        }
        self.last_id = req.id;
        self.next_id = self.next_id.max(req.id + 1);
        let sent = writer.write_all(encode_request(req).as_bytes());
        let result = sent
            .map_err(|e| conn_err(format!("write failed: {e}")))
            .and_then(|_| read_response(&mut self.reader));
        match result {
            Err(e) if e.code == ErrorCode::Conn => {
                // Broken sessions fail fast from here on.
                self.writer = None;
                Err(e)
            }
            other => other,
        }
    }

    /// Sends `op` with the next id.
    pub fn call(
        &mut self,
        op: &str,
        args: Option<Map<String, Value>>,
    ) -> Result<Response, ServerError> {
        let req = Request::new(self.next_id, op, args);
        self.call_request(&req)
    }

    pub fn close(&mut self) {
        if let Some(w) = self.writer.take() {
            let _ = w.shutdown(std::net::Shutdown::Both);
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.close();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionMode {
    Dynamic,
    Static,
}

impl std::str::FromStr for SessionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dynamic" => Ok(SessionMode::Dynamic),
            "static" => Ok(SessionMode::Static),
            other => Err(format!(
                "unknown session mode '{other}' (expected dynamic|static)"
            )),
        }
    }
}

/// Typed command client over either discipline. A static client attaches lazily.
pub struct Client {
    host: String,
    port: u16,
    mode: SessionMode,
    session: Option<Session>,
    next_id: u64,
}

impl Client {
    pub fn new(host: impl Into<String>, port: u16, mode: SessionMode) -> Self {
        Self {
            host: host.into(),
            port,
            mode,
            session: None,
            next_id: 1,
        }
    }

    pub fn mode(&self) -> SessionMode {
        self.mode
    }

    pub fn call_raw(
        &mut self,
        op: &str,
        args: Option<Map<String, Value>>,
    ) -> Result<Response, ServerError> {
        match self.mode {
            SessionMode::Dynamic => {
                let req = Request::new(self.next_id, op, args);
                self.next_id += 1;
                call_dynamic(&self.host, self.port, &req)
            }
            SessionMode::Static => {
                if self.session.as_ref().is_none_or(|s| !s.is_open()) {
                    self.session = Some(Session::open(&self.host, self.port)?);
                }
                self.session
                    .as_mut()
                    .expect("session opened")
                    .call(op, args)
            }
        }
    }

    /// Sends a typed command; server errors come back as `Err`.
    pub fn call(&mut self, cmd: &Command) -> Result<Value, ServerError> {
        let (op, args) = cmd.to_wire();
        self.call_raw(&op, args)?.outcome.map(Value::Object)
    }

    pub fn close(&mut self) {
        if let Some(mut s) = self.session.take() {
            s.close();
        }
    }
}
