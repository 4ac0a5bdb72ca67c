//! Line-delimited JSON control protocol.
//!
//! Each message is one JSON object terminated by `\n`:
//!
//! ```text
//! {"id":7,"op":"move_abs","args":{"unit":"grating_pitch","steps":12000}}
//! {"id":7,"ok":true,"result":{"target_steps":12000,"duration_s":0.6}}
//! {"id":8,"ok":false,"error":{"code":"E_NO_UNIT","message":"no unit named 'x'"}}
//! ```
//!
//! A connection whose first request is `attach` is a static session and stays
//! open; any other first request makes it a dynamic connection that carries
//! exactly that one request/response pair. See `PROTOCOL.md` for the full
//! vocabulary.

pub mod client;
pub mod server;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{ErrorCode, ServerError};

/// Longest accepted request line, excluding the terminator.
pub const MAX_LINE: usize = 64 * 1024;

/// Default TCP port.
pub const DEFAULT_PORT: u16 = 5025;

/// Handshake op that opens a static session.
pub const ATTACH: &str = "attach";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub args: Option<Map<String, Value>>,
}

impl Request {
    pub fn new(id: u64, op: impl Into<String>, args: Option<Map<String, Value>>) -> Self {
        Self {
            id,
            op: op.into(),
            args,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub id: u64,
    pub outcome: Result<Map<String, Value>, ServerError>,
}

impl Response {
    pub fn ok(id: u64, result: Map<String, Value>) -> Self {
        Self {
            id,
            outcome: Ok(result),
        }
    }

    pub fn err(id: u64, error: ServerError) -> Self {
        Self {
            id,
            outcome: Err(error),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.outcome.is_ok()
    }
}

#[derive(Serialize, Deserialize)]
struct WireResponse {
    id: u64,
    ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    result: Option<Map<String, Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<ServerError>,
}

/// A message that could not be decoded, with whatever id was recoverable (else 0).
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeError {
    pub id: u64,
    pub error: ServerError,
}

impl DecodeError {
    pub fn into_response(self) -> Response {
        Response::err(self.id, self.error)
    }
}

fn parse_err(id: u64, msg: impl Into<String>) -> DecodeError {
    DecodeError {
        id,
        error: ServerError::new(ErrorCode::Parse, msg),
    }
}

fn line_to_object(line: &[u8]) -> Result<Map<String, Value>, DecodeError> {
    let line = line.strip_suffix(b"\n").unwrap_or(line);
    let line = line.strip_suffix(b"\r").unwrap_or(line);
    let text = std::str::from_utf8(line).map_err(|_| parse_err(0, "line is not valid UTF-8"))?;
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(obj)) => Ok(obj),
        Ok(_) => Err(parse_err(0, "message must be a JSON object")),
        Err(e) => Err(parse_err(0, format!("malformed JSON: {e}"))),
    }
}

pub fn encode_request(req: &Request) -> String {
    let mut line = serde_json::to_string(req).expect("requests serialize");
    line.push('\n');
    line
}

/// Decodes one request line (with or without its `\n`).
pub fn decode_request(line: &[u8]) -> Result<Request, DecodeError> {
    let mut obj = line_to_object(line)?;
    let id = match obj.get("id") {
        Some(v) => v
            .as_u64()
            .ok_or_else(|| parse_err(0, "id must be an unsigned 64-bit integer"))?,
        None => return Err(parse_err(0, "missing field 'id'")),
    };
    let op = match obj.remove("op") {
        Some(Value::String(s)) if !s.is_empty() => s,
        Some(Value::String(_)) => return Err(parse_err(id, "op must be non-empty")),
        Some(_) => return Err(parse_err(id, "op must be a string")),
        None => return Err(parse_err(id, "missing field 'op'")),
    };
    let args = match obj.remove("args") {
        None | Some(Value::Null) => None,
        Some(Value::Object(a)) => Some(a),
        Some(_) => return Err(parse_err(id, "args must be an object")),
    };
    Ok(Request { id, op, args })
}

pub fn encode_response(resp: &Response) -> String {
    let wire = match &resp.outcome {
        Ok(r) => WireResponse {
            id: resp.id,
            ok: true,
            result: Some(r.clone()),
            error: None,
        },
        Err(e) => WireResponse {
            id: resp.id,
            ok: false,
            result: None,
            error: Some(e.clone()),
        },
    };
    let mut line = serde_json::to_string(&wire).expect("responses serialize");
    line.push('\n');
    line
}

pub fn decode_response(line: &[u8]) -> Result<Response, DecodeError> {
    let obj = line_to_object(line)?;
    let wire: WireResponse = serde_json::from_value(Value::Object(obj))
        .map_err(|e| parse_err(0, format!("bad response: {e}")))?;
    match (wire.ok, wire.result, wire.error) {
        (true, Some(r), None) => Ok(Response::ok(wire.id, r)),
        (false, None, Some(e)) => Ok(Response::err(wire.id, e)),
        _ => Err(parse_err(
            wire.id,
            "response must carry exactly one of result/error matching ok",
        )),
    }
}
