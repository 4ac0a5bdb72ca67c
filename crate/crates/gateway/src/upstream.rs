//! The gateway's single static session to the device server.
//!
//! Every HTTP and WebSocket request is multiplexed over one attached
//! connection. Responses are matched to callers by request id. When the
//! connection drops, pending and new calls fail with `E_CONN` until a
//! reconnect (with exponential backoff) succeeds.

use std::collections::HashMap;
use std::time::Duration;

use beamline_core::protocol::{decode_response, encode_request, Request, ATTACH, MAX_LINE};
use beamline_core::{ErrorCode, ServerError};
use serde_json::{Map, Value};
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpStream;
use tokio::sync::{mpsc, oneshot, watch};

const MIN_BACKOFF: Duration = Duration::from_millis(100);
const MAX_BACKOFF: Duration = Duration::from_secs(2);

type Reply = oneshot::Sender<Result<Map<String, Value>, ServerError>>;

struct Call {
    op: String,
    args: Option<Map<String, Value>>,
    reply: Reply,
}

fn conn_err(msg: impl Into<String>) -> ServerError {
    ServerError::new(ErrorCode::Conn, msg)
}

/// Cloneable handle to the upstream session task.
#[derive(Clone)]
pub struct Upstream {
    tx: mpsc::Sender<Call>,
    connected: watch::Receiver<bool>,
    addr: String,
}

impl Upstream {
    /// Starts the session task; it connects in the background.
    pub fn spawn(host: &str, port: u16) -> Self {
        let addr = format!("{host}:{port}");
        let (tx, rx) = mpsc::channel(1024);
        let (ctx, crx) = watch::channel(false);
        tokio::spawn(run(addr.clone(), rx, ctx));
        Self {
            tx,
            connected: crx,
            addr,
        }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn is_connected(&self) -> bool {
        *self.connected.borrow()
    }

    /// Waits until the session is attached, up to `timeout`.
    pub async fn wait_connected(&self, timeout: Duration) -> bool {
        let mut rx = self.connected.clone();
        tokio::time::timeout(timeout, rx.wait_for(|c| *c))
            .await
            .is_ok_and(|r| r.is_ok())
    }

    pub async fn call(
        &self,
        op: &str,
        args: Option<Map<String, Value>>,
    ) -> Result<Map<String, Value>, ServerError> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(Call {
                op: op.to_string(),
                args,
                reply,
            })
            .await
            .map_err(|_| conn_err("gateway upstream task stopped"))?;
        rx.await
            .unwrap_or_else(|_| Err(conn_err("upstream session dropped the request")))
    }
}

async fn run(addr: String, mut rx: mpsc::Receiver<Call>, connected: watch::Sender<bool>) {
    let mut backoff = MIN_BACKOFF;
    loop {
        match attach(&addr).await {
            Ok((stream, session)) => {
                log::info!("upstream {addr} attached (session {session})");
                backoff = MIN_BACKOFF;
                let _ = connected.send(true);
                let closed = serve_session(stream, &mut rx).await;
                let _ = connected.send(false);
                if closed {
                    return;
                }
                log::warn!("upstream {addr} lost; reconnecting");
            }
            Err(e) => {
                log::debug!("upstream {addr}: {e}");
                // Fail calls fast while the server is away.
                let sleep = tokio::time::sleep(backoff);
                tokio::pin!(sleep);
                loop {
                    tokio::select! {
                        _ = &mut sleep => break,
                        call = rx.recv() => match call {
                            Some(c) => {
                                let _ = c.reply.send(Err(conn_err(format!("upstream {addr} unreachable: {e}"))));
                            }
                            None => return,
                        },
                    }
                }
                backoff = (backoff * 2).min(MAX_BACKOFF);
            }
        }
    }
}

async fn attach(addr: &str) -> Result<(TcpStream, u64), ServerError> {
    let mut stream = tokio::time::timeout(Duration::from_secs(5), TcpStream::connect(addr))
        .await
        .map_err(|_| conn_err("connect timed out"))?
        .map_err(|e| conn_err(e.to_string()))?;
    let _ = stream.set_nodelay(true);
    stream
        .write_all(encode_request(&Request::new(1, ATTACH, None)).as_bytes())
        .await
        .map_err(|e| conn_err(e.to_string()))?;
    let mut reader = BufReader::new(&mut stream);
    let mut line = Vec::new();
    reader
        .read_until(b'\n', &mut line)
        .await
        .map_err(|e| conn_err(e.to_string()))?;
    let resp = decode_response(&line).map_err(|e| e.error)?;
    let hello = resp.outcome?;
    Ok((
        stream,
        hello.get("session").and_then(Value::as_u64).unwrap_or(0),
    ))
}

/// Runs one attached session. Returns true when the handle side has gone away.
async fn serve_session(stream: TcpStream, rx: &mut mpsc::Receiver<Call>) -> bool {
    let (rd, mut wr) = stream.into_split();
    let (resp_tx, mut resp_rx) = mpsc::unbounded_channel();
    let reader = tokio::spawn(async move {
        let mut reader = BufReader::new(rd);
        loop {
            let mut line = Vec::new();
            match (&mut reader)
                .take(MAX_LINE as u64 * 64)
                .read_until(b'\n', &mut line)
                .await
            {
                Ok(0) | Err(_) => return,
                Ok(_) => match decode_response(&line) {
                    Ok(resp) => {
                        if resp_tx.send(resp).is_err() {
                            return;
                        }
                    }
                    Err(e) => log::warn!("undecodable upstream line: {}", e.error),
                },
            }
        }
    });
    let mut pending: HashMap<u64, Reply> = HashMap::new();
    let mut next_id: u64 = 2;
    let closed = loop {
        tokio::select! {
            call = rx.recv() => {
                let Some(call) = call else { break true };
                let id = next_id;
                next_id += 1;
                let bytes = encode_request(&Request::new(id, call.op, call.args));
                if let Err(e) = wr.write_all(bytes.as_bytes()).await {
                    let _ = call.reply.send(Err(conn_err(format!("upstream write failed: {e}"))));
                    break false;
                }
                pending.insert(id, call.reply);
            }
            resp = resp_rx.recv() => {
                let Some(resp) = resp else { break false };
                match pending.remove(&resp.id) {
                    Some(reply) => {
                        let _ = reply.send(resp.outcome);
                    }
                    None => log::warn!("upstream answered unknown id {}", resp.id),
                }
            }
        }
    };
    reader.abort();
    for (_, reply) in pending.drain() {
        let _ = reply.send(Err(conn_err("upstream connection lost")));
    }
    closed
}
