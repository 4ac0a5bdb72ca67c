//! TCP listener for the control protocol.

use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;

use serde_json::{json, Map, Value};
use tokio::io::{AsyncBufReadExt, AsyncRead, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot, watch};

use super::{decode_request, encode_response, Request, Response, ATTACH, MAX_LINE};
use crate::command::Command;
use crate::device::DeviceHandle;
use crate::error::{ErrorCode, ServerError};

/// Connection counters, readable while the server runs.
#[derive(Debug, Default)]
pub struct ServerStats {
    accepts: AtomicU64,
    static_sessions: AtomicU64,
    requests: AtomicU64,
}

impl ServerStats {
    pub fn accepts(&self) -> u64 {
        self.accepts.load(Ordering::SeqCst)
    }

    pub fn static_sessions(&self) -> u64 {
        self.static_sessions.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }
}

enum Line {
    Data(Vec<u8>),
    TooLong,
    Eof,
}

async fn read_line<R: AsyncRead + Unpin>(reader: &mut BufReader<R>) -> io::Result<Line> {
    let mut buf = Vec::new();
    let n = (&mut *reader)
        .take(MAX_LINE as u64 + 1)
        .read_until(b'\n', &mut buf)
        .await?;
    if n == 0 {
        return Ok(Line::Eof);
    }
    if buf.last() == Some(&b'\n') {
        buf.pop();
        if buf.len() > MAX_LINE {
            return Ok(Line::TooLong);
        }
        return Ok(Line::Data(buf));
    }
    if buf.len() > MAX_LINE {
        return Ok(Line::TooLong);
    }
    // Unterminated final line before EOF.
    Ok(Line::Data(buf))
}

fn too_long() -> Response {
    Response::err(
        0,
        ServerError::new(ErrorCode::Parse, format!("line exceeds {MAX_LINE} bytes")),
    )
}

fn into_object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        other => {
            let mut m = Map::new();
            m.insert("value".into(), other);
            m
        }
    }
}

/// A response slot in per-connection order: either ready now or awaiting the device.
enum Slot {
    Ready(Response),
    Waiting {
        id: u64,
        rx: oneshot::Receiver<Result<Value, ServerError>>,
        extra: Option<Map<String, Value>>,
    },
}

impl Slot {
    async fn resolve(self) -> Response {
        match self {
            Slot::Ready(r) => r,
            Slot::Waiting { id, rx, extra } => {
                let outcome = rx.await.unwrap_or_else(|_| {
                    Err(ServerError::new(ErrorCode::Internal, "device loop stopped"))
                });
                match outcome {
                    Ok(v) => {
                        let mut obj = into_object(v);
                        if let Some(extra) = extra {
                            obj.extend(extra);
                        }
                        Response::ok(id, obj)
                    }
                    Err(e) => Response::err(id, e),
                }
            }
        }
    }
}

struct Conn {
    device: DeviceHandle,
    stats: Arc<ServerStats>,
}

impl Conn {
    fn submit(&self, req: Request, mode: &str) -> Slot {
        self.stats.requests.fetch_add(1, Ordering::Relaxed);
        match Command::from_wire(&req.op, req.args.as_ref()) {
            Ok(cmd) => {
                let extra = matches!(cmd, Command::Ping).then(|| {
                    into_object(json!({ "accepts": self.stats.accepts(), "session": mode }))
                });
                Slot::Waiting {
                    id: req.id,
                    rx: self.device.submit(cmd),
                    extra,
                }
            }
            Err(e) => Slot::Ready(Response::err(req.id, e)),
        }
    }
}

async fn write_response<W: AsyncWriteExt + Unpin>(w: &mut W, resp: &Response) -> io::Result<()> {
    w.write_all(encode_response(resp).as_bytes()).await
}

/// Half-closes, then discards what the peer still sends so the close is a FIN
/// rather than a reset that could destroy the response in flight.
async fn close_gracefully<R: AsyncRead + Unpin, W: AsyncWriteExt + Unpin>(
    reader: &mut BufReader<R>,
    wr: &mut W,
) -> io::Result<()> {
    wr.shutdown().await?;
    drain(reader).await;
    Ok(())
}

async fn drain<R: AsyncRead + Unpin>(reader: &mut BufReader<R>) {
    let discard = async {
        let mut sink = [0u8; 8192];
        let mut total = 0usize;
        while total < 4 * 1024 * 1024 {
            match reader.read(&mut sink).await {
                Ok(0) | Err(_) => break,
                Ok(n) => total += n,
            }
        }
    };
    let _ = tokio::time::timeout(std::time::Duration::from_secs(1), discard).await;
}

async fn handle_connection(stream: TcpStream, conn: Conn) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let (rd, mut wr) = stream.into_split();
    let mut reader = BufReader::new(rd);
    let first = match read_line(&mut reader).await? {
        Line::Eof => return Ok(()),
        Line::TooLong => {
            write_response(&mut wr, &too_long()).await?;
            return close_gracefully(&mut reader, &mut wr).await;
        }
        Line::Data(d) => d,
    };
    let req = match decode_request(&first) {
        Ok(r) => r,
        Err(e) => {
            write_response(&mut wr, &e.into_response()).await?;
            return close_gracefully(&mut reader, &mut wr).await;
        }
    };
    if req.op != ATTACH {
        let resp = conn.submit(req, "dynamic").resolve().await;
        write_response(&mut wr, &resp).await?;
        return close_gracefully(&mut reader, &mut wr).await;
    }

    let session = conn.stats.static_sessions.fetch_add(1, Ordering::SeqCst) + 1;
    let hello = json!({ "session": session, "server": conn.device.name(), "mode": "static" });
    write_response(&mut wr, &Response::ok(req.id, into_object(hello))).await?;
    let mut last_id = req.id;

    let (tx, mut rx) = mpsc::unbounded_channel::<Slot>();
    let writer = tokio::spawn(async move {
        while let Some(slot) = rx.recv().await {
            let resp = slot.resolve().await;
            if write_response(&mut wr, &resp).await.is_err() {
                return;
            }
        }
        let _ = wr.shutdown().await;
    });

    loop {
        let line = match read_line(&mut reader).await {
            Ok(Line::Data(d)) => d,
            Ok(Line::TooLong) => {
                let _ = tx.send(Slot::Ready(too_long()));
                break;
            }
            Ok(Line::Eof) | Err(_) => break,
        };
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let slot = match decode_request(&line) {
            Err(e) => Slot::Ready(e.into_response()),
            Ok(req) if req.id <= last_id => Slot::Ready(Response::err(
                req.id,
                ServerError::new(
                    ErrorCode::Proto,
                    format!("request id {} not above {last_id}", req.id),
                ),
            )),
            Ok(req) if req.op == ATTACH => {
                last_id = req.id;
                Slot::Ready(Response::err(
                    req.id,
                    ServerError::new(ErrorCode::Proto, "session already attached"),
                ))
            }
            Ok(req) => {
                last_id = req.id;
                conn.submit(req, "static")
            }
        };
        if tx.send(slot).is_err() {
            break;
        }
    }
    drop(tx);
    let _ = writer.await;
    drain(&mut reader).await;
    Ok(())
}

/// Accepts connections until `shutdown` flips to true.
pub async fn serve(
    listener: TcpListener,
    device: DeviceHandle,
    stats: Arc<ServerStats>,
    mut shutdown: watch::Receiver<bool>,
) {
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    stats.accepts.fetch_add(1, Ordering::SeqCst);
                    let conn = Conn { device: device.clone(), stats: stats.clone() };
                    tokio::spawn(async move {
                        if let Err(e) = handle_connection(stream, conn).await {
                            log::debug!("connection {peer}: {e}");
                        }
                    });
                }
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    tokio::time::sleep(std::time::Duration::from_millis(10)).await;
                }
            },
            _ = shutdown.changed() => {
                if *shutdown.borrow() {
                    return;
                }
            }
        }
    }
}

/// A control server running on its own thread and runtime.
pub struct BackgroundServer {
    pub addr: SocketAddr,
    pub stats: Arc<ServerStats>,
    shutdown: watch::Sender<bool>,
    thread: Option<thread::JoinHandle<()>>,
}

impl BackgroundServer {
    /// Binds `addr` (port 0 picks a free port) and serves `device` in the background.
    pub fn start(addr: &str, device: DeviceHandle) -> io::Result<Self> {
        let std_listener = std::net::TcpListener::bind(addr)?;
        std_listener.set_nonblocking(true)?;
        let local = std_listener.local_addr()?;
        let stats = Arc::new(ServerStats::default());
        let (tx, rx) = watch::channel(false);
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .enable_all()
            .thread_name("beamline-tcp")
            .build()?;
        let st = stats.clone();
        let thread = thread::Builder::new()
            .name("beamline-tcp-main".into())
            .spawn(move || {
                runtime.block_on(async move {
                    match TcpListener::from_std(std_listener) {
                        Ok(listener) => serve(listener, device, st, rx).await,
                        Err(e) => log::error!("listener setup failed: {e}"),
                    }
                });
            })?;
        Ok(Self {
            addr: local,
            stats,
            shutdown: tx,
            thread: Some(thread),
        })
    }

    pub fn port(&self) -> u16 {
        self.addr.port()
    }

    pub fn stop(&mut self) {
        let _ = self.shutdown.send(true);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        self.stop();
    }
}
