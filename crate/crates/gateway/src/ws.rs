//! Live event stream on `/ws`.
//!
//! One poller per gateway watches the device through the upstream session
//! and broadcasts three message types:
//!
//! * `{"type":"snapshot","data":{..}}` full state, at most every 250 ms and
//!   only when something other than the clocks changed;
//! * `{"type":"scan_point","scan_id":N,"point":{..}}` every acquired point;
//! * `{"type":"scan_status","scan_id":N,"status":{..}}` on each status change.
//!
//! Each subscriber gets a fresh snapshot on connect. A subscriber that falls
//! [`BUFFER`] messages behind is disconnected.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::ws::{CloseFrame, Message, Utf8Bytes, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use serde_json::{json, Map, Value};
use tokio::sync::{broadcast, watch};

use crate::upstream::Upstream;
use crate::AppState;

/// Per-subscriber backlog before the subscriber is dropped.
pub const BUFFER: usize = 64;
/// Minimum spacing of snapshot messages.
pub const SNAPSHOT_EVERY: Duration = Duration::from_millis(250);
/// How often the poller asks for new scan points.
pub const POLL_EVERY: Duration = Duration::from_millis(50);

pub struct Hub {
    tx: broadcast::Sender<Arc<str>>,
    last_snapshot: Mutex<Option<Value>>,
}

impl Hub {
    pub fn new() -> Arc<Self> {
        let (tx, _) = broadcast::channel(BUFFER);
        Arc::new(Self {
            tx,
            last_snapshot: Mutex::new(None),
        })
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<str>> {
        self.tx.subscribe()
    }

    fn publish(&self, msg: Value) {
        // no subscribers is fine
        let _ = self.tx.send(Arc::from(msg.to_string()));
    }
}

fn snapshot_msg(data: &Value) -> Value {
    json!({ "type": "snapshot", "data": data })
}

/// Snapshot with the ever-changing clock fields removed, for change detection.
fn comparable(snap: &Map<String, Value>) -> Map<String, Value> {
    let mut s = snap.clone();
    s.remove("uptime_s");
    s.remove("sim_time_s");
    s
}

/// Runs until `shutdown` flips.
pub async fn poll_loop(upstream: Upstream, hub: Arc<Hub>, mut shutdown: watch::Receiver<bool>) {
    let mut scan_id: Option<u64> = None;
    let mut cursor = 0usize;
    let mut last_status: Option<(Option<u64>, Value)> = None;
    let mut last_snap: Option<Map<String, Value>> = None;
    let mut snap_due = Instant::now();
    let mut tick = tokio::time::interval(POLL_EVERY);
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            _ = tick.tick() => {}
            _ = shutdown.changed() => return,
        }
        if *shutdown.borrow() {
            return;
        }
        if !upstream.is_connected() {
            continue;
        }
        poll_points(&upstream, &hub, &mut scan_id, &mut cursor, &mut last_status).await;
        if Instant::now() >= snap_due {
            snap_due = Instant::now() + SNAPSHOT_EVERY;
            if let Ok(snap) = upstream.call("snapshot", None).await {
                let cmp = comparable(&snap);
                if last_snap.as_ref() != Some(&cmp) {
                    last_snap = Some(cmp);
                    let data = Value::Object(snap);
                    hub.publish(snapshot_msg(&data));
                    *hub.last_snapshot.lock().unwrap() = Some(data);
                }
            }
        }
    }
}

async fn poll_points(
    upstream: &Upstream,
    hub: &Hub,
    scan_id: &mut Option<u64>,
    cursor: &mut usize,
    last_status: &mut Option<(Option<u64>, Value)>,
) {
    // A new scan id means the buffer was replaced; refetch it from the start.
    for _ in 0..2 {
        let args = json!({ "since": *cursor }).as_object().cloned();
        let Ok(mut res) = upstream.call("scan_points", args).await else {
            return;
        };
        let id = res.get("scan_id").and_then(Value::as_u64);
        if id != *scan_id {
            *scan_id = id;
            *cursor = 0;
            if res.get("since").and_then(Value::as_u64) != Some(0) {
                continue;
            }
        }
        if let Some(Value::Array(points)) = res.remove("points") {
            *cursor += points.len();
            for p in points {
                hub.publish(json!({ "type": "scan_point", "scan_id": id, "point": p }));
            }
        }
        let status = res.remove("status").unwrap_or(Value::Null);
        let key = (id, status);
        if last_status.as_ref() != Some(&key) {
            hub.publish(json!({ "type": "scan_status", "scan_id": key.0, "status": key.1 }));
            *last_status = Some(key);
        }
        return;
    }
}

pub async fn handler(ws: WebSocketUpgrade, State(st): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| session(socket, st))
}

async fn close(socket: &mut WebSocket, code: u16, reason: &'static str) {
    let frame = CloseFrame {
        code,
        reason: Utf8Bytes::from_static(reason),
    };
    let _ = socket.send(Message::Close(Some(frame))).await;
}

async fn session(mut socket: WebSocket, st: AppState) {
    // Subscribe before the snapshot so nothing produced in between is missed.
    let mut rx = st.hub.subscribe();
    let first = match st.upstream.call("snapshot", None).await {
        Ok(s) => Some(Value::Object(s)),
        Err(_) => st.hub.last_snapshot.lock().unwrap().clone(),
    };
    let Some(first) = first else {
        close(&mut socket, 1011, "upstream unavailable").await;
        return;
    };
    if socket
        .send(Message::text(snapshot_msg(&first).to_string()))
        .await
        .is_err()
    {
        return;
    }
    let mut shutdown = st.shutdown.clone();
    loop {
        tokio::select! {
            msg = rx.recv() => match msg {
                Ok(text) => {
                    if socket.send(Message::text(&*text)).await.is_err() {
                        return;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    log::info!("ws subscriber {n} messages behind; disconnecting");
                    close(&mut socket, 1008, "subscriber too slow").await;
                    return;
                }
                Err(broadcast::error::RecvError::Closed) => return,
            },
            incoming = socket.recv() => match incoming {
                // Clients have nothing to say; pings are answered by axum.
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
            _ = shutdown.changed() => {
                close(&mut socket, 1001, "gateway shutting down").await;
                return;
            }
        }
    }
}
