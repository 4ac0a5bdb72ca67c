#![allow(dead_code)]

use std::time::Duration;

use beamline_core::config::EXAMPLE_CONFIG;
use beamline_core::protocol::server::BackgroundServer;
use beamline_core::{BeamlineConfig, DeviceHandle};
use beamline_gateway::{GatewayOptions, RunningGateway};
use futures_util::StreamExt;
use serde_json::Value;
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

pub type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

pub fn example_config() -> BeamlineConfig {
    BeamlineConfig::from_toml_str(EXAMPLE_CONFIG).unwrap()
}

pub fn start_device() -> (BackgroundServer, DeviceHandle) {
    let device = DeviceHandle::spawn(&example_config()).unwrap();
    let server = BackgroundServer::start("127.0.0.1:0", device.clone()).unwrap();
    (server, device)
}

/// Gateway on an ephemeral port, attached to the device server on `upstream_port`.
pub async fn start_gateway(upstream_port: u16) -> RunningGateway {
    start_gateway_with(upstream_port, None).await
}

pub async fn start_gateway_with(
    upstream_port: u16,
    static_dir: Option<std::path::PathBuf>,
) -> RunningGateway {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let opts = GatewayOptions {
        upstream_host: "127.0.0.1".into(),
        upstream_port,
        static_dir,
    };
    let gw = RunningGateway::start(listener, opts).unwrap();
    gw.upstream.wait_connected(Duration::from_secs(5)).await;
    gw
}

pub fn url(gw: &RunningGateway, path: &str) -> String {
    format!("http://{}{}", gw.addr, path)
}

pub async fn ws_connect(gw: &RunningGateway) -> Ws {
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{}/ws", gw.addr))
        .await
        .unwrap();
    ws
}

/// Next JSON text message, or None on close/timeout.
pub async fn next_json(ws: &mut Ws, timeout: Duration) -> Option<Value> {
    let deadline = tokio::time::Instant::now() + timeout;
    loop {
        let msg = tokio::time::timeout_at(deadline, ws.next())
            .await
            .ok()??
            .ok()?;
        match msg {
            Message::Text(t) => return Some(serde_json::from_str(t.as_str()).unwrap()),
            Message::Close(_) => return None,
            _ => {}
        }
    }
}

/// Collects messages until `done` returns true on one of them (inclusive).
pub async fn collect_until(
    ws: &mut Ws,
    timeout: Duration,
    mut done: impl FnMut(&Value) -> bool,
) -> Vec<Value> {
    let deadline = tokio::time::Instant::now() + timeout;
    let mut out = Vec::new();
    loop {
        let left = deadline.saturating_duration_since(tokio::time::Instant::now());
        let Some(v) = next_json(ws, left).await else {
            panic!(
                "stream ended before condition; got {} messages: {:?}",
                out.len(),
                out.last()
            );
        };
        let stop = done(&v);
        out.push(v);
        if stop {
            return out;
        }
    }
}

pub fn is_terminal_status(v: &Value, scan_id: u64) -> bool {
    v["type"] == "scan_status"
        && v["scan_id"] == scan_id
        && matches!(
            v["status"]["state"].as_str(),
            Some("done" | "aborted" | "failed")
        )
}
