//! HTTP/WebSocket bridge to a beamline device server.
//!
//! The gateway keeps no beamline state of its own. REST calls and the `/ws`
//! event stream are all served through one static protocol session to the
//! device server (see [`upstream`]), so the gateway can be killed and
//! restarted at any time without losing scan data.

pub mod routes;
pub mod upstream;
pub mod ws;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::response::Html;
use axum::routing::get;
use axum::Router;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;
use tower_http::services::ServeDir;

pub use routes::{http_status, Route, ROUTES};
pub use upstream::Upstream;

/// Served at `/` when no console directory is configured.
pub const PLACEHOLDER_INDEX: &str = include_str!("index.html");

#[derive(Clone)]
pub struct AppState {
    pub upstream: Upstream,
    pub hub: Arc<ws::Hub>,
    pub shutdown: watch::Receiver<bool>,
}

/// Full router: `/api/...`, `/ws` and the console assets at `/`.
pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let app = routes::api_router().route("/ws", get(ws::handler));
    let app = match static_dir {
        Some(dir) => {
            app.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true))
        }
        None => app.route("/", get(|| async { Html(PLACEHOLDER_INDEX) })),
    };
    app.with_state(state)
}

#[derive(Debug, Clone)]
pub struct GatewayOptions {
    pub upstream_host: String,
    pub upstream_port: u16,
    pub static_dir: Option<PathBuf>,
}

/// A gateway serving on its own tasks until [`RunningGateway::stop`].
pub struct RunningGateway {
    pub addr: SocketAddr,
    pub upstream: Upstream,
    shutdown: Arc<watch::Sender<bool>>,
    server: JoinHandle<()>,
    poller: JoinHandle<()>,
}

impl RunningGateway {
    /// Starts serving on `listener`. Must be called inside a tokio runtime.
    pub fn start(listener: TcpListener, opts: GatewayOptions) -> std::io::Result<Self> {
        let addr = listener.local_addr()?;
        let (tx, rx) = watch::channel(false);
        let upstream = Upstream::spawn(&opts.upstream_host, opts.upstream_port);
        let hub = ws::Hub::new();
        let poller = tokio::spawn(ws::poll_loop(upstream.clone(), hub.clone(), rx.clone()));
        let state = AppState {
            upstream: upstream.clone(),
            hub,
            shutdown: rx.clone(),
        };
        let app = router(state, opts.static_dir);
        let mut stop = rx;
        let server = tokio::spawn(async move {
            let shutdown = async move {
                let _ = stop.wait_for(|s| *s).await;
            };
            if let Err(e) = axum::serve(listener, app)
                .with_graceful_shutdown(shutdown)
                .await
            {
                log::error!("http server: {e}");
            }
        });
        Ok(Self {
            addr,
            upstream,
            shutdown: Arc::new(tx),
            server,
            poller,
        })
    }

    pub fn port(&self) -> u16 {
        self.addr.port()
    }

    /// Signals shutdown and waits for the HTTP server to finish.
    pub async fn stop(self) {
        let _ = self.shutdown.send(true);
        let _ = self.server.await;
        let _ = self.poller.await;
    }

    /// Waits until the server exits (it only does so after `stop` or an error).
    pub async fn join(self) {
        let RunningGateway {
            server, shutdown, ..
        } = self;
        let _ = server.await;
        drop(shutdown);
    }

    /// Handle that can trigger shutdown from elsewhere (e.g. a signal task).
    pub fn shutdown_handle(&self) -> Arc<watch::Sender<bool>> {
        self.shutdown.clone()
    }
}
