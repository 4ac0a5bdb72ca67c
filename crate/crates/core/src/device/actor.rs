//! Runs one [`Beamline`] on a dedicated thread.
//!
//! Every command, snapshot and clock tick passes through the same loop, so
//! clients observe commands in a single total order and never see a
//! half-applied tick.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Mutex, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;
use tokio::sync::oneshot;

use super::{Beamline, Pending, Reply};
use crate::command::Command;
use crate::config::{BeamlineConfig, ConfigError};
use crate::error::{ErrorCode, ServerError};

type ReplyTx = oneshot::Sender<Result<Value, ServerError>>;

enum Msg {
    Cmd(Command, ReplyTx),
    Shutdown,
}

/// Cloneable handle to the command loop.
#[derive(Clone)]
pub struct DeviceHandle {
    tx: mpsc::Sender<Msg>,
    name: String,
}

impl std::fmt::Debug for DeviceHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeviceHandle")
            .field("name", &self.name)
            .finish()
    }
}

fn internal(msg: &str) -> ServerError {
    ServerError::new(ErrorCode::Internal, msg)
}

impl DeviceHandle {
    /// Builds a fresh instance from `cfg` and starts its command loop.
    pub fn spawn(cfg: &BeamlineConfig) -> Result<Self, ConfigError> {
        let beamline = Beamline::from_config(cfg)?;
        let name = beamline.name().to_string();
        let tick = Duration::from_millis(cfg.server.tick_ms);
        let (tx, rx) = mpsc::channel();
        thread::Builder::new()
            .name("beamline-device".into())
            .spawn(move || run_loop(beamline, rx, tick))
            .map_err(ConfigError::Io)?;
        Ok(Self { tx, name })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Queues `cmd`; the receiver resolves once the command completes.
    pub fn submit(&self, cmd: Command) -> oneshot::Receiver<Result<Value, ServerError>> {
        let (reply, rx) = oneshot::channel();
        // A closed loop drops `reply`, which the receiver reports.
        let _ = self.tx.send(Msg::Cmd(cmd, reply));
        rx
    }

    pub async fn call(&self, cmd: Command) -> Result<Value, ServerError> {
        self.submit(cmd)
            .await
            .unwrap_or_else(|_| Err(internal("device loop stopped")))
    }

    pub fn call_blocking(&self, cmd: Command) -> Result<Value, ServerError> {
        self.submit(cmd)
            .blocking_recv()
            .unwrap_or_else(|_| Err(internal("device loop stopped")))
    }

    pub fn shutdown(&self) {
        let _ = self.tx.send(Msg::Shutdown);
    }
}

fn run_loop(mut beamline: Beamline, rx: mpsc::Receiver<Msg>, tick: Duration) {
    let mut last = Instant::now();
    let mut next_tick = last + tick;
    let mut pending: Vec<(Pending, ReplyTx)> = Vec::new();
    loop {
        let timeout = next_tick.saturating_duration_since(Instant::now());
        match rx.recv_timeout(timeout) {
            Ok(Msg::Cmd(cmd, reply)) => {
                let outcome = catch_unwind(AssertUnwindSafe(|| beamline.dispatch(cmd)));
                match outcome {
                    Ok(Ok(Reply::Done(v))) => {
                        let _ = reply.send(Ok(v));
                    }
                    Ok(Ok(Reply::Deferred(p))) => match beamline.poll_pending(&p) {
                        Some(r) => {
                            let _ = reply.send(r);
                        }
                        None => pending.push((p, reply)),
                    },
                    Ok(Err(e)) => {
                        let _ = reply.send(Err(e));
                    }
                    Err(_) => {
                        log::error!("command handler panicked; state kept, error returned");
                        let _ = reply.send(Err(internal("command handler panicked")));
                    }
                }
            }
            Ok(Msg::Shutdown) | Err(RecvTimeoutError::Disconnected) => break,
            Err(RecvTimeoutError::Timeout) => {}
        }
        let now = Instant::now();
        if now >= next_tick {
            let dt = beamline.clock().scale((now - last).as_secs_f64());
            last = now;
            next_tick = now + tick;
            if catch_unwind(AssertUnwindSafe(|| beamline.advance(dt))).is_err() {
                log::error!("tick panicked");
            }
            let mut still = Vec::with_capacity(pending.len());
            for (p, reply) in pending.drain(..) {
                match beamline.poll_pending(&p) {
                    Some(r) => {
                        let _ = reply.send(r);
                    }
                    None => still.push((p, reply)),
                }
            }
            pending = still;
        }
    }
}

static INSTANCE: OnceLock<DeviceHandle> = OnceLock::new();
static INIT: Mutex<()> = Mutex::new(());

/// Process-wide beamline instance. The first call builds it from `cfg`; later
/// calls validate `cfg` but return the existing instance unchanged.
pub fn init_once(cfg: &BeamlineConfig) -> Result<&'static DeviceHandle, ConfigError> {
    cfg.validate()?;
    if let Some(h) = INSTANCE.get() {
        return Ok(h);
    }
    let _guard = INIT.lock().unwrap_or_else(|p| p.into_inner());
    if let Some(h) = INSTANCE.get() {
        return Ok(h);
    }
    let handle = DeviceHandle::spawn(cfg)?;
    Ok(INSTANCE.get_or_init(|| handle))
}
