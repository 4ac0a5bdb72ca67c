#![allow(dead_code)]

use std::time::{Duration, Instant};

use beamline_core::config::{ClockKind, EXAMPLE_CONFIG};
use beamline_core::kinematics::MonoConfig;
use beamline_core::protocol::server::BackgroundServer;
use beamline_core::{BeamlineConfig, DeviceHandle};

pub fn example_config() -> BeamlineConfig {
    BeamlineConfig::from_toml_str(EXAMPLE_CONFIG).unwrap()
}

pub fn scaled_config(factor: f64) -> BeamlineConfig {
    let mut cfg = example_config();
    cfg.server.clock = ClockKind::Scaled;
    cfg.server.clock_factor = factor;
    cfg
}

pub fn mono() -> MonoConfig {
    example_config().mono.mono_config()
}

/// A fresh device plus TCP server on an ephemeral loopback port.
pub fn start_server(cfg: &BeamlineConfig) -> (BackgroundServer, DeviceHandle) {
    let device = DeviceHandle::spawn(cfg).unwrap();
    let server = BackgroundServer::start("127.0.0.1:0", device.clone()).unwrap();
    (server, device)
}

/// Independent solve: bisection on β over (−90°, 0°) using only
/// α = acos(cos β / c) and the grating equation. Returns (α, β) in degrees.
pub fn oracle_solve(cfg: &MonoConfig, energy: f64) -> (f64, f64) {
    let lambda_mm = cfg.hc / energy * 1e-6;
    let s = cfg.line_density * cfg.order as f64 * lambda_mm;
    let c = cfg.fixed_focus_ratio;
    let alpha_of = |b: f64| (b.cos() / c).acos();
    let f = |b: f64| alpha_of(b).sin() + b.sin() - s;
    let (mut lo, mut hi) = (-std::f64::consts::FRAC_PI_2, 0.0_f64);
    assert!(
        f(lo) < 0.0 && f(hi) > 0.0,
        "oracle bracket fails at {energy} eV"
    );
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let beta = 0.5 * (lo + hi);
    (alpha_of(beta).to_degrees(), beta.to_degrees())
}

pub fn wait_until(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let start = Instant::now();
    while start.elapsed() < timeout {
        if cond() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    cond()
}
