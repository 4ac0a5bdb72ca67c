//! Photon-energy step scans: plan validation, per-point records and CSV output.
//!
//! The stepping itself runs inside the device server (see
//! [`crate::device::Beamline`]), which owns the motors; this module holds the
//! plan, the run bookkeeping and the file format.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::command::{PositionMode, ScanArgs};
use crate::error::{ErrorCode, ServerError};
use crate::kinematics::MonoConfig;

pub const CSV_HEADER: &str =
    "index,e_set_ev,e_readback_ev,mirror_steps,grating_steps,counts,calc_ms,t_s";

/// Upper bound on per-point dwell and settle times. Abort only acts between
/// points, so this also bounds how long an abort can take.
pub const MAX_PHASE_S: f64 = 3600.0;

pub const DEFAULT_SETTLE_S: f64 = 0.1;

/// A validated scan plan with defaults filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPlan {
    pub e_start: f64,
    pub e_end: f64,
    pub step: f64,
    pub dwell_s: f64,
    pub settle_s: f64,
    pub mode: PositionMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    pub n_points: usize,
}

impl ScanPlan {
    pub fn energy_at(&self, index: usize) -> f64 {
        (self.e_start + index as f64 * self.step).min(self.e_end)
    }
}

/// Defaults used when a plan leaves a field unset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanDefaults {
    pub resolving_power: f64,
    pub dwell_s: f64,
    pub settle_s: f64,
}

impl Default for ScanDefaults {
    fn default() -> Self {
        Self {
            resolving_power: 10_000.0,
            dwell_s: 0.1,
            settle_s: DEFAULT_SETTLE_S,
        }
    }
}

fn range_err(field: &str, msg: impl std::fmt::Display) -> ServerError {
    ServerError::new(ErrorCode::Range, format!("{field}: {msg}"))
}

/// Fills defaults (step = e_start / resolving power) and checks every invariant.
pub fn plan_validate(
    args: &ScanArgs,
    mono: &MonoConfig,
    defaults: &ScanDefaults,
) -> Result<ScanPlan, ServerError> {
    let finite = |field: &str, v: f64| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(range_err(field, "must be finite"))
        }
    };
    let e_start = finite("e_start", args.e_start)?;
    let e_end = finite("e_end", args.e_end)?;
    if !(e_start < e_end) {
        return Err(range_err(
            "e_end",
            format!("must exceed e_start ({e_start} >= {e_end})"),
        ));
    }
    for (field, e) in [("e_start", e_start), ("e_end", e_end)] {
        if !mono.contains(e) {
            return Err(range_err(
                field,
                format!(
                    "{e} eV outside mono range [{}, {}] eV",
                    mono.energy_min, mono.energy_max
                ),
            ));
        }
    }
    let step = match args.step {
        Some(s) => finite("step", s)?,
        None => e_start / defaults.resolving_power,
    };
    if !(step > 0.0) {
        return Err(range_err("step", "must be > 0"));
    }
    let dwell_s = finite("dwell_s", args.dwell_s.unwrap_or(defaults.dwell_s))?;
    if !(dwell_s > 0.0 && dwell_s <= MAX_PHASE_S) {
        return Err(range_err(
            "dwell_s",
            format!("must be in (0, {MAX_PHASE_S}] s"),
        ));
    }
    let settle_s = finite("settle_s", args.settle_s.unwrap_or(defaults.settle_s))?;
    if !(0.0..=MAX_PHASE_S).contains(&settle_s) {
        return Err(range_err(
            "settle_s",
            format!("must be in [0, {MAX_PHASE_S}] s"),
        ));
    }
    // Tolerate representation error so 0.05/0.01 counts as 5 steps.
    let span = ((e_end - e_start) / step * (1.0 + 1e-12)).floor();
    if span > 1e7 {
        return Err(range_err("step", format!("{span} points is too many")));
    }
    let n_points = span as usize + 1;
    if n_points < 2 {
        return Err(range_err("step", "plan must contain at least 2 points"));
    }
    Ok(ScanPlan {
        e_start,
        e_end,
        step,
        dwell_s,
        settle_s,
        mode: args.mode,
        output: args.output.clone(),
        n_points,
    })
}

/// One acquired point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub index: usize,
    pub e_set: f64,
    pub e_readback: f64,
    pub mirror_steps: i64,
    pub grating_steps: i64,
    pub counts: f64,
    pub calc_ms: f64,
    /// Simulated seconds since the scan started.
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum ScanStatus {
    Idle,
    Running { current: usize, total: usize },
    Aborted { at: usize },
    Done { total: usize },
    Failed { code: String, at: usize },
}

impl ScanStatus {
    pub fn is_terminal(&self) -> bool {
        matches!(
            self,
            ScanStatus::Aborted { .. } | ScanStatus::Done { .. } | ScanStatus::Failed { .. }
        )
    }

    pub fn is_running(&self) -> bool {
        matches!(self, ScanStatus::Running { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            ScanStatus::Idle => "idle",
            ScanStatus::Running { .. } => "running",
            ScanStatus::Aborted { .. } => "aborted",
            ScanStatus::Done { .. } => "done",
            ScanStatus::Failed { .. } => "failed",
        }
    }
}

/// Where a running scan is within the current point.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Phase {
    /// Next point not started yet.
    Start,
    Moving {
        deadline: f64,
    },
    Settling {
        until: f64,
    },
    Integrating {
        until: f64,
        e_readback: f64,
        mirror: i64,
        grating: i64,
        counts: f64,
    },
}

/// Bookkeeping of one scan, owned by the device server.
#[derive(Debug, Clone)]
pub struct ScanRun {
    pub id: u64,
    pub plan: ScanPlan,
    pub points: Vec<ScanPoint>,
    pub status: ScanStatus,
    pub(crate) phase: Phase,
    pub(crate) started_at: f64,
    pub(crate) calc_ms: f64,
    pub(crate) abort_requested: bool,
}

impl ScanRun {
    pub(crate) fn new(id: u64, plan: ScanPlan, now: f64) -> Self {
        let total = plan.n_points;
        Self {
            id,
            plan,
            points: Vec::with_capacity(total),
            status: ScanStatus::Running { current: 0, total },
            phase: Phase::Start,
            started_at: now,
            calc_ms: 0.0,
            abort_requested: false,
        }
    }

    pub fn current_index(&self) -> usize {
        self.points.len()
    }
}

fn fmt_f64(out: &mut String, v: f64) {
    // Display prints the shortest string that parses back to the same f64.
    let _ = write!(out, "{v}");
}

pub fn to_csv(points: &[ScanPoint]) -> String {
    let mut out = String::with_capacity(64 * (points.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for p in points {
        let _ = write!(out, "{},", p.index);
        fmt_f64(&mut out, p.e_set);
        out.push(',');
        fmt_f64(&mut out, p.e_readback);
        let _ = write!(out, ",{},{},", p.mirror_steps, p.grating_steps);
        fmt_f64(&mut out, p.counts);
        out.push(',');
        fmt_f64(&mut out, p.calc_ms);
        out.push(',');
        fmt_f64(&mut out, p.t);
        out.push('\n');
    }
    out
}

pub fn persist(points: &[ScanPoint], path: impl AsRef<Path>) -> Result<(), ServerError> {
    let path = path.as_ref();
    std::fs::write(path, to_csv(points)).map_err(|e| {
        ServerError::new(
            ErrorCode::Io,
            format!("cannot write {}: {e}", path.display()),
        )
    })
}

pub fn parse_csv(text: &str) -> io::Result<Vec<ScanPoint>> {
    let bad = |line: usize, what: &str| {
        io::Error::new(io::ErrorKind::InvalidData, format!("line {line}: {what}"))
    };
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(bad(1, "missing header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(i + 2, "expected 8 fields"));
            }
            let float = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 2, "bad float"));
            let int = |s: &str| s.parse::<i64>().map_err(|_| bad(i + 2, "bad integer"));
            Ok(ScanPoint {
                index: f[0].parse().map_err(|_| bad(i + 2, "bad index"))?,
                e_set: float(f[1])?,
                e_readback: float(f[2])?,
                mirror_steps: int(f[3])?,
                grating_steps: int(f[4])?,
                counts: float(f[5])?,
                calc_ms: float(f[6])?,
                t: float(f[7])?,
            })
        })
        .collect()
}
