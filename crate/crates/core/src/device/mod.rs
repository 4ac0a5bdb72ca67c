//! The beamline instance: every unit, the monochromator state and the scan
//! engine behind one serialized command interface.
//!
//! [`Beamline`] is a plain state machine. It applies one [`Command`] at a time
//! and moves simulated time forward with [`Beamline::advance`]. Commands that
//! must wait for motion (a `set_energy` with `wait`, an `abort_scan`) come back
//! as [`Reply::Deferred`] and are resolved by [`Beamline::poll_pending`] after
//! later ticks. [`actor`] runs a `Beamline` on its own thread for the network
//! front ends.

pub mod actor;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::command::{
    BuildFitArgs, CalcArgs, Command, DetectorArgs, EnergyArgs, FaultArgs, MonoParam, MonoParamArgs,
    PositionMode, ScanArgs,
};
use crate::config::{AxesSection, AxisMapping, BeamlineConfig, ConfigError};
use crate::error::{ErrorCode, ServerError};
use crate::hardware::{SimClock, UnitRegistry, UnitSnapshot, UnitState};
use crate::kinematics::{self, Axis, FitTable, MonoConfig};
use crate::scan::{self, Phase, ScanDefaults, ScanPoint, ScanRun, ScanStatus};

pub use actor::{init_once, DeviceHandle};

/// Result of applying one command.
#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Done(Value),
    Deferred(Pending),
}

/// A reply that waits on simulated progress.
#[derive(Debug, Clone, PartialEq)]
pub enum Pending {
    MotorsIdle {
        motors: Vec<String>,
        deadline: f64,
        result: Value,
    },
    ScanTerminal {
        scan_id: u64,
        deadline: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitState {
    Absent,
    Fresh,
    Stale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub scan_id: Option<u64>,
    pub status: ScanStatus,
    pub points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub persist_error: Option<String>,
}

/// Atomic view of the whole instance, taken between commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub server: String,
    pub units: Vec<UnitSnapshot>,
    pub energy_ev: Option<f64>,
    pub mode: PositionMode,
    pub fits: FitState,
    pub scan: ScanSummary,
    pub uptime_s: f64,
    pub sim_time_s: f64,
}

/// Motor targets for one energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub e_ev: f64,
    pub mode: PositionMode,
    pub mirror_deg: f64,
    pub grating_deg: f64,
    pub mirror_steps: i64,
    pub grating_steps: i64,
}

/// Longest an `abort_scan` reply waits (simulated seconds) for the in-flight point.
pub const ABORT_REPLY_WAIT_S: f64 = 10.0;

pub struct Beamline {
    name: String,
    units: UnitRegistry,
    mono: MonoConfig,
    fits: Option<FitTable>,
    fits_stale: bool,
    axes: AxesSection,
    grating_encoder: String,
    mirror_encoder: Option<String>,
    detector: String,
    clock: SimClock,
    mode: PositionMode,
    scan_defaults: ScanDefaults,
    output_dir: Option<String>,
    scan: Option<ScanRun>,
    next_scan_id: u64,
    persist_error: Option<String>,
    started_at: Instant,
}

fn err(code: ErrorCode, msg: impl Into<String>) -> ServerError {
    ServerError::new(code, msg)
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

impl Beamline {
    pub fn from_config(cfg: &BeamlineConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let units = cfg.build_units()?;
        let grating_encoder = units
            .encoder_for(&cfg.axes.grating.motor)
            .map(|e| e.name.clone())
            .ok_or_else(|| {
                ConfigError::Invalid(vec!["encoders: grating axis has no encoder".into()])
            })?;
        let mirror_encoder = units
            .encoder_for(&cfg.axes.mirror.motor)
            .map(|e| e.name.clone());
        Ok(Self {
            name: cfg.server.name.clone(),
            units,
            mono: cfg.mono.mono_config(),
            fits: None,
            fits_stale: false,
            axes: cfg.axes.clone(),
            grating_encoder,
            mirror_encoder,
            detector: cfg.detector.name.clone(),
            clock: SimClock::new(cfg.server.clock_mode()),
            mode: PositionMode::Realtime,
            scan_defaults: ScanDefaults {
                resolving_power: cfg.mono.resolving_power,
                dwell_s: cfg.scan.dwell_s,
                settle_s: cfg.scan.settle_s,
            },
            output_dir: cfg.scan.output_dir.clone(),
            scan: None,
            next_scan_id: 1,
            persist_error: None,
            started_at: Instant::now(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn mono(&self) -> &MonoConfig {
        &self.mono
    }

    pub fn units(&self) -> &UnitRegistry {
        &self.units
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn axis_mapping(&self, axis: Axis) -> &AxisMapping {
        match axis {
            Axis::Mirror => &self.axes.mirror,
            Axis::Grating => &self.axes.grating,
        }
    }

    pub fn fit_state(&self) -> FitState {
        match (&self.fits, self.fits_stale) {
            (None, _) => FitState::Absent,
            (Some(_), true) => FitState::Stale,
            (Some(_), false) => FitState::Fresh,
        }
    }

    pub fn scan(&self) -> Option<&ScanRun> {
        self.scan.as_ref()
    }

    fn scan_running(&self) -> bool {
        self.scan.as_ref().is_some_and(|s| s.status.is_running())
    }

    fn is_axis_motor(&self, unit: &str) -> bool {
        unit == self.axes.mirror.motor || unit == self.axes.grating.motor
    }

    /// Moves simulated time forward: motors first, then the scan engine.
    pub fn advance(&mut self, dt: f64) {
        if !(dt > 0.0 && dt.is_finite()) {
            return;
        }
        self.clock.advance(dt);
        self.units.tick(dt);
        self.step_scan();
    }

    pub fn dispatch(&mut self, cmd: Command) -> Result<Reply, ServerError> {
        use Command::*;
        let done = |v: Value| Ok(Reply::Done(v));
        match cmd {
            Ping => done(json!({
                "server": self.name,
                "uptime_s": self.started_at.elapsed().as_secs_f64(),
            })),
            Snapshot => done(to_value(&self.snapshot())),
            ListUnits => done(json!({ "units": self.units.snapshot() })),
            UnitState(a) => done(to_value(&self.units.unit_snapshot(&a.unit)?)),
            MoveAbs(a) => {
                self.guard_axis(&a.unit)?;
                done(to_value(&self.units.move_abs(&a.unit, a.steps)?))
            }
            MoveRel(a) => {
                self.guard_axis(&a.unit)?;
                done(to_value(&self.units.move_rel(&a.unit, a.steps)?))
            }
            Stop(a) => {
                self.units.stop(&a.unit)?;
                done(to_value(&self.units.unit_snapshot(&a.unit)?))
            }
            SetEnergy(a) => self.set_energy(&a),
            GetEnergy => done(json!({ "energy_ev": self.energy_estimate(), "mode": self.mode })),
            CalcPositions(a) => done(self.calc_positions(&a)?),
            BuildFit(a) => done(self.build_fit(&a)?),
            FitReport(a) => {
                let fits = self.fresh_fits()?;
                let report = kinematics::fit_error_report(&self.mono, fits, a.n_probe)?;
                done(to_value(&report))
            }
            SetMonoParam(a) => done(to_value(&self.set_mono_param(&a)?)),
            ReadDetector(a) => done(self.read_detector(&a)?),
            InjectFault(a) => done(self.inject_fault(&a)?),
            ClearFault(a) => {
                self.units.clear_fault(&a.unit)?;
                done(to_value(&self.units.unit_snapshot(&a.unit)?))
            }
            StartScan(a) => done(self.start_scan(&a)?),
            AbortScan => self.abort_scan(),
            ScanStatus => done(to_value(&self.scan_summary())),
            ScanPoints(a) => {
                let points: &[ScanPoint] = self
                    .scan
                    .as_ref()
                    .map(|s| s.points.get(a.since.min(s.points.len())..).unwrap_or(&[]))
                    .unwrap_or(&[]);
                done(json!({
                    "scan_id": self.scan.as_ref().map(|s| s.id),
                    "since": a.since,
                    "points": points,
                    "status": self.scan.as_ref().map(|s| s.status.clone()).unwrap_or(scan::ScanStatus::Idle),
                }))
            }
        }
    }

    /// Applies a command and, if deferred, advances time in `dt` steps until it
    /// resolves. Useful for driving the instance without a clock thread.
    pub fn dispatch_blocking(&mut self, cmd: Command, dt: f64) -> Result<Value, ServerError> {
        match self.dispatch(cmd)? {
            Reply::Done(v) => Ok(v),
            Reply::Deferred(p) => loop {
                if let Some(r) = self.poll_pending(&p) {
                    return r;
                }
                self.advance(dt);
            },
        }
    }

    /// `None` while the condition is still pending.
    pub fn poll_pending(&mut self, pending: &Pending) -> Option<Result<Value, ServerError>> {
        match pending {
            Pending::MotorsIdle {
                motors,
                deadline,
                result,
            } => {
                for name in motors {
                    match self.units.motor(name) {
                        Ok(m) if m.state() == UnitState::Fault => {
                            return Some(Err(err(
                                ErrorCode::Fault,
                                format!(
                                    "'{name}' faulted during move ({})",
                                    m.fault_code().unwrap_or("")
                                ),
                            )))
                        }
                        Ok(_) => {}
                        Err(e) => return Some(Err(e.into())),
                    }
                }
                if motors
                    .iter()
                    .all(|n| self.units.motor(n).is_ok_and(|m| m.is_idle()))
                {
                    return Some(Ok(result.clone()));
                }
                if self.clock.now() >= *deadline {
                    return Some(Err(err(ErrorCode::Fault, "move_timeout")));
                }
                None
            }
            Pending::ScanTerminal { scan_id, deadline } => match &self.scan {
                // Past the deadline the caller gets the still-running status; the abort stays armed.
                Some(s)
                    if s.id == *scan_id
                        && !s.status.is_terminal()
                        && self.clock.now() < *deadline =>
                {
                    None
                }
                _ => Some(Ok(to_value(&self.scan_summary()))),
            },
        }
    }

    fn guard_axis(&self, unit: &str) -> Result<(), ServerError> {
        if self.scan_running() && self.is_axis_motor(unit) {
            return Err(err(
                ErrorCode::Busy,
                format!("scan active: '{unit}' is a scan axis"),
            ));
        }
        Ok(())
    }

    fn fresh_fits(&self) -> Result<&FitTable, ServerError> {
        match (&self.fits, self.fits_stale) {
            (Some(f), false) => Ok(f),
            (Some(_), true) => Err(err(
                ErrorCode::StaleFit,
                "fits are stale: mono parameters changed since build_fit",
            )),
            (None, _) => Err(err(
                ErrorCode::StaleFit,
                "no fits built: run build_fit first",
            )),
        }
    }

    /// Axis targets for `energy` from the live solve or the fits.
    pub fn targets(&self, energy: f64, mode: PositionMode) -> Result<Targets, ServerError> {
        if !self.mono.contains(energy) {
            return Err(err(
                ErrorCode::Range,
                format!(
                    "{energy} eV outside mono range [{}, {}] eV",
                    self.mono.energy_min, self.mono.energy_max
                ),
            ));
        }
        let (mirror_deg, grating_deg) = match mode {
            PositionMode::Realtime => {
                let s = kinematics::solve_diffraction(&self.mono, energy)?;
                (s.mirror_grazing_deg, s.grating_exit_grazing_deg)
            }
            PositionMode::Fit => {
                let f = self.fresh_fits()?;
                (
                    kinematics::eval_fit(&f.mirror, energy)?,
                    kinematics::eval_fit(&f.grating, energy)?,
                )
            }
        };
        Ok(Targets {
            e_ev: energy,
            mode,
            mirror_deg,
            grating_deg,
            mirror_steps: self.axes.mirror.steps_for(mirror_deg),
            grating_steps: self.axes.grating.steps_for(grating_deg),
        })
    }

    fn set_energy(&mut self, a: &EnergyArgs) -> Result<Reply, ServerError> {
        if self.scan_running() {
            return Err(err(ErrorCode::Busy, "scan active"));
        }
        let t = self.targets(a.e_ev, a.mode)?;
        let mirror = self.axes.mirror.motor.clone();
        let grating = self.axes.grating.motor.clone();
        // Both checks pass before either motor is commanded.
        self.units.motor(&mirror)?.check_move(t.mirror_steps)?;
        self.units.motor(&grating)?.check_move(t.grating_steps)?;
        let dm = self.units.move_abs(&mirror, t.mirror_steps)?;
        let dg = self.units.move_abs(&grating, t.grating_steps)?;
        self.mode = a.mode;
        let mut result = to_value(&t);
        result["duration_s"] = json!(dm.duration_s.max(dg.duration_s));
        if a.wait {
            Ok(Reply::Deferred(Pending::MotorsIdle {
                motors: vec![mirror, grating],
                deadline: self.clock.now() + dm.duration_s.max(dg.duration_s) * 2.0 + 5.0,
                result,
            }))
        } else {
            Ok(Reply::Done(result))
        }
    }

    fn calc_positions(&self, a: &CalcArgs) -> Result<Value, ServerError> {
        let start = Instant::now();
        let t = self.targets(a.e_ev, a.mode)?;
        let calc_ms = start.elapsed().as_secs_f64() * 1e3;
        let mut v = to_value(&t);
        if a.mode == PositionMode::Realtime {
            let s = kinematics::solve_diffraction(&self.mono, a.e_ev)?;
            v["alpha_deg"] = json!(s.alpha_deg);
            v["beta_deg"] = json!(s.beta_deg);
        }
        v["calc_ms"] = json!(calc_ms);
        Ok(v)
    }

    fn build_fit(&mut self, a: &BuildFitArgs) -> Result<Value, ServerError> {
        if self.scan_running() {
            return Err(err(ErrorCode::Busy, "scan active"));
        }
        if !(a.e_lo < a.e_hi) {
            return Err(err(
                ErrorCode::Range,
                format!("e_lo {} must be below e_hi {}", a.e_lo, a.e_hi),
            ));
        }
        let table = kinematics::build_fit_table(&self.mono, a.e_lo, a.e_hi, a.n)?;
        let v = to_value(&table);
        self.fits = Some(table);
        self.fits_stale = false;
        Ok(v)
    }

    fn set_mono_param(&mut self, a: &MonoParamArgs) -> Result<MonoConfig, ServerError> {
        if self.scan_running() {
            return Err(err(ErrorCode::Busy, "scan active"));
        }
        let mut next = self.mono;
        match a.name {
            MonoParam::FixedFocusRatio => next.fixed_focus_ratio = a.value,
            MonoParam::LineDensity => next.line_density = a.value,
            MonoParam::Hc => next.hc = a.value,
            MonoParam::Order => {
                if a.value.fract() != 0.0 || a.value.abs() > f64::from(i32::MAX) {
                    return Err(err(
                        ErrorCode::Range,
                        format!("order must be an integer, got {}", a.value),
                    ));
                }
                next.order = a.value as i32;
            }
        }
        next.validate()
            .map_err(|e| err(ErrorCode::Range, e.to_string()))?;
        self.mono = next;
        if self.fits.is_some() {
            self.fits_stale = true;
        }
        Ok(next)
    }

    fn read_detector(&mut self, a: &DetectorArgs) -> Result<Value, ServerError> {
        let name = a.unit.clone().unwrap_or_else(|| self.detector.clone());
        let energy = match a.e_ev {
            Some(e) => e,
            None => self
                .energy_estimate()
                .ok_or_else(|| err(ErrorCode::Range, "no energy estimate; pass e_ev"))?,
        };
        let counts = self.units.detector_read(&name, energy, a.dwell_s)?;
        Ok(json!({ "unit": name, "e_ev": energy, "dwell_s": a.dwell_s, "counts": counts }))
    }

    fn inject_fault(&mut self, a: &FaultArgs) -> Result<Value, ServerError> {
        let is_encoder = self.units.encoder(&a.unit).is_ok();
        if a.code == "slip" && is_encoder {
            self.units.set_slip(&a.unit, a.counts.unwrap_or(0))?;
        } else {
            self.units.inject_fault(&a.unit, &a.code)?;
        }
        Ok(to_value(&self.units.unit_snapshot(&a.unit)?))
    }

    fn axis_readback_steps(&self, axis: Axis) -> Result<f64, ServerError> {
        let (encoder, motor) = match axis {
            Axis::Mirror => (self.mirror_encoder.as_deref(), &self.axes.mirror.motor),
            Axis::Grating => (
                Some(self.grating_encoder.as_str()),
                &self.axes.grating.motor,
            ),
        };
        match encoder {
            Some(name) => {
                let counts = self.units.encoder_read(name)?;
                Ok(self.units.encoder(name)?.steps_from_counts(counts))
            }
            None => Ok(self.units.motor(motor)?.position() as f64),
        }
    }

    /// Photon energy implied by the grating encoder, if it maps to a valid β.
    pub fn energy_estimate(&self) -> Option<f64> {
        let steps = self.axis_readback_steps(Axis::Grating).ok()?;
        self.energy_from_grating_steps(steps)
    }

    pub fn energy_from_grating_steps(&self, steps: f64) -> Option<f64> {
        let beta = self.axes.grating.angle_for(steps) - 90.0;
        kinematics::energy_from_beta(&self.mono, beta).ok()
    }

    /// Largest energy change from moving the grating one step either way
    /// from its target for `energy`.
    pub fn energy_step_bound(&self, energy: f64) -> Option<f64> {
        let t = self.targets(energy, PositionMode::Realtime).ok()?;
        let s = t.grating_steps as f64;
        let at = |x: f64| self.energy_from_grating_steps(x);
        let here = at(s)?;
        let up = at(s + 1.0).map(|e| (e - here).abs()).unwrap_or(0.0);
        let down = at(s - 1.0).map(|e| (e - here).abs()).unwrap_or(0.0);
        Some(up.max(down))
    }

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot {
            server: self.name.clone(),
            units: self.units.snapshot(),
            energy_ev: self.energy_estimate(),
            mode: self.mode,
            fits: self.fit_state(),
            scan: self.scan_summary(),
            uptime_s: self.started_at.elapsed().as_secs_f64(),
            sim_time_s: self.clock.now(),
        }
    }

    pub fn scan_summary(&self) -> ScanSummary {
        match &self.scan {
            None => ScanSummary {
                scan_id: None,
                status: ScanStatus::Idle,
                points: 0,
                output: None,
                persist_error: None,
            },
            Some(s) => ScanSummary {
                scan_id: Some(s.id),
                status: s.status.clone(),
                points: s.points.len(),
                output: s.plan.output.clone(),
                persist_error: self.persist_error.clone(),
            },
        }
    }

    fn start_scan(&mut self, a: &ScanArgs) -> Result<Value, ServerError> {
        if self.scan_running() {
            return Err(err(ErrorCode::Busy, "a scan is already running"));
        }
        let mut plan = scan::plan_validate(a, &self.mono, &self.scan_defaults)?;
        if plan.mode == PositionMode::Fit {
            self.fresh_fits()?;
        }
        for axis in Axis::ALL {
            let m = self.units.motor(&self.axis_mapping(axis).motor)?;
            match m.state() {
                UnitState::Idle => {}
                UnitState::Moving => {
                    return Err(err(ErrorCode::Busy, format!("'{}' is moving", m.name)))
                }
                UnitState::Fault => {
                    return Err(err(
                        ErrorCode::Fault,
                        format!("'{}' is faulted ({})", m.name, m.fault_code().unwrap_or("")),
                    ))
                }
            }
        }
        let id = self.next_scan_id;
        self.next_scan_id += 1;
        if plan.output.is_none() {
            if let Some(dir) = &self.output_dir {
                plan.output = Some(format!("{dir}/scan_{id:04}.csv"));
            }
        }
        self.persist_error = None;
        let run = ScanRun::new(id, plan, self.clock.now());
        let v = json!({ "scan_id": id, "n_points": run.plan.n_points, "plan": run.plan });
        self.scan = Some(run);
        self.step_scan();
        Ok(v)
    }

    fn abort_scan(&mut self) -> Result<Reply, ServerError> {
        match self.scan.as_mut() {
            Some(s) if s.status.is_running() => {
                s.abort_requested = true;
                let id = s.id;
                self.step_scan();
                let deadline = self.clock.now() + ABORT_REPLY_WAIT_S;
                Ok(Reply::Deferred(Pending::ScanTerminal {
                    scan_id: id,
                    deadline,
                }))
            }
            _ => Err(err(ErrorCode::NoScan, "no scan running")),
        }
    }

    fn axis_fault(&self) -> bool {
        Axis::ALL.iter().any(|&a| {
            self.units
                .motor(&self.axis_mapping(a).motor)
                .is_ok_and(|m| m.state() == UnitState::Fault)
        })
    }

    fn fail_scan(&mut self, code: &str) {
        for axis in Axis::ALL {
            let motor = self.axis_mapping(axis).motor.clone();
            let _ = self.units.stop(&motor);
        }
        if let Some(s) = self.scan.as_mut() {
            s.status = ScanStatus::Failed {
                code: code.to_string(),
                at: s.points.len(),
            };
        }
    }

    fn failure_code(e: &ServerError) -> &'static str {
        match e.code {
            ErrorCode::Fault => "unit_fault",
            ErrorCode::Limit => "soft_limit",
            ErrorCode::Unsolvable => "unsolvable",
            ErrorCode::StaleFit => "stale_fit",
            ErrorCode::Range => "out_of_range",
            ErrorCode::Busy => "busy",
            ErrorCode::NoUnit => "no_unit",
            _ => "internal",
        }
    }

    /// Runs scan phases as far as the current simulated time allows.
    fn step_scan(&mut self) {
        loop {
            let Some(run) = self.scan.as_ref() else {
                return;
            };
            if run.status.is_terminal() {
                return;
            }
            let now = self.clock.now();
            let index = run.points.len();
            let progressed = match run.phase.clone() {
                Phase::Start => self.scan_start_point(index),
                Phase::Moving { deadline } => {
                    if self.axis_fault() {
                        self.fail_scan("unit_fault");
                        true
                    } else if self.axes_idle() {
                        if self.axes_at_targets(index) {
                            let settle = run.plan.settle_s;
                            self.set_phase(Phase::Settling {
                                until: now + settle,
                            });
                        } else {
                            self.fail_scan("unit_stopped");
                        }
                        true
                    } else if now >= deadline {
                        self.fail_scan("move_timeout");
                        true
                    } else {
                        false
                    }
                }
                Phase::Settling { until } => {
                    if self.axis_fault() {
                        self.fail_scan("unit_fault");
                        true
                    } else if now >= until {
                        self.scan_read_point();
                        true
                    } else {
                        false
                    }
                }
                Phase::Integrating {
                    until,
                    e_readback,
                    mirror,
                    grating,
                    counts,
                } => {
                    if self.axis_fault() {
                        self.fail_scan("unit_fault");
                        true
                    } else if now >= until {
                        let run = self.scan.as_mut().expect("scan present");
                        let point = ScanPoint {
                            index,
                            e_set: run.plan.energy_at(index),
                            e_readback,
                            mirror_steps: mirror,
                            grating_steps: grating,
                            counts,
                            calc_ms: run.calc_ms,
                            t: now - run.started_at,
                        };
                        run.points.push(point);
                        run.status = ScanStatus::Running {
                            current: run.points.len(),
                            total: run.plan.n_points,
                        };
                        run.phase = Phase::Start;
                        true
                    } else {
                        false
                    }
                }
            };
            if self.scan.as_ref().is_some_and(|s| s.status.is_terminal()) {
                self.finish_scan();
                return;
            }
            if !progressed {
                return;
            }
        }
    }

    fn set_phase(&mut self, phase: Phase) {
        if let Some(s) = self.scan.as_mut() {
            s.phase = phase;
        }
    }

    fn axes_idle(&self) -> bool {
        Axis::ALL.iter().all(|&a| {
            self.units
                .motor(&self.axis_mapping(a).motor)
                .is_ok_and(|m| m.is_idle())
        })
    }

    fn axes_at_targets(&self, index: usize) -> bool {
        let Some(run) = &self.scan else { return false };
        let Ok(t) = self.targets(run.plan.energy_at(index), run.plan.mode) else {
            return false;
        };
        let at =
            |motor: &str, steps: i64| self.units.motor(motor).is_ok_and(|m| m.position() == steps);
        at(&self.axes.mirror.motor, t.mirror_steps) && at(&self.axes.grating.motor, t.grating_steps)
    }

    fn scan_start_point(&mut self, index: usize) -> bool {
        let run = self.scan.as_ref().expect("scan present");
        let total = run.plan.n_points;
        if run.abort_requested {
            let s = self.scan.as_mut().expect("scan present");
            s.status = ScanStatus::Aborted { at: index };
            return true;
        }
        if index >= total {
            let s = self.scan.as_mut().expect("scan present");
            s.status = ScanStatus::Done { total };
            return true;
        }
        let energy = run.plan.energy_at(index);
        let mode = run.plan.mode;
        let start = Instant::now();
        let targets = self.targets(energy, mode);
        let calc_ms = start.elapsed().as_secs_f64() * 1e3;
        let t = match targets {
            Ok(t) => t,
            Err(e) => {
                self.fail_scan(Self::failure_code(&e));
                return true;
            }
        };
        let mirror = self.axes.mirror.motor.clone();
        let grating = self.axes.grating.motor.clone();
        let checked = self
            .units
            .motor(&mirror)
            .and_then(|m| m.check_move(t.mirror_steps))
            .and_then(|_| self.units.motor(&grating))
            .and_then(|m| m.check_move(t.grating_steps));
        if let Err(e) = checked {
            self.fail_scan(Self::failure_code(&e.into()));
            return true;
        }
        let moves = self.units.move_abs(&mirror, t.mirror_steps).and_then(|dm| {
            self.units
                .move_abs(&grating, t.grating_steps)
                .map(|dg| dm.duration_s.max(dg.duration_s))
        });
        match moves {
            Ok(duration) => {
                let deadline = self.clock.now() + duration * 2.0 + 5.0;
                let run = self.scan.as_mut().expect("scan present");
                run.calc_ms = calc_ms;
                run.phase = Phase::Moving { deadline };
                true
            }
            Err(e) => {
                self.fail_scan(Self::failure_code(&e.into()));
                true
            }
        }
    }

    fn scan_read_point(&mut self) {
        let readback = (|| -> Result<(f64, i64, i64), ServerError> {
            let grating_steps = self.axis_readback_steps(Axis::Grating)?;
            let mirror_steps = self.axis_readback_steps(Axis::Mirror)?;
            let e = self
                .energy_from_grating_steps(grating_steps)
                .ok_or_else(|| err(ErrorCode::Unsolvable, "grating readback maps to no energy"))?;
            Ok((e, mirror_steps.round() as i64, grating_steps.round() as i64))
        })();
        let (e_readback, mirror, grating) = match readback {
            Ok(r) => r,
            Err(e) => {
                self.fail_scan(Self::failure_code(&e));
                return;
            }
        };
        let dwell = self.scan.as_ref().expect("scan present").plan.dwell_s;
        let detector = self.detector.clone();
        match self.units.detector_read(&detector, e_readback, dwell) {
            Ok(counts) => {
                let until = self.clock.now() + dwell;
                self.set_phase(Phase::Integrating {
                    until,
                    e_readback,
                    mirror,
                    grating,
                    counts,
                });
            }
            Err(e) => self.fail_scan(Self::failure_code(&e.into())),
        }
    }

    fn finish_scan(&mut self) {
        let Some(run) = self.scan.as_ref() else {
            return;
        };
        if let Some(path) = &run.plan.output {
            if let Err(e) = scan::persist(&run.points, path) {
                log::warn!("scan {} not persisted: {e}", run.id);
                self.persist_error = Some(e.to_string());
            }
        }
    }
}
