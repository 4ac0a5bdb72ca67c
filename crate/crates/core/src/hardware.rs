//! Simulated beamline units: stepper motors, encoders and a detector.
//!
//! Units carry no clock of their own; [`UnitRegistry::tick`] advances every
//! moving motor by a simulated time step. Every operation is total: it returns
//! a value or a [`UnitError`], and faults are state, never a panic.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UnitError {
    #[error("no unit named '{0}'")]
    NoUnit(String),
    #[error("target {target} outside soft limits [{min}, {max}] of '{unit}'")]
    Limit {
        unit: String,
        target: i64,
        min: i64,
        max: i64,
    },
    #[error("unit '{0}' is moving")]
    Busy(String),
    #[error("unit '{unit}' is faulted ({code})")]
    Fault { unit: String, code: String },
    #[error("{0}")]
    Range(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitState {
    Idle,
    Moving,
    Fault,
}

impl UnitState {
    pub fn as_str(self) -> &'static str {
        match self {
            UnitState::Idle => "Idle",
            UnitState::Moving => "Moving",
            UnitState::Fault => "Fault",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Motor,
    Encoder,
    Detector,
}

// A move in progress: position = origin + dir·min(floor(v·elapsed), |Δ|).
#[derive(Debug, Clone, PartialEq)]
struct Motion {
    origin: i64,
    elapsed_s: f64,
}

/// Constant-velocity stepper motor with software limits.
#[derive(Debug, Clone, PartialEq)]
pub struct MotorUnit {
    pub name: String,
    position_steps: i64,
    target_steps: Option<i64>,
    pub velocity_sps: f64,
    pub soft_min: i64,
    pub soft_max: i64,
    state: UnitState,
    fault_code: Option<String>,
    motion: Option<Motion>,
}

/// Outcome of an accepted move.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoveAccepted {
    pub target_steps: i64,
    pub duration_s: f64,
}

impl MotorUnit {
    pub fn new(
        name: impl Into<String>,
        home: i64,
        velocity_sps: f64,
        soft_min: i64,
        soft_max: i64,
    ) -> Self {
        Self {
            name: name.into(),
            position_steps: home.clamp(soft_min, soft_max),
            target_steps: None,
            velocity_sps,
            soft_min,
            soft_max,
            state: UnitState::Idle,
            fault_code: None,
            motion: None,
        }
    }

    pub fn position(&self) -> i64 {
        self.position_steps
    }

    pub fn target(&self) -> Option<i64> {
        self.target_steps
    }

    pub fn state(&self) -> UnitState {
        self.state
    }

    pub fn fault_code(&self) -> Option<&str> {
        self.fault_code.as_deref()
    }

    pub fn is_idle(&self) -> bool {
        self.state == UnitState::Idle
    }

    /// Checks a prospective move without changing state.
    pub fn check_move(&self, steps: i64) -> Result<(), UnitError> {
        match self.state {
            UnitState::Fault => Err(UnitError::Fault {
                unit: self.name.clone(),
                code: self.fault_code.clone().unwrap_or_default(),
            }),
            UnitState::Moving => Err(UnitError::Busy(self.name.clone())),
            UnitState::Idle if steps < self.soft_min || steps > self.soft_max => {
                Err(UnitError::Limit {
                    unit: self.name.clone(),
                    target: steps,
                    min: self.soft_min,
                    max: self.soft_max,
                })
            }
            UnitState::Idle => Ok(()),
        }
    }

    pub fn move_abs(&mut self, steps: i64) -> Result<MoveAccepted, UnitError> {
        self.check_move(steps)?;
        let distance = (steps - self.position_steps).unsigned_abs();
        if distance == 0 {
            return Ok(MoveAccepted {
                target_steps: steps,
                duration_s: 0.0,
            });
        }
        self.target_steps = Some(steps);
        self.motion = Some(Motion {
            origin: self.position_steps,
            elapsed_s: 0.0,
        });
        self.state = UnitState::Moving;
        Ok(MoveAccepted {
            target_steps: steps,
            duration_s: distance as f64 / self.velocity_sps,
        })
    }

    pub fn move_rel(&mut self, delta: i64) -> Result<MoveAccepted, UnitError> {
        let target = self
            .position_steps
            .checked_add(delta)
            .ok_or_else(|| UnitError::Limit {
                unit: self.name.clone(),
                target: if delta > 0 { i64::MAX } else { i64::MIN },
                min: self.soft_min,
                max: self.soft_max,
            })?;
        self.move_abs(target)
    }

    pub fn stop(&mut self) {
        if self.state == UnitState::Moving {
            self.halt();
            self.state = UnitState::Idle;
        }
    }

    fn halt(&mut self) {
        self.target_steps = None;
        self.motion = None;
    }

    pub fn inject_fault(&mut self, code: impl Into<String>) {
        self.halt();
        self.state = UnitState::Fault;
        self.fault_code = Some(code.into());
    }

    pub fn clear_fault(&mut self) {
        if self.state == UnitState::Fault {
            self.state = UnitState::Idle;
            self.fault_code = None;
        }
    }

    pub fn tick(&mut self, dt: f64) {
        if self.state != UnitState::Moving || !(dt > 0.0) {
            return;
        }
        let (Some(target), Some(motion)) = (self.target_steps, self.motion.as_mut()) else {
            return;
        };
        motion.elapsed_s += dt;
        let total = (target - motion.origin).abs();
        let travelled = (self.velocity_sps * motion.elapsed_s).floor();
        let travelled = if travelled >= total as f64 {
            total
        } else {
            travelled as i64
        };
        self.position_steps = motion.origin + (target - motion.origin).signum() * travelled;
        if travelled == total {
            self.halt();
            self.state = UnitState::Idle;
        }
    }
}

/// Position readback bound to one motor.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderUnit {
    pub name: String,
    pub bound_motor: String,
    pub counts_per_step: f64,
    pub offset_counts: i64,
    pub slip_counts: i64,
    fault_code: Option<String>,
}

impl EncoderUnit {
    pub fn new(
        name: impl Into<String>,
        bound_motor: impl Into<String>,
        counts_per_step: f64,
        offset_counts: i64,
    ) -> Self {
        Self {
            name: name.into(),
            bound_motor: bound_motor.into(),
            counts_per_step,
            offset_counts,
            slip_counts: 0,
            fault_code: None,
        }
    }

    pub fn counts_at(&self, position_steps: i64) -> i64 {
        (position_steps as f64 * self.counts_per_step).round() as i64
            + self.offset_counts
            + self.slip_counts
    }

    /// Motor position implied by a reading (inverse of [`counts_at`](Self::counts_at), unrounded).
    pub fn steps_from_counts(&self, counts: i64) -> f64 {
        (counts - self.offset_counts) as f64 / self.counts_per_step
    }

    pub fn fault_code(&self) -> Option<&str> {
        self.fault_code.as_deref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub center_ev: f64,
    pub amplitude_cps: f64,
    pub sigma_ev: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseModel {
    None,
    Poisson { seed: u64 },
}

/// Counting detector: Gaussian peaks over a flat background.
#[derive(Debug, Clone)]
pub struct DetectorUnit {
    pub name: String,
    pub background_cps: f64,
    pub peaks: Vec<Peak>,
    noise: NoiseModel,
    rng: Option<ChaCha8Rng>,
    last_counts: Option<f64>,
    fault_code: Option<String>,
}

impl DetectorUnit {
    pub fn new(
        name: impl Into<String>,
        background_cps: f64,
        peaks: Vec<Peak>,
        noise: NoiseModel,
    ) -> Self {
        let rng = match noise {
            NoiseModel::None => None,
            NoiseModel::Poisson { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Self {
            name: name.into(),
            background_cps,
            peaks,
            noise,
            rng,
            last_counts: None,
            fault_code: None,
        }
    }

    pub fn noise(&self) -> NoiseModel {
        self.noise
    }

    pub fn flux(&self, energy: f64) -> f64 {
        self.background_cps
            + self
                .peaks
                .iter()
                .map(|p| {
                    let d = energy - p.center_ev;
                    p.amplitude_cps * (-(d * d) / (2.0 * p.sigma_ev * p.sigma_ev)).exp()
                })
                .sum::<f64>()
    }

    pub fn read(&mut self, energy: f64, dwell_s: f64) -> Result<f64, UnitError> {
        if let Some(code) = &self.fault_code {
            return Err(UnitError::Fault {
                unit: self.name.clone(),
                code: code.clone(),
            });
        }
        if !(dwell_s > 0.0) || !dwell_s.is_finite() {
            return Err(UnitError::Range(format!(
                "dwell must be > 0 s, got {dwell_s}"
            )));
        }
        let mean = self.flux(energy) * dwell_s;
        let counts = match self.rng.as_mut() {
            None => mean,
            Some(_) if mean <= 0.0 => 0.0,
            Some(rng) => match Poisson::new(mean) {
                Ok(dist) => dist.sample(rng),
                Err(_) => mean.round(),
            },
        };
        self.last_counts = Some(counts);
        Ok(counts)
    }

    pub fn last_counts(&self) -> Option<f64> {
        self.last_counts
    }
}

/// Simulation clock mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    Realtime,
    Scaled(f64),
}

/// Monotonic simulated time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimClock {
    pub mode: ClockMode,
    now: f64,
}

impl SimClock {
    pub fn new(mode: ClockMode) -> Self {
        Self { mode, now: 0.0 }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    /// Simulated seconds for `wall_dt` elapsed wall seconds.
    pub fn scale(&self, wall_dt: f64) -> f64 {
        match self.mode {
            ClockMode::Realtime => wall_dt,
            ClockMode::Scaled(f) => wall_dt * f,
        }
    }

    pub fn advance(&mut self, sim_dt: f64) {
        if sim_dt > 0.0 && sim_dt.is_finite() {
            self.now += sim_dt;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UnitSnapshot {
    pub name: String,
    pub kind: UnitKind,
    pub state: UnitState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault_code: Option<String>,
    /// Motor position (steps) or encoder reading (counts).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub position: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<i64>,
    /// Last detector reading (counts).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reading: Option<f64>,
}

/// Name-unique collection of every unit in the beamline.
#[derive(Debug, Clone, Default)]
pub struct UnitRegistry {
    motors: BTreeMap<String, MotorUnit>,
    encoders: BTreeMap<String, EncoderUnit>,
    detectors: BTreeMap<String, DetectorUnit>,
}

impl UnitRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    fn name_taken(&self, name: &str) -> bool {
        self.motors.contains_key(name)
            || self.encoders.contains_key(name)
            || self.detectors.contains_key(name)
    }

    pub fn add_motor(&mut self, motor: MotorUnit) -> Result<(), UnitError> {
        if self.name_taken(&motor.name) {
            return Err(UnitError::Range(format!(
                "duplicate unit name '{}'",
                motor.name
            )));
        }
        self.motors.insert(motor.name.clone(), motor);
        Ok(())
    }

    pub fn add_encoder(&mut self, encoder: EncoderUnit) -> Result<(), UnitError> {
        if self.name_taken(&encoder.name) {
            return Err(UnitError::Range(format!(
                "duplicate unit name '{}'",
                encoder.name
            )));
        }
        if encoder.counts_per_step == 0.0 || !encoder.counts_per_step.is_finite() {
            return Err(UnitError::Range(format!(
                "encoder '{}' has zero counts_per_step",
                encoder.name
            )));
        }
        self.encoders.insert(encoder.name.clone(), encoder);
        Ok(())
    }

    pub fn add_detector(&mut self, detector: DetectorUnit) -> Result<(), UnitError> {
        if self.name_taken(&detector.name) {
            return Err(UnitError::Range(format!(
                "duplicate unit name '{}'",
                detector.name
            )));
        }
        self.detectors.insert(detector.name.clone(), detector);
        Ok(())
    }

    pub fn kind_of(&self, name: &str) -> Option<UnitKind> {
        if self.motors.contains_key(name) {
            Some(UnitKind::Motor)
        } else if self.encoders.contains_key(name) {
            Some(UnitKind::Encoder)
        } else if self.detectors.contains_key(name) {
            Some(UnitKind::Detector)
        } else {
            None
        }
    }

    pub fn motor(&self, name: &str) -> Result<&MotorUnit, UnitError> {
        self.motors
            .get(name)
            .ok_or_else(|| UnitError::NoUnit(name.to_string()))
    }

    pub fn motor_mut(&mut self, name: &str) -> Result<&mut MotorUnit, UnitError> {
        self.motors
            .get_mut(name)
            .ok_or_else(|| UnitError::NoUnit(name.to_string()))
    }

    pub fn encoder(&self, name: &str) -> Result<&EncoderUnit, UnitError> {
        self.encoders
            .get(name)
            .ok_or_else(|| UnitError::NoUnit(name.to_string()))
    }

    pub fn detector_mut(&mut self, name: &str) -> Result<&mut DetectorUnit, UnitError> {
        self.detectors
            .get_mut(name)
            .ok_or_else(|| UnitError::NoUnit(name.to_string()))
    }

    pub fn detector(&self, name: &str) -> Result<&DetectorUnit, UnitError> {
        self.detectors
            .get(name)
            .ok_or_else(|| UnitError::NoUnit(name.to_string()))
    }

    pub fn motors(&self) -> impl Iterator<Item = &MotorUnit> {
        self.motors.values()
    }

    pub fn encoders(&self) -> impl Iterator<Item = &EncoderUnit> {
        self.encoders.values()
    }

    pub fn detectors(&self) -> impl Iterator<Item = &DetectorUnit> {
        self.detectors.values()
    }

    /// First encoder bound to `motor`.
    pub fn encoder_for(&self, motor: &str) -> Option<&EncoderUnit> {
        self.encoders.values().find(|e| e.bound_motor == motor)
    }

    pub fn tick(&mut self, dt: f64) {
        for m in self.motors.values_mut() {
            m.tick(dt);
        }
    }

    pub fn move_abs(&mut self, motor: &str, steps: i64) -> Result<MoveAccepted, UnitError> {
        self.motor_mut(motor)?.move_abs(steps)
    }

    pub fn move_rel(&mut self, motor: &str, delta: i64) -> Result<MoveAccepted, UnitError> {
        self.motor_mut(motor)?.move_rel(delta)
    }

    pub fn stop(&mut self, motor: &str) -> Result<(), UnitError> {
        self.motor_mut(motor)?.stop();
        Ok(())
    }

    pub fn encoder_read(&self, name: &str) -> Result<i64, UnitError> {
        let enc = self.encoder(name)?;
        if let Some(code) = &enc.fault_code {
            return Err(UnitError::Fault {
                unit: enc.name.clone(),
                code: code.clone(),
            });
        }
        let motor = self
            .motors
            .get(&enc.bound_motor)
            .ok_or_else(|| UnitError::NoUnit(enc.bound_motor.clone()))?;
        Ok(enc.counts_at(motor.position()))
    }

    pub fn detector_read(
        &mut self,
        name: &str,
        energy: f64,
        dwell_s: f64,
    ) -> Result<f64, UnitError> {
        self.detector_mut(name)?.read(energy, dwell_s)
    }

    pub fn inject_fault(&mut self, name: &str, code: &str) -> Result<(), UnitError> {
        if let Some(m) = self.motors.get_mut(name) {
            m.inject_fault(code);
        } else if let Some(e) = self.encoders.get_mut(name) {
            e.fault_code = Some(code.to_string());
        } else if let Some(d) = self.detectors.get_mut(name) {
            d.fault_code = Some(code.to_string());
        } else {
            return Err(UnitError::NoUnit(name.to_string()));
        }
        Ok(())
    }

    pub fn set_slip(&mut self, encoder: &str, slip_counts: i64) -> Result<(), UnitError> {
        self.encoders
            .get_mut(encoder)
            .map(|e| e.slip_counts = slip_counts)
            .ok_or_else(|| UnitError::NoUnit(encoder.to_string()))
    }

    pub fn clear_fault(&mut self, name: &str) -> Result<(), UnitError> {
        if let Some(m) = self.motors.get_mut(name) {
            m.clear_fault();
        } else if let Some(e) = self.encoders.get_mut(name) {
            e.fault_code = None;
            e.slip_counts = 0;
        } else if let Some(d) = self.detectors.get_mut(name) {
            d.fault_code = None;
        } else {
            return Err(UnitError::NoUnit(name.to_string()));
        }
        Ok(())
    }

    pub fn unit_snapshot(&self, name: &str) -> Result<UnitSnapshot, UnitError> {
        if let Some(m) = self.motors.get(name) {
            return Ok(UnitSnapshot {
                name: m.name.clone(),
                kind: UnitKind::Motor,
                state: m.state(),
                fault_code: m.fault_code.clone(),
                position: Some(m.position()),
                target: m.target(),
                reading: None,
            });
        }
        if let Some(e) = self.encoders.get(name) {
            return Ok(UnitSnapshot {
                name: e.name.clone(),
                kind: UnitKind::Encoder,
                state: if e.fault_code.is_some() {
                    UnitState::Fault
                } else {
                    UnitState::Idle
                },
                fault_code: e.fault_code.clone(),
                position: self
                    .motors
                    .get(&e.bound_motor)
                    .map(|m| e.counts_at(m.position())),
                target: None,
                reading: None,
            });
        }
        if let Some(d) = self.detectors.get(name) {
            return Ok(UnitSnapshot {
                name: d.name.clone(),
                kind: UnitKind::Detector,
                state: if d.fault_code.is_some() {
                    UnitState::Fault
                } else {
                    UnitState::Idle
                },
                fault_code: d.fault_code.clone(),
                position: None,
                target: None,
                reading: d.last_counts,
            });
        }
        Err(UnitError::NoUnit(name.to_string()))
    }

    /// All units sorted by name.
    pub fn snapshot(&self) -> Vec<UnitSnapshot> {
        let mut names: Vec<&String> = self
            .motors
            .keys()
            .chain(self.encoders.keys())
            .chain(self.detectors.keys())
            .collect();
        names.sort();
        names
            .into_iter()
            .filter_map(|n| self.unit_snapshot(n).ok())
            .collect()
    }
}
