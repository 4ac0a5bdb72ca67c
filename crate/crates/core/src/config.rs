//! Beamline configuration file (TOML).
//!
//! See `config/beamline.toml` at the repository root for a complete,
//! commented example.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hardware::{
    ClockMode, DetectorUnit, EncoderUnit, MotorUnit, NoiseModel, Peak, UnitRegistry,
};
use crate::kinematics::{MonoConfig, DEFAULT_HC_EV_NM};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamlineConfig {
    #[serde(default)]
    pub server: ServerSection,
    pub mono: MonoSection,
    pub axes: AxesSection,
    pub motors: Vec<MotorSection>,
    #[serde(default)]
    pub encoders: Vec<EncoderSection>,
    pub detector: DetectorSection,
    #[serde(default)]
    pub scan: ScanSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSection {
    pub name: String,
    pub bind: String,
    pub tcp_port: u16,
    pub http_port: u16,
    pub tick_ms: u64,
    pub clock: ClockKind,
    pub clock_factor: f64,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            name: "beamline".into(),
            bind: "127.0.0.1".into(),
            tcp_port: 5025,
            http_port: 8080,
            tick_ms: 10,
            clock: ClockKind::Realtime,
            clock_factor: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockKind {
    Realtime,
    Scaled,
}

impl ServerSection {
    pub fn clock_mode(&self) -> ClockMode {
        match self.clock {
            ClockKind::Realtime => ClockMode::Realtime,
            ClockKind::Scaled => ClockMode::Scaled(self.clock_factor),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonoSection {
    pub line_density: f64,
    pub order: i32,
    pub fixed_focus_ratio: f64,
    pub energy_min: f64,
    pub energy_max: f64,
    #[serde(default = "default_hc")]
    pub hc: f64,
    #[serde(default = "default_resolving_power")]
    pub resolving_power: f64,
}

fn default_hc() -> f64 {
    DEFAULT_HC_EV_NM
}

fn default_resolving_power() -> f64 {
    10_000.0
}

impl MonoSection {
    pub fn mono_config(&self) -> MonoConfig {
        MonoConfig {
            line_density: self.line_density,
            order: self.order,
            fixed_focus_ratio: self.fixed_focus_ratio,
            energy_min: self.energy_min,
            energy_max: self.energy_max,
            hc: self.hc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxesSection {
    pub mirror: AxisMapping,
    pub grating: AxisMapping,
}

/// Affine angle-to-steps coupling of one axis:
/// `steps = round((angle_deg − offset_deg)·steps_per_degree)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisMapping {
    pub motor: String,
    pub steps_per_degree: f64,
    #[serde(default)]
    pub offset_deg: f64,
}

impl AxisMapping {
    pub fn steps_for(&self, angle_deg: f64) -> i64 {
        // f64::round rounds half away from zero.
        ((angle_deg - self.offset_deg) * self.steps_per_degree).round() as i64
    }

    pub fn angle_for(&self, steps: f64) -> f64 {
        steps / self.steps_per_degree + self.offset_deg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotorSection {
    pub name: String,
    #[serde(default)]
    pub home: i64,
    pub velocity_sps: f64,
    pub soft_min: i64,
    pub soft_max: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub name: String,
    pub motor: String,
    #[serde(default = "one")]
    pub counts_per_step: f64,
    #[serde(default)]
    pub offset_counts: i64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub name: String,
    #[serde(default)]
    pub background_cps: f64,
    #[serde(default)]
    pub noise: NoiseKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub peaks: Vec<Peak>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    #[default]
    None,
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanSection {
    pub dwell_s: f64,
    pub settle_s: f64,
    /// Directory for persisted scans started without an explicit output path.
    pub output_dir: Option<String>,
}

impl Default for ScanSection {
    fn default() -> Self {
        Self {
            dwell_s: 0.1,
            settle_s: 0.1,
            output_dir: None,
        }
    }
}

impl BeamlineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: BeamlineConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Field-level validation; collects every problem rather than stopping at the first.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if let Err(e) = self.mono.mono_config().validate() {
            problems.push(format!("mono: {e}"));
        }
        if !(self.mono.resolving_power > 0.0) {
            problems.push(format!(
                "mono.resolving_power: must be > 0, got {}",
                self.mono.resolving_power
            ));
        }
        if self.server.tick_ms == 0 {
            problems.push("server.tick_ms: must be > 0".into());
        }
        if self.server.clock == ClockKind::Scaled
            && !(self.server.clock_factor > 0.0 && self.server.clock_factor.is_finite())
        {
            problems.push(format!(
                "server.clock_factor: must be > 0, got {}",
                self.server.clock_factor
            ));
        }

        let mut names = BTreeSet::new();
        let all_names = self
            .motors
            .iter()
            .map(|m| ("motors", &m.name))
            .chain(self.encoders.iter().map(|e| ("encoders", &e.name)))
            .chain(std::iter::once(("detector", &self.detector.name)));
        for (section, name) in all_names {
            if name.is_empty() {
                problems.push(format!("{section}.name: must not be empty"));
            } else if !names.insert(name.clone()) {
                problems.push(format!("{section}.name: duplicate unit name '{name}'"));
            }
        }
        for (i, m) in self.motors.iter().enumerate() {
            if !(m.velocity_sps > 0.0 && m.velocity_sps.is_finite()) {
                problems.push(format!("motors[{i}].velocity_sps: must be > 0"));
            }
            if m.soft_min > m.soft_max {
                problems.push(format!(
                    "motors[{i}]: soft_min {} > soft_max {}",
                    m.soft_min, m.soft_max
                ));
            } else if m.home < m.soft_min || m.home > m.soft_max {
                problems.push(format!("motors[{i}].home: {} outside soft limits", m.home));
            }
        }
        let motor_names: BTreeSet<&str> = self.motors.iter().map(|m| m.name.as_str()).collect();
        for (i, e) in self.encoders.iter().enumerate() {
            if !motor_names.contains(e.motor.as_str()) {
                problems.push(format!("encoders[{i}].motor: no motor named '{}'", e.motor));
            }
            if e.counts_per_step == 0.0 || !e.counts_per_step.is_finite() {
                problems.push(format!("encoders[{i}].counts_per_step: must be non-zero"));
            }
        }
        for (axis, map) in [
            ("mirror", &self.axes.mirror),
            ("grating", &self.axes.grating),
        ] {
            if !motor_names.contains(map.motor.as_str()) {
                problems.push(format!("axes.{axis}.motor: no motor named '{}'", map.motor));
            }
            if map.steps_per_degree == 0.0 || !map.steps_per_degree.is_finite() {
                problems.push(format!("axes.{axis}.steps_per_degree: must be non-zero"));
            }
        }
        if self.axes.mirror.motor == self.axes.grating.motor {
            problems.push("axes: mirror and grating must use different motors".into());
        }
        if !self
            .encoders
            .iter()
            .any(|e| e.motor == self.axes.grating.motor)
        {
            problems.push(
                "encoders: the grating axis motor needs an encoder for energy readback".into(),
            );
        }
        if !(self.detector.background_cps >= 0.0) {
            problems.push("detector.background_cps: must be >= 0".into());
        }
        for (i, p) in self.detector.peaks.iter().enumerate() {
            if !(p.amplitude_cps >= 0.0) {
                problems.push(format!("detector.peaks[{i}].amplitude_cps: must be >= 0"));
            }
            if !(p.sigma_ev > 0.0) {
                problems.push(format!("detector.peaks[{i}].sigma_ev: must be > 0"));
            }
        }
        if !(self.scan.dwell_s > 0.0) {
            problems.push("scan.dwell_s: must be > 0".into());
        }
        if !(self.scan.settle_s >= 0.0) {
            problems.push("scan.settle_s: must be >= 0".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    pub fn build_units(&self) -> Result<UnitRegistry, ConfigError> {
        let mut reg = UnitRegistry::new();
        let invalid = |e: crate::hardware::UnitError| ConfigError::Invalid(vec![e.to_string()]);
        for m in &self.motors {
            reg.add_motor(MotorUnit::new(
                &m.name,
                m.home,
                m.velocity_sps,
                m.soft_min,
                m.soft_max,
            ))
            .map_err(invalid)?;
        }
        for e in &self.encoders {
            reg.add_encoder(EncoderUnit::new(
                &e.name,
                &e.motor,
                e.counts_per_step,
                e.offset_counts,
            ))
            .map_err(invalid)?;
        }
        let noise = match self.detector.noise {
            NoiseKind::None => NoiseModel::None,
            NoiseKind::Poisson => NoiseModel::Poisson {
                seed: self.detector.seed,
            },
        };
        reg.add_detector(DetectorUnit::new(
            &self.detector.name,
            self.detector.background_cps,
            self.detector.peaks.clone(),
            noise,
        ))
        .map_err(invalid)?;
        Ok(reg)
    }
}

/// The stock configuration used by tests and `--demo` runs.
pub const EXAMPLE_CONFIG: &str = include_str!("../../../config/beamline.toml");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_config_is_valid() {
        let cfg = BeamlineConfig::from_toml_str(EXAMPLE_CONFIG).unwrap();
        assert_eq!(cfg.mono.line_density, 1200.0);
        assert_eq!(cfg.axes.mirror.steps_per_degree, 3600.0);
        cfg.build_units().unwrap();
    }

    #[test]
    fn duplicate_names_are_reported_per_field() {
        let mut cfg = BeamlineConfig::from_toml_str(EXAMPLE_CONFIG).unwrap();
        cfg.encoders[0].name = cfg.motors[0].name.clone();
        cfg.mono.fixed_focus_ratio = 1.0;
        let Err(ConfigError::Invalid(problems)) = cfg.validate() else {
            panic!("expected invalid");
        };
        assert!(
            problems
                .iter()
                .any(|p| p.starts_with("encoders.name: duplicate")),
            "{problems:?}"
        );
        assert!(
            problems.iter().any(|p| p.starts_with("mono:")),
            "{problems:?}"
        );
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = format!("{EXAMPLE_CONFIG}\n[bogus]\nx = 1\n");
        assert!(matches!(
            BeamlineConfig::from_toml_str(&text),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn steps_rounding_ties_away_from_zero() {
        let m = AxisMapping {
            motor: "m".into(),
            steps_per_degree: 2.0,
            offset_deg: 0.0,
        };
        assert_eq!(m.steps_for(1.25), 3);
        assert_eq!(m.steps_for(-1.25), -3);
        assert_eq!(m.angle_for(3.0), 1.5);
    }
}
