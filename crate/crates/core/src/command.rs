//! Typed command vocabulary of the device server.
//!
//! On the wire a command is an `op` string plus an optional `args` object;
//! [`Command::from_wire`] and [`Command::to_wire`] convert between the two.
//! An unknown op or ill-typed args is an `E_PARSE` error, never a variant.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{ErrorCode, ServerError};

/// Where set-energy targets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionMode {
    #[default]
    Realtime,
    Fit,
}

impl PositionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PositionMode::Realtime => "realtime",
            PositionMode::Fit => "fit",
        }
    }
}

impl std::str::FromStr for PositionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "realtime" => Ok(PositionMode::Realtime),
            "fit" => Ok(PositionMode::Fit),
            other => Err(format!("unknown mode '{other}' (expected fit|realtime)")),
        }
    }
}

/// Commissioning parameters that may change at runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MonoParam {
    #[serde(rename = "c")]
    FixedFocusRatio,
    #[serde(rename = "k")]
    Order,
    #[serde(rename = "N")]
    LineDensity,
    #[serde(rename = "hc")]
    Hc,
}

impl std::str::FromStr for MonoParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "c" => Ok(MonoParam::FixedFocusRatio),
            "k" => Ok(MonoParam::Order),
            "N" => Ok(MonoParam::LineDensity),
            "hc" => Ok(MonoParam::Hc),
            other => Err(format!("unknown parameter '{other}' (expected c|k|N|hc)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitArgs {
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoveArgs {
    pub unit: String,
    pub steps: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyArgs {
    pub e_ev: f64,
    #[serde(default)]
    pub mode: PositionMode,
    #[serde(default)]
    pub wait: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalcArgs {
    pub e_ev: f64,
    #[serde(default)]
    pub mode: PositionMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildFitArgs {
    pub e_lo: f64,
    pub e_hi: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitReportArgs {
    #[serde(default = "default_probes")]
    pub n_probe: usize,
}

fn default_probes() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonoParamArgs {
    pub name: MonoParam,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorArgs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    /// Defaults to the current energy estimate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_ev: Option<f64>,
    pub dwell_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultArgs {
    pub unit: String,
    pub code: String,
    /// Slip for `code = "slip"` on an encoder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanArgs {
    pub e_start: f64,
    pub e_end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dwell_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub settle_s: Option<f64>,
    #[serde(default)]
    pub mode: PositionMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinceArgs {
    #[serde(default)]
    pub since: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "args", rename_all = "snake_case")]
pub enum Command {
    Ping,
    Snapshot,
    ListUnits,
    UnitState(UnitArgs),
    MoveAbs(MoveArgs),
    MoveRel(MoveArgs),
    Stop(UnitArgs),
    SetEnergy(EnergyArgs),
    GetEnergy,
    CalcPositions(CalcArgs),
    BuildFit(BuildFitArgs),
    FitReport(FitReportArgs),
    SetMonoParam(MonoParamArgs),
    ReadDetector(DetectorArgs),
    InjectFault(FaultArgs),
    ClearFault(UnitArgs),
    StartScan(ScanArgs),
    AbortScan,
    ScanStatus,
    ScanPoints(SinceArgs),
}

impl Default for FitReportArgs {
    fn default() -> Self {
        Self {
            n_probe: default_probes(),
        }
    }
}

/// Every op name the device server understands.
pub const OPS: [&str; 20] = [
    "ping",
    "snapshot",
    "list_units",
    "unit_state",
    "move_abs",
    "move_rel",
    "stop",
    "set_energy",
    "get_energy",
    "calc_positions",
    "build_fit",
    "fit_report",
    "set_mono_param",
    "read_detector",
    "inject_fault",
    "clear_fault",
    "start_scan",
    "abort_scan",
    "scan_status",
    "scan_points",
];

impl Command {
    pub fn from_wire(op: &str, args: Option<&Map<String, Value>>) -> Result<Command, ServerError> {
        if !OPS.contains(&op) {
            return Err(ServerError::new(
                ErrorCode::Parse,
                format!("unknown op '{op}'"),
            ));
        }
        let mut obj = Map::new();
        obj.insert("op".into(), Value::String(op.to_string()));
        // Unit variants reject an args object, even an empty one.
        if let Some(a) = args.filter(|a| !a.is_empty() || !is_unit_op(op)) {
            obj.insert("args".into(), Value::Object(a.clone()));
        } else if !is_unit_op(op) && !defaults_args(op) {
            return Err(ServerError::new(
                ErrorCode::Parse,
                format!("op '{op}' requires args"),
            ));
        } else if defaults_args(op) {
            obj.insert("args".into(), Value::Object(Map::new()));
        }
        serde_json::from_value(Value::Object(obj))
            .map_err(|e| ServerError::new(ErrorCode::Parse, format!("bad args for '{op}': {e}")))
    }

    /// Splits into the wire `(op, args)` pair.
    pub fn to_wire(&self) -> (String, Option<Map<String, Value>>) {
        let Ok(Value::Object(mut obj)) = serde_json::to_value(self) else {
            unreachable!("commands serialize to objects");
        };
        let op = match obj.remove("op") {
            Some(Value::String(op)) => op,
            _ => unreachable!("adjacent tag is a string"),
        };
        let args = match obj.remove("args") {
            Some(Value::Object(a)) => Some(a),
            _ => None,
        };
        (op, args)
    }

    pub fn op(&self) -> String {
        self.to_wire().0
    }

    /// Commands that only read state.
    pub fn is_query(&self) -> bool {
        matches!(
            self,
            Command::Ping
                | Command::Snapshot
                | Command::ListUnits
                | Command::UnitState(_)
                | Command::GetEnergy
                | Command::CalcPositions(_)
                | Command::FitReport(_)
                | Command::ScanStatus
                | Command::ScanPoints(_)
        )
    }
}

fn is_unit_op(op: &str) -> bool {
    matches!(
        op,
        "ping" | "snapshot" | "list_units" | "get_energy" | "abort_scan" | "scan_status"
    )
}

fn defaults_args(op: &str) -> bool {
    matches!(op, "fit_report" | "scan_points")
}
