use std::fmt;

use serde::{Deserialize, Serialize};

use crate::hardware::UnitError;
use crate::kinematics::KinematicsError;

/// Wire-level error codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorCode {
    #[serde(rename = "E_NO_UNIT")]
    NoUnit,
    #[serde(rename = "E_LIMIT")]
    Limit,
    #[serde(rename = "E_BUSY")]
    Busy,
    #[serde(rename = "E_FAULT")]
    Fault,
    #[serde(rename = "E_RANGE")]
    Range,
    #[serde(rename = "E_UNSOLVABLE")]
    Unsolvable,
    #[serde(rename = "E_STALE_FIT")]
    StaleFit,
    #[serde(rename = "E_NO_SCAN")]
    NoScan,
    #[serde(rename = "E_PARSE")]
    Parse,
    #[serde(rename = "E_PROTO")]
    Proto,
    #[serde(rename = "E_CONN")]
    Conn,
    #[serde(rename = "E_IO")]
    Io,
    #[serde(rename = "E_INTERNAL")]
    Internal,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 13] = [
        ErrorCode::NoUnit,
        ErrorCode::Limit,
        ErrorCode::Busy,
        ErrorCode::Fault,
        ErrorCode::Range,
        ErrorCode::Unsolvable,
        ErrorCode::StaleFit,
        ErrorCode::NoScan,
        ErrorCode::Parse,
        ErrorCode::Proto,
        ErrorCode::Conn,
        ErrorCode::Io,
        ErrorCode::Internal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::NoUnit => "E_NO_UNIT",
            ErrorCode::Limit => "E_LIMIT",
            ErrorCode::Busy => "E_BUSY",
            ErrorCode::Fault => "E_FAULT",
            ErrorCode::Range => "E_RANGE",
            ErrorCode::Unsolvable => "E_UNSOLVABLE",
            ErrorCode::StaleFit => "E_STALE_FIT",
            ErrorCode::NoScan => "E_NO_SCAN",
            ErrorCode::Parse => "E_PARSE",
            ErrorCode::Proto => "E_PROTO",
            ErrorCode::Conn => "E_CONN",
            ErrorCode::Io => "E_IO",
            ErrorCode::Internal => "E_INTERNAL",
        }
    }

    pub fn parse(s: &str) -> Option<ErrorCode> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A structured error as carried in a failed response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerError {
    pub code: ErrorCode,
    pub message: String,
}

impl ServerError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for ServerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for ServerError {}

impl From<UnitError> for ServerError {
    fn from(e: UnitError) -> Self {
        let code = match &e {
            UnitError::NoUnit(_) => ErrorCode::NoUnit,
            UnitError::Limit { .. } => ErrorCode::Limit,
            UnitError::Busy(_) => ErrorCode::Busy,
            UnitError::Fault { .. } => ErrorCode::Fault,
            UnitError::Range(_) => ErrorCode::Range,
        };
        ServerError::new(code, e.to_string())
    }
}

impl From<KinematicsError> for ServerError {
    fn from(e: KinematicsError) -> Self {
        let code = match &e {
            KinematicsError::Unsolvable(_) | KinematicsError::NonPositive(_) => {
                ErrorCode::Unsolvable
            }
            _ => ErrorCode::Range,
        };
        ServerError::new(code, e.to_string())
    }
}
