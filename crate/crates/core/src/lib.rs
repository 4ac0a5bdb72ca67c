//! Beamline control core.
//!
//! One process owns a single simulated beamline (motors, encoders, a detector
//! and a variable-included-angle grating monochromator) and serves it to any
//! number of clients over a line-delimited JSON protocol.
//!
//! * [`kinematics`]: real-time mirror/grating positions and cubic fit tables.
//! * [`hardware`]: tick-driven unit simulation with fault injection.
//! * [`device`]: the serialized beamline instance and its command loop.
//! * [`scan`]: energy-scan plans, points and CSV output.
//! * [`protocol`]: wire codec, TCP server and blocking clients.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod command;
pub mod config;
pub mod device;
pub mod error;
pub mod hardware;
pub mod kinematics;
pub mod protocol;
pub mod scan;

pub use command::{Command, PositionMode};
pub use config::BeamlineConfig;
pub use device::{Beamline, DeviceHandle, StateSnapshot};
pub use error::{ErrorCode, ServerError};
