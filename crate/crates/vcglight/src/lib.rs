//! Service, command-line jobs and file formats around `vcglight-core`.

pub mod actuator;
pub mod clock;
pub mod commands;
pub mod config;
pub mod eventlog;
pub mod geofence;
pub mod sensors;
pub mod server;
pub mod wire;
pub mod zone;
