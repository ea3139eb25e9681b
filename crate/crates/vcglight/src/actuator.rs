//! Light actuator drivers.
//!
//! [`Actuator`] validates levels, retries a failing driver with bounded
//! exponential backoff and keeps health counters. Commands carry the engine's
//! sequence number, so a re-send after a failure is idempotent.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use vcglight_core::engine::ActuatorCommand;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Ack {
    pub zone: String,
    pub level_percent: u8,
    pub sequence: u64,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DriverError {
    #[error("level {level}% is not one of {allowed:?}")]
    InvalidLevel { level: u8, allowed: Vec<u8> },
    #[error("driver unreachable: {0}")]
    Unreachable(String),
}

/// A protocol driver for one or more zones.
pub trait ActuatorDriver: Send + Sync {
    fn set_level(
        &self,
        zone: &str,
        level_percent: u8,
        sequence: u64,
        timestamp_ms: u64,
    ) -> Result<Ack, DriverError>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MockEntry {
    pub zone: String,
    pub level_percent: u8,
    pub timestamp_ms: u64,
    pub sequence: u64,
}

impl std::fmt::Display for MockEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}, {}, {}", self.zone, self.level_percent, self.timestamp_ms)
    }
}

/// In-memory driver that records every applied command. A repeated
/// `(zone, sequence)` is acknowledged without a second entry.
#[derive(Debug, Default)]
pub struct MockDriver {
    entries: Mutex<Vec<MockEntry>>,
    fail_next: AtomicU32,
    attempts: AtomicU32,
}

impl MockDriver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes the next `n` calls fail as unreachable.
    pub fn fail_next(&self, n: u32) {
        self.fail_next.store(n, Ordering::SeqCst);
    }

    pub fn entries(&self) -> Vec<MockEntry> {
        self.entries.lock().expect("mock log poisoned").clone()
    }

    /// Calls received, including failed ones.
    pub fn attempts(&self) -> u32 {
        self.attempts.load(Ordering::SeqCst)
    }
}

impl ActuatorDriver for MockDriver {
    fn set_level(
        &self,
        zone: &str,
        level_percent: u8,
        sequence: u64,
        timestamp_ms: u64,
    ) -> Result<Ack, DriverError> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        let failing = self
            .fail_next
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if failing {
            return Err(DriverError::Unreachable("mock failure".into()));
        }
        let mut entries = self.entries.lock().expect("mock log poisoned");
        let seen = entries
            .iter()
            .any(|e| e.zone == zone && e.sequence == sequence);
        if !seen {
            let entry = MockEntry {
                zone: zone.to_owned(),
                level_percent,
                timestamp_ms,
                sequence,
            };
            tracing::info!(target: "vcglight::mock_actuator", "{entry}");
            entries.push(entry);
        }
        Ok(Ack {
            zone: zone.to_owned(),
            level_percent,
            sequence,
            timestamp_ms,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    /// Pause before a command that exhausted its attempts is tried again.
    pub resend_after_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay_ms: 100,
            max_delay_ms: 2_000,
            resend_after_ms: 5_000,
        }
    }
}

impl RetryPolicy {
    /// Delay after the `attempt`-th failure (1-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ActuatorHealth {
    pub healthy: bool,
    pub consecutive_failures: u32,
    pub total_failures: u64,
    pub last_error: Option<String>,
    pub last_ack: Option<Ack>,
    /// Sequence of a command still waiting for an acknowledgment.
    pub pending_sequence: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ActuatorError {
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: DriverError },
}

/// A zone's actuator: allowed levels, driver, retry policy and health.
pub struct Actuator {
    zone: String,
    levels: Vec<u8>,
    driver: Arc<dyn ActuatorDriver>,
    retry: RetryPolicy,
    health: Mutex<ActuatorHealth>,
}

impl Actuator {
    pub fn new(
        zone: impl Into<String>,
        levels: Vec<u8>,
        driver: Arc<dyn ActuatorDriver>,
        retry: RetryPolicy,
    ) -> Self {
        Self {
            zone: zone.into(),
            levels,
            driver,
            retry,
            health: Mutex::new(ActuatorHealth {
                healthy: true,
                ..ActuatorHealth::default()
            }),
        }
    }

    pub fn zone(&self) -> &str {
        &self.zone
    }

    pub fn health(&self) -> ActuatorHealth {
        self.health.lock().expect("health poisoned").clone()
    }

    fn update(&self, f: impl FnOnce(&mut ActuatorHealth)) {
        f(&mut self.health.lock().expect("health poisoned"));
    }

    /// Sends one level, retrying unreachable-driver failures. Blocks while
    /// backing off.
    pub fn set(&self, level_percent: u8, sequence: u64, timestamp_ms: u64) -> Result<Ack, ActuatorError> {
        if !self.levels.contains(&level_percent) {
            return Err(DriverError::InvalidLevel {
                level: level_percent,
                allowed: self.levels.clone(),
            }
            .into());
        }
        self.update(|h| h.pending_sequence = Some(sequence));
        let attempts = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self
                .driver
                .set_level(&self.zone, level_percent, sequence, timestamp_ms)
            {
                Ok(ack) => {
                    self.update(|h| {
                        h.healthy = true;
                        h.consecutive_failures = 0;
                        h.pending_sequence = None;
                        h.last_ack = Some(ack.clone());
                    });
                    return Ok(ack);
                }
                Err(e) => {
                    self.update(|h| {
                        h.healthy = false;
                        h.consecutive_failures += 1;
                        h.total_failures += 1;
                        h.last_error = Some(e.to_string());
                    });
                    tracing::warn!(zone = %self.zone, sequence, attempt, error = %e, "actuator command failed");
                    if attempt >= attempts || matches!(e, DriverError::InvalidLevel { .. }) {
                        return Err(ActuatorError::Exhausted {
                            attempts: attempt,
                            last: e,
                        });
                    }
                    thread::sleep(self.retry.delay(attempt));
                }
            }
        }
    }

    pub fn send(&self, cmd: &ActuatorCommand) -> Result<Ack, ActuatorError> {
        self.set(cmd.level_percent, cmd.sequence, cmd.timestamp_ms)
    }
}

/// Delivers commands in order on a dedicated thread. A command that exhausts
/// its retries is re-sent with the same sequence number until it succeeds or
/// a newer command replaces it.
pub fn spawn_worker(actuator: Arc<Actuator>) -> mpsc::Sender<ActuatorCommand> {
    let (tx, rx) = mpsc::channel::<ActuatorCommand>();
    let name = format!("actuator-{}", actuator.zone());
    thread::Builder::new()
        .name(name)
        .spawn(move || {
            let resend = Duration::from_millis(actuator.retry.resend_after_ms.max(1));
            let mut pending: Option<ActuatorCommand> = None;
            loop {
                let next = match pending {
                    None => rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
                    Some(_) => rx.recv_timeout(resend),
                };
                let cmd = match next {
                    Ok(cmd) => cmd,
                    Err(RecvTimeoutError::Timeout) => pending.take().expect("pending command"),
                    Err(RecvTimeoutError::Disconnected) => match pending.take() {
                        Some(cmd) => {
                            let _ = actuator.send(&cmd);
                            return;
                        }
                        None => return,
                    },
                };
                pending = match actuator.send(&cmd) {
                    Ok(_) => None,
                    Err(ActuatorError::Exhausted {
                        last: DriverError::Unreachable(_),
                        ..
                    }) => Some(cmd),
                    Err(e) => {
                        tracing::error!(zone = %actuator.zone(), error = %e, "dropping actuator command");
                        None
                    }
                };
            }
        })
        .expect("spawn actuator worker");
    tx
}
