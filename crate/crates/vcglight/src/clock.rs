//! Time sources and the daily work-hours window.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use chrono::NaiveTime;
use chrono::Timelike;

pub const DAY_MS: i64 = 86_400_000;
const MINUTE_MS: i64 = 60_000;

pub trait Clock: Send + Sync {
    /// Milliseconds since the Unix epoch.
    fn now_ms(&self) -> u64;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64)
    }
}

/// Virtual time for tests and simulations.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(now_ms: u64) -> Self {
        Self(AtomicU64::new(now_ms))
    }

    pub fn set(&self, now_ms: u64) {
        self.0.store(now_ms, Ordering::SeqCst);
    }

    pub fn advance(&self, by_ms: u64) {
        self.0.fetch_add(by_ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WorkHoursError {
    #[error("cannot parse `{0}` as HH:MM")]
    BadTime(String),
    #[error("work hours must start before they end")]
    Empty,
    #[error("UTC offset {0} min is outside ±18 h")]
    BadOffset(i32),
}

/// A daily `[start, end)` window in local time at a fixed UTC offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WorkHours {
    start_min: i64,
    end_min: i64,
    utc_offset_min: i32,
}

impl Default for WorkHours {
    /// 09:00 to 17:00 UTC.
    fn default() -> Self {
        Self {
            start_min: 9 * 60,
            end_min: 17 * 60,
            utc_offset_min: 0,
        }
    }
}

fn parse_hhmm(s: &str) -> Result<i64, WorkHoursError> {
    let t = NaiveTime::parse_from_str(s.trim(), "%H:%M")
        .map_err(|_| WorkHoursError::BadTime(s.to_owned()))?;
    Ok(i64::from(t.hour() * 60 + t.minute()))
}

impl WorkHours {
    pub fn new(start_min: u32, end_min: u32, utc_offset_min: i32) -> Result<Self, WorkHoursError> {
        if start_min >= end_min || end_min > 24 * 60 {
            return Err(WorkHoursError::Empty);
        }
        if utc_offset_min.abs() > 18 * 60 {
            return Err(WorkHoursError::BadOffset(utc_offset_min));
        }
        Ok(Self {
            start_min: i64::from(start_min),
            end_min: i64::from(end_min),
            utc_offset_min,
        })
    }

    /// Parses `HH:MM` start and end times.
    pub fn parse(start: &str, end: &str, utc_offset_min: i32) -> Result<Self, WorkHoursError> {
        let (s, e) = (parse_hhmm(start)?, parse_hhmm(end)?);
        Self::new(s as u32, e as u32, utc_offset_min)
    }

    fn offset_ms(&self) -> i64 {
        i64::from(self.utc_offset_min) * MINUTE_MS
    }

    fn local_day(&self, ts_ms: u64) -> i64 {
        (ts_ms as i64 + self.offset_ms()).div_euclid(DAY_MS)
    }

    fn at(&self, day: i64, minute: i64) -> i64 {
        day * DAY_MS + minute * MINUTE_MS - self.offset_ms()
    }

    /// Minutes since local midnight.
    pub fn local_minute(&self, ts_ms: u64) -> u32 {
        ((ts_ms as i64 + self.offset_ms()).rem_euclid(DAY_MS) / MINUTE_MS) as u32
    }

    pub fn contains(&self, ts_ms: u64) -> bool {
        let m = i64::from(self.local_minute(ts_ms));
        self.start_min <= m && m < self.end_min
    }

    /// Most recent start at or before `ts_ms`.
    pub fn last_start(&self, ts_ms: u64) -> u64 {
        let day = self.local_day(ts_ms);
        let today = self.at(day, self.start_min);
        let s = if today <= ts_ms as i64 {
            today
        } else {
            self.at(day - 1, self.start_min)
        };
        s.max(0) as u64
    }

    /// Earliest end at or after `ts_ms`.
    pub fn next_end(&self, ts_ms: u64) -> u64 {
        let day = self.local_day(ts_ms);
        let today = self.at(day, self.end_min);
        let e = if today >= ts_ms as i64 {
            today
        } else {
            self.at(day + 1, self.end_min)
        };
        e.max(0) as u64
    }

    /// `ts_ms` at local `HH:MM` on the same local day.
    pub fn local_time_on_day(&self, ts_ms: u64, hour: u32, minute: u32) -> u64 {
        let day = self.local_day(ts_ms);
        self.at(day, i64::from(hour * 60 + minute)).max(0) as u64
    }
}
