//! Service configuration: one TOML file plus environment overrides.
//!
//! | variable             | overrides                      |
//! |----------------------|--------------------------------|
//! | `VCGLIGHT_LISTEN`    | `listen` (full socket address) |
//! | `VCGLIGHT_PORT`      | port part of `listen`          |
//! | `VCGLIGHT_DATA_DIR`  | `data_dir`                     |
//! | `VCGLIGHT_ROSTER`    | `roster`                       |
//!
//! Relative paths in the file resolve against the file's directory.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use vcglight_core::engine::EngineConfig;
use vcglight_core::mechanism::{MechanismConfig, OutcomeSetting, TieBreak};
use vcglight_core::{RewardConfig, MILLI};

use crate::actuator::RetryPolicy;
use crate::clock::{WorkHours, WorkHoursError};
use crate::geofence::{FenceError, GeoFence, LatLon};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("zone `{zone}`: {message}")]
    Zone { zone: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    listen: Option<String>,
    data_dir: Option<PathBuf>,
    roster: Option<PathBuf>,
    fsync: Option<bool>,
    tick_ms: Option<u64>,
    #[serde(default)]
    users: Vec<RosterEntry>,
    #[serde(default)]
    zones: Vec<RawZone>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRoster {
    #[serde(default)]
    users: Vec<RosterEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RosterEntry {
    pub id: String,
    pub token: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSetting {
    label: String,
    level_percent: u8,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWorkHours {
    #[serde(default = "default_start")]
    start: String,
    #[serde(default = "default_end")]
    end: String,
    #[serde(default)]
    utc_offset_minutes: i32,
}

fn default_start() -> String {
    "09:00".into()
}

fn default_end() -> String {
    "17:00".into()
}

impl Default for RawWorkHours {
    fn default() -> Self {
        Self {
            start: default_start(),
            end: default_end(),
            utc_offset_minutes: 0,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRewards {
    lottery_threshold_points: Option<u64>,
    communal_threshold_points: Option<u64>,
    prizes_per_lottery: Option<u32>,
    rng_seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawActuator {
    #[serde(default = "default_endpoint")]
    endpoint: String,
    #[serde(default)]
    retry: RetryPolicy,
}

fn default_endpoint() -> String {
    "mock".into()
}

impl Default for RawActuator {
    fn default() -> Self {
        Self {
            endpoint: default_endpoint(),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawZone {
    id: String,
    lambda_max: Option<u32>,
    settings: Option<Vec<RawSetting>>,
    nominal: Option<String>,
    virtual_cost: Option<Vec<u32>>,
    survey_bonus_points: Option<u64>,
    /// `[[latitude, longitude], ...]`
    fence: Vec<[f64; 2]>,
    #[serde(default)]
    work_hours: RawWorkHours,
    #[serde(default)]
    rewards: RawRewards,
    #[serde(default)]
    actuator: RawActuator,
}

/// Static user tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Roster {
    tokens: BTreeMap<String, String>,
}

impl Roster {
    pub fn new(entries: impl IntoIterator<Item = RosterEntry>) -> Result<Self, ConfigError> {
        let mut tokens = BTreeMap::new();
        for e in entries {
            if e.id.is_empty() || e.token.is_empty() {
                return Err(ConfigError::Invalid("roster entries need an id and a token".into()));
            }
            if tokens.insert(e.id.clone(), e.token).is_some() {
                return Err(ConfigError::Invalid(format!("user `{}` listed twice", e.id)));
            }
        }
        Ok(Self { tokens })
    }

    pub fn authenticate(&self, user_id: &str, token: &str) -> bool {
        self.tokens.get(user_id).is_some_and(|t| t == token)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ZoneConfig {
    pub id: String,
    pub engine: EngineConfig,
    pub fence: GeoFence,
    pub work_hours: WorkHours,
    pub actuator_endpoint: String,
    pub retry: RetryPolicy,
}

impl ZoneConfig {
    pub fn log_path(&self, data_dir: &Path) -> PathBuf {
        data_dir.join(format!("{}.jsonl", self.id))
    }

    /// Allowed actuator levels.
    pub fn levels(&self) -> Vec<u8> {
        self.engine
            .mechanism
            .settings
            .iter()
            .map(|s| s.level_percent)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub data_dir: PathBuf,
    pub fsync: bool,
    /// Work-hours scheduler period.
    pub tick_ms: u64,
    pub roster: Roster,
    pub zones: Vec<ZoneConfig>,
}

impl ServiceConfig {
    pub fn zone(&self, id: &str) -> Option<&ZoneConfig> {
        self.zones.iter().find(|z| z.id == id)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::load_with_env(path, |k| std::env::var(k).ok())
    }

    pub fn load_with_env(
        path: &Path,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, env).map_err(|e| match e {
            ConfigError::Toml { source, .. } => ConfigError::Toml {
                path: path.to_owned(),
                source,
            },
            other => other,
        })
    }

    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(
        text: &str,
        base: &Path,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|source| ConfigError::Toml {
            path: PathBuf::new(),
            source,
        })?;
        let rel = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };

        let mut listen: SocketAddr = env("VCGLIGHT_LISTEN")
            .or(raw.listen)
            .unwrap_or_else(|| "127.0.0.1:8080".into())
            .parse()
            .map_err(|e| ConfigError::Invalid(format!("listen address: {e}")))?;
        if let Some(port) = env("VCGLIGHT_PORT") {
            listen.set_port(
                port.parse()
                    .map_err(|_| ConfigError::Invalid(format!("VCGLIGHT_PORT `{port}`")))?,
            );
        }
        let data_dir = env("VCGLIGHT_DATA_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| rel(raw.data_dir.unwrap_or_else(|| "data".into())));
        let roster_path = env("VCGLIGHT_ROSTER")
            .map(PathBuf::from)
            .or_else(|| raw.roster.map(rel));

        let mut users = raw.users;
        if let Some(p) = roster_path {
            let text = std::fs::read_to_string(&p).map_err(|source| ConfigError::Io {
                path: p.clone(),
                source,
            })?;
            let r: RawRoster = toml::from_str(&text).map_err(|source| ConfigError::Toml {
                path: p.clone(),
                source,
            })?;
            users.extend(r.users);
        }

        if raw.zones.is_empty() {
            return Err(ConfigError::Invalid("at least one [[zones]] entry is required".into()));
        }
        let mut zones: Vec<ZoneConfig> = Vec::new();
        for z in raw.zones {
            let zone = resolve_zone(z)?;
            if zones.iter().any(|o| o.id == zone.id) {
                return Err(ConfigError::Invalid(format!("zone `{}` defined twice", zone.id)));
            }
            zones.push(zone);
        }

        Ok(Self {
            listen,
            data_dir,
            fsync: raw.fsync.unwrap_or(true),
            tick_ms: raw.tick_ms.unwrap_or(1_000).max(1),
            roster: Roster::new(users)?,
            zones,
        })
    }
}

fn resolve_zone(z: RawZone) -> Result<ZoneConfig, ConfigError> {
    let err = |message: String| ConfigError::Zone {
        zone: z.id.clone(),
        message,
    };
    if z.id.is_empty()
        || !z
            .id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
    {
        return Err(err("id must be non-empty ASCII letters, digits, '-' or '_'".into()));
    }

    let mut mechanism = MechanismConfig {
        tie_break: TieBreak::DimmestWins,
        ..MechanismConfig::default()
    };
    if let Some(lm) = z.lambda_max {
        mechanism.lambda_max = lm;
    }
    if let Some(settings) = &z.settings {
        mechanism.settings = settings
            .iter()
            .enumerate()
            .map(|(i, s)| OutcomeSetting::new(i, s.label.clone(), s.level_percent))
            .collect();
        mechanism.nominal_outcome = mechanism.settings.len().saturating_sub(1);
    }
    if let Some(label) = &z.nominal {
        mechanism.nominal_outcome = mechanism
            .index_of_label(label)
            .ok_or_else(|| err(format!("nominal setting `{label}` is not configured")))?;
    }
    mechanism.virtual_cost = z.virtual_cost.clone();
    mechanism.validate().map_err(|e| err(e.to_string()))?;

    let d = RewardConfig::default();
    let rewards = RewardConfig {
        lottery_threshold: z
            .rewards
            .lottery_threshold_points
            .map_or(d.lottery_threshold, |p| p * MILLI),
        communal_threshold: z
            .rewards
            .communal_threshold_points
            .map_or(d.communal_threshold, |p| p * MILLI),
        prizes_per_lottery: z.rewards.prizes_per_lottery.unwrap_or(d.prizes_per_lottery),
        rng_seed: z.rewards.rng_seed.unwrap_or(d.rng_seed),
    };
    rewards.validate().map_err(|e| err(e.to_string()))?;

    let engine = EngineConfig {
        mechanism,
        rewards,
        survey_bonus_milli: z
            .survey_bonus_points
            .map_or(EngineConfig::default().survey_bonus_milli, |p| p * MILLI),
        initially_active: false,
    };

    let fence = GeoFence::new(z.fence.iter().map(|&[lat, lon]| LatLon::new(lat, lon)).collect())
        .map_err(|e: FenceError| err(e.to_string()))?;
    let work_hours = WorkHours::parse(
        &z.work_hours.start,
        &z.work_hours.end,
        z.work_hours.utc_offset_minutes,
    )
    .map_err(|e: WorkHoursError| err(e.to_string()))?;
    if z.actuator.retry.max_attempts == 0 {
        return Err(err("actuator.retry.max_attempts must be at least 1".into()));
    }

    Ok(ZoneConfig {
        id: z.id.clone(),
        engine,
        fence,
        work_hours,
        actuator_endpoint: z.actuator.endpoint,
        retry: z.actuator.retry,
    })
}
