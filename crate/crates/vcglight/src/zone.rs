//! One zone's single-writer runtime: engine, event log, sessions and the
//! work-hours scheduler.
//!
//! Every mutation is validated against the engine, appended to the log and
//! only then applied. Sessions live in memory; after a restart present users
//! log in again and receive a fresh token without a second `login` record.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use vcglight_core::analytics::SensorSample;
use vcglight_core::engine::{
    ActuatorCommand, Engine, EngineError, EventKind, RewardRecord, SessionEvent, Transition,
};
use vcglight_core::engine::replay;
use vcglight_core::{MechanismConfig, UserId};

use crate::config::{Roster, ZoneConfig};
use crate::eventlog::{EventLog, LogError};
use crate::geofence::LatLon;
use crate::wire::{LogRecord, WireBallot, WireError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    PresenceRequired,
    OutsideWorkHours,
    UnknownZone,
    Unauthorized,
    StaleSession,
    InvalidBallot,
    InvalidRequest,
    Conflict,
    Internal,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, thiserror::Error)]
#[error("{code:?}: {message}")]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<LogError> for ApiError {
    fn from(e: LogError) -> Self {
        tracing::error!(error = %e, "event log append failed");
        Self::new(ErrorCode::Internal, "event log unavailable")
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let code = match e {
            EngineError::Mechanism(_) => ErrorCode::InvalidBallot,
            EngineError::NotLoggedIn(_) => ErrorCode::StaleSession,
            EngineError::NotInWorkHours => ErrorCode::OutsideWorkHours,
            EngineError::OutOfOrder { .. }
            | EngineError::AlreadyLoggedIn(_)
            | EngineError::AlreadyInWorkHours => ErrorCode::Conflict,
            EngineError::Reward(_) => ErrorCode::Internal,
        };
        Self::new(code, e.to_string())
    }
}

impl From<WireError> for ApiError {
    fn from(e: WireError) -> Self {
        Self::new(ErrorCode::InvalidBallot, e.to_string())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OpenError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("zone `{zone}` log does not replay: {source}")]
    Replay {
        zone: String,
        #[source]
        source: vcglight_core::engine::ReplayError,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone, Debug, Deserialize)]
pub struct LoginRequest {
    pub user_id: String,
    pub token: String,
    pub latitude: f64,
    pub longitude: f64,
    #[serde(default)]
    pub ballot: Option<WireBallot>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct SessionRequest {
    pub session: String,
}

#[derive(Clone, Debug, Deserialize)]
pub struct BallotRequest {
    pub session: String,
    pub ballot: WireBallot,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SettingView {
    pub index: usize,
    pub label: String,
    pub level_percent: u8,
}

impl SettingView {
    fn of(cfg: &MechanismConfig, index: usize) -> Self {
        let s = &cfg.settings[index];
        Self {
            index,
            label: s.label.clone(),
            level_percent: s.level_percent,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct VoterView {
    pub user_id: String,
    /// Points per hour.
    pub rate: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PointsView {
    pub user_id: String,
    pub milli_points: u64,
    pub points: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ThresholdView {
    pub communal_milli_points: u64,
    pub lottery_threshold_milli_points: u64,
    pub next_lottery_at_milli_points: u64,
    pub lotteries_held: u64,
    pub communal_threshold_milli_points: u64,
    pub next_communal_at_milli_points: u64,
    pub communal_rewards_held: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardView {
    Lottery {
        timestamp_ms: u64,
        ordinal: u64,
        winners: Vec<String>,
    },
    CommunalLunch { timestamp_ms: u64, ordinal: u64 },
}

impl From<&RewardRecord> for RewardView {
    fn from(r: &RewardRecord) -> Self {
        match r {
            RewardRecord::Lottery {
                timestamp_ms,
                ordinal,
                winners,
            } => Self::Lottery {
                timestamp_ms: *timestamp_ms,
                ordinal: *ordinal,
                winners: winners.iter().map(|w| w.as_str().to_owned()).collect(),
            },
            RewardRecord::CommunalLunch {
                timestamp_ms,
                ordinal,
            } => Self::CommunalLunch {
                timestamp_ms: *timestamp_ms,
                ordinal: *ordinal,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SensorView {
    pub timestamp_ms: u64,
    pub humidity_percent: f64,
    pub temperature_deg_f: f64,
    pub pressure_in_hg: f64,
    pub solar_radiation_w_per_m2: f64,
}

impl From<&SensorSample> for SensorView {
    fn from(s: &SensorSample) -> Self {
        Self {
            timestamp_ms: s.timestamp_ms,
            humidity_percent: s.humidity_percent,
            temperature_deg_f: s.temperature_deg_f,
            pressure_in_hg: s.pressure_in_hg,
            solar_radiation_w_per_m2: s.solar_radiation_w_per_m2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CallerView {
    pub user_id: String,
    pub present: bool,
    pub rate: Option<i64>,
    pub milli_points: u64,
    pub ballot: Option<WireBallot>,
}

/// Immutable view of a zone, safe to share across threads.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Snapshot {
    pub zone: String,
    pub generated_at_ms: u64,
    pub last_event_ms: Option<u64>,
    pub work_hours: bool,
    pub setting: Option<SettingView>,
    pub nominal: SettingView,
    pub occupants: Vec<String>,
    pub voters: Vec<VoterView>,
    pub points: Vec<PointsView>,
    pub thresholds: ThresholdView,
    pub recent_rewards: Vec<RewardView>,
    pub latest_sensor: Option<SensorView>,
    pub actuator_sequence: u64,
    pub digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caller: Option<CallerView>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LoginResponse {
    pub session: String,
    pub user_id: String,
    pub snapshot: Snapshot,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BallotAck {
    pub setting: SettingView,
    /// Caller's points per hour.
    pub rate: i64,
    pub milli_points: u64,
    pub communal_milli_points: u64,
    pub snapshot: Snapshot,
}

pub struct ZoneRuntime {
    config: ZoneConfig,
    roster: Arc<Roster>,
    engine: Engine,
    log: EventLog,
    sessions: HashMap<String, UserId>,
    latest_sensor: Option<SensorSample>,
    outbox: Vec<ActuatorCommand>,
}

fn next_multiple(value: u64, step: u64) -> u64 {
    (value / step + 1).saturating_mul(step)
}

impl ZoneRuntime {
    /// Opens the zone's log under `data_dir` and replays it.
    pub fn open(
        config: ZoneConfig,
        roster: Arc<Roster>,
        data_dir: &Path,
        fsync: bool,
    ) -> Result<Self, OpenError> {
        std::fs::create_dir_all(data_dir).map_err(|source| LogError::Io {
            path: data_dir.to_owned(),
            source,
        })?;
        let (log, contents) = EventLog::open(&config.log_path(data_dir), fsync)?;
        let events = contents.events(&config.engine.mechanism)?;
        let engine = replay(config.engine.clone(), &events).map_err(|source| OpenError::Replay {
            zone: config.id.clone(),
            source,
        })?;
        let mut outbox = Vec::new();
        // Resend the level in force so the actuator matches the engine.
        if let Some(outcome) = engine.state().outcome() {
            outbox.push(ActuatorCommand {
                sequence: engine.state().actuator_sequence(),
                timestamp_ms: engine.state().last_timestamp_ms().unwrap_or(0),
                outcome,
                level_percent: config.engine.mechanism.settings[outcome].level_percent,
            });
        }
        tracing::info!(zone = %config.id, events = events.len(), digest = %engine.digest(), "zone opened");
        Ok(Self {
            config,
            roster,
            engine,
            log,
            sessions: HashMap::new(),
            latest_sensor: None,
            outbox,
        })
    }

    pub fn id(&self) -> &str {
        &self.config.id
    }

    pub fn config(&self) -> &ZoneConfig {
        &self.config
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    /// Actuator commands produced since the last call.
    pub fn take_commands(&mut self) -> Vec<ActuatorCommand> {
        std::mem::take(&mut self.outbox)
    }

    fn mech(&self) -> &MechanismConfig {
        &self.config.engine.mechanism
    }

    /// `now`, held back from running behind the last logged event.
    fn stamp(&self, now: u64) -> u64 {
        self.engine
            .state()
            .last_timestamp_ms()
            .map_or(now, |last| now.max(last))
    }

    fn commit(&mut self, event: SessionEvent) -> Result<Transition, ApiError> {
        self.engine.validate(&event)?;
        self.log
            .append(&[LogRecord::from_event(&event, &self.config.engine.mechanism)])?;
        let t = self.engine.apply(&event).map_err(|e| {
            tracing::error!(zone = %self.config.id, error = %e, "validated event failed to apply");
            ApiError::new(ErrorCode::Internal, e.to_string())
        })?;
        if !t.rewards.is_empty() {
            let notes: Vec<LogRecord> = t.rewards.iter().map(LogRecord::from_reward).collect();
            if let Err(e) = self.log.append(&notes) {
                tracing::warn!(zone = %self.config.id, error = %e, "could not record reward annotations");
            }
            for r in &t.rewards {
                tracing::info!(zone = %self.config.id, reward = ?r, "reward triggered");
            }
        }
        if let Some(c) = t.command {
            self.outbox.push(c);
        }
        Ok(t)
    }

    /// Emits any work-hours boundary that `now` has passed. Sessions expire
    /// at the end of work hours: present users are logged out first.
    pub fn tick(&mut self, now: u64) -> Result<Vec<Transition>, ApiError> {
        let wh = self.config.work_hours;
        let mut out = Vec::new();
        if self.engine.state().in_work_hours() {
            let since = self.engine.state().last_timestamp_ms().unwrap_or(0);
            let end = wh.next_end(since);
            if end <= now {
                let present: Vec<UserId> = self.engine.state().present_users().cloned().collect();
                for user in present {
                    out.push(self.commit(SessionEvent::logout(end, user))?);
                }
                self.sessions.clear();
                out.push(self.commit(SessionEvent::new(end, EventKind::WorkHoursEnd))?);
            }
        }
        if !self.engine.state().in_work_hours() && wh.contains(now) {
            let at = self.stamp(wh.last_start(now));
            out.push(self.commit(SessionEvent::new(at, EventKind::WorkHoursStart))?);
        }
        Ok(out)
    }

    fn session_user(&self, session: &str) -> Result<UserId, ApiError> {
        let user = self
            .sessions
            .get(session)
            .ok_or_else(|| ApiError::new(ErrorCode::StaleSession, "session is unknown or expired"))?;
        if !self.engine.state().is_present(user) {
            return Err(ApiError::new(ErrorCode::StaleSession, "session has ended"));
        }
        Ok(user.clone())
    }

    pub fn login(&mut self, req: &LoginRequest, now: u64) -> Result<LoginResponse, ApiError> {
        if !self.roster.authenticate(&req.user_id, &req.token) {
            return Err(ApiError::new(ErrorCode::Unauthorized, "unknown user or wrong token"));
        }
        self.tick(now)?;
        if !self.config.work_hours.contains(now) || !self.engine.state().in_work_hours() {
            return Err(ApiError::new(
                ErrorCode::OutsideWorkHours,
                "voting is open during work hours only",
            ));
        }
        if !self.config.fence.contains(LatLon::new(req.latitude, req.longitude)) {
            return Err(ApiError::new(
                ErrorCode::PresenceRequired,
                "you must be inside the zone to vote",
            ));
        }
        let ballot = req
            .ballot
            .as_ref()
            .map(|b| b.to_ballot(self.mech()))
            .transpose()?;
        let user = UserId::from(req.user_id.as_str());
        let t = self.stamp(now);
        if self.engine.state().is_present(&user) {
            if let Some(b) = ballot {
                self.commit(SessionEvent::ballot(t, user.clone(), b))?;
            }
        } else {
            self.commit(SessionEvent::login(t, user.clone(), ballot))?;
        }
        self.sessions.retain(|_, u| *u != user);
        let session = uuid::Uuid::new_v4().to_string();
        self.sessions.insert(session.clone(), user.clone());
        Ok(LoginResponse {
            snapshot: self.snapshot_for(now, Some(&user)),
            session,
            user_id: user.as_str().to_owned(),
        })
    }

    pub fn logout(&mut self, session: &str, now: u64) -> Result<Snapshot, ApiError> {
        self.tick(now)?;
        let user = self.session_user(session)?;
        self.commit(SessionEvent::logout(self.stamp(now), user.clone()))?;
        self.sessions.remove(session);
        Ok(self.snapshot(now))
    }

    pub fn ballot(&mut self, session: &str, ballot: &WireBallot, now: u64) -> Result<BallotAck, ApiError> {
        self.tick(now)?;
        let user = self.session_user(session)?;
        let b = ballot.to_ballot(self.mech())?;
        self.commit(SessionEvent::ballot(self.stamp(now), user.clone(), b))?;
        let alloc = self
            .engine
            .current_allocation()
            .ok_or_else(|| ApiError::new(ErrorCode::OutsideWorkHours, "work hours ended"))?;
        let state = self.engine.state();
        Ok(BallotAck {
            setting: SettingView::of(self.mech(), alloc.outcome),
            rate: alloc.rates.get(&user).copied().unwrap_or(0),
            milli_points: state.accrued_milli(&user),
            communal_milli_points: state.communal_milli(),
            snapshot: self.snapshot_for(now, Some(&user)),
        })
    }

    /// Credits the survey bonus to the session's user.
    pub fn survey(&mut self, session: &str, now: u64) -> Result<Snapshot, ApiError> {
        self.tick(now)?;
        let user = self.session_user(session)?;
        self.commit(SessionEvent::new(
            self.stamp(now),
            EventKind::SurveyBonus { user: user.clone() },
        ))?;
        Ok(self.snapshot_for(now, Some(&user)))
    }

    pub fn record_sensor(&mut self, sample: SensorSample) -> Result<(), ApiError> {
        sample
            .validate()
            .map_err(|e| ApiError::new(ErrorCode::InvalidRequest, e.to_string()))?;
        if self
            .latest_sensor
            .is_none_or(|s| s.timestamp_ms <= sample.timestamp_ms)
        {
            self.latest_sensor = Some(sample);
        }
        Ok(())
    }

    /// User behind `session`, if it is live.
    pub fn caller(&self, session: &str) -> Option<UserId> {
        self.session_user(session).ok()
    }

    pub fn snapshot(&self, now: u64) -> Snapshot {
        self.snapshot_for(now, None)
    }

    pub fn snapshot_for(&self, now: u64, caller: Option<&UserId>) -> Snapshot {
        let cfg = self.mech();
        let state = self.engine.state();
        let alloc = self.engine.current_allocation();
        let rcfg = &self.config.engine.rewards;
        let communal = state.communal_milli();
        Snapshot {
            zone: self.config.id.clone(),
            generated_at_ms: now,
            last_event_ms: state.last_timestamp_ms(),
            work_hours: state.in_work_hours(),
            setting: alloc.as_ref().map(|a| SettingView::of(cfg, a.outcome)),
            nominal: SettingView::of(cfg, cfg.nominal_outcome),
            occupants: state.present_users().map(|u| u.as_str().to_owned()).collect(),
            voters: alloc
                .as_ref()
                .map(|a| {
                    a.rates
                        .iter()
                        .map(|(u, &rate)| VoterView {
                            user_id: u.as_str().to_owned(),
                            rate,
                        })
                        .collect()
                })
                .unwrap_or_default(),
            points: state
                .accounts()
                .map(|(u, milli)| PointsView {
                    user_id: u.as_str().to_owned(),
                    milli_points: milli,
                    points: milli / vcglight_core::MILLI,
                })
                .collect(),
            thresholds: ThresholdView {
                communal_milli_points: communal,
                lottery_threshold_milli_points: rcfg.lottery_threshold,
                next_lottery_at_milli_points: next_multiple(communal, rcfg.lottery_threshold),
                lotteries_held: state.lotteries_held(),
                communal_threshold_milli_points: rcfg.communal_threshold,
                next_communal_at_milli_points: next_multiple(communal, rcfg.communal_threshold),
                communal_rewards_held: state.lunches_held(),
            },
            recent_rewards: state.recent_rewards().iter().map(RewardView::from).collect(),
            latest_sensor: self.latest_sensor.as_ref().map(SensorView::from),
            actuator_sequence: state.actuator_sequence(),
            digest: state.digest().to_string(),
            caller: caller.map(|u| CallerView {
                user_id: u.as_str().to_owned(),
                present: state.is_present(u),
                rate: alloc.as_ref().and_then(|a| a.rates.get(u).copied()),
                milli_points: state.accrued_milli(u),
                ballot: state.ballot_of(u).map(|b| WireBallot::from_ballot(b, cfg)),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::WorkHours;
    use crate::config::RosterEntry;
    use crate::eventlog::read_log;
    use crate::geofence::GeoFence;
    use crate::wire::RecordKind;
    use vcglight_core::engine::EngineConfig;
    use vcglight_core::RewardConfig;

    const H: u64 = 3_600_000;
    const MIN: u64 = 60_000;
    // 1970-01-02, so day arithmetic never goes negative.
    const DAY: u64 = 24 * H;

    fn zone_config(rewards: RewardConfig) -> ZoneConfig {
        ZoneConfig {
            id: "east".into(),
            engine: EngineConfig {
                rewards,
                initially_active: false,
                ..EngineConfig::default()
            },
            fence: GeoFence::rectangle(LatLon::new(10.0, 20.0), LatLon::new(10.001, 20.001))
                .unwrap(),
            work_hours: WorkHours::default(),
            actuator_endpoint: "mock".into(),
            retry: Default::default(),
        }
    }

    fn roster() -> Arc<Roster> {
        Arc::new(
            Roster::new(["alice", "bob", "carol"].map(|u| RosterEntry {
                id: u.into(),
                token: format!("{u}-token"),
            }))
            .unwrap(),
        )
    }

    fn open(dir: &Path) -> ZoneRuntime {
        ZoneRuntime::open(zone_config(RewardConfig::default()), roster(), dir, false).unwrap()
    }

    fn login_req(user: &str) -> LoginRequest {
        LoginRequest {
            user_id: user.into(),
            token: format!("{user}-token"),
            latitude: 10.0005,
            longitude: 20.0005,
            ballot: None,
        }
    }

    fn wire(pref: &str, pay: &[(&str, u32)]) -> WireBallot {
        WireBallot {
            preferred: pref.into(),
            pay_vs: pay.iter().map(|(l, p)| ((*l).to_owned(), *p)).collect(),
        }
    }

    #[test]
    fn fresh_zone_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let z = open(dir.path());
        let s = z.snapshot(DAY);
        assert_eq!(s.setting, None);
        assert_eq!(s.nominal.label, "VeryBright");
        assert!(s.occupants.is_empty());
        assert!(s.points.is_empty());
        assert_eq!(s.thresholds.communal_milli_points, 0);
    }

    #[test]
    fn work_hours_open_with_the_nominal_setting() {
        let dir = tempfile::tempdir().unwrap();
        let mut z = open(dir.path());
        z.tick(DAY + 9 * H + 5 * MIN).unwrap();
        let s = z.snapshot(DAY + 9 * H + 5 * MIN);
        assert!(s.work_hours);
        assert_eq!(s.setting.unwrap().level_percent, 100);
        assert_eq!(s.last_event_ms, Some(DAY + 9 * H));
        let cmds = z.take_commands();
        assert_eq!(cmds.len(), 1);
        assert_eq!(cmds[0].level_percent, 100);
    }

    #[test]
    fn login_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let mut z = open(dir.path());
        let noon = DAY + 12 * H;

        let mut far = login_req("alice");
        far.latitude += 0.009; // ~1 km north
        assert_eq!(z.login(&far, noon).unwrap_err().code, ErrorCode::PresenceRequired);

        let evening = DAY + 20 * H;
        assert_eq!(
            z.login(&login_req("alice"), evening).unwrap_err().code,
            ErrorCode::OutsideWorkHours
        );

        let mut wrong = login_req("alice");
        wrong.token = "guess".into();
        assert_eq!(z.login(&wrong, noon).unwrap_err().code, ErrorCode::Unauthorized);
    }

    #[test]
    fn first_ballot_alone_gets_preferred_setting() {
        let dir = tempfile::tempdir().unwrap();
        let mut z = open(dir.path());
        let t = DAY + 10 * H;
        let s = z.login(&login_req("alice"), t).unwrap().session;
        let ack = z
            .ballot(&s, &wire("Normal", &[("Bright", 40), ("VeryBright", 70)]), t + MIN)
            .unwrap();
        assert_eq!(ack.setting.label, "Normal");
        assert_eq!(ack.rate, 100);
        assert_eq!(ack.snapshot.caller.unwrap().rate, Some(100));
    }

    #[test]
    fn two_member_example_is_visible_in_state() {
        let dir = tempfile::tempdir().unwrap();
        let mut z = open(dir.path());
        let t = DAY + 10 * H;
        let a = z.login(&login_req("alice"), t).unwrap().session;
        let b = z.login(&login_req("bob"), t).unwrap().session;
        // Types (10, 0, 50) and (30, 20, 0).
        z.ballot(&a, &wire("Bright", &[("Normal", 10), ("VeryBright", 50)]), t).unwrap();
        let ack = z
            .ballot(&b, &wire("VeryBright", &[("Normal", 30), ("Bright", 20)]), t)
            .unwrap();
        assert_eq!(ack.setting.label, "Bright");
        let snap = z.snapshot(t);
        let rates: Vec<(String, i64)> =
            snap.voters.iter().map(|v| (v.user_id.clone(), v.rate)).collect();
        assert_eq!(rates, vec![("alice".into(), 180), ("bob".into(), 200)]);
    }

    #[test]
    fn invalid_ballots_and_stale_sessions() {
        let dir = tempfile::tempdir().unwrap();
        let mut z = open(dir.path());
        let t = DAY + 10 * H;
        let s = z.login(&login_req("alice"), t).unwrap().session;
        let over = wire("Bright", &[("Normal", 101)]);
        assert_eq!(z.ballot(&s, &over, t).unwrap_err().code, ErrorCode::InvalidBallot);
        let unknown = wire("Dim", &[]);
        assert_eq!(z.ballot(&s, &unknown, t).unwrap_err().code, ErrorCode::InvalidBallot);
        assert_eq!(
            z.ballot("nope", &wire("Bright", &[]), t).unwrap_err().code,
            ErrorCode::StaleSession
        );
        z.logout(&s, t + MIN).unwrap();
        assert_eq!(
            z.ballot(&s, &wire("Bright", &[]), t + MIN).unwrap_err().code,
            ErrorCode::StaleSession
        );
    }

    #[test]
    fn identical_ballot_only_splits_the_segment() {
        let dir = tempfile::tempdir().unwrap();
        let mut z = open(dir.path());
        let t = DAY + 10 * H;
        let s = z.login(&login_req("alice"), t).unwrap().session;
        let b = wire("Bright", &[("Normal", 30), ("VeryBright", 15)]);
        z.ballot(&s, &b, t).unwrap();
        z.take_commands();
        let before = z.engine().state().actuator_sequence();
        z.ballot(&s, &b, t + 10 * MIN).unwrap();
        assert!(z.take_commands().is_empty());
        assert_eq!(z.engine().state().actuator_sequence(), before);
    }

    #[test]
    fn sessions_expire_at_end_of_work_hours() {
        let dir = tempfile::tempdir().unwrap();
        let mut z = open(dir.path());
        let t = DAY + 16 * H;
        let s = z.login(&login_req("alice"), t).unwrap().session;
        z.ballot(&s, &wire("Normal", &[("Bright", 10), ("VeryBright", 10)]), t).unwrap();
        z.tick(DAY + 18 * H).unwrap();
        let snap = z.snapshot(DAY + 18 * H);
        assert!(!snap.work_hours);
        assert!(snap.occupants.is_empty());
        // One hour at rate 100 (n=1, no one else) credits 100 points.
        assert_eq!(snap.points[0].milli_points, 100_000);
        assert_eq!(z.engine().state().last_timestamp_ms(), Some(DAY + 17 * H));
        assert_eq!(
            z.ballot(&s, &wire("Normal", &[]), DAY + 18 * H).unwrap_err().code,
            ErrorCode::StaleSession
        );
    }

    #[test]
    fn relogin_reissues_token_without_new_event() {
        let dir = tempfile::tempdir().unwrap();
        let mut z = open(dir.path());
        let t = DAY + 10 * H;
        let s1 = z.login(&login_req("alice"), t).unwrap().session;
        let s2 = z.login(&login_req("alice"), t + MIN).unwrap().session;
        assert_ne!(s1, s2);
        assert!(z.caller(&s1).is_none());
        assert!(z.caller(&s2).is_some());
        let logins = read_log(&zone_config(RewardConfig::default()).log_path(dir.path()))
            .unwrap()
            .records
            .iter()
            .filter(|r| r.kind == RecordKind::Login)
            .count();
        assert_eq!(logins, 1);
    }

    #[test]
    fn restart_replays_to_the_same_digest() {
        let dir = tempfile::tempdir().unwrap();
        let t = DAY + 10 * H;
        let digest = {
            let mut z = open(dir.path());
            let a = z.login(&login_req("alice"), t).unwrap().session;
            let b = z.login(&login_req("bob"), t + MIN).unwrap().session;
            z.ballot(&a, &wire("Bright", &[("Normal", 10), ("VeryBright", 50)]), t + 2 * MIN)
                .unwrap();
            z.ballot(&b, &wire("VeryBright", &[("Normal", 30), ("Bright", 20)]), t + 3 * MIN)
                .unwrap();
            z.logout(&a, t + H).unwrap();
            z.engine().digest()
        };
        let mut z = open(dir.path());
        assert_eq!(z.engine().digest(), digest);
        let resync = z.take_commands();
        assert_eq!(resync.len(), 1);
        assert_eq!(resync[0].sequence, z.engine().state().actuator_sequence());
    }

    #[test]
    fn lottery_is_annotated_and_visible() {
        let dir = tempfile::tempdir().unwrap();
        let rewards = RewardConfig {
            lottery_threshold: 50_000,
            ..RewardConfig::default()
        };
        let cfg = zone_config(rewards);
        let log_path = cfg.log_path(dir.path());
        let mut z = ZoneRuntime::open(cfg, roster(), dir.path(), false).unwrap();
        let t = DAY + 10 * H;
        let s = z.login(&login_req("alice"), t).unwrap().session;
        z.ballot(&s, &wire("Normal", &[("Bright", 5), ("VeryBright", 5)]), t).unwrap();
        let snap = z.survey(&s, t + H).unwrap();
        assert!(!snap.recent_rewards.is_empty());
        assert!(matches!(&snap.recent_rewards[0], RewardView::Lottery { winners, .. } if winners == &["alice"]));
        let kinds: Vec<RecordKind> = read_log(&log_path).unwrap().records.iter().map(|r| r.kind).collect();
        assert!(kinds.contains(&RecordKind::Lottery));
    }

    #[test]
    fn sensor_readings_show_in_state() {
        let dir = tempfile::tempdir().unwrap();
        let mut z = open(dir.path());
        let s = SensorSample {
            timestamp_ms: 5,
            humidity_percent: 70.0,
            temperature_deg_f: 68.0,
            pressure_in_hg: 30.0,
            solar_radiation_w_per_m2: 100.0,
        };
        z.record_sensor(s).unwrap();
        assert_eq!(z.snapshot(DAY).latest_sensor.unwrap().humidity_percent, 70.0);
        let bad = SensorSample {
            humidity_percent: 150.0,
            ..s
        };
        assert_eq!(z.record_sensor(bad).unwrap_err().code, ErrorCode::InvalidRequest);
    }
}
