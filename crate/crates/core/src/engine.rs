//! Event-sourced session engine.
//!
//! The mechanism is re-run whenever the set of present voters or any of their
//! ballots changes. Between two such events the outcome and every payment rate
//! are constant, and each present voter is credited `duration * rate` for that
//! segment. Credits are kept in integer milli-points and rounded down per
//! segment, so splitting a segment in two can lose at most one milli-point per
//! user per split.
//!
//! Events must arrive with non-decreasing timestamps. A rejected event leaves
//! the state untouched.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use sha2::{Digest, Sha256};

use crate::mechanism::{self, Ballot, MechanismConfig, MechanismError, TypeVector};
use crate::rewards::{self, PointsAccount, RewardConfig, RewardError, RewardEvent};
use crate::{UserId, HOUR_MS, MILLI};

/// How many reward records the state keeps for display.
pub const RECENT_REWARDS: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EngineError {
    #[error("event at {got} ms precedes last event at {last} ms")]
    OutOfOrder { last: u64, got: u64 },
    #[error("user {0} is already logged in")]
    AlreadyLoggedIn(UserId),
    #[error("user {0} is not logged in")]
    NotLoggedIn(UserId),
    #[error("work hours already started")]
    AlreadyInWorkHours,
    #[error("work hours are not in progress")]
    NotInWorkHours,
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EventKind {
    /// A user arrives; an attached ballot replaces any ballot kept from an
    /// earlier visit.
    Login { user: UserId, ballot: Option<Ballot> },
    Logout { user: UserId },
    BallotChange { user: UserId, ballot: Ballot },
    WorkHoursStart,
    WorkHoursEnd,
    /// No-op split point. Closes and reopens the current segment.
    Mark,
    /// Flat credit for completing a survey.
    SurveyBonus { user: UserId },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionEvent {
    pub timestamp_ms: u64,
    pub kind: EventKind,
}

impl SessionEvent {
    pub fn new(timestamp_ms: u64, kind: EventKind) -> Self {
        Self { timestamp_ms, kind }
    }

    pub fn login(timestamp_ms: u64, user: impl Into<UserId>, ballot: Option<Ballot>) -> Self {
        Self::new(timestamp_ms, EventKind::Login { user: user.into(), ballot })
    }

    pub fn logout(timestamp_ms: u64, user: impl Into<UserId>) -> Self {
        Self::new(timestamp_ms, EventKind::Logout { user: user.into() })
    }

    pub fn ballot(timestamp_ms: u64, user: impl Into<UserId>, ballot: Ballot) -> Self {
        Self::new(timestamp_ms, EventKind::BallotChange { user: user.into(), ballot })
    }

    pub fn mark(timestamp_ms: u64) -> Self {
        Self::new(timestamp_ms, EventKind::Mark)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EngineConfig {
    pub mechanism: MechanismConfig,
    pub rewards: RewardConfig,
    pub survey_bonus_milli: u64,
    /// Whether a fresh engine starts inside work hours. Engines driven by a
    /// work-hours scheduler start outside and wait for `WorkHoursStart`.
    pub initially_active: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mechanism: MechanismConfig::default(),
            rewards: RewardConfig::default(),
            survey_bonus_milli: 50 * MILLI,
            initially_active: true,
        }
    }
}

/// Command for the light actuators; emitted once per outcome transition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActuatorCommand {
    pub sequence: u64,
    pub timestamp_ms: u64,
    pub outcome: usize,
    pub level_percent: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RewardRecord {
    Lottery {
        timestamp_ms: u64,
        ordinal: u64,
        winners: Vec<UserId>,
    },
    CommunalLunch {
        timestamp_ms: u64,
        ordinal: u64,
    },
}

/// A closed interval `[start_ms, end_ms)` with constant voters and ballots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start_ms: u64,
    pub end_ms: u64,
    pub outcome: usize,
    pub members: Vec<SegmentMember>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentMember {
    pub user: UserId,
    pub reported: TypeVector,
    /// Points per hour.
    pub rate: i64,
    pub credited_milli: u64,
}

impl Segment {
    pub fn duration_ms(&self) -> u64 {
        self.end_ms - self.start_ms
    }
}

/// Everything one applied event produced.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Transition {
    pub closed: Option<Segment>,
    pub command: Option<ActuatorCommand>,
    pub rewards: Vec<RewardRecord>,
}

/// Outcome and payment rates in force right now.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CurrentAllocation {
    pub outcome: usize,
    pub rates: BTreeMap<UserId, i64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Member {
    present: bool,
    ballot: Option<Ballot>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct OpenSegment {
    start_ms: u64,
    outcome: usize,
    voters: Vec<(UserId, TypeVector, i64)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EngineState {
    members: BTreeMap<UserId, Member>,
    accounts: BTreeMap<UserId, u64>,
    communal_milli: u64,
    last_timestamp_ms: Option<u64>,
    work_hours: bool,
    open: Option<OpenSegment>,
    outcome: Option<usize>,
    actuator_sequence: u64,
    lotteries_held: u64,
    lunches_held: u64,
    recent_rewards: Vec<RewardRecord>,
}

impl EngineState {
    fn initial(cfg: &EngineConfig) -> Self {
        Self {
            members: BTreeMap::new(),
            accounts: BTreeMap::new(),
            communal_milli: 0,
            last_timestamp_ms: None,
            work_hours: cfg.initially_active,
            open: None,
            outcome: cfg.initially_active.then_some(cfg.mechanism.nominal_outcome),
            actuator_sequence: 0,
            lotteries_held: 0,
            lunches_held: 0,
            recent_rewards: Vec::new(),
        }
    }

    pub fn accrued_milli(&self, user: &UserId) -> u64 {
        self.accounts.get(user).copied().unwrap_or(0)
    }

    pub fn accounts(&self) -> impl Iterator<Item = (&UserId, u64)> {
        self.accounts.iter().map(|(u, &m)| (u, m))
    }

    pub fn points_accounts(&self) -> Vec<PointsAccount> {
        self.accounts
            .iter()
            .map(|(u, &m)| PointsAccount {
                user_id: u.clone(),
                milli_points: m,
            })
            .collect()
    }

    pub fn communal_milli(&self) -> u64 {
        self.communal_milli
    }

    pub fn last_timestamp_ms(&self) -> Option<u64> {
        self.last_timestamp_ms
    }

    pub fn in_work_hours(&self) -> bool {
        self.work_hours
    }

    /// Current setting; `None` outside work hours (manual switches).
    pub fn outcome(&self) -> Option<usize> {
        self.outcome
    }

    pub fn actuator_sequence(&self) -> u64 {
        self.actuator_sequence
    }

    pub fn lotteries_held(&self) -> u64 {
        self.lotteries_held
    }

    pub fn lunches_held(&self) -> u64 {
        self.lunches_held
    }

    pub fn recent_rewards(&self) -> &[RewardRecord] {
        &self.recent_rewards
    }

    pub fn is_present(&self, user: &UserId) -> bool {
        self.members.get(user).is_some_and(|m| m.present)
    }

    /// Present users, voters and spectators alike.
    pub fn present_users(&self) -> impl Iterator<Item = &UserId> {
        self.members.iter().filter(|(_, m)| m.present).map(|(u, _)| u)
    }

    /// Last ballot of `user`, kept across logouts.
    pub fn ballot_of(&self, user: &UserId) -> Option<&Ballot> {
        self.members.get(user).and_then(|m| m.ballot.as_ref())
    }

    /// `None` outside work hours. Before the first event of a work period
    /// the nominal setting holds with nobody paid.
    pub fn current_allocation(&self) -> Option<CurrentAllocation> {
        if !self.work_hours {
            return None;
        }
        let Some(open) = self.open.as_ref() else {
            return Some(CurrentAllocation {
                outcome: self.outcome?,
                rates: BTreeMap::new(),
            });
        };
        Some(CurrentAllocation {
            outcome: open.outcome,
            rates: open
                .voters
                .iter()
                .map(|(u, _, r)| (u.clone(), *r))
                .collect(),
        })
    }

    /// SHA-256 over a canonical encoding of the whole state.
    pub fn digest(&self) -> StateDigest {
        let mut h = Canon(Sha256::new());
        h.u64(self.members.len() as u64);
        for (u, m) in &self.members {
            h.str(u.as_str());
            h.bool(m.present);
            h.ballot(m.ballot.as_ref());
        }
        h.u64(self.accounts.len() as u64);
        for (u, &milli) in &self.accounts {
            h.str(u.as_str());
            h.u64(milli);
        }
        h.u64(self.communal_milli);
        h.opt_u64(self.last_timestamp_ms);
        h.bool(self.work_hours);
        match &self.open {
            None => h.bool(false),
            Some(o) => {
                h.bool(true);
                h.u64(o.start_ms);
                h.u64(o.outcome as u64);
                h.u64(o.voters.len() as u64);
                for (u, t, r) in &o.voters {
                    h.str(u.as_str());
                    h.u64(t.len() as u64);
                    t.costs().iter().for_each(|&c| h.u64(u64::from(c)));
                    h.i64(*r);
                }
            }
        }
        h.opt_u64(self.outcome.map(|x| x as u64));
        h.u64(self.actuator_sequence);
        h.u64(self.lotteries_held);
        h.u64(self.lunches_held);
        h.u64(self.recent_rewards.len() as u64);
        for r in &self.recent_rewards {
            match r {
                RewardRecord::Lottery {
                    timestamp_ms,
                    ordinal,
                    winners,
                } => {
                    h.u8(1);
                    h.u64(*timestamp_ms);
                    h.u64(*ordinal);
                    h.u64(winners.len() as u64);
                    winners.iter().for_each(|w| h.str(w.as_str()));
                }
                RewardRecord::CommunalLunch {
                    timestamp_ms,
                    ordinal,
                } => {
                    h.u8(2);
                    h.u64(*timestamp_ms);
                    h.u64(*ordinal);
                }
            }
        }
        StateDigest(h.0.finalize().into())
    }
}

struct Canon(Sha256);

impl Canon {
    fn u8(&mut self, v: u8) {
        self.0.update([v]);
    }
    fn u64(&mut self, v: u64) {
        self.0.update(v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.update(v.to_le_bytes());
    }
    fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }
    fn opt_u64(&mut self, v: Option<u64>) {
        match v {
            None => self.u8(0),
            Some(x) => {
                self.u8(1);
                self.u64(x);
            }
        }
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.update(s.as_bytes());
    }
    fn ballot(&mut self, b: Option<&Ballot>) {
        match b {
            None => self.u8(0),
            Some(b) => {
                self.u8(1);
                self.u64(b.preferred() as u64);
                self.u64(b.pay_vs().len() as u64);
                for (&alt, &pay) in b.pay_vs() {
                    self.u64(alt as u64);
                    self.u64(u64::from(pay));
                }
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct StateDigest(pub [u8; 32]);

impl fmt::Display for StateDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|b| write!(f, "{b:02x}"))
    }
}

impl fmt::Debug for StateDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StateDigest({self})")
    }
}

/// Milli-points earned at `rate` points per hour over `duration_ms`, rounded
/// down. Negative rates earn nothing.
pub fn segment_credit(duration_ms: u64, rate: i64) -> u64 {
    if rate <= 0 {
        return 0;
    }
    let milli = u128::from(duration_ms) * rate as u128 * u128::from(MILLI) / u128::from(HOUR_MS);
    milli as u64
}

/// Configuration plus state: the single writer for one zone.
#[derive(Clone, Debug)]
pub struct Engine {
    config: EngineConfig,
    state: EngineState,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, EngineError> {
        config.mechanism.validate()?;
        config.rewards.validate()?;
        let state = EngineState::initial(&config);
        Ok(Self { config, state })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn into_state(self) -> EngineState {
        self.state
    }

    pub fn digest(&self) -> StateDigest {
        self.state.digest()
    }

    pub fn current_allocation(&self) -> Option<CurrentAllocation> {
        self.state.current_allocation()
    }

    /// Checks `event` against the current state without applying it.
    pub fn validate(&self, event: &SessionEvent) -> Result<(), EngineError> {
        let s = &self.state;
        if let Some(last) = s.last_timestamp_ms {
            if event.timestamp_ms < last {
                return Err(EngineError::OutOfOrder {
                    last,
                    got: event.timestamp_ms,
                });
            }
        }
        let cfg = &self.config.mechanism;
        match &event.kind {
            EventKind::Login { user, ballot } => {
                if s.is_present(user) {
                    return Err(EngineError::AlreadyLoggedIn(user.clone()));
                }
                if let Some(b) = ballot {
                    b.validate(cfg)?;
                }
            }
            EventKind::Logout { user } => {
                if !s.is_present(user) {
                    return Err(EngineError::NotLoggedIn(user.clone()));
                }
            }
            EventKind::BallotChange { user, ballot } => {
                if !s.is_present(user) {
                    return Err(EngineError::NotLoggedIn(user.clone()));
                }
                ballot.validate(cfg)?;
            }
            EventKind::WorkHoursStart if s.work_hours => return Err(EngineError::AlreadyInWorkHours),
            EventKind::WorkHoursEnd if !s.work_hours => return Err(EngineError::NotInWorkHours),
            EventKind::WorkHoursStart
            | EventKind::WorkHoursEnd
            | EventKind::Mark
            | EventKind::SurveyBonus { .. } => {}
        }
        Ok(())
    }

    /// Applies one event: closes the running segment at the event time and
    /// credits it, updates membership, then reruns the mechanism.
    pub fn apply(&mut self, event: &SessionEvent) -> Result<Transition, EngineError> {
        self.validate(event)?;
        let now = event.timestamp_ms;
        let mut transition = Transition::default();

        if let Some(open) = self.state.open.take() {
            if now > open.start_ms {
                let seg = self.close_segment(open, now);
                self.credit(&seg, &mut transition);
                transition.closed = Some(seg);
            }
        }

        let s = &mut self.state;
        s.last_timestamp_ms = Some(now);
        match &event.kind {
            EventKind::Login { user, ballot } => {
                let m = s.members.entry(user.clone()).or_insert(Member {
                    present: false,
                    ballot: None,
                });
                m.present = true;
                if ballot.is_some() {
                    m.ballot = ballot.clone();
                }
            }
            EventKind::Logout { user } => {
                if let Some(m) = s.members.get_mut(user) {
                    m.present = false;
                }
            }
            EventKind::BallotChange { user, ballot } => {
                if let Some(m) = s.members.get_mut(user) {
                    m.ballot = Some(ballot.clone());
                }
            }
            EventKind::WorkHoursStart => s.work_hours = true,
            EventKind::WorkHoursEnd => {
                s.work_hours = false;
                s.outcome = None;
            }
            EventKind::Mark => {}
            EventKind::SurveyBonus { user } => {
                let bonus = self.config.survey_bonus_milli;
                let prev = s.communal_milli;
                *s.accounts.entry(user.clone()).or_insert(0) += bonus;
                s.communal_milli += bonus;
                self.run_rewards(prev, now, &mut transition);
            }
        }

        if self.state.work_hours {
            let open = self.open_segment(now);
            if self.state.outcome != Some(open.outcome) {
                self.state.outcome = Some(open.outcome);
                self.state.actuator_sequence += 1;
                transition.command = Some(ActuatorCommand {
                    sequence: self.state.actuator_sequence,
                    timestamp_ms: now,
                    outcome: open.outcome,
                    level_percent: self.config.mechanism.settings[open.outcome].level_percent,
                });
            }
            self.state.open = Some(open);
        }
        Ok(transition)
    }

    fn open_segment(&self, now: u64) -> OpenSegment {
        let cfg = &self.config.mechanism;
        let voters: Vec<(UserId, TypeVector)> = self
            .state
            .members
            .iter()
            .filter(|(_, m)| m.present)
            .filter_map(|(u, m)| {
                let b = m.ballot.as_ref()?;
                let t = mechanism::ballot_to_type(b, cfg).expect("ballots are validated on entry");
                Some((u.clone(), t))
            })
            .collect();
        if voters.is_empty() {
            return OpenSegment {
                start_ms: now,
                outcome: cfg.nominal_outcome,
                voters: Vec::new(),
            };
        }
        let profile = mechanism::Profile::new(voters.iter().cloned())
            .expect("member ids are unique map keys");
        let alloc = mechanism::allocate(&profile, cfg).expect("profile is non-empty and valid");
        OpenSegment {
            start_ms: now,
            outcome: alloc.outcome,
            voters: voters
                .into_iter()
                .zip(alloc.payments)
                .map(|((u, t), p)| (u, t, p))
                .collect(),
        }
    }

    fn close_segment(&self, open: OpenSegment, end_ms: u64) -> Segment {
        let duration = end_ms - open.start_ms;
        Segment {
            start_ms: open.start_ms,
            end_ms,
            outcome: open.outcome,
            members: open
                .voters
                .into_iter()
                .map(|(user, reported, rate)| SegmentMember {
                    user,
                    reported,
                    rate,
                    credited_milli: segment_credit(duration, rate),
                })
                .collect(),
        }
    }

    fn credit(&mut self, seg: &Segment, transition: &mut Transition) {
        let prev = self.state.communal_milli;
        for m in &seg.members {
            *self.state.accounts.entry(m.user.clone()).or_insert(0) += m.credited_milli;
            self.state.communal_milli += m.credited_milli;
        }
        self.run_rewards(prev, seg.end_ms, transition);
    }

    fn run_rewards(&mut self, prev_total: u64, now: u64, transition: &mut Transition) {
        let rcfg = &self.config.rewards;
        let s = &mut self.state;
        for ev in rewards::check_thresholds(prev_total, s.communal_milli, rcfg) {
            let record = match ev {
                RewardEvent::Lottery => {
                    let ordinal = s.lotteries_held;
                    s.lotteries_held += 1;
                    let accounts = s.points_accounts();
                    let winners = rewards::run_lottery(
                        &accounts,
                        rcfg.prizes_per_lottery,
                        rcfg.lottery_seed(ordinal),
                    )
                    .unwrap_or_default();
                    RewardRecord::Lottery {
                        timestamp_ms: now,
                        ordinal,
                        winners,
                    }
                }
                RewardEvent::CommunalLunch => {
                    let ordinal = s.lunches_held;
                    s.lunches_held += 1;
                    RewardRecord::CommunalLunch {
                        timestamp_ms: now,
                        ordinal,
                    }
                }
            };
            if s.recent_rewards.len() == RECENT_REWARDS {
                s.recent_rewards.remove(0);
            }
            s.recent_rewards.push(record.clone());
            transition.rewards.push(record);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("event {index} rejected: {source}")]
pub struct ReplayError {
    pub index: usize,
    pub source: EngineError,
}

/// Folds `events` into a fresh engine.
pub fn replay<'a>(
    config: EngineConfig,
    events: impl IntoIterator<Item = &'a SessionEvent>,
) -> Result<Engine, ReplayError> {
    replay_with(config, events, |_, _| {})
}

/// Like [`replay`], handing every transition to `observe` as it happens.
pub fn replay_with<'a>(
    config: EngineConfig,
    events: impl IntoIterator<Item = &'a SessionEvent>,
    mut observe: impl FnMut(usize, &Transition),
) -> Result<Engine, ReplayError> {
    let mut engine = Engine::new(config).map_err(|source| ReplayError { index: 0, source })?;
    for (index, e) in events.into_iter().enumerate() {
        let t = engine.apply(e).map_err(|source| ReplayError { index, source })?;
        observe(index, &t);
    }
    Ok(engine)
}
