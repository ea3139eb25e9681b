//! Line-delimited JSON records for the event log and the HTTP API.
//!
//! Settings are referred to by label (`"Bright"`), never by index, so a log
//! stays readable and survives reordering of the configured settings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use vcglight_core::engine::{EventKind, RewardRecord, SessionEvent};
use vcglight_core::{Ballot, MechanismConfig, MechanismError, UserId};

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("unknown setting label `{0}`")]
    UnknownSetting(String),
    #[error("record kind `{0}` requires a user_id")]
    MissingUser(&'static str),
    #[error("record kind `{0}` requires a ballot")]
    MissingBallot(&'static str),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
}

/// A ballot as it appears on the wire.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireBallot {
    pub preferred: String,
    #[serde(default)]
    pub pay_vs: BTreeMap<String, u32>,
}

impl WireBallot {
    pub fn from_ballot(b: &Ballot, cfg: &MechanismConfig) -> Self {
        Self {
            preferred: cfg.settings[b.preferred()].label.clone(),
            pay_vs: b
                .pay_vs()
                .iter()
                .map(|(&a, &p)| (cfg.settings[a].label.clone(), p))
                .collect(),
        }
    }

    pub fn to_ballot(&self, cfg: &MechanismConfig) -> Result<Ballot, WireError> {
        let index = |label: &str| {
            cfg.index_of_label(label)
                .ok_or_else(|| WireError::UnknownSetting(label.to_owned()))
        };
        let preferred = index(&self.preferred)?;
        let pay = self
            .pay_vs
            .iter()
            .map(|(label, &p)| Ok((index(label)?, p)))
            .collect::<Result<Vec<_>, WireError>>()?;
        Ok(Ballot::new(preferred, pay, cfg)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Login,
    Logout,
    BallotChange,
    WorkHoursStart,
    WorkHoursEnd,
    Mark,
    SurveyBonus,
    Lottery,
    CommunalLunch,
}

impl RecordKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Login => "login",
            Self::Logout => "logout",
            Self::BallotChange => "ballot_change",
            Self::WorkHoursStart => "work_hours_start",
            Self::WorkHoursEnd => "work_hours_end",
            Self::Mark => "mark",
            Self::SurveyBonus => "survey_bonus",
            Self::Lottery => "lottery",
            Self::CommunalLunch => "communal_lunch",
        }
    }

    /// Annotations record derived results and are skipped on replay.
    pub fn is_annotation(self) -> bool {
        matches!(self, Self::Lottery | Self::CommunalLunch)
    }
}

/// One line of the event log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub timestamp_ms: u64,
    pub kind: RecordKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ballot: Option<WireBallot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordinal: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub winners: Option<Vec<String>>,
}

impl LogRecord {
    fn bare(timestamp_ms: u64, kind: RecordKind) -> Self {
        Self {
            timestamp_ms,
            kind,
            user_id: None,
            ballot: None,
            ordinal: None,
            winners: None,
        }
    }

    pub fn from_event(e: &SessionEvent, cfg: &MechanismConfig) -> Self {
        let t = e.timestamp_ms;
        let with_user = |kind, user: &UserId| Self {
            user_id: Some(user.as_str().to_owned()),
            ..Self::bare(t, kind)
        };
        match &e.kind {
            EventKind::Login { user, ballot } => Self {
                ballot: ballot.as_ref().map(|b| WireBallot::from_ballot(b, cfg)),
                ..with_user(RecordKind::Login, user)
            },
            EventKind::Logout { user } => with_user(RecordKind::Logout, user),
            EventKind::BallotChange { user, ballot } => Self {
                ballot: Some(WireBallot::from_ballot(ballot, cfg)),
                ..with_user(RecordKind::BallotChange, user)
            },
            EventKind::WorkHoursStart => Self::bare(t, RecordKind::WorkHoursStart),
            EventKind::WorkHoursEnd => Self::bare(t, RecordKind::WorkHoursEnd),
            EventKind::Mark => Self::bare(t, RecordKind::Mark),
            EventKind::SurveyBonus { user } => with_user(RecordKind::SurveyBonus, user),
        }
    }

    pub fn from_reward(r: &RewardRecord) -> Self {
        match r {
            RewardRecord::Lottery {
                timestamp_ms,
                ordinal,
                winners,
            } => Self {
                ordinal: Some(*ordinal),
                winners: Some(winners.iter().map(|w| w.as_str().to_owned()).collect()),
                ..Self::bare(*timestamp_ms, RecordKind::Lottery)
            },
            RewardRecord::CommunalLunch {
                timestamp_ms,
                ordinal,
            } => Self {
                ordinal: Some(*ordinal),
                ..Self::bare(*timestamp_ms, RecordKind::CommunalLunch)
            },
        }
    }

    /// The session event this record carries; `None` for annotations.
    pub fn to_event(&self, cfg: &MechanismConfig) -> Result<Option<SessionEvent>, WireError> {
        let kind = self.kind;
        let user = || {
            self.user_id
                .as_deref()
                .map(UserId::from)
                .ok_or(WireError::MissingUser(kind.name()))
        };
        let ballot = || self.ballot.as_ref().map(|b| b.to_ballot(cfg)).transpose();
        let ek = match kind {
            RecordKind::Login => EventKind::Login {
                user: user()?,
                ballot: ballot()?,
            },
            RecordKind::Logout => EventKind::Logout { user: user()? },
            RecordKind::BallotChange => EventKind::BallotChange {
                user: user()?,
                ballot: ballot()?.ok_or(WireError::MissingBallot(kind.name()))?,
            },
            RecordKind::WorkHoursStart => EventKind::WorkHoursStart,
            RecordKind::WorkHoursEnd => EventKind::WorkHoursEnd,
            RecordKind::Mark => EventKind::Mark,
            RecordKind::SurveyBonus => EventKind::SurveyBonus { user: user()? },
            RecordKind::Lottery | RecordKind::CommunalLunch => return Ok(None),
        };
        Ok(Some(SessionEvent::new(self.timestamp_ms, ek)))
    }

    /// Single-line JSON, without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log records always serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> MechanismConfig {
        MechanismConfig::default()
    }

    #[test]
    fn ballot_line_uses_labels() {
        let b = Ballot::new(1, [(0, 30), (2, 15)], &cfg()).unwrap();
        let rec = LogRecord::from_event(&SessionEvent::ballot(5, "alice", b.clone()), &cfg());
        assert_eq!(
            rec.to_line(),
            r#"{"timestamp_ms":5,"kind":"ballot_change","user_id":"alice","ballot":{"preferred":"Bright","pay_vs":{"Normal":30,"VeryBright":15}}}"#
        );
        let back: LogRecord = serde_json::from_str(&rec.to_line()).unwrap();
        assert_eq!(
            back.to_event(&cfg()).unwrap(),
            Some(SessionEvent::ballot(5, "alice", b))
        );
    }

    #[test]
    fn every_event_kind_round_trips() {
        let b = Ballot::max_vote(0, &cfg()).unwrap();
        let events = [
            SessionEvent::new(0, EventKind::WorkHoursStart),
            SessionEvent::login(1, "a", None),
            SessionEvent::login(2, "b", Some(b.clone())),
            SessionEvent::ballot(3, "a", b),
            SessionEvent::mark(4),
            SessionEvent::new(5, EventKind::SurveyBonus { user: "a".into() }),
            SessionEvent::logout(6, "a"),
            SessionEvent::new(7, EventKind::WorkHoursEnd),
        ];
        for e in events {
            let line = LogRecord::from_event(&e, &cfg()).to_line();
            let rec: LogRecord = serde_json::from_str(&line).unwrap();
            assert_eq!(rec.to_event(&cfg()).unwrap(), Some(e));
        }
    }

    #[test]
    fn annotations_are_skipped() {
        let r = RewardRecord::Lottery {
            timestamp_ms: 9,
            ordinal: 0,
            winners: vec!["a".into()],
        };
        let rec = LogRecord::from_reward(&r);
        assert_eq!(
            rec.to_line(),
            r#"{"timestamp_ms":9,"kind":"lottery","ordinal":0,"winners":["a"]}"#
        );
        assert_eq!(rec.to_event(&cfg()).unwrap(), None);
    }

    #[test]
    fn bad_records_are_rejected() {
        let rec: LogRecord =
            serde_json::from_str(r#"{"timestamp_ms":1,"kind":"logout"}"#).unwrap();
        assert!(matches!(rec.to_event(&cfg()), Err(WireError::MissingUser(_))));

        let rec: LogRecord = serde_json::from_str(
            r#"{"timestamp_ms":1,"kind":"ballot_change","user_id":"a","ballot":{"preferred":"Dim"}}"#,
        )
        .unwrap();
        assert!(matches!(rec.to_event(&cfg()), Err(WireError::UnknownSetting(_))));

        let over = WireBallot {
            preferred: "Bright".into(),
            pay_vs: [("Normal".to_owned(), 101)].into(),
        };
        assert!(matches!(over.to_ballot(&cfg()), Err(WireError::Mechanism(_))));
    }
}
