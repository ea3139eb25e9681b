//! The modified VCG mechanism over a finite set of outcome settings.
//!
//! Types are per-hour cost vectors bounded by `lambda_max`. The mechanism picks
//! the welfare-maximizing setting and pays each present user
//! `n * lambda_max - sum_{j != i} cost_j(outcome)`, which makes every truthful
//! user weakly better off than under the nominal setting with no payment.
//!
//! All arithmetic is exact integer arithmetic in points per hour.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::UserId;

/// Default upper bound on any reported cost, in points per hour.
pub const DEFAULT_LAMBDA_MAX: u32 = 100;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MechanismError {
    #[error("outcome index {index} out of range for {count} settings")]
    InvalidOutcome { index: usize, count: usize },
    #[error("user index {index} out of range for {count} users")]
    InvalidUser { index: usize, count: usize },
    #[error("profile has no users")]
    EmptyProfile,
    #[error("cost vector has {got} entries, expected {expected}")]
    WrongLength { got: usize, expected: usize },
    #[error("value {value} outside [0, {max}]")]
    OutOfRange { value: u32, max: u32 },
    #[error("duplicate user id {0}")]
    DuplicateUser(UserId),
    #[error("invalid ballot: {0}")]
    InvalidBallot(&'static str),
    #[error("invalid mechanism config: {0}")]
    InvalidConfig(&'static str),
}

/// One selectable level of the shared resource.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutcomeSetting {
    pub index: usize,
    pub label: String,
    pub level_percent: u8,
}

impl OutcomeSetting {
    pub fn new(index: usize, label: impl Into<String>, level_percent: u8) -> Self {
        Self {
            index,
            label: label.into(),
            level_percent,
        }
    }
}

/// `Normal` (33%), `Bright` (67%), `VeryBright` (100%).
pub fn default_settings() -> Vec<OutcomeSetting> {
    alloc::vec![
        OutcomeSetting::new(0, "Normal", 33),
        OutcomeSetting::new(1, "Bright", 67),
        OutcomeSetting::new(2, "VeryBright", 100),
    ]
}

/// How to pick among several welfare-maximizing settings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[non_exhaustive]
pub enum TieBreak {
    /// The tied setting with the lowest `level_percent`.
    #[default]
    DimmestWins,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MechanismConfig {
    pub lambda_max: u32,
    pub settings: Vec<OutcomeSetting>,
    /// Setting that holds without the mechanism; defines each user's outside option.
    pub nominal_outcome: usize,
    /// Per-setting operating cost of a virtual participant. It enters welfare
    /// and every user's externality term, never receives a payment and does
    /// not count towards `n`.
    pub virtual_cost: Option<Vec<u32>>,
    pub tie_break: TieBreak,
}

impl Default for MechanismConfig {
    fn default() -> Self {
        Self {
            lambda_max: DEFAULT_LAMBDA_MAX,
            settings: default_settings(),
            nominal_outcome: 2,
            virtual_cost: None,
            tie_break: TieBreak::DimmestWins,
        }
    }
}

impl MechanismConfig {
    pub fn with_virtual_cost(mut self, costs: Vec<u32>) -> Self {
        self.virtual_cost = Some(costs);
        self
    }

    pub fn outcome_count(&self) -> usize {
        self.settings.len()
    }

    pub fn setting(&self, index: usize) -> Result<&OutcomeSetting, MechanismError> {
        self.settings.get(index).ok_or(MechanismError::InvalidOutcome {
            index,
            count: self.settings.len(),
        })
    }

    pub fn index_of_label(&self, label: &str) -> Option<usize> {
        self.settings.iter().position(|s| s.label == label)
    }

    pub fn index_of_level(&self, level_percent: u8) -> Option<usize> {
        self.settings
            .iter()
            .position(|s| s.level_percent == level_percent)
    }

    pub fn validate(&self) -> Result<(), MechanismError> {
        use MechanismError::InvalidConfig;
        if self.lambda_max == 0 {
            return Err(InvalidConfig("lambda_max must be positive"));
        }
        if self.settings.is_empty() {
            return Err(InvalidConfig("at least one setting is required"));
        }
        for (i, s) in self.settings.iter().enumerate() {
            if s.index != i {
                return Err(InvalidConfig("setting indices must be 0..m in order"));
            }
            if i > 0 && self.settings[i - 1].level_percent >= s.level_percent {
                return Err(InvalidConfig("level_percent must increase with index"));
            }
            if self.settings[..i].iter().any(|o| o.label == s.label) {
                return Err(InvalidConfig("setting labels must be unique"));
            }
        }
        if self.nominal_outcome >= self.settings.len() {
            return Err(InvalidConfig("nominal outcome is not a valid setting"));
        }
        if let Some(v) = &self.virtual_cost {
            if v.len() != self.settings.len() {
                return Err(InvalidConfig("virtual cost needs one entry per setting"));
            }
        }
        Ok(())
    }

    fn check_outcome(&self, x: usize) -> Result<(), MechanismError> {
        self.setting(x).map(|_| ())
    }

    fn virtual_cost_at(&self, x: usize) -> i64 {
        self.virtual_cost
            .as_ref()
            .map_or(0, |v| i64::from(v[x]))
    }
}

/// A user's per-hour cost for each setting.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TypeVector(Vec<u32>);

impl TypeVector {
    /// Builds a type and checks length and bounds against `cfg`.
    pub fn new(costs: Vec<u32>, cfg: &MechanismConfig) -> Result<Self, MechanismError> {
        let t = Self(costs);
        t.validate(cfg)?;
        Ok(t)
    }

    pub fn costs(&self) -> &[u32] {
        &self.0
    }

    pub fn cost(&self, x: usize) -> Option<u32> {
        self.0.get(x).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, cfg: &MechanismConfig) -> Result<(), MechanismError> {
        if self.0.len() != cfg.outcome_count() {
            return Err(MechanismError::WrongLength {
                got: self.0.len(),
                expected: cfg.outcome_count(),
            });
        }
        match self.0.iter().find(|&&c| c > cfg.lambda_max) {
            Some(&value) => Err(MechanismError::OutOfRange {
                value,
                max: cfg.lambda_max,
            }),
            None => Ok(()),
        }
    }

    pub(crate) fn costs_mut(&mut self) -> &mut [u32] {
        &mut self.0
    }
}

impl From<Vec<u32>> for TypeVector {
    fn from(costs: Vec<u32>) -> Self {
        Self(costs)
    }
}

impl<const M: usize> From<[u32; M]> for TypeVector {
    fn from(costs: [u32; M]) -> Self {
        Self(costs.to_vec())
    }
}

/// A portal vote: the preferred setting plus how many points per hour the user
/// would pay to keep it over each alternative.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Ballot {
    preferred: usize,
    pay_vs: BTreeMap<usize, u32>,
}

impl Ballot {
    pub fn new(
        preferred: usize,
        pay_vs: impl IntoIterator<Item = (usize, u32)>,
        cfg: &MechanismConfig,
    ) -> Result<Self, MechanismError> {
        let b = Self {
            preferred,
            pay_vs: pay_vs.into_iter().collect(),
        };
        b.validate(cfg)?;
        Ok(b)
    }

    /// The one-click maximal vote: `lambda_max` against every alternative.
    pub fn max_vote(preferred: usize, cfg: &MechanismConfig) -> Result<Self, MechanismError> {
        let pay = (0..cfg.outcome_count())
            .filter(|&a| a != preferred)
            .map(|a| (a, cfg.lambda_max));
        Self::new(preferred, pay, cfg)
    }

    pub fn preferred(&self) -> usize {
        self.preferred
    }

    pub fn pay_vs(&self) -> &BTreeMap<usize, u32> {
        &self.pay_vs
    }

    pub fn pay_against(&self, alternative: usize) -> Option<u32> {
        self.pay_vs.get(&alternative).copied()
    }

    pub fn validate(&self, cfg: &MechanismConfig) -> Result<(), MechanismError> {
        cfg.check_outcome(self.preferred)?;
        if self.pay_vs.len() + 1 != cfg.outcome_count() {
            return Err(MechanismError::InvalidBallot(
                "need exactly one amount per non-preferred setting",
            ));
        }
        for (&alt, &pay) in &self.pay_vs {
            cfg.check_outcome(alt)?;
            if alt == self.preferred {
                return Err(MechanismError::InvalidBallot(
                    "preferred setting cannot carry an amount",
                ));
            }
            if pay > cfg.lambda_max {
                return Err(MechanismError::OutOfRange {
                    value: pay,
                    max: cfg.lambda_max,
                });
            }
        }
        Ok(())
    }

    /// Returns a copy with the amount against `alternative` replaced.
    pub fn with_pay(
        &self,
        alternative: usize,
        pay: u32,
        cfg: &MechanismConfig,
    ) -> Result<Self, MechanismError> {
        let mut b = self.clone();
        b.pay_vs.insert(alternative, pay);
        b.validate(cfg)?;
        Ok(b)
    }
}

/// Reported (or true) types of the users present, in a fixed order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Profile {
    user_ids: Vec<UserId>,
    types: Vec<TypeVector>,
}

impl Profile {
    pub fn new(
        entries: impl IntoIterator<Item = (UserId, TypeVector)>,
    ) -> Result<Self, MechanismError> {
        let (user_ids, types): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        for (i, id) in user_ids.iter().enumerate() {
            if user_ids[..i].contains(id) {
                return Err(MechanismError::DuplicateUser(id.clone()));
            }
        }
        if let Some(first) = types.first() {
            if let Some(t) = types.iter().find(|t| t.len() != first.len()) {
                return Err(MechanismError::WrongLength {
                    got: t.len(),
                    expected: first.len(),
                });
            }
        }
        Ok(Self { user_ids, types })
    }

    /// Profile with generated ids `u1..un`.
    pub fn from_types(types: impl IntoIterator<Item = TypeVector>) -> Result<Self, MechanismError> {
        Self::new(
            types
                .into_iter()
                .enumerate()
                .map(|(i, t)| (UserId::new(alloc::format!("u{}", i + 1)), t)),
        )
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn user_ids(&self) -> &[UserId] {
        &self.user_ids
    }

    pub fn types(&self) -> &[TypeVector] {
        &self.types
    }

    pub fn type_of(&self, i: usize) -> Result<&TypeVector, MechanismError> {
        self.types.get(i).ok_or(MechanismError::InvalidUser {
            index: i,
            count: self.types.len(),
        })
    }

    /// The profile of everyone except user `i`.
    pub fn without(&self, i: usize) -> Result<Self, MechanismError> {
        self.type_of(i)?;
        let mut p = self.clone();
        p.user_ids.remove(i);
        p.types.remove(i);
        Ok(p)
    }

    /// Swaps in a new report for user `i`, returning the previous one.
    pub fn replace_type(&mut self, i: usize, t: TypeVector) -> Result<TypeVector, MechanismError> {
        let count = self.types.len();
        let slot = self
            .types
            .get_mut(i)
            .ok_or(MechanismError::InvalidUser { index: i, count })?;
        Ok(core::mem::replace(slot, t))
    }

    pub(crate) fn type_mut(&mut self, i: usize) -> &mut TypeVector {
        &mut self.types[i]
    }

    fn validate(&self, cfg: &MechanismConfig) -> Result<(), MechanismError> {
        if self.is_empty() {
            return Err(MechanismError::EmptyProfile);
        }
        self.types.iter().try_for_each(|t| t.validate(cfg))
    }

    fn column_cost(&self, x: usize) -> i64 {
        self.types.iter().map(|t| i64::from(t.0[x])).sum()
    }
}

/// Outcome and per-user payment rates for one profile.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Allocation {
    pub outcome: usize,
    /// Welfare of every setting, indexed by setting.
    pub welfare: Vec<i64>,
    /// Payment rate per user, in profile order.
    pub payments: Vec<i64>,
}

/// `-(sum_i cost_i(x) + virtual_cost(x))`.
pub fn social_welfare(
    x: usize,
    profile: &Profile,
    cfg: &MechanismConfig,
) -> Result<i64, MechanismError> {
    cfg.check_outcome(x)?;
    profile.validate(cfg)?;
    Ok(-(profile.column_cost(x) + cfg.virtual_cost_at(x)))
}

pub fn welfare_vector(profile: &Profile, cfg: &MechanismConfig) -> Result<Vec<i64>, MechanismError> {
    profile.validate(cfg)?;
    Ok((0..cfg.outcome_count())
        .map(|x| -(profile.column_cost(x) + cfg.virtual_cost_at(x)))
        .collect())
}

/// Applies the tie-break rule to a welfare vector. Pure in `welfare`.
pub fn select_outcome(welfare: &[i64], cfg: &MechanismConfig) -> usize {
    match cfg.tie_break {
        TieBreak::DimmestWins => {
            let best = welfare.iter().copied().max().unwrap_or(0);
            (0..welfare.len())
                .filter(|&x| welfare[x] == best)
                .min_by_key(|&x| cfg.settings[x].level_percent)
                .unwrap_or(0)
        }
    }
}

/// The welfare-maximizing setting for the reported profile.
pub fn choose_outcome(profile: &Profile, cfg: &MechanismConfig) -> Result<usize, MechanismError> {
    let welfare = welfare_vector(profile, cfg)?;
    Ok(select_outcome(&welfare, cfg))
}

fn payment_at(i: usize, outcome: usize, profile: &Profile, cfg: &MechanismConfig) -> i64 {
    let n = profile.len() as i64;
    let pivot = n * i64::from(cfg.lambda_max);
    let others = profile.column_cost(outcome) - i64::from(profile.types[i].0[outcome]);
    pivot - others - cfg.virtual_cost_at(outcome)
}

/// Payment rate of user `i`: `n * lambda_max - sum_{j != i} cost_j(f)`, with
/// the virtual participant's cost included in the sum when configured.
pub fn payment_rate(
    i: usize,
    profile: &Profile,
    cfg: &MechanismConfig,
) -> Result<i64, MechanismError> {
    profile.type_of(i)?;
    let outcome = choose_outcome(profile, cfg)?;
    Ok(payment_at(i, outcome, profile, cfg))
}

pub fn allocate(profile: &Profile, cfg: &MechanismConfig) -> Result<Allocation, MechanismError> {
    let welfare = welfare_vector(profile, cfg)?;
    let outcome = select_outcome(&welfare, cfg);
    let payments = (0..profile.len())
        .map(|i| payment_at(i, outcome, profile, cfg))
        .collect();
    Ok(Allocation {
        outcome,
        welfare,
        payments,
    })
}

/// Quasilinear utility `p - cost(x)`.
pub fn utility(x: usize, payment: i64, ty: &TypeVector) -> Result<i64, MechanismError> {
    let cost = ty.cost(x).ok_or(MechanismError::InvalidOutcome {
        index: x,
        count: ty.len(),
    })?;
    Ok(payment - i64::from(cost))
}

/// Maps a ballot to a type: zero cost at the preferred setting and the stated
/// willingness to pay at each alternative.
pub fn ballot_to_type(b: &Ballot, cfg: &MechanismConfig) -> Result<TypeVector, MechanismError> {
    b.validate(cfg)?;
    let mut costs = alloc::vec![0; cfg.outcome_count()];
    for (&alt, &pay) in &b.pay_vs {
        costs[alt] = pay;
    }
    Ok(TypeVector(costs))
}

/// Per-user ex-post individual rationality check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IrCheck {
    pub holds: bool,
    /// `u(f, p_i) - u(x0, 0)`; non-negative exactly when `holds`.
    pub margin: i64,
}

/// Treats `profile` as the true types and compares every user's mechanism
/// utility with the outside option of the nominal setting and no payment.
pub fn ir_holds(profile: &Profile, cfg: &MechanismConfig) -> Result<Vec<IrCheck>, MechanismError> {
    let alloc = allocate(profile, cfg)?;
    profile
        .types()
        .iter()
        .zip(&alloc.payments)
        .map(|(t, &p)| {
            let inside = utility(alloc.outcome, p, t)?;
            let outside = utility(cfg.nominal_outcome, 0, t)?;
            let margin = inside - outside;
            Ok(IrCheck {
                holds: margin >= 0,
                margin,
            })
        })
        .collect()
}
