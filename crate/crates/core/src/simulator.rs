//! Agent-based harness around the mechanism and the session engine.
//!
//! * [`deviation_search`] enumerates every grid-valued misreport of one user
//!   and reports the best utility gain over telling the truth.
//! * [`ir_sweep`] samples truthful profiles and counts individual-rationality
//!   and payment-bound violations.
//! * [`run_scenario`] drives an [`Engine`] with scheduled agents over several
//!   episodes (work days) and records what every agent actually experienced.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{self, Engine, EngineConfig, EngineError, EventKind, Segment, SessionEvent};
use crate::mechanism::{self, Ballot, MechanismConfig, MechanismError, Profile, TypeVector};
use crate::UserId;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("grid step {step} must be positive and divide lambda_max {lambda_max}")]
    GridStep { step: u32, lambda_max: u32 },
    #[error("agent {agent}: {reason}")]
    InvalidAgent {
        agent: UserId,
        reason: &'static str,
    },
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeviationResult {
    /// Best report found; the truthful report unless something strictly beats it.
    pub best_report: TypeVector,
    /// Best utility minus truthful utility.
    pub gain: i64,
    pub truthful_utility: i64,
    pub reports_checked: u64,
}

fn check_grid(step: u32, cfg: &MechanismConfig) -> Result<(), SimError> {
    if step == 0 || !cfg.lambda_max.is_multiple_of(step) {
        return Err(SimError::GridStep {
            step,
            lambda_max: cfg.lambda_max,
        });
    }
    Ok(())
}

/// Advances `costs` to the next vector of `{0, step, .., max}^m`. Returns
/// `false` after the last one.
fn next_grid_point(costs: &mut [u32], step: u32, max: u32) -> bool {
    for c in costs.iter_mut() {
        if *c + step <= max {
            *c += step;
            return true;
        }
        *c = 0;
    }
    false
}

/// Utility of user `i` with true type `truth` when the reports are `reports`.
fn realized_utility(
    i: usize,
    truth: &TypeVector,
    reports: &Profile,
    cfg: &MechanismConfig,
) -> Result<i64, MechanismError> {
    let alloc = mechanism::allocate(reports, cfg)?;
    mechanism::utility(alloc.outcome, alloc.payments[i], truth)
}

/// Exhaustive search over every grid-valued report of user `i`, everyone else
/// reporting `profile` truthfully.
pub fn deviation_search(
    profile: &Profile,
    i: usize,
    grid_step: u32,
    cfg: &MechanismConfig,
) -> Result<DeviationResult, SimError> {
    check_grid(grid_step, cfg)?;
    let truth = profile.type_of(i)?.clone();
    let truthful_utility = realized_utility(i, &truth, profile, cfg)?;

    let mut reports = profile.clone();
    let mut best_report = truth.clone();
    let mut best_utility = truthful_utility;
    let mut checked = 0;
    reports.replace_type(i, TypeVector::from(alloc::vec![0; cfg.outcome_count()]))?;
    loop {
        checked += 1;
        let u = realized_utility(i, &truth, &reports, cfg)?;
        if u > best_utility {
            best_utility = u;
            best_report = reports.type_of(i)?.clone();
        }
        if !next_grid_point(reports.type_mut(i).costs_mut(), grid_step, cfg.lambda_max) {
            break;
        }
    }
    Ok(DeviationResult {
        best_report,
        gain: best_utility - truthful_utility,
        truthful_utility,
        reports_checked: checked,
    })
}

/// Source of random truthful profiles.
pub trait ProfileSampler {
    fn sample(&mut self) -> Profile;
}

impl<F: FnMut() -> Profile> ProfileSampler for F {
    fn sample(&mut self) -> Profile {
        self()
    }
}

/// Profiles with a uniform number of users and uniform grid-valued costs.
pub struct UniformProfiles {
    rng: ChaCha8Rng,
    users: RangeInclusive<usize>,
    step: u32,
    outcomes: usize,
    lambda_max: u32,
}

impl UniformProfiles {
    pub fn new(
        seed: u64,
        users: RangeInclusive<usize>,
        step: u32,
        cfg: &MechanismConfig,
    ) -> Result<Self, SimError> {
        check_grid(step, cfg)?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            users,
            step,
            outcomes: cfg.outcome_count(),
            lambda_max: cfg.lambda_max,
        })
    }
}

impl ProfileSampler for UniformProfiles {
    fn sample(&mut self) -> Profile {
        let n = self.rng.gen_range(self.users.clone());
        let levels = self.lambda_max / self.step;
        let types = (0..n).map(|_| {
            let costs: Vec<u32> = (0..self.outcomes)
                .map(|_| self.rng.gen_range(0..=levels) * self.step)
                .collect();
            TypeVector::from(costs)
        });
        Profile::from_types(types).expect("generated ids are distinct")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IrReport {
    pub trials: usize,
    pub users_checked: usize,
    /// Users whose mechanism utility fell below the outside option.
    pub ir_violations: usize,
    /// Payments outside `[lambda_max - max virtual cost, n * lambda_max]`.
    pub payment_bound_violations: usize,
    pub min_margin: Option<i64>,
}

impl IrReport {
    pub fn violation_rate(&self) -> f64 {
        if self.users_checked == 0 {
            0.0
        } else {
            self.ir_violations as f64 / self.users_checked as f64
        }
    }
}

/// Samples `trials` truthful profiles and checks ex-post individual
/// rationality and payment bounds for every user.
pub fn ir_sweep(
    sampler: &mut impl ProfileSampler,
    trials: usize,
    cfg: &MechanismConfig,
) -> Result<IrReport, SimError> {
    let max_virtual = cfg
        .virtual_cost
        .as_ref()
        .and_then(|v| v.iter().max().copied())
        .unwrap_or(0);
    let mut report = IrReport {
        trials,
        ..IrReport::default()
    };
    for _ in 0..trials {
        let profile = sampler.sample();
        let n = profile.len() as i64;
        let lo = i64::from(cfg.lambda_max) - i64::from(max_virtual);
        let hi = n * i64::from(cfg.lambda_max);
        let alloc = mechanism::allocate(&profile, cfg)?;
        report.payment_bound_violations += alloc
            .payments
            .iter()
            .filter(|&&p| p < lo || p > hi)
            .count();
        for check in mechanism::ir_holds(&profile, cfg)? {
            report.users_checked += 1;
            if !check.holds {
                report.ir_violations += 1;
            }
            report.min_margin = Some(report.min_margin.map_or(check.margin, |m| m.min(check.margin)));
        }
    }
    Ok(report)
}

/// Truthful ballot for `t`: the cheapest setting (dimmest on ties) with the
/// cost differences to every alternative.
pub fn truthful_ballot(t: &TypeVector, cfg: &MechanismConfig) -> Result<Ballot, MechanismError> {
    t.validate(cfg)?;
    let costs = t.costs();
    let preferred = (0..costs.len())
        .min_by_key(|&x| (costs[x], cfg.settings[x].level_percent))
        .ok_or(MechanismError::EmptyProfile)?;
    Ballot::new(
        preferred,
        (0..costs.len())
            .filter(|&a| a != preferred)
            .map(|a| (a, costs[a] - costs[preferred])),
        cfg,
    )
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Policy {
    Truthful,
    FixedMisreport(Ballot),
    /// Starts from the one-click maximal vote for its favourite setting and
    /// lowers one willingness-to-pay amount by `step` per episode, keeping the
    /// change whenever realized utility does not drop.
    CompromiseLearner { step: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AgentSpec {
    pub id: UserId,
    pub true_type: TypeVector,
    pub policy: Policy,
    /// `(login, logout)` offsets within each episode, in milliseconds.
    pub schedule: Vec<(u64, u64)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenarioConfig {
    pub engine: EngineConfig,
    pub episodes: u32,
    pub start_ms: u64,
    /// Work-hours length of one episode.
    pub horizon_ms: u64,
    /// Distance between consecutive episode starts.
    pub stride_ms: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            engine: EngineConfig {
                initially_active: false,
                ..EngineConfig::default()
            },
            episodes: 1,
            start_ms: 0,
            horizon_ms: 8 * crate::HOUR_MS,
            stride_ms: 24 * crate::HOUR_MS,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EpisodeSummary {
    /// Ballot each agent reported during the episode.
    pub played: BTreeMap<UserId, Ballot>,
    /// Report each agent stands by after the episode (learners: the accepted
    /// report; others: what they played).
    pub standing: BTreeMap<UserId, Ballot>,
    /// Realized utility in milli-points: credits minus true cost.
    pub utility: BTreeMap<UserId, i64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenarioTrace {
    pub events: Vec<SessionEvent>,
    pub segments: Vec<Segment>,
    pub episodes: Vec<EpisodeSummary>,
    /// Realized utility over the whole scenario, milli-points.
    pub utility: BTreeMap<UserId, i64>,
    pub final_digest: engine::StateDigest,
}

struct LearnerState {
    standing: Ballot,
    standing_utility: Option<i64>,
    probe: Option<Ballot>,
}

enum AgentState {
    Fixed(Ballot),
    Learner { step: u32, state: LearnerState },
}

impl AgentState {
    fn report(&self) -> &Ballot {
        match self {
            Self::Fixed(b) => b,
            Self::Learner { state, .. } => state.probe.as_ref().unwrap_or(&state.standing),
        }
    }

    fn standing(&self) -> &Ballot {
        match self {
            Self::Fixed(b) => b,
            Self::Learner { state, .. } => &state.standing,
        }
    }

    fn learn(&mut self, utility: i64, rng: &mut ChaCha8Rng, cfg: &MechanismConfig) {
        let Self::Learner { step, state } = self else {
            return;
        };
        match state.probe.take() {
            Some(probe) if state.standing_utility.is_none_or(|u| utility >= u) => {
                state.standing = probe;
                state.standing_utility = Some(utility);
            }
            Some(_) => {}
            None => state.standing_utility = Some(utility),
        }
        let open: Vec<(usize, u32)> = state
            .standing
            .pay_vs()
            .iter()
            .filter(|(_, &p)| p > 0)
            .map(|(&a, &p)| (a, p))
            .collect();
        if open.is_empty() {
            return;
        }
        let (alt, pay) = open[rng.gen_range(0..open.len())];
        state.probe = state
            .standing
            .with_pay(alt, pay - pay.min(*step), cfg)
            .ok();
    }
}

fn validate_agent(a: &AgentSpec, cfg: &ScenarioConfig) -> Result<(), SimError> {
    let bad = |reason| {
        Err(SimError::InvalidAgent {
            agent: a.id.clone(),
            reason,
        })
    };
    a.true_type.validate(&cfg.engine.mechanism)?;
    let mut prev_end = None;
    for &(lo, hi) in &a.schedule {
        if lo >= hi {
            return bad("interval must have login before logout");
        }
        if hi > cfg.horizon_ms {
            return bad("interval exceeds the horizon");
        }
        if prev_end.is_some_and(|e| lo < e) {
            return bad("intervals must be ordered and disjoint");
        }
        prev_end = Some(hi);
    }
    if let Policy::FixedMisreport(b) = &a.policy {
        b.validate(&cfg.engine.mechanism)?;
    }
    Ok(())
}

fn episode_events(
    agents: &[AgentSpec],
    states: &[AgentState],
    base: u64,
    cfg: &ScenarioConfig,
) -> Vec<SessionEvent> {
    // (timestamp, rank, agent) keeps equal-time events in a stable order.
    let mut keyed: Vec<((u64, u8, usize), SessionEvent)> = Vec::new();
    keyed.push(((base, 0, 0), SessionEvent::new(base, EventKind::WorkHoursStart)));
    for (idx, (a, s)) in agents.iter().zip(states).enumerate() {
        for &(lo, hi) in &a.schedule {
            let login = SessionEvent::login(base + lo, a.id.clone(), Some(s.report().clone()));
            keyed.push(((base + lo, 2, idx), login));
            keyed.push(((base + hi, 1, idx), SessionEvent::logout(base + hi, a.id.clone())));
        }
    }
    let end = base + cfg.horizon_ms;
    keyed.push(((end, 3, 0), SessionEvent::new(end, EventKind::WorkHoursEnd)));
    keyed.sort_by_key(|(k, _)| *k);
    keyed.into_iter().map(|(_, e)| e).collect()
}

/// Runs `cfg.episodes` work periods. Each agent reports once per login
/// according to its policy; learners update between episodes. All randomness
/// comes from `seed`.
pub fn run_scenario(
    agents: &[AgentSpec],
    cfg: &ScenarioConfig,
    seed: u64,
) -> Result<ScenarioTrace, SimError> {
    let mcfg = &cfg.engine.mechanism;
    for (i, a) in agents.iter().enumerate() {
        validate_agent(a, cfg)?;
        if agents[..i].iter().any(|b| b.id == a.id) {
            return Err(SimError::InvalidAgent {
                agent: a.id.clone(),
                reason: "duplicate agent id",
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = agents
        .iter()
        .map(|a| {
            Ok(match &a.policy {
                Policy::Truthful => AgentState::Fixed(truthful_ballot(&a.true_type, mcfg)?),
                Policy::FixedMisreport(b) => AgentState::Fixed(b.clone()),
                Policy::CompromiseLearner { step } => {
                    let favourite = truthful_ballot(&a.true_type, mcfg)?.preferred();
                    AgentState::Learner {
                        step: *step,
                        state: LearnerState {
                            standing: Ballot::max_vote(favourite, mcfg)?,
                            standing_utility: None,
                            probe: None,
                        },
                    }
                }
            })
        })
        .collect::<Result<Vec<_>, MechanismError>>()?;
    let truths: BTreeMap<&UserId, &TypeVector> =
        agents.iter().map(|a| (&a.id, &a.true_type)).collect();

    let mut engine = Engine::new(cfg.engine.clone())?;
    let mut events = Vec::new();
    let mut segments = Vec::new();
    let mut episodes = Vec::new();
    let mut total: BTreeMap<UserId, i64> = agents.iter().map(|a| (a.id.clone(), 0)).collect();

    for e in 0..u64::from(cfg.episodes) {
        let base = cfg.start_ms + e * cfg.stride_ms;
        let played: BTreeMap<UserId, Ballot> = agents
            .iter()
            .zip(&states)
            .map(|(a, s)| (a.id.clone(), s.report().clone()))
            .collect();
        let mut utility: BTreeMap<UserId, i64> =
            agents.iter().map(|a| (a.id.clone(), 0)).collect();
        for ev in episode_events(agents, &states, base, cfg) {
            let t = engine.apply(&ev)?;
            if let Some(seg) = t.closed {
                for m in &seg.members {
                    if let Some(truth) = truths.get(&m.user) {
                        let cost = i64::from(truth.costs()[seg.outcome]);
                        let felt = m.credited_milli as i64
                            - engine::segment_credit(seg.duration_ms(), cost) as i64;
                        *utility.entry(m.user.clone()).or_insert(0) += felt;
                    }
                }
                segments.push(seg);
            }
            events.push(ev);
        }
        for (a, s) in agents.iter().zip(states.iter_mut()) {
            s.learn(utility[&a.id], &mut rng, mcfg);
        }
        for (u, v) in &utility {
            *total.entry(u.clone()).or_insert(0) += v;
        }
        episodes.push(EpisodeSummary {
            played,
            standing: agents
                .iter()
                .zip(&states)
                .map(|(a, s)| (a.id.clone(), s.standing().clone()))
                .collect(),
            utility,
        });
    }

    Ok(ScenarioTrace {
        events,
        segments,
        episodes,
        utility: total,
        final_digest: engine.digest(),
    })
}
