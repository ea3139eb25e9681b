//! Batch jobs behind the CLI: simulation, replay, reports and sweeps.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use vcglight_core::analytics::{self, LevelSpan, SensorSample};
use vcglight_core::engine::{replay_with, EngineConfig, RewardRecord, SessionEvent};
use vcglight_core::mechanism::{MechanismConfig, Profile};
use vcglight_core::rewards::{self, PointsAccount};
use vcglight_core::simulator::{
    self, AgentSpec, Policy, ProfileSampler, ScenarioConfig, ScenarioTrace, UniformProfiles,
};
use vcglight_core::{TypeVector, UserId, HOUR_MS};

use crate::wire::{LogRecord, RecordKind};

/// 2026-01-05 09:00 UTC, a Monday.
pub const DEFAULT_START_MS: u64 = 1_767_603_600_000;
const SENSOR_PERIOD_MS: u64 = 5 * 60_000;

#[derive(Clone, Debug)]
pub struct SimulateOptions {
    pub agents: usize,
    pub episodes: u32,
    pub seed: u64,
    pub start_ms: u64,
    pub engine: EngineConfig,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            agents: 2,
            episodes: 1,
            seed: 0,
            start_ms: DEFAULT_START_MS,
            engine: EngineConfig {
                initially_active: false,
                ..EngineConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimulationOutput {
    pub agents: Vec<AgentSpec>,
    pub trace: ScenarioTrace,
    /// Session events interleaved with reward annotations.
    pub records: Vec<LogRecord>,
    pub sensors: Vec<SensorSample>,
}

/// Random agents: the first is truthful, the second learns to compromise,
/// the rest are truthful. Each gets one or two presence intervals.
pub fn make_agents(n: usize, horizon_ms: u64, rng: &mut ChaCha8Rng, cfg: &MechanismConfig) -> Vec<AgentSpec> {
    let step = 5;
    let levels = cfg.lambda_max / step;
    let slot = horizon_ms / 16;
    (0..n)
        .map(|i| {
            let costs: Vec<u32> = (0..cfg.outcome_count())
                .map(|_| rng.gen_range(0..=levels) * step)
                .collect();
            let a = rng.gen_range(0..4u64);
            let b = rng.gen_range(a + 2..10);
            let mut schedule = vec![(a * slot, b * slot)];
            if rng.gen_bool(0.5) {
                let c = rng.gen_range(b + 1..14);
                let d = rng.gen_range(c + 1..=16);
                schedule.push((c * slot, d * slot));
            }
            let policy = if i == 1 {
                Policy::CompromiseLearner { step }
            } else {
                Policy::Truthful
            };
            AgentSpec {
                id: UserId::new(format!("agent{}", i + 1)),
                true_type: TypeVector::from(costs),
                policy,
                schedule,
            }
        })
        .collect()
}

/// Synthetic readings every five minutes; solar radiation follows the time
/// of day, the rest is noise around typical office values.
pub fn synthetic_sensors(start_ms: u64, span_ms: u64, rng: &mut ChaCha8Rng) -> Vec<SensorSample> {
    (0..=span_ms / SENSOR_PERIOD_MS)
        .map(|k| {
            let t = start_ms + k * SENSOR_PERIOD_MS;
            let hour = (t % (24 * HOUR_MS)) as f64 / HOUR_MS as f64;
            let sun = (std::f64::consts::PI * (hour - 6.0) / 12.0).sin().max(0.0);
            SensorSample {
                timestamp_ms: t,
                humidity_percent: (80.0 + rng.gen_range(-10.0..10.0f64)).clamp(0.0, 100.0),
                temperature_deg_f: 62.0 + 8.0 * sun + rng.gen_range(-2.0..2.0),
                pressure_in_hg: 30.0 + rng.gen_range(-0.15..0.15),
                solar_radiation_w_per_m2: (700.0 * sun + rng.gen_range(-30.0..30.0f64)).max(0.0),
            }
        })
        .collect()
}

/// Log records of `events` with reward annotations after the event that
/// triggered them.
pub fn annotate(events: &[SessionEvent], cfg: &EngineConfig) -> Result<Vec<LogRecord>, vcglight_core::engine::ReplayError> {
    let mut rewards: Vec<Vec<RewardRecord>> = vec![Vec::new(); events.len()];
    replay_with(cfg.clone(), events, |i, t| rewards[i] = t.rewards.clone())?;
    let mut out = Vec::with_capacity(events.len());
    for (e, rs) in events.iter().zip(rewards) {
        out.push(LogRecord::from_event(e, &cfg.mechanism));
        out.extend(rs.iter().map(LogRecord::from_reward));
    }
    Ok(out)
}

pub fn simulate(opts: &SimulateOptions) -> anyhow::Result<SimulationOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let scenario = ScenarioConfig {
        engine: opts.engine.clone(),
        episodes: opts.episodes,
        start_ms: opts.start_ms,
        ..ScenarioConfig::default()
    };
    let agents = make_agents(opts.agents, scenario.horizon_ms, &mut rng, &opts.engine.mechanism);
    let trace = simulator::run_scenario(&agents, &scenario, rng.gen())?;
    let records = annotate(&trace.events, &opts.engine)?;
    let span = (u64::from(opts.episodes.max(1)) - 1) * scenario.stride_ms + scenario.horizon_ms;
    let sensors = synthetic_sensors(opts.start_ms, span, &mut rng);
    Ok(SimulationOutput {
        agents,
        trace,
        records,
        sensors,
    })
}

/// Independent simulations with seeds `seed, seed + 1, ...`, in parallel.
pub fn simulate_many(opts: &SimulateOptions, runs: usize) -> anyhow::Result<Vec<SimulationOutput>> {
    (0..runs as u64)
        .into_par_iter()
        .map(|k| {
            simulate(&SimulateOptions {
                seed: opts.seed.wrapping_add(k),
                ..opts.clone()
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct ReplaySummary {
    pub events: usize,
    pub annotations: usize,
    pub digest: String,
    pub last_event_ms: Option<u64>,
    pub work_hours: bool,
    pub outcome: Option<String>,
    pub accounts: BTreeMap<String, u64>,
    pub communal_milli_points: u64,
    pub lotteries_held: u64,
    pub communal_rewards_held: u64,
    /// Whether the reward annotations in the log match what replay produced.
    pub annotations_match: bool,
    pub segments: usize,
}

/// Replays `records`, checking reward annotations along the way.
pub fn replay_records(records: &[LogRecord], cfg: &EngineConfig) -> anyhow::Result<(ReplaySummary, Vec<vcglight_core::engine::Segment>)> {
    let mut events = Vec::new();
    let mut logged = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match r.to_event(&cfg.mechanism) {
            Ok(Some(e)) => events.push(e),
            Ok(None) => logged.push(r.clone()),
            Err(e) => anyhow::bail!("record {}: {e}", i + 1),
        }
    }
    let mut produced = Vec::new();
    let mut segments = Vec::new();
    let engine = replay_with(cfg.clone(), &events, |_, t| {
        produced.extend(t.rewards.iter().map(LogRecord::from_reward));
        segments.extend(t.closed.clone());
    })?;
    let st = engine.state();
    let summary = ReplaySummary {
        events: events.len(),
        annotations: logged.len(),
        digest: engine.digest().to_string(),
        last_event_ms: st.last_timestamp_ms(),
        work_hours: st.in_work_hours(),
        outcome: st.outcome().map(|o| cfg.mechanism.settings[o].label.clone()),
        accounts: st.accounts().map(|(u, m)| (u.as_str().to_owned(), m)).collect(),
        communal_milli_points: st.communal_milli(),
        lotteries_held: st.lotteries_held(),
        communal_rewards_held: st.lunches_held(),
        annotations_match: logged.is_empty() || logged == produced,
        segments: segments.len(),
    };
    Ok((summary, segments))
}

#[derive(Clone, Debug, Serialize)]
pub struct SavingsReport {
    pub work_ms: u64,
    pub ms_by_setting: BTreeMap<String, u64>,
    pub baseline_percent: u8,
    pub savings_percent: f64,
}

pub fn savings(segments: &[vcglight_core::engine::Segment], cfg: &MechanismConfig, baseline_percent: u8) -> anyhow::Result<SavingsReport> {
    let trace: Vec<LevelSpan> = analytics::level_trace(segments, cfg);
    let mut by = BTreeMap::new();
    for s in segments {
        *by.entry(cfg.settings[s.outcome].label.clone()).or_insert(0) += s.duration_ms();
    }
    Ok(SavingsReport {
        work_ms: trace.iter().map(|s| s.duration_ms).sum(),
        ms_by_setting: by,
        baseline_percent,
        savings_percent: analytics::energy_savings(&trace, baseline_percent)?,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct LotteryDraw {
    pub timestamp_ms: u64,
    pub ordinal: u64,
    pub winners: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct OddsRow {
    pub user_id: String,
    pub milli_points: u64,
    /// Chance of winning a single draw.
    pub single_draw: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LotteryReport {
    pub draws: Vec<LotteryDraw>,
    pub odds: Vec<OddsRow>,
}

/// Past draws recorded in the log and current single-draw odds.
pub fn lottery_report(records: &[LogRecord], accounts: &BTreeMap<String, u64>) -> LotteryReport {
    let draws = records
        .iter()
        .filter(|r| r.kind == RecordKind::Lottery)
        .map(|r| LotteryDraw {
            timestamp_ms: r.timestamp_ms,
            ordinal: r.ordinal.unwrap_or(0),
            winners: r.winners.clone().unwrap_or_default(),
        })
        .collect();
    let accts: Vec<PointsAccount> = accounts
        .iter()
        .map(|(u, &m)| PointsAccount::new(u.as_str(), m))
        .collect();
    let odds = rewards::win_probabilities(&accts)
        .into_iter()
        .zip(&accts)
        .map(|((u, p), a)| OddsRow {
            user_id: u.as_str().to_owned(),
            milli_points: a.milli_points,
            single_draw: p,
        })
        .collect();
    LotteryReport { draws, odds }
}

/// Empirical single-prize win rate of `target` over `draws` seeded draws.
pub fn empirical_win_rate(accounts: &[PointsAccount], target: &UserId, draws: u64, seed: u64) -> f64 {
    let wins = (0..draws)
        .into_par_iter()
        .filter(|&k| {
            rewards::run_lottery(accounts, 1, seed.wrapping_add(k))
                .is_ok_and(|w| w.first() == Some(target))
        })
        .count();
    wins as f64 / draws as f64
}

#[derive(Clone, Debug, Serialize)]
pub struct Counterexample {
    pub profile: Vec<Vec<u32>>,
    pub user: usize,
    pub report: Vec<u32>,
    pub gain: i64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct IcReport {
    pub profiles: usize,
    pub users_checked: usize,
    pub reports_checked: u64,
    pub profitable: usize,
    pub max_gain: i64,
    pub counterexamples: Vec<Counterexample>,
}

fn types_of(p: &Profile) -> Vec<Vec<u32>> {
    p.types().iter().map(|t| t.costs().to_vec()).collect()
}

/// Exhaustive single-user deviation search on `profiles` random truthful
/// profiles, every user of every profile, in parallel.
pub fn ic_sweep(
    profiles: usize,
    users: RangeInclusive<usize>,
    step: u32,
    seed: u64,
    cfg: &MechanismConfig,
) -> anyhow::Result<IcReport> {
    let mut sampler = UniformProfiles::new(seed, users, step, cfg)?;
    let sampled: Vec<Profile> = (0..profiles).map(|_| sampler.sample()).collect();
    let jobs: Vec<(usize, usize)> = sampled
        .iter()
        .enumerate()
        .flat_map(|(k, p)| (0..p.len()).map(move |i| (k, i)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(k, i)| Ok((k, i, simulator::deviation_search(&sampled[k], i, step, cfg)?)))
        .collect::<Result<Vec<_>, simulator::SimError>>()?;
    let mut report = IcReport {
        profiles,
        ..IcReport::default()
    };
    for (k, i, r) in results {
        report.users_checked += 1;
        report.reports_checked += r.reports_checked;
        report.max_gain = report.max_gain.max(r.gain);
        if r.gain > 0 {
            report.profitable += 1;
            report.counterexamples.push(Counterexample {
                profile: types_of(&sampled[k]),
                user: i,
                report: r.best_report.costs().to_vec(),
                gain: r.gain,
            });
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct IrSummary {
    pub trials: usize,
    pub users_checked: usize,
    pub ir_violations: usize,
    pub payment_bound_violations: usize,
    pub min_margin: Option<i64>,
    pub violation_rate: f64,
}

pub fn ir_sweep(
    trials: usize,
    users: RangeInclusive<usize>,
    step: u32,
    seed: u64,
    cfg: &MechanismConfig,
) -> anyhow::Result<IrSummary> {
    let mut sampler = UniformProfiles::new(seed, users, step, cfg)?;
    let r = simulator::ir_sweep(&mut sampler, trials, cfg)?;
    Ok(IrSummary {
        trials: r.trials,
        users_checked: r.users_checked,
        ir_violations: r.ir_violations,
        payment_bound_violations: r.payment_bound_violations,
        min_margin: r.min_margin,
        violation_rate: r.violation_rate(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulation_is_deterministic_and_replays() {
        let opts = SimulateOptions {
            seed: 3,
            ..SimulateOptions::default()
        };
        let a = simulate(&opts).unwrap();
        let b = simulate(&opts).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.sensors, b.sensors);
        let (summary, segments) = replay_records(&a.records, &opts.engine).unwrap();
        assert_eq!(summary.digest, a.trace.final_digest.to_string());
        assert!(summary.annotations_match);
        assert_eq!(segments.len(), a.trace.segments.len());
        let s = savings(&segments, &opts.engine.mechanism, 100).unwrap();
        assert_eq!(s.work_ms, 8 * HOUR_MS);
    }

    #[test]
    fn simulate_many_uses_distinct_seeds() {
        let runs = simulate_many(&SimulateOptions::default(), 3).unwrap();
        assert_eq!(runs.len(), 3);
        assert_ne!(runs[0].records, runs[1].records);
        assert_eq!(runs[1].records, simulate(&SimulateOptions { seed: 1, ..SimulateOptions::default() }).unwrap().records);
    }

    #[test]
    fn tampered_annotations_are_detected() {
        let opts = SimulateOptions::default();
        let mut records = simulate(&opts).unwrap().records;
        records.push(LogRecord {
            timestamp_ms: u64::MAX,
            kind: RecordKind::CommunalLunch,
            user_id: None,
            ballot: None,
            ordinal: Some(99),
            winners: None,
        });
        let (summary, _) = replay_records(&records, &opts.engine).unwrap();
        assert!(!summary.annotations_match);
    }

    #[test]
    fn small_sweeps() {
        let cfg = MechanismConfig::default();
        let ic = ic_sweep(5, 2..=3, 20, 1, &cfg).unwrap();
        assert_eq!(ic.profitable, 0);
        assert!(ic.users_checked >= 10);
        assert_eq!(ic.reports_checked, ic.users_checked as u64 * 6u64.pow(3));
        let ir = ir_sweep(200, 2..=5, 5, 1, &cfg).unwrap();
        assert_eq!(ir.ir_violations, 0);
    }

    #[test]
    fn lottery_odds_table() {
        let accounts: BTreeMap<String, u64> = [("a".to_owned(), 300), ("b".to_owned(), 100)].into();
        let r = lottery_report(&[], &accounts);
        assert_eq!(r.odds[0].single_draw, 0.75);
        let accts = [PointsAccount::new("a", 300), PointsAccount::new("b", 100)];
        let rate = empirical_win_rate(&accts, &UserId::from("a"), 4_000, 0);
        assert!((rate - 0.75).abs() < 0.03, "{rate}");
    }
}
