//! Acceptance suite. One line per criterion; exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use vcglight::commands;
use vcglight::eventlog;
use vcglight::wire::LogRecord;
use vcglight_core::analytics::{energy_savings, level_trace, p_value, pearson_r, LevelSpan};
use vcglight_core::engine::{replay_with, SessionEvent};
use vcglight_core::mechanism::{allocate, choose_outcome};
use vcglight_core::rewards::run_lottery;
use vcglight_core::{
    Ballot, Engine, EngineConfig, MechanismConfig, PointsAccount, Profile, Segment, TypeVector,
    UserId,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("incentive-compatibility", incentive_compatibility),
        ("ex-post-ir", ex_post_ir),
        ("outcome-optimality", outcome_optimality),
        ("temporal-consistency", temporal_consistency),
        ("replay-determinism", replay_determinism),
        ("energy-metric", energy_metric),
        ("statistics", statistics),
        ("lottery-fairness", lottery_fairness),
        ("pipeline-smoke", pipeline_smoke),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| (*s).to_owned()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("[PASS] {name}: {d} ({secs:.1}s)"),
            Err(d) => {
                failed += 1;
                println!("[FAIL] {name}: {d} ({secs:.1}s)");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn random_profile(rng: &mut ChaCha8Rng, n: usize, max: u32, step: u32) -> Profile {
    let types = (0..n).map(|_| {
        TypeVector::from(
            (0..3)
                .map(|_| rng.gen_range(0..=max / step) * step)
                .collect::<Vec<u32>>(),
        )
    });
    Profile::from_types(types).unwrap()
}

fn incentive_compatibility() -> Outcome {
    let cfg = MechanismConfig::default();
    let start = Instant::now();
    let r = commands::ic_sweep(1000, 2..=5, 5, 20_240_601, &cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    check(
        r.profiles == 1000 && r.profitable == 0 && r.max_gain == 0 && elapsed < Duration::from_secs(300),
        format!(
            "{} profiles, {} users, {} reports, {} profitable deviations, max gain {}",
            r.profiles, r.users_checked, r.reports_checked, r.profitable, r.max_gain
        ),
    )
}

fn ex_post_ir() -> Outcome {
    let cfg = MechanismConfig::default();
    let lambda = i64::from(cfg.lambda_max);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut users, mut ir_violations, mut bound_violations, mut mismatches) = (0, 0, 0, 0);
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=5);
        let profile = random_profile(&mut rng, n, cfg.lambda_max, 1);
        let costs: Vec<Vec<i64>> = profile
            .types()
            .iter()
            .map(|t| t.costs().iter().map(|&c| i64::from(c)).collect())
            .collect();
        let alloc = allocate(&profile, &cfg).map_err(|e| e.to_string())?;
        let f = alloc.outcome;
        for i in 0..n {
            users += 1;
            let others: i64 = (0..n).filter(|&j| j != i).map(|j| costs[j][f]).sum();
            let p = n as i64 * lambda - others;
            if p != alloc.payments[i] {
                mismatches += 1;
            }
            if p - costs[i][f] < -costs[i][cfg.nominal_outcome] {
                ir_violations += 1;
            }
            if p < lambda || p > n as i64 * lambda {
                bound_violations += 1;
            }
        }
    }
    check(
        ir_violations == 0 && bound_violations == 0 && mismatches == 0,
        format!(
            "10000 profiles, {users} users, {ir_violations} IR violations, {bound_violations} bound violations, {mismatches} payment mismatches"
        ),
    )
}

/// Cheapest total cost wins; equal totals go to the lowest level.
fn brute_force_outcome(profile: &Profile, virtual_cost: Option<&[u32]>, levels: &[u8]) -> usize {
    let total = |x: usize| -> u64 {
        profile.types().iter().map(|t| u64::from(t.costs()[x])).sum::<u64>()
            + virtual_cost.map_or(0, |v| u64::from(v[x]))
    };
    let mut best = 0;
    for x in 1..levels.len() {
        let (tx, tb) = (total(x), total(best));
        if tx < tb || (tx == tb && levels[x] < levels[best]) {
            best = x;
        }
    }
    best
}

fn outcome_optimality() -> Outcome {
    let base = MechanismConfig::default();
    let levels: Vec<u8> = base.settings.iter().map(|s| s.level_percent).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut agree, mut with_virtual) = (0, 0);
    let mut first_miss = None;
    for k in 0..10_000 {
        let n = rng.gen_range(1..=6);
        let step = if k % 3 == 0 { 25 } else { 1 };
        let profile = random_profile(&mut rng, n, base.lambda_max, step);
        let (cfg, vc) = if k % 2 == 0 {
            with_virtual += 1;
            let vc: Vec<u32> = (0..3).map(|_| rng.gen_range(0..=200)).collect();
            (base.clone().with_virtual_cost(vc.clone()), Some(vc))
        } else {
            (base.clone(), None)
        };
        let got = choose_outcome(&profile, &cfg).map_err(|e| e.to_string())?;
        let want = brute_force_outcome(&profile, vc.as_deref(), &levels);
        if got == want {
            agree += 1;
        } else if first_miss.is_none() {
            first_miss = Some(format!("; first disagreement at profile {k}: got {got}, oracle {want}"));
        }
    }
    check(
        agree == 10_000,
        format!(
            "{agree}/10000 agree with the oracle, {with_virtual} with virtual cost{}",
            first_miss.unwrap_or_default()
        ),
    )
}

const USERS: [&str; 5] = ["u0", "u1", "u2", "u3", "u4"];

/// A random valid event log, work-hours boundaries included.
fn random_log(rng: &mut ChaCha8Rng, cfg: &EngineConfig, step: u32, len: usize) -> Vec<SessionEvent> {
    let mc = &cfg.mechanism;
    let mut engine = Engine::new(cfg.clone()).unwrap();
    let mut t = 1_767_600_000_000 + rng.gen_range(0..1_000_000u64);
    let mut events = Vec::new();
    let random_ballot = |rng: &mut ChaCha8Rng| {
        let preferred = rng.gen_range(0..3);
        let pay = (0..3)
            .filter(|&x| x != preferred)
            .map(|x| (x, rng.gen_range(0..=mc.lambda_max / step) * step))
            .collect::<Vec<_>>();
        Ballot::new(preferred, pay, mc).unwrap()
    };
    while events.len() < len {
        t += rng.gen_range(0..=2_700_000u64);
        let user = UserId::new(USERS[rng.gen_range(0..USERS.len())]);
        let e = match rng.gen_range(0..20) {
            0..=5 => SessionEvent::login(t, user, rng.gen_bool(0.7).then(|| random_ballot(rng))),
            6..=9 => SessionEvent::logout(t, user),
            10..=16 => SessionEvent::ballot(t, user, random_ballot(rng)),
            17 => SessionEvent::new(t, vcglight_core::EventKind::SurveyBonus { user }),
            18 => SessionEvent::new(t, vcglight_core::EventKind::WorkHoursStart),
            _ => SessionEvent::new(t, vcglight_core::EventKind::WorkHoursEnd),
        };
        if engine.validate(&e).is_ok() {
            engine.apply(&e).unwrap();
            events.push(e);
        }
    }
    events
}

fn accounts(cfg: &EngineConfig, events: &[SessionEvent]) -> BTreeMap<String, u64> {
    let engine = replay_with(cfg.clone(), events, |_, _| {}).unwrap();
    engine
        .state()
        .accounts()
        .map(|(u, m)| (u.as_str().to_owned(), m))
        .collect()
}

fn with_marks(rng: &mut ChaCha8Rng, events: &[SessionEvent], k: usize) -> Vec<SessionEvent> {
    let (lo, hi) = (events[0].timestamp_ms, events.last().unwrap().timestamp_ms);
    let mut out = events.to_vec();
    for _ in 0..k {
        let t = rng.gen_range(lo..=hi);
        let pos = out.partition_point(|e| e.timestamp_ms <= t);
        out.insert(pos, SessionEvent::mark(t));
    }
    out
}

fn temporal_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = EngineConfig::default();
    let (mut max_drift, mut bound_breaches, mut gains) = (0u64, 0, 0);
    for _ in 0..100 {
        let events = random_log(&mut rng, &cfg, 1, 80);
        let k = rng.gen_range(1..=40);
        let before = accounts(&cfg, &events);
        let after = accounts(&cfg, &with_marks(&mut rng, &events, k));
        for (u, &a) in &before {
            let b = after.get(u).copied().unwrap_or(0);
            if b > a {
                gains += 1;
            }
            let drift = a.abs_diff(b);
            max_drift = max_drift.max(drift);
            if drift > k as u64 {
                bound_breaches += 1;
            }
        }
    }

    // Every rate a multiple of 3600 points per hour credits whole milli-points per ms.
    let exact = EngineConfig {
        mechanism: MechanismConfig {
            lambda_max: 36_000,
            ..MechanismConfig::default()
        },
        ..EngineConfig::default()
    };
    let mut exact_drift = 0u64;
    for _ in 0..100 {
        let events = random_log(&mut rng, &exact, 3600, 80);
        let k = rng.gen_range(1..=40);
        let before = accounts(&exact, &events);
        let after = accounts(&exact, &with_marks(&mut rng, &events, k));
        for (u, &a) in &before {
            exact_drift = exact_drift.max(a.abs_diff(after.get(u).copied().unwrap_or(0)));
        }
    }
    check(
        bound_breaches == 0 && gains == 0 && exact_drift == 0,
        format!(
            "100 logs: max drift {max_drift} milli-points, {bound_breaches} over k; 100 logs with rates divisible by 3600: max drift {exact_drift}"
        ),
    )
}

fn live_records(cfg: &EngineConfig, events: &[SessionEvent]) -> (String, Vec<LogRecord>) {
    let mut engine = Engine::new(cfg.clone()).unwrap();
    let mut records = Vec::new();
    for e in events {
        let t = engine.apply(e).unwrap();
        records.push(LogRecord::from_event(e, &cfg.mechanism));
        records.extend(t.rewards.iter().map(LogRecord::from_reward));
    }
    (engine.digest().to_string(), records)
}

fn replay_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = EngineConfig {
        initially_active: false,
        rewards: vcglight_core::RewardConfig {
            lottery_threshold: 2_000_000,
            communal_threshold: 5_000_000,
            ..vcglight_core::RewardConfig::default()
        },
        ..EngineConfig::default()
    };
    let mut matched = 0;
    let mut annotations = 0;
    for k in 0..100 {
        let events = random_log(&mut rng, &cfg, 5, 150);
        let (live, records) = live_records(&cfg, &events);
        annotations += records.len() - events.len();
        let path = dir.path().join(format!("log-{k}.jsonl"));
        eventlog::write_log(&path, &records).map_err(|e| e.to_string())?;
        let read = eventlog::read_events(&path, &cfg.mechanism).map_err(|e| e.to_string())?;
        let replayed = replay_with(cfg.clone(), &read, |_, _| {}).map_err(|e| e.to_string())?;
        if replayed.digest().to_string() == live {
            matched += 1;
        }
    }
    let service = kill_and_restart().map_err(|e| format!("{matched}/100 logs matched; service: {e}"))?;
    check(
        matched == 100,
        format!("{matched}/100 logs replay to the live digest ({annotations} reward annotations); {service}"),
    )
}

fn kill_and_restart() -> Result<String, String> {
    use common::{client, noon_offset_minutes, run, token, write_config, Server, LAT, LON};
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = write_config(dir.path(), noon_offset_minutes(), 1);
    let log = dir.path().join("data").join("east.jsonl");
    let c = client();
    let post = |srv: &Server, path: &str, body: Value| -> Result<Value, String> {
        let resp = c.post(srv.url(path)).json(&body).send().map_err(|e| e.to_string())?;
        let status = resp.status();
        let v: Value = resp.json().map_err(|e| e.to_string())?;
        if status.is_success() {
            Ok(v)
        } else {
            Err(format!("{path}: {status} {v}"))
        }
    };
    let state = |srv: &Server| -> Result<Value, String> {
        c.get(srv.url("/zones/east/state"))
            .send()
            .and_then(|r| r.json())
            .map_err(|e| e.to_string())
    };

    let srv = Server::start(&cfg);
    let mut sessions = Vec::new();
    for u in ["alice", "bob", "carol"] {
        let v = post(&srv, "/zones/east/login", json!({"user_id": u, "token": token(u), "latitude": LAT, "longitude": LON}))?;
        sessions.push(v["session"].as_str().unwrap_or_default().to_owned());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let labels = ["Normal", "Bright", "VeryBright"];
    for _ in 0..30 {
        let s = &sessions[rng.gen_range(0..3)];
        let pref = labels[rng.gen_range(0..3)];
        let pay: serde_json::Map<String, Value> = labels
            .iter()
            .filter(|l| **l != pref)
            .map(|l| ((*l).to_owned(), json!(rng.gen_range(0..=100))))
            .collect();
        post(&srv, "/zones/east/ballot", json!({"session": s, "ballot": {"preferred": pref, "pay_vs": pay}}))?;
        std::thread::sleep(Duration::from_millis(rng.gen_range(0..20)));
    }
    post(&srv, "/zones/east/survey", json!({"session": sessions[0]}))?;
    let live = state(&srv)?["digest"].clone();
    srv.kill();

    let out = run(&["replay", "--log", log.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--json"]);
    let summary: Value = serde_json::from_str(&out).map_err(|e| e.to_string())?;
    if summary["digest"] != live {
        return Err(format!("replay digest {} != live {live}", summary["digest"]));
    }
    if summary["annotations_match"] != true {
        return Err("reward annotations differ on replay".into());
    }
    let srv = Server::start(&cfg);
    let restarted = state(&srv)?["digest"].clone();
    if restarted != live {
        return Err(format!("restarted digest {restarted} != live {live}"));
    }
    Ok(format!(
        "killed service: replay and restart match live digest after {} lottery draws",
        summary["lotteries_held"]
    ))
}

fn percent_saved(trace: &[LevelSpan], baseline: u8) -> f64 {
    let used: f64 = trace.iter().map(|s| s.duration_ms as f64 * f64::from(s.level_percent)).sum();
    let full: f64 = trace.iter().map(|s| s.duration_ms as f64 * f64::from(baseline)).sum();
    100.0 * (1.0 - used / full)
}

fn engine_savings(changes: &[(u64, usize)]) -> f64 {
    let cfg = EngineConfig {
        initially_active: false,
        ..EngineConfig::default()
    };
    let mc = &cfg.mechanism;
    let h = 3_600_000;
    let mut events = vec![
        SessionEvent::new(0, vcglight_core::EventKind::WorkHoursStart),
        SessionEvent::login(0, "a", None),
    ];
    for &(at, x) in changes {
        let pay = (0..3).filter(|&y| y != x).map(|y| (y, 100));
        events.push(SessionEvent::ballot(at * h, "a", Ballot::new(x, pay, mc).unwrap()));
    }
    events.push(SessionEvent::new(8 * h, vcglight_core::EventKind::WorkHoursEnd));
    let mut segments: Vec<Segment> = Vec::new();
    replay_with(cfg.clone(), &events, |_, t| segments.extend(t.closed.clone())).unwrap();
    let trace = level_trace(&segments, mc);
    energy_savings(&trace, 100).unwrap()
}

fn energy_metric() -> Outcome {
    let h = 3_600_000;
    let all_normal = [LevelSpan { duration_ms: 8 * h, level_percent: 33 }];
    let half = [
        LevelSpan { duration_ms: 4 * h, level_percent: 33 },
        LevelSpan { duration_ms: 4 * h, level_percent: 100 },
    ];
    let a = energy_savings(&all_normal, 100).map_err(|e| e.to_string())?;
    let b = energy_savings(&half, 100).map_err(|e| e.to_string())?;
    let (fa, fb) = (percent_saved(&all_normal, 100), percent_saved(&half, 100));
    let ea = engine_savings(&[(0, 0)]);
    let eb = engine_savings(&[(0, 0), (4, 2)]);
    check(
        a == 67.00 && b == 33.50 && (fa - a).abs() < 1e-9 && (fb - b).abs() < 1e-9 && ea == 67.00 && eb == 33.50,
        format!("all-Normal {a:.2}%, half Normal/VeryBright {b:.2}%; via engine log {ea:.2}% and {eb:.2}%"),
    )
}

fn statistics() -> Outcome {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    let r = pearson_r(&x, &[1.0, 3.0, 2.0, 5.0, 4.0]).map_err(|e| e.to_string())?;
    let pos = pearson_r(&x, &x.map(|v| 2.0 * v + 1.0)).map_err(|e| e.to_string())?;
    let neg = pearson_r(&x, &x.map(|v| -v)).map_err(|e| e.to_string())?;
    // With two degrees of freedom the two-sided p-value is 1 - |r|.
    let p2 = p_value(0.8, 4).map_err(|e| e.to_string())?;
    let p276 = p_value(0.27, 276).map_err(|e| e.to_string())?;
    check(
        (r - 0.8).abs() < 1e-12 && pos == 1.0 && neg == -1.0 && (p2 - 0.2).abs() < 1e-9 && p276 < 0.001,
        format!("r = {r:.12}, +1 case {pos}, -1 case {neg}, p(0.8, n=4) = {p2:.12}, p(0.27, n=276) = {p276:.2e}"),
    )
}

fn lottery_fairness() -> Outcome {
    let accounts = [PointsAccount::new("a", 300_000), PointsAccount::new("b", 100_000)];
    let rate = commands::empirical_win_rate(&accounts, &UserId::new("a"), 100_000, 7);
    let pool: Vec<PointsAccount> = (0..6)
        .map(|i| PointsAccount::new(format!("u{i}"), 1_000 * (i + 1)))
        .collect();
    let reproducible = (0..50u64).all(|seed| {
        run_lottery(&pool, 3, seed).unwrap() == run_lottery(&pool, 3, seed).unwrap()
    });
    check(
        (rate - 0.75).abs() <= 0.01 && reproducible,
        format!("300:100 win rate {rate:.4} over 100000 draws; fixed seeds reproducible: {reproducible}"),
    )
}

fn pipeline_smoke() -> Outcome {
    use common::run;
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |f: &str| dir.path().join(f).to_str().unwrap().to_owned();
    let (log, sensors, table) = (p("day.jsonl"), p("sensors.csv"), p("corr.csv"));
    let sim = run(&["simulate", "--agents", "2", "--out", &log, "--sensors", &sensors]);
    let sim_digest = sim
        .lines()
        .nth(1)
        .and_then(|l| l.split_whitespace().nth(1))
        .ok_or("no digest from simulate")?
        .to_owned();
    let summary: Value =
        serde_json::from_str(&run(&["replay", "--log", &log, "--json"])).map_err(|e| e.to_string())?;
    let savings: Value = serde_json::from_str(&run(&["report", "savings", "--log", &log, "--json"]))
        .map_err(|e| e.to_string())?;
    run(&["report", "correlations", "--log", &log, "--sensors", &sensors, "--out", &table]);
    let rows = std::fs::read_to_string(&table).map_err(|e| e.to_string())?.lines().count();
    let elapsed = start.elapsed();
    check(
        summary["digest"] == sim_digest.as_str() && savings["savings_percent"].is_number() && rows == 6 && elapsed < Duration::from_secs(30),
        format!(
            "replay digest matches simulate: {}, savings {}%, correlation rows {}",
            summary["digest"] == sim_digest.as_str(),
            savings["savings_percent"],
            rows - 1
        ),
    )
}
