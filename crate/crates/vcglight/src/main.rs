use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vcglight_core::analytics::{self, DEFAULT_JOIN_WINDOW_MS};
use vcglight_core::engine::EngineConfig;
use vcglight_core::rewards::{self, PointsAccount};
use vcglight_core::MILLI;

use vcglight::clock::SystemClock;
use vcglight::commands::{self, SimulateOptions};
use vcglight::config::ServiceConfig;
use vcglight::eventlog;
use vcglight::sensors;

#[derive(Parser)]
#[command(name = "vcglight", version, about = "Shared lighting control by a modified VCG mechanism")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long, short, env = "VCGLIGHT_CONFIG")]
        config: PathBuf,
    },
    /// Rebuild state from an event log and print its digest.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[command(flatten)]
        zone: ZoneArgs,
        /// Print the full summary as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Generate a synthetic day (or several) of agents using the mechanism.
    Simulate(SimulateArgs),
    /// Search for profitable misreports on random profiles.
    IcSweep(IcArgs),
    /// Check individual rationality and payment bounds on random profiles.
    IrSweep(IrArgs),
    #[command(subcommand)]
    Report(Report),
}

#[derive(Args, Clone)]
struct ZoneArgs {
    /// Service config whose zone settings apply; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Zone within --config; the first zone if omitted.
    #[arg(long, requires = "config")]
    zone: Option<String>,
}

impl ZoneArgs {
    fn engine(&self) -> Result<EngineConfig> {
        let Some(path) = &self.config else {
            return Ok(EngineConfig {
                initially_active: false,
                ..EngineConfig::default()
            });
        };
        let cfg = ServiceConfig::load(path)?;
        let zone = match &self.zone {
            Some(id) => cfg.zone(id).with_context(|| format!("no zone `{id}` in config"))?,
            None => &cfg.zones[0],
        };
        Ok(zone.engine.clone())
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Event log to write (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Also write synthetic sensor readings as CSV.
    #[arg(long)]
    sensors: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    agents: usize,
    #[arg(long, default_value_t = 1)]
    episodes: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent runs with consecutive seeds; files get a `-<k>` suffix.
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long, default_value_t = commands::DEFAULT_START_MS)]
    start_ms: u64,
    #[command(flatten)]
    zone: ZoneArgs,
}

#[derive(Args)]
struct IcArgs {
    #[arg(long, default_value_t = 1000)]
    profiles: usize,
    #[arg(long, default_value_t = 2)]
    min_users: usize,
    #[arg(long, default_value_t = 5)]
    max_users: usize,
    #[arg(long, default_value_t = 5)]
    step: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the report as a JSON line.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    zone: ZoneArgs,
}

#[derive(Args)]
struct IrArgs {
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    min_users: usize,
    #[arg(long, default_value_t = 5)]
    max_users: usize,
    #[arg(long, default_value_t = 5)]
    step: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-setting virtual participant cost, e.g. `0,0,150`.
    #[arg(long, value_delimiter = ',')]
    virtual_cost: Option<Vec<u32>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    zone: ZoneArgs,
}

#[derive(Subcommand)]
enum Report {
    /// Energy saved against a constant baseline level.
    Savings {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 100)]
        baseline: u8,
        #[command(flatten)]
        zone: ZoneArgs,
        #[arg(long)]
        json: bool,
    },
    /// Correlation of preferred light level with atmospheric readings.
    Correlations {
        /// Take votes from the ballots in this log.
        #[arg(long, conflicts_with = "votes", required_unless_present = "votes")]
        log: Option<PathBuf>,
        /// Votes CSV with columns timestamp_ms, level_percent.
        #[arg(long)]
        votes: Option<PathBuf>,
        #[arg(long)]
        sensors: PathBuf,
        #[arg(long, default_value_t = DEFAULT_JOIN_WINDOW_MS)]
        window_ms: u64,
        /// Write the table as CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        zone: ZoneArgs,
    },
    /// Past lottery winners and current odds.
    Lottery {
        #[arg(long)]
        log: PathBuf,
        /// Also run a fresh draw with this seed.
        #[arg(long)]
        draw_seed: Option<u64>,
        #[arg(long, default_value_t = 3)]
        prizes: u32,
        #[command(flatten)]
        zone: ZoneArgs,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(io::stderr)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::Serve { config } => serve(&config),
        Command::Replay { log, zone, json } => replay(&log, &zone, json),
        Command::Simulate(a) => simulate(a),
        Command::IcSweep(a) => ic_sweep(a),
        Command::IrSweep(a) => ir_sweep(a),
        Command::Report(r) => report(r),
    }
}

fn serve(config: &Path) -> Result<()> {
    let cfg = ServiceConfig::load(config)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(vcglight::server::serve(cfg, Arc::new(SystemClock)))?;
    rt.shutdown_timeout(Duration::from_secs(1));
    Ok(())
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_json_line<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut f = File::create(path).with_context(|| path.display().to_string())?;
    writeln!(f, "{}", serde_json::to_string(v)?)?;
    Ok(())
}

fn points(milli: u64) -> String {
    format!("{}.{:03}", milli / MILLI, milli % MILLI)
}

fn load_replay(log: &Path, engine: &EngineConfig) -> Result<(Vec<vcglight::wire::LogRecord>, commands::ReplaySummary, Vec<vcglight_core::engine::Segment>)> {
    let contents = eventlog::read_log(log).with_context(|| format!("reading {}", log.display()))?;
    if contents.torn_bytes > 0 {
        eprintln!("note: ignoring {} bytes of a torn final record", contents.torn_bytes);
    }
    let (summary, segments) = commands::replay_records(&contents.records, engine)?;
    Ok((contents.records, summary, segments))
}

fn replay(log: &Path, zone: &ZoneArgs, json: bool) -> Result<()> {
    let engine = zone.engine()?;
    let (_, s, _) = load_replay(log, &engine)?;
    if json {
        return print_json(&s);
    }
    println!("digest       {}", s.digest);
    println!("events       {} ({} annotations)", s.events, s.annotations);
    println!("work hours   {}", if s.work_hours { "open" } else { "closed" });
    println!("setting      {}", s.outcome.as_deref().unwrap_or("-"));
    println!("communal     {} points", points(s.communal_milli_points));
    println!("lotteries    {}   communal rewards {}", s.lotteries_held, s.communal_rewards_held);
    if !s.annotations_match {
        println!("warning      reward annotations in the log differ from the replay");
    }
    println!("{:<16} {:>14}", "user", "points");
    for (u, m) in &s.accounts {
        println!("{:<16} {:>14}", u, points(*m));
    }
    Ok(())
}

fn with_suffix(path: &Path, k: usize, runs: usize) -> PathBuf {
    if runs <= 1 {
        return path.to_owned();
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let name = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}-{k}.{ext}"),
        None => format!("{stem}-{k}"),
    };
    path.with_file_name(name)
}

fn simulate(a: SimulateArgs) -> Result<()> {
    if a.agents == 0 || a.runs == 0 {
        bail!("--agents and --runs must be positive");
    }
    let opts = SimulateOptions {
        agents: a.agents,
        episodes: a.episodes.max(1),
        seed: a.seed,
        start_ms: a.start_ms,
        engine: a.zone.engine()?,
    };
    let runs = commands::simulate_many(&opts, a.runs)?;
    println!("{:<5} {:<66} {:>7} {:>9}", "run", "digest", "events", "segments");
    for (k, run) in runs.iter().enumerate() {
        let out = with_suffix(&a.out, k, a.runs);
        eventlog::write_log(&out, &run.records)?;
        if let Some(p) = &a.sensors {
            let p = with_suffix(p, k, a.runs);
            sensors::write_sensor_csv(BufWriter::new(File::create(&p)?), &run.sensors)?;
        }
        println!(
            "{:<5} {:<66} {:>7} {:>9}",
            k,
            run.trace.final_digest.to_string(),
            run.trace.events.len(),
            run.trace.segments.len()
        );
    }
    Ok(())
}

fn ic_sweep(a: IcArgs) -> Result<()> {
    let cfg = a.zone.engine()?.mechanism;
    let started = std::time::Instant::now();
    let r = commands::ic_sweep(a.profiles, a.min_users..=a.max_users, a.step, a.seed, &cfg)?;
    if let Some(p) = &a.out {
        write_json_line(p, &r)?;
    }
    println!("profiles          {}", r.profiles);
    println!("users checked     {}", r.users_checked);
    println!("reports checked   {}", r.reports_checked);
    println!("profitable        {}", r.profitable);
    println!("max gain          {}", r.max_gain);
    println!("elapsed           {:.1?}", started.elapsed());
    if r.profitable > 0 {
        bail!("found {} profitable deviations", r.profitable);
    }
    Ok(())
}

fn ir_sweep(a: IrArgs) -> Result<()> {
    let mut cfg = a.zone.engine()?.mechanism;
    if a.virtual_cost.is_some() {
        cfg.virtual_cost = a.virtual_cost;
        cfg.validate()?;
    }
    let r = commands::ir_sweep(a.trials, a.min_users..=a.max_users, a.step, a.seed, &cfg)?;
    if let Some(p) = &a.out {
        write_json_line(p, &r)?;
    }
    println!("trials                   {}", r.trials);
    println!("users checked            {}", r.users_checked);
    println!("IR violations            {}", r.ir_violations);
    println!("payment bound violations {}", r.payment_bound_violations);
    println!("min margin               {}", r.min_margin.map_or("-".into(), |m| m.to_string()));
    Ok(())
}

fn report(r: Report) -> Result<()> {
    match r {
        Report::Savings { log, baseline, zone, json } => {
            let engine = zone.engine()?;
            let (_, _, segments) = load_replay(&log, &engine)?;
            let s = commands::savings(&segments, &engine.mechanism, baseline)?;
            if json {
                return print_json(&s);
            }
            println!("{:<12} {:>10}", "setting", "hours");
            for (label, ms) in &s.ms_by_setting {
                println!("{:<12} {:>10.2}", label, *ms as f64 / 3_600_000.0);
            }
            println!("savings vs {}%: {:.2}%", s.baseline_percent, s.savings_percent);
        }
        Report::Correlations { log, votes, sensors: sensor_path, window_ms, out, zone } => {
            let engine = zone.engine()?;
            let votes = match (log, votes) {
                (Some(log), _) => {
                    let events = eventlog::read_events(&log, &engine.mechanism)?;
                    sensors::votes_from_events(&events, &engine.mechanism)
                }
                (None, Some(v)) => sensors::ingest_vote_csv(&v)?,
                (None, None) => bail!("give --log or --votes"),
            };
            let samples = sensors::ingest_sensor_csv(&sensor_path)?;
            let table = analytics::preference_correlations(&votes, &samples, window_ms)?;
            match out {
                Some(p) => {
                    sensors::write_correlation_csv(BufWriter::new(File::create(&p)?), &table)?;
                    eprintln!("wrote {} (n = {})", p.display(), table.n);
                }
                None => sensors::write_correlation_csv(io::stdout().lock(), &table)?,
            }
        }
        Report::Lottery { log, draw_seed, prizes, zone, json } => {
            let engine = zone.engine()?;
            let (records, summary, _) = load_replay(&log, &engine)?;
            let rep = commands::lottery_report(&records, &summary.accounts);
            let fresh = match draw_seed {
                Some(seed) => {
                    let accts: Vec<PointsAccount> = summary
                        .accounts
                        .iter()
                        .map(|(u, &m)| PointsAccount::new(u.as_str(), m))
                        .collect();
                    Some(
                        rewards::run_lottery(&accts, prizes, seed)?
                            .into_iter()
                            .map(|u| u.as_str().to_owned())
                            .collect::<Vec<_>>(),
                    )
                }
                None => None,
            };
            if json {
                #[derive(Serialize)]
                struct Out<'a> {
                    #[serde(flatten)]
                    report: &'a commands::LotteryReport,
                    fresh_draw: Option<Vec<String>>,
                }
                return print_json(&Out { report: &rep, fresh_draw: fresh });
            }
            println!("draws");
            if rep.draws.is_empty() {
                println!("  (none)");
            }
            for d in &rep.draws {
                println!("  #{:<4} at {:>15} ms  {}", d.ordinal, d.timestamp_ms, d.winners.join(", "));
            }
            println!("{:<16} {:>14} {:>12}", "user", "points", "odds");
            for o in &rep.odds {
                println!("{:<16} {:>14} {:>11.2}%", o.user_id, points(o.milli_points), 100.0 * o.single_draw);
            }
            if let Some(w) = fresh {
                println!("fresh draw: {}", w.join(", "));
            }
        }
    }
    Ok(())
}
