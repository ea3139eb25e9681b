#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

pub const BIN: &str = env!("CARGO_BIN_EXE_vcglight");

/// Fence corners around (10.0005, 20.0005).
pub const LAT: f64 = 10.0005;
pub const LON: f64 = 20.0005;

pub const USERS: [&str; 4] = ["alice", "bob", "carol", "dave"];

pub fn token(user: &str) -> String {
    format!("{user}-token")
}

/// UTC offset that puts the wall clock near local noon, so a 09:00-17:00
/// window is open for a few hours whatever the real time is.
pub fn noon_offset_minutes() -> i32 {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap().as_secs();
    let minute = ((now / 60) % 1440) as i32;
    let mut off = 12 * 60 - minute;
    if off > 720 {
        off -= 1440;
    }
    if off < -720 {
        off += 1440;
    }
    off
}

/// Writes a one-zone config into `dir` and returns its path.
pub fn write_config(dir: &Path, utc_offset_minutes: i32, lottery_points: u64) -> PathBuf {
    let users: String = USERS
        .iter()
        .map(|u| format!("[[users]]\nid = \"{u}\"\ntoken = \"{}\"\n\n", token(u)))
        .collect();
    let text = format!(
        r#"listen = "127.0.0.1:0"
data_dir = "data"
fsync = false
tick_ms = 50

{users}
[[zones]]
id = "east"
fence = [[10.0, 20.0], [10.0, 20.001], [10.001, 20.001], [10.001, 20.0]]
work_hours = {{ start = "09:00", end = "17:00", utc_offset_minutes = {utc_offset_minutes} }}
rewards = {{ lottery_threshold_points = {lottery_points} }}
actuator = {{ endpoint = "mock", retry = {{ base_delay_ms = 1, max_delay_ms = 5 }} }}
"#
    );
    let path = dir.join("vcglight.toml");
    std::fs::write(&path, text).unwrap();
    path
}

pub struct Server {
    pub child: Child,
    pub base: String,
}

impl Server {
    /// Starts `vcglight serve` and waits for its listening line.
    pub fn start(config: &Path) -> Self {
        let mut child = Command::new(BIN)
            .args(["serve", "--config"])
            .arg(config)
            .env("RUST_LOG", "warn")
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("spawn server");
        let stdout = child.stdout.take().unwrap();
        let mut line = String::new();
        BufReader::new(stdout).read_line(&mut line).unwrap();
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected server output `{line}`"))
            .to_owned();
        Self {
            child,
            base: format!("http://{addr}"),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    /// SIGKILL, no shutdown hooks.
    pub fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(10))
        .build()
        .unwrap()
}

/// Runs the CLI and returns stdout; panics with stderr on failure.
pub fn run(args: &[&str]) -> String {
    let out = Command::new(BIN).args(args).output().expect("run vcglight");
    assert!(
        out.status.success(),
        "vcglight {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}
