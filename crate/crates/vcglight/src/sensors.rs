//! CSV formats: sensor readings and votes in, correlation tables out.

use std::io::{Read, Write};
use std::path::Path;

use vcglight_core::analytics::{CorrelationTable, SensorSample, VoteSample};
use vcglight_core::engine::{EventKind, SessionEvent};
use vcglight_core::MechanismConfig;

pub const SENSOR_HEADER: [&str; 5] = [
    "timestamp_ms",
    "humidity_percent",
    "temperature_degF",
    "pressure_inHg",
    "solar_radiation_W_per_m2",
];

pub const VOTE_HEADER: [&str; 2] = ["timestamp_ms", "level_percent"];

pub const CORRELATION_HEADER: [&str; 5] = ["variable", "mean", "sd", "r", "p"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error("missing column `{missing}`; expected header: {expected}")]
    MissingColumn { missing: String, expected: String },
    #[error("{} malformed row(s): {}", .0.len(), summarize(.0))]
    Rows(Vec<RowError>),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn summarize(rows: &[RowError]) -> String {
    let shown: Vec<String> = rows
        .iter()
        .take(5)
        .map(|r| format!("line {}: {}", r.line, r.message))
        .collect();
    let more = rows.len().saturating_sub(shown.len());
    if more > 0 {
        format!("{}; and {more} more", shown.join("; "))
    } else {
        shown.join("; ")
    }
}

/// Column positions of `expected` in the header row.
fn locate(headers: &csv::StringRecord, expected: &[&str]) -> Result<Vec<usize>, CsvError> {
    expected
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| CsvError::MissingColumn {
                    missing: (*name).to_owned(),
                    expected: expected.join(","),
                })
        })
        .collect()
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, name: &str) -> Result<T, String> {
    let raw = rec.get(idx).ok_or_else(|| format!("missing value for {name}"))?;
    raw.trim()
        .parse()
        .map_err(|_| format!("cannot parse {name} from `{raw}`"))
}

/// Reads rows with `parse`, collecting every malformed row before failing.
fn read_rows<R: Read, T>(
    reader: R,
    expected: &[&str],
    mut parse: impl FnMut(&csv::StringRecord, &[usize]) -> Result<T, String>,
) -> Result<Vec<T>, CsvError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let cols = locate(rdr.headers()?, expected)?;
    let mut out = Vec::new();
    let mut bad = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        match parse(&rec, &cols) {
            Ok(v) => out.push(v),
            Err(message) => bad.push(RowError { line, message }),
        }
    }
    if bad.is_empty() {
        Ok(out)
    } else {
        Err(CsvError::Rows(bad))
    }
}

fn open(path: &Path) -> Result<std::fs::File, CsvError> {
    std::fs::File::open(path).map_err(|source| CsvError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses, validates and sorts sensor readings.
pub fn parse_sensor_csv<R: Read>(reader: R) -> Result<Vec<SensorSample>, CsvError> {
    let mut samples = read_rows(reader, &SENSOR_HEADER, |rec, c| {
        let s = SensorSample {
            timestamp_ms: field(rec, c[0], SENSOR_HEADER[0])?,
            humidity_percent: field(rec, c[1], SENSOR_HEADER[1])?,
            temperature_deg_f: field(rec, c[2], SENSOR_HEADER[2])?,
            pressure_in_hg: field(rec, c[3], SENSOR_HEADER[3])?,
            solar_radiation_w_per_m2: field(rec, c[4], SENSOR_HEADER[4])?,
        };
        s.validate().map_err(|e| e.to_string())?;
        Ok(s)
    })?;
    samples.sort_by_key(|s| s.timestamp_ms);
    Ok(samples)
}

pub fn ingest_sensor_csv(path: &Path) -> Result<Vec<SensorSample>, CsvError> {
    parse_sensor_csv(open(path)?)
}

pub fn parse_vote_csv<R: Read>(reader: R) -> Result<Vec<VoteSample>, CsvError> {
    let mut votes = read_rows(reader, &VOTE_HEADER, |rec, c| {
        let level: u8 = field(rec, c[1], VOTE_HEADER[1])?;
        if level > 100 {
            return Err(format!("level_percent {level} exceeds 100"));
        }
        Ok(VoteSample {
            timestamp_ms: field(rec, c[0], VOTE_HEADER[0])?,
            level_percent: level,
        })
    })?;
    votes.sort_by_key(|v| v.timestamp_ms);
    Ok(votes)
}

pub fn ingest_vote_csv(path: &Path) -> Result<Vec<VoteSample>, CsvError> {
    parse_vote_csv(open(path)?)
}

/// Level of the preferred setting of every ballot cast in `events`.
pub fn votes_from_events(events: &[SessionEvent], cfg: &MechanismConfig) -> Vec<VoteSample> {
    events
        .iter()
        .filter_map(|e| {
            let ballot = match &e.kind {
                EventKind::Login {
                    ballot: Some(b), ..
                } => b,
                EventKind::BallotChange { ballot, .. } => ballot,
                _ => return None,
            };
            Some(VoteSample {
                timestamp_ms: e.timestamp_ms,
                level_percent: cfg.settings[ballot.preferred()].level_percent,
            })
        })
        .collect()
}

pub fn write_sensor_csv<W: Write>(writer: W, samples: &[SensorSample]) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SENSOR_HEADER)?;
    for s in samples {
        w.write_record([
            s.timestamp_ms.to_string(),
            s.humidity_percent.to_string(),
            s.temperature_deg_f.to_string(),
            s.pressure_in_hg.to_string(),
            s.solar_radiation_w_per_m2.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_vote_csv<W: Write>(writer: W, votes: &[VoteSample]) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(VOTE_HEADER)?;
    for v in votes {
        w.write_record([v.timestamp_ms.to_string(), v.level_percent.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// One row per variable, preceded by a `preference` row whose `r` and `p`
/// are left empty.
pub fn write_correlation_csv<W: Write>(writer: W, table: &CorrelationTable) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CORRELATION_HEADER)?;
    w.write_record([
        "preference".to_owned(),
        table.preference_mean.to_string(),
        table.preference_sd.to_string(),
        String::new(),
        String::new(),
    ])?;
    for row in &table.rows {
        w.write_record([
            row.variable.to_owned(),
            row.mean.to_string(),
            row.sd.to_string(),
            row.r.to_string(),
            row.p.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
