//! Energy savings over a baseline level and correlation statistics between
//! light preferences and atmospheric readings.

use alloc::vec::Vec;

use crate::engine::Segment;
use crate::mechanism::MechanismConfig;

/// Default nearest-sample join window between votes and sensor readings.
pub const DEFAULT_JOIN_WINDOW_MS: u64 = 5 * 60_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("trace is empty or has zero total duration")]
    EmptyTrace,
    #[error("level {level}% exceeds baseline {baseline}%")]
    InvalidLevel { level: u8, baseline: u8 },
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("series `{0}` has zero variance")]
    ZeroVariance(&'static str),
    #[error("correlation {0} outside [-1, 1]")]
    InvalidCorrelation(f64),
    #[error("no vote could be paired with a sensor sample")]
    NoJoinedPairs,
    #[error("sensor sample at {timestamp_ms} ms: {reason}")]
    InvalidSample {
        timestamp_ms: u64,
        reason: &'static str,
    },
}

/// A stretch of time at one implemented level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelSpan {
    pub duration_ms: u64,
    pub level_percent: u8,
}

/// Implemented levels of a sequence of closed segments.
pub fn level_trace(segments: &[Segment], cfg: &MechanismConfig) -> Vec<LevelSpan> {
    segments
        .iter()
        .map(|s| LevelSpan {
            duration_ms: s.duration_ms(),
            level_percent: cfg.settings[s.outcome].level_percent,
        })
        .collect()
}

/// Percent of energy saved relative to running at `baseline_percent` the
/// whole time: `100 * (1 - time_weighted_mean(level) / baseline)`, rounded
/// half-up to two decimals.
pub fn energy_savings(trace: &[LevelSpan], baseline_percent: u8) -> Result<f64, StatsError> {
    let mut weighted: u128 = 0;
    let mut total: u128 = 0;
    for span in trace {
        if span.level_percent > baseline_percent {
            return Err(StatsError::InvalidLevel {
                level: span.level_percent,
                baseline: baseline_percent,
            });
        }
        let d = u128::from(span.duration_ms);
        weighted += d * u128::from(baseline_percent - span.level_percent);
        total += d * u128::from(baseline_percent);
    }
    if total == 0 {
        return Err(StatsError::EmptyTrace);
    }
    // Hundredths of a percent, rounded half-up.
    let hundredths = (weighted * 10_000 * 2 + total) / (total * 2);
    Ok(hundredths as f64 / 100.0)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (`n - 1` denominator).
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    libm::sqrt(ss / (xs.len() - 1) as f64)
}

/// Pearson product-moment correlation.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(StatsError::TooFewSamples {
            needed: 3,
            got: xs.len(),
        });
    }
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(StatsError::ZeroVariance("x"));
    }
    if syy == 0.0 {
        return Err(StatsError::ZeroVariance("y"));
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Two-sided p-value of a correlation `r` over `n` pairs, from the Student-t
/// distribution with `n - 2` degrees of freedom.
pub fn p_value(r: f64, n: usize) -> Result<f64, StatsError> {
    if n < 3 {
        return Err(StatsError::TooFewSamples { needed: 3, got: n });
    }
    if !(-1.0..=1.0).contains(&r) {
        return Err(StatsError::InvalidCorrelation(r));
    }
    if libm::fabs(r) == 1.0 {
        return Ok(0.0);
    }
    let df = (n - 2) as f64;
    let t2 = r * r * df / (1.0 - r * r);
    // P(|T| > t) = I_{df / (df + t^2)}(df / 2, 1 / 2)
    Ok(beta_reg(df / 2.0, 0.5, df / (df + t2)).clamp(0.0, 1.0))
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn beta_reg(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b)
        + a * libm::log(x)
        + b * libm::log1p(-x);
    let front = libm::exp(ln_front);
    // The continued fraction converges fast for x < (a + 1) / (a + b + 2).
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Continued fraction for the incomplete beta, modified Lentz method.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 500;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;

    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if libm::fabs(d) < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if libm::fabs(d) < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if libm::fabs(c) < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if libm::fabs(d) < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if libm::fabs(c) < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if libm::fabs(del - 1.0) < EPS {
            break;
        }
    }
    h
}

/// One atmospheric reading.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorSample {
    pub timestamp_ms: u64,
    pub humidity_percent: f64,
    pub temperature_deg_f: f64,
    pub pressure_in_hg: f64,
    pub solar_radiation_w_per_m2: f64,
}

impl SensorSample {
    pub fn validate(&self) -> Result<(), StatsError> {
        let fail = |reason| {
            Err(StatsError::InvalidSample {
                timestamp_ms: self.timestamp_ms,
                reason,
            })
        };
        let all = [
            self.humidity_percent,
            self.temperature_deg_f,
            self.pressure_in_hg,
            self.solar_radiation_w_per_m2,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return fail("non-finite reading");
        }
        if !(0.0..=100.0).contains(&self.humidity_percent) {
            return fail("humidity must be within [0, 100]");
        }
        if self.pressure_in_hg <= 0.0 {
            return fail("pressure must be positive");
        }
        if self.solar_radiation_w_per_m2 < 0.0 {
            return fail("solar radiation must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AtmosphericVariable {
    Humidity,
    Temperature,
    Pressure,
    SolarRadiation,
}

impl AtmosphericVariable {
    pub const ALL: [Self; 4] = [
        Self::Humidity,
        Self::Temperature,
        Self::Pressure,
        Self::SolarRadiation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Humidity => "humidity",
            Self::Temperature => "temperature",
            Self::Pressure => "pressure",
            Self::SolarRadiation => "solar_radiation",
        }
    }

    pub fn read(self, s: &SensorSample) -> f64 {
        match self {
            Self::Humidity => s.humidity_percent,
            Self::Temperature => s.temperature_deg_f,
            Self::Pressure => s.pressure_in_hg,
            Self::SolarRadiation => s.solar_radiation_w_per_m2,
        }
    }
}

/// A vote encoded as the level of the preferred setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VoteSample {
    pub timestamp_ms: u64,
    pub level_percent: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationRow {
    pub variable: &'static str,
    pub mean: f64,
    pub sd: f64,
    pub r: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationTable {
    /// Number of vote/sensor pairs.
    pub n: usize,
    pub preference_mean: f64,
    pub preference_sd: f64,
    pub rows: Vec<CorrelationRow>,
}

/// Index of the sample nearest to `t` in a timestamp-sorted slice.
fn nearest(sorted: &[&SensorSample], t: u64) -> Option<usize> {
    if sorted.is_empty() {
        return None;
    }
    let i = sorted.partition_point(|s| s.timestamp_ms < t);
    let candidates = [i.checked_sub(1), (i < sorted.len()).then_some(i)];
    candidates
        .into_iter()
        .flatten()
        .min_by_key(|&j| sorted[j].timestamp_ms.abs_diff(t))
}

/// Pairs every vote with the nearest sensor sample within `window_ms` and
/// correlates each atmospheric variable with the voted level.
pub fn preference_correlations(
    votes: &[VoteSample],
    sensors: &[SensorSample],
    window_ms: u64,
) -> Result<CorrelationTable, StatsError> {
    let mut sorted: Vec<&SensorSample> = sensors.iter().collect();
    sorted.sort_by_key(|s| s.timestamp_ms);

    let mut prefs = Vec::new();
    let mut joined = Vec::new();
    for v in votes {
        if let Some(j) = nearest(&sorted, v.timestamp_ms) {
            if sorted[j].timestamp_ms.abs_diff(v.timestamp_ms) <= window_ms {
                prefs.push(f64::from(v.level_percent));
                joined.push(sorted[j]);
            }
        }
    }
    if prefs.is_empty() {
        return Err(StatsError::NoJoinedPairs);
    }

    let n = prefs.len();
    let rows = AtmosphericVariable::ALL
        .iter()
        .map(|&var| {
            let xs: Vec<f64> = joined.iter().map(|s| var.read(s)).collect();
            let r = pearson_r(&xs, &prefs).map_err(|e| match e {
                StatsError::ZeroVariance("x") => StatsError::ZeroVariance(var.name()),
                StatsError::ZeroVariance(_) => StatsError::ZeroVariance("preference"),
                other => other,
            })?;
            Ok(CorrelationRow {
                variable: var.name(),
                mean: mean(&xs),
                sd: std_dev(&xs),
                r,
                p: p_value(r, n)?,
            })
        })
        .collect::<Result<Vec<_>, StatsError>>()?;

    Ok(CorrelationTable {
        n,
        preference_mean: mean(&prefs),
        preference_sd: std_dev(&prefs),
        rows,
    })
}
