//! Svensson parameter histories: CSV ingestion, unit normalisation, curve
//! extraction and the synthetic offline fixture.

use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{Datelike, Days, Months, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::termstructure::{svensson_to_curve, SvenssonParams, TermStructureError, YieldCurve};

/// The bundled synthetic history, betas in percent.
pub const SYNTHETIC_ECB_CSV: &str = include_str!("../data/synthetic_ecb.csv");

/// `|beta0|` above this marks a file as quoted in percent.
pub const PERCENT_THRESHOLD: f64 = 0.5;

const COLUMNS: [&str; 7] = ["date", "beta0", "beta1", "beta2", "beta3", "tau1", "tau2"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("no data rows")]
    Empty,
    #[error("missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("line {line}: cannot parse {column} from `{value}`")]
    Parse { line: u64, column: &'static str, value: String },
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("duplicate date {0}")]
    DuplicateDate(NaiveDate),
    #[error("no parameters on or before {0}")]
    NoDataBefore(NaiveDate),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    TermStructure(#[from] TermStructureError),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaUnits {
    /// Percent if any `|beta0|` exceeds [`PERCENT_THRESHOLD`].
    #[default]
    Auto,
    Percent,
    Decimal,
}

/// One published day. Betas are decimals after parsing, taus in years.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcbParamRow {
    pub date: NaiveDate,
    pub params: SvenssonParams,
}

pub fn parse_ecb_csv(path: &Path, units: BetaUnits) -> Result<Vec<EcbParamRow>> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    parse_ecb_reader(file, units)
}

/// Reads a header-named delimited table (comma or semicolon). Header
/// matching ignores case and surrounding whitespace; extra columns are
/// ignored. Rows come back sorted by date.
pub fn parse_ecb_reader<R: Read>(mut reader: R, units: BetaUnits) -> Result<Vec<EcbParamRow>> {
    let mut text = String::new();
    reader.read_to_string(&mut text).map_err(|source| DataError::Io { path: PathBuf::from("<input>"), source })?;
    let delimiter = match text.lines().find(|l| !l.trim().is_empty()) {
        Some(h) if h.contains(';') && !h.contains(',') => b';',
        Some(_) => b',',
        None => return Err(DataError::Empty),
    };
    let mut csv = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header: Vec<String> = csv.headers()?.iter().map(|h| h.to_ascii_lowercase()).collect();
    let mut index = [0usize; 7];
    for (slot, name) in index.iter_mut().zip(COLUMNS) {
        *slot = header.iter().position(|h| h == name).ok_or(DataError::MissingColumn(name))?;
    }

    let mut rows = Vec::new();
    for record in csv.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let field = |k: usize| record.get(index[k]).unwrap_or("");
        let date = NaiveDate::parse_from_str(field(0), "%Y-%m-%d").map_err(|_| DataError::Parse {
            line,
            column: COLUMNS[0],
            value: field(0).to_string(),
        })?;
        let mut v = [0.0; 6];
        for (k, slot) in v.iter_mut().enumerate() {
            let raw = field(k + 1);
            *slot = raw
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or(DataError::Parse { line, column: COLUMNS[k + 1], value: raw.to_string() })?;
        }
        if !(v[4] > 0.0 && v[5] > 0.0) {
            return Err(DataError::Row { line, message: format!("tau must be positive (tau1={}, tau2={})", v[4], v[5]) });
        }
        let params = SvenssonParams { beta0: v[0], beta1: v[1], beta2: v[2], beta3: v[3], tau1: v[4], tau2: v[5] };
        rows.push(EcbParamRow { date, params });
    }
    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    rows.sort_by_key(|r| r.date);
    if let Some(w) = rows.windows(2).find(|w| w[0].date == w[1].date) {
        return Err(DataError::DuplicateDate(w[0].date));
    }
    if detect_percent(&rows, units) {
        for r in &mut rows {
            let p = &mut r.params;
            for b in [&mut p.beta0, &mut p.beta1, &mut p.beta2, &mut p.beta3] {
                *b /= 100.0;
            }
        }
    }
    Ok(rows)
}

/// Unit decision for a whole file.
pub fn detect_percent(rows: &[EcbParamRow], units: BetaUnits) -> bool {
    match units {
        BetaUnits::Percent => true,
        BetaUnits::Decimal => false,
        BetaUnits::Auto => rows.iter().any(|r| r.params.beta0.abs() > PERCENT_THRESHOLD),
    }
}

/// Writes rows with betas scaled by `beta_scale` (1 for decimals, 100 for
/// percent), using round-trip float formatting.
pub fn write_ecb_csv<W: Write>(rows: &[EcbParamRow], beta_scale: f64, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(COLUMNS)?;
    for r in rows {
        let p = &r.params;
        out.write_record([
            r.date.format("%Y-%m-%d").to_string(),
            format!("{:?}", p.beta0 * beta_scale),
            format!("{:?}", p.beta1 * beta_scale),
            format!("{:?}", p.beta2 * beta_scale),
            format!("{:?}", p.beta3 * beta_scale),
            format!("{:?}", p.tau1),
            format!("{:?}", p.tau2),
        ])?;
    }
    out.flush().map_err(|source| DataError::Io { path: PathBuf::from("<output>"), source })
}

/// Index of the last row dated on or before `date`.
fn last_on_or_before(rows: &[EcbParamRow], date: NaiveDate) -> Option<usize> {
    rows.partition_point(|r| r.date <= date).checked_sub(1)
}

pub fn curve_on(rows: &[EcbParamRow], date: NaiveDate, months: usize) -> Result<YieldCurve> {
    let i = last_on_or_before(rows, date).ok_or(DataError::NoDataBefore(date))?;
    Ok(svensson_to_curve(&rows[i].params, months)?)
}

/// First date strictly inside the calibration window ending at `anchor`.
pub fn window_start(anchor: NaiveDate, years: u32) -> NaiveDate {
    anchor.checked_sub_months(Months::new(12 * years)).expect("date in range") + Days::new(1)
}

/// Daily curves dated in `(anchor - years, anchor]`, oldest first.
pub fn daily_curves(rows: &[EcbParamRow], anchor: NaiveDate, years: u32, months: usize) -> Result<Vec<YieldCurve>> {
    let from = window_start(anchor, years);
    rows.iter()
        .filter(|r| r.date >= from && r.date <= anchor)
        .map(|r| Ok(svensson_to_curve(&r.params, months)?))
        .collect()
}

fn month_end(year: i32, month: u32) -> NaiveDate {
    let first = NaiveDate::from_ymd_opt(year, month, 1).expect("valid month");
    first + Months::new(1) - Days::new(1)
}

/// Month-end issuance curves for the `count` months ending with the
/// anchor's month, oldest first; each is the last published curve on or
/// before its month end (the anchor itself for the final month). Months
/// before the first published date are dropped.
pub fn monthly_curves(rows: &[EcbParamRow], anchor: NaiveDate, count: usize, months: usize) -> Result<Vec<YieldCurve>> {
    let first = rows.first().ok_or(DataError::Empty)?.date;
    let mut out = Vec::with_capacity(count);
    for back in (0..count).rev() {
        let date = if back == 0 {
            anchor
        } else {
            let m = NaiveDate::from_ymd_opt(anchor.year(), anchor.month(), 1).expect("valid") - Months::new(back as u32);
            month_end(m.year(), m.month())
        };
        if date < first {
            continue;
        }
        out.push(curve_on(rows, date, months)?);
    }
    Ok(out)
}

/// Mean-reverting parameter paths pinned to fixed values at chosen dates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub start: NaiveDate,
    pub end: NaiveDate,
    /// Parameters (decimals) at every pin date and the long-run mean.
    pub target: SvenssonParams,
    /// Extra dates where the path is pinned to `target`; start and end are
    /// always pinned.
    pub pins: Vec<NaiveDate>,
    /// Annual volatility of beta0..beta3 (decimals).
    pub vol: [f64; 4],
    /// Annual mean-reversion speed.
    pub reversion: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let anchor = NaiveDate::from_ymd_opt(2007, 12, 31).expect("valid");
        SyntheticConfig {
            start: NaiveDate::from_ymd_opt(1997, 12, 31).expect("valid"),
            end: anchor,
            target: SvenssonParams { beta0: 0.049, beta1: -0.013, beta2: 0.0, beta3: 0.0, tau1: 1.5, tau2: 5.0 },
            pins: vec![window_start(anchor, 8)],
            vol: [0.006, 0.009, 0.015, 0.015],
            reversion: 0.5,
            seed: 20071231,
        }
    }
}

fn business_days(start: NaiveDate, end: NaiveDate) -> Vec<NaiveDate> {
    start
        .iter_days()
        .take_while(|d| *d <= end)
        .filter(|d| !matches!(d.weekday(), Weekday::Sat | Weekday::Sun))
        .collect()
}

/// Daily business-day history: Ornstein-Uhlenbeck deviations of the betas
/// from the target, with a piecewise-linear correction making them vanish
/// at every pin. Taus stay at the target.
pub fn synthetic_history(cfg: &SyntheticConfig) -> Vec<EcbParamRow> {
    let dates = business_days(cfg.start, cfg.end);
    let dt = 1.0 / 252.0;
    let decay = (-cfg.reversion * dt).exp();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut dev = vec![[0.0f64; 4]; dates.len()];
    for i in 1..dates.len() {
        for k in 0..4 {
            let sd = cfg.vol[k] * ((1.0 - decay * decay) / (2.0 * cfg.reversion)).sqrt();
            let z: f64 = rng.sample(StandardNormal);
            dev[i][k] = decay * dev[i - 1][k] + sd * z;
        }
    }

    let mut pin_idx: Vec<usize> = cfg
        .pins
        .iter()
        .filter_map(|p| dates.iter().position(|d| d >= p))
        .chain([0, dates.len().saturating_sub(1)])
        .collect();
    pin_idx.sort_unstable();
    pin_idx.dedup();
    for w in pin_idx.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (da, db) = (dev[a], dev[b]);
        for (i, d) in dev.iter_mut().enumerate().take(b + 1).skip(a) {
            let s = (i - a) as f64 / (b - a) as f64;
            for k in 0..4 {
                d[k] -= da[k] + s * (db[k] - da[k]);
            }
        }
    }
    for &i in &pin_idx {
        dev[i] = [0.0; 4];
    }

    let t = cfg.target;
    dates
        .into_iter()
        .zip(dev)
        .map(|(date, d)| EcbParamRow {
            date,
            params: SvenssonParams {
                beta0: t.beta0 + d[0],
                beta1: t.beta1 + d[1],
                beta2: t.beta2 + d[2],
                beta3: t.beta3 + d[3],
                tau1: t.tau1,
                tau2: t.tau2,
            },
        })
        .collect()
}
