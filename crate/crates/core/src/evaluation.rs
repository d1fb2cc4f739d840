//! Held-out evaluation of strategies: plain (non-differentiable) episode
//! replay, terminal-equity statistics, paired comparison and report files.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::balance_sheet::{restructure, roll_forward, BalanceSheetError, RunoffSetup, ValuedState};
use crate::strategies::Strategy;
use crate::termstructure::discount;
use crate::training::Scenarios;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scenario {scenario}: {source}")]
    Episode { scenario: usize, source: BalanceSheetError },
    #[error("horizon {horizon} exceeds the {months}-month setup")]
    Horizon { horizon: usize, months: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("strategies were evaluated on different batches ({0} vs {1} scenarios)")]
    Unpaired(usize, usize),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// What happened along one market path.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpisodeOutcome {
    pub initial_equity: f64,
    pub terminal_equity: f64,
    pub liabilities_paid: f64,
    pub penalties: f64,
    pub transaction_costs: f64,
    /// Remaining liability value at the horizon.
    pub open_liabilities: f64,
}

impl EpisodeOutcome {
    pub fn is_finite(&self) -> bool {
        [self.initial_equity, self.terminal_equity, self.liabilities_paid, self.penalties, self.transaction_costs]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Replays `strategy` on one path with the plain balance-sheet functions.
/// No action is taken at the horizon itself.
pub fn run_episode(
    strategy: &dyn Strategy,
    setup: &RunoffSetup,
    path: &crate::scenarios::MarketPath,
    horizon: usize,
) -> std::result::Result<EpisodeOutcome, BalanceSheetError> {
    let fr = &setup.frictions;
    let mut d = discount(&path.curves[0]);
    let mut state = ValuedState::mark(setup.initial.clone(), &d, path.equity[0], &setup.liabilities);
    let mut out = EpisodeOutcome { initial_equity: state.valuation.equity, ..Default::default() };
    for t in 0..horizon {
        let curve = &path.curves[t];
        let price = path.equity[t];
        let action = strategy.act(&state, curve, &d, price);
        let (post, rec) = restructure(&state, &action, price, &d, &setup.universe, fr)?;
        out.transaction_costs += rec.transaction_cost;
        d = discount(&path.curves[t + 1]);
        let (next, roll) = roll_forward(&post, &d, path.equity[t + 1], &setup.liabilities, fr);
        out.liabilities_paid += roll.liability_paid;
        out.penalties += roll.penalty;
        state = next;
    }
    out.terminal_equity = state.valuation.equity;
    out.open_liabilities = state.valuation.liability_value;
    Ok(out)
}

pub const QUANTILE_LEVELS: [f64; 7] = [0.01, 0.05, 0.25, 0.50, 0.75, 0.95, 0.99];

/// Nearest-rank quantile: the `ceil(q n)`-th smallest value.
pub fn quantile_nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub quantiles: [f64; 7],
    pub bankrupt_fraction: f64,
    pub initial_equity: f64,
    /// `(mean terminal equity / initial equity)^(12 / T) - 1`.
    pub annual_roe: f64,
}

pub fn summarize(terminal: &[f64], initial_equity: f64, horizon: usize) -> Result<Summary> {
    if terminal.is_empty() {
        return Err(EvalError::Empty("terminal equities"));
    }
    let n = terminal.len() as f64;
    let mean = terminal.iter().sum::<f64>() / n;
    let var = if terminal.len() > 1 {
        terminal.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let mut sorted = terminal.to_vec();
    sorted.sort_by(f64::total_cmp);
    let quantiles = QUANTILE_LEVELS.map(|q| quantile_nearest_rank(&sorted, q));
    let bankrupt = terminal.iter().filter(|&&x| x <= 0.0).count() as f64 / n;
    let annual_roe = (mean / initial_equity).powf(12.0 / horizon as f64) - 1.0;
    Ok(Summary {
        count: terminal.len(),
        mean,
        std_dev: var.sqrt(),
        quantiles,
        bankrupt_fraction: bankrupt,
        initial_equity,
        annual_roe,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub strategy: String,
    pub horizon: usize,
    pub outcomes: Vec<EpisodeOutcome>,
    pub summary: Summary,
    /// Scenarios whose outcome contains a non-finite value.
    pub non_finite: Vec<usize>,
}

impl EvalResult {
    pub fn terminal_equities(&self) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.terminal_equity).collect()
    }
}

pub fn evaluate(
    strategy: &dyn Strategy,
    setup: &RunoffSetup,
    scenarios: &(impl Scenarios + ?Sized),
    horizon: usize,
) -> Result<EvalResult> {
    if horizon > setup.months {
        return Err(EvalError::Horizon { horizon, months: setup.months });
    }
    let outcomes = (0..scenarios.count())
        .into_par_iter()
        .map(|i| {
            run_episode(strategy, setup, &scenarios.market_path(i), horizon)
                .map_err(|source| EvalError::Episode { scenario: i, source })
        })
        .collect::<Result<Vec<_>>>()?;
    let non_finite = outcomes.iter().enumerate().filter(|(_, o)| !o.is_finite()).map(|(i, _)| i).collect();
    let terminal: Vec<f64> = outcomes.iter().map(|o| o.terminal_equity).collect();
    let initial = outcomes.first().map_or(f64::NAN, |o| o.initial_equity);
    let summary = summarize(&terminal, initial, horizon)?;
    Ok(EvalResult { strategy: strategy.name().to_string(), horizon, outcomes, summary, non_finite })
}

/// Equal-width bins over `[lo, hi]`; the last bin is closed.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let w = self.width();
        (self.lo + w * bin as f64, if bin + 1 == self.counts.len() { self.hi } else { self.lo + w * (bin + 1) as f64 })
    }

    fn bin_of(&self, x: f64) -> usize {
        let bins = self.counts.len();
        if self.hi <= self.lo {
            return 0;
        }
        (((x - self.lo) / (self.hi - self.lo) * bins as f64) as usize).min(bins - 1)
    }
}

pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if values.is_empty() || bins == 0 {
        return Err(EvalError::Empty("histogram input"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(histogram_on(values, bins, lo, hi))
}

fn histogram_on(values: &[f64], bins: usize, lo: f64, hi: f64) -> Histogram {
    let mut h = Histogram { lo, hi, counts: vec![0; bins] };
    for &x in values {
        let b = h.bin_of(x);
        h.counts[b] += 1;
    }
    h
}

/// Two series binned on their common range.
pub fn paired_histogram(a: &[f64], b: &[f64], bins: usize) -> Result<(Histogram, Histogram)> {
    if a.is_empty() || b.is_empty() || bins == 0 {
        return Err(EvalError::Empty("histogram input"));
    }
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((histogram_on(a, bins, lo, hi), histogram_on(b, bins, lo, hi)))
}

/// Paired comparison of two strategies on the same scenarios.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub a: EvalResult,
    pub b: EvalResult,
    pub excess_roe: f64,
    pub mean_difference: f64,
    pub t_statistic: f64,
    /// One-sided p-value for `mean(a - b) > 0`.
    pub p_value: f64,
}

pub fn compare(a: EvalResult, b: EvalResult) -> Result<Comparison> {
    if a.outcomes.len() != b.outcomes.len() {
        return Err(EvalError::Unpaired(a.outcomes.len(), b.outcomes.len()));
    }
    let diffs: Vec<f64> = a.outcomes.iter().zip(&b.outcomes).map(|(x, y)| x.terminal_equity - y.terminal_equity).collect();
    let (t, p) = paired_t_test(&diffs);
    let mean_difference = diffs.iter().sum::<f64>() / diffs.len().max(1) as f64;
    Ok(Comparison {
        excess_roe: a.summary.annual_roe - b.summary.annual_roe,
        mean_difference,
        t_statistic: t,
        p_value: p,
        a,
        b,
    })
}

/// One-sided paired t-test of `mean(d) > 0`; returns `(t, p)`.
pub fn paired_t_test(diffs: &[f64]) -> (f64, f64) {
    let n = diffs.len();
    if n < 2 {
        return (f64::NAN, 1.0);
    }
    let nf = n as f64;
    let mean = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    if var == 0.0 {
        return if mean > 0.0 { (f64::INFINITY, 0.0) } else { (0.0, 1.0) };
    }
    let t = mean / (var / nf).sqrt();
    let dist = StudentsT::new(0.0, 1.0, nf - 1.0).expect("valid degrees of freedom");
    (t, dist.sf(t))
}

pub const SUMMARY_ROWS: [&str; 14] = [
    "count",
    "mean",
    "std_dev",
    "q01",
    "q05",
    "q25",
    "q50",
    "q75",
    "q95",
    "q99",
    "bankrupt_fraction",
    "initial_equity",
    "horizon_months",
    "annual_roe",
];

pub const ROE_DEFINITION: &str = "# annual_roe = (mean(terminal_equity) / initial_equity)^(12 / horizon_months) - 1";

fn fmt(x: f64) -> String {
    format!("{x:?}")
}

fn summary_values(r: &EvalResult) -> Vec<String> {
    let s = &r.summary;
    let mut v = vec![s.count.to_string(), fmt(s.mean), fmt(s.std_dev)];
    v.extend(s.quantiles.iter().map(|&q| fmt(q)));
    v.extend([fmt(s.bankrupt_fraction), fmt(s.initial_equity), r.horizon.to_string(), fmt(s.annual_roe)]);
    v
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })
}

fn io_ctx<T>(path: &Path, r: io::Result<T>) -> Result<T> {
    r.map_err(|source| EvalError::Io { path: path.to_path_buf(), source })
}

fn csv_ctx<T>(path: &Path, r: std::result::Result<T, csv::Error>) -> Result<T> {
    r.map_err(|e| EvalError::Io { path: path.to_path_buf(), source: e.into() })
}

pub fn write_outcomes_csv(result: &EvalResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    csv_ctx(path, w.write_record(["scenario", "initial_equity", "terminal_equity", "liabilities_paid", "penalties", "transaction_costs"]))?;
    for (i, o) in result.outcomes.iter().enumerate() {
        csv_ctx(
            path,
            w.write_record([
                i.to_string(),
                fmt(o.initial_equity),
                fmt(o.terminal_equity),
                fmt(o.liabilities_paid),
                fmt(o.penalties),
                fmt(o.transaction_costs),
            ]),
        )?;
    }
    io_ctx(path, w.flush())
}

/// Summary CSV with one column per strategy, preceded by the RoE definition.
pub fn write_summary_csv(results: &[&EvalResult], path: &Path) -> Result<()> {
    let mut file = create(path)?;
    io_ctx(path, writeln!(file, "{ROE_DEFINITION}"))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["statistic".to_string()];
    header.extend(results.iter().map(|r| r.strategy.clone()));
    csv_ctx(path, w.write_record(&header))?;
    let columns: Vec<Vec<String>> = results.iter().map(|r| summary_values(r)).collect();
    for (row, name) in SUMMARY_ROWS.iter().enumerate() {
        let mut rec = vec![name.to_string()];
        rec.extend(columns.iter().map(|c| c[row].clone()));
        csv_ctx(path, w.write_record(&rec))?;
    }
    io_ctx(path, w.flush())
}

fn write_histogram_csv(ha: &Histogram, hb: &Histogram, names: (&str, &str), path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    csv_ctx(path, w.write_record(["bin_lo", "bin_hi", &format!("count_{}", names.0), &format!("count_{}", names.1)]))?;
    for bin in 0..ha.counts.len() {
        let (lo, hi) = ha.edges(bin);
        csv_ctx(path, w.write_record([fmt(lo), fmt(hi), ha.counts[bin].to_string(), hb.counts[bin].to_string()]))?;
    }
    io_ctx(path, w.flush())
}

/// Self-contained SVG bar chart of two overlaid histograms.
pub fn histogram_svg(ha: &Histogram, hb: &Histogram, names: (&str, &str)) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    let bins = ha.counts.len();
    let peak = ha.counts.iter().chain(&hb.counts).copied().max().unwrap_or(1).max(1) as f64;
    let bw = (W - 2.0 * M) / bins as f64;
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    s.push_str(&format!("<rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"));
    for (h, colour, name, offset) in [(hb, "#1f77b4", names.1, 0.0), (ha, "#ff7f0e", names.0, 0.5)] {
        s.push_str(&format!("<g fill=\"{colour}\" fill-opacity=\"0.6\" class=\"series\" data-name=\"{name}\">\n"));
        for (i, &c) in h.counts.iter().enumerate() {
            let height = (H - 2.0 * M) * c as f64 / peak;
            s.push_str(&format!(
                "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\"/>\n",
                M + bw * (i as f64 + offset * 0.0),
                H - M - height,
                bw,
                height
            ));
        }
        s.push_str("</g>\n");
    }
    s.push_str(&format!(
        "<line x1=\"{M}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"black\"/>\n",
        y = H - M,
        x2 = W - M
    ));
    s.push_str(&format!("<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{y}\" stroke=\"black\"/>\n", y = H - M));
    s.push_str(&format!(
        "<text x=\"{M}\" y=\"{:.1}\" font-size=\"12\">{:.2}</text>\n",
        H - M + 16.0,
        ha.lo
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"end\">{:.2}</text>\n",
        W - M,
        H - M + 16.0,
        ha.hi
    ));
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"14\" text-anchor=\"middle\">terminal equity: {} (orange) vs {} (blue)</text>\n",
        W / 2.0,
        M / 2.0,
        names.0,
        names.1
    ));
    s.push_str("</svg>\n");
    s
}

/// Files written by [`report`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub outcomes: PathBuf,
    pub summary: PathBuf,
    pub comparison: PathBuf,
    pub histogram: PathBuf,
    pub svg: Option<PathBuf>,
}

/// Writes the paired per-scenario outcomes, summary, comparison statistics
/// and histogram data for a comparison.
pub fn report(cmp: &Comparison, dir: &Path, bins: usize, svg: bool) -> Result<ReportFiles> {
    io_ctx(dir, std::fs::create_dir_all(dir))?;
    let (na, nb) = (cmp.a.strategy.as_str(), cmp.b.strategy.as_str());
    let (na, nb) = if na == nb { ("a", "b") } else { (na, nb) };

    let outcomes = dir.join("paired_outcomes.csv");
    let mut w = csv::Writer::from_writer(create(&outcomes)?);
    csv_ctx(&outcomes, w.write_record(["scenario", &format!("terminal_equity_{na}"), &format!("terminal_equity_{nb}"), "difference"]))?;
    for (i, (x, y)) in cmp.a.outcomes.iter().zip(&cmp.b.outcomes).enumerate() {
        let (x, y) = (x.terminal_equity, y.terminal_equity);
        csv_ctx(&outcomes, w.write_record([i.to_string(), fmt(x), fmt(y), fmt(x - y)]))?;
    }
    io_ctx(&outcomes, w.flush())?;
    drop(w);

    let summary = dir.join("summary.csv");
    let mut a = cmp.a.clone();
    let mut b = cmp.b.clone();
    a.strategy = na.to_string();
    b.strategy = nb.to_string();
    write_summary_csv(&[&a, &b], &summary)?;

    let comparison = dir.join("comparison.csv");
    let mut w = csv::Writer::from_writer(create(&comparison)?);
    csv_ctx(&comparison, w.write_record(["statistic", "value"]))?;
    for (k, v) in [
        ("excess_roe", cmp.excess_roe),
        ("mean_difference", cmp.mean_difference),
        ("t_statistic", cmp.t_statistic),
        ("p_value", cmp.p_value),
    ] {
        csv_ctx(&comparison, w.write_record([k, &fmt(v)]))?;
    }
    io_ctx(&comparison, w.flush())?;
    drop(w);

    let histogram = dir.join("histogram.csv");
    let (ha, hb) = paired_histogram(&cmp.a.terminal_equities(), &cmp.b.terminal_equities(), bins)?;
    write_histogram_csv(&ha, &hb, (na, nb), &histogram)?;
    let svg = if svg {
        let p = dir.join("histogram.svg");
        io_ctx(&p, std::fs::write(&p, histogram_svg(&ha, &hb, (na, nb))))?;
        Some(p)
    } else {
        None
    };
    Ok(ReportFiles { outcomes, summary, comparison, histogram, svg })
}
