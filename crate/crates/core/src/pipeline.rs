//! Assembles market data, the runoff setup, the factor model, scenario
//! batches and strategies from a [`RunConfig`].

use anyhow::{Context, Result};

use crate::balance_sheet::{initial_state, liability_schedule, OpeningBook, RunoffSetup};
use crate::config::RunConfig;
use crate::data::{self, EcbParamRow};
use crate::scenarios::{calibrate_pca, generate_batch, PcaModel, ScenarioBatch};
use crate::strategies::{Benchmark, PolicyStack};
use crate::termstructure::{BondSpec, YieldCurve};

/// Parameter rows from the configured file, or the bundled fixture.
pub fn load_rows(cfg: &RunConfig) -> Result<Vec<EcbParamRow>> {
    match &cfg.data.ecb_csv {
        Some(path) => data::parse_ecb_csv(path, cfg.data.beta_units).with_context(|| format!("ingesting {}", path.display())),
        None => data::parse_ecb_reader(data::SYNTHETIC_ECB_CSV.as_bytes(), cfg.data.beta_units).context("bundled fixture"),
    }
}

/// Curves derived from a parameter history.
#[derive(Debug, Clone)]
pub struct Market {
    pub anchor: YieldCurve,
    /// Daily calibration window, oldest first.
    pub daily: Vec<YieldCurve>,
    /// Month-end issuance curves ending at the anchor, oldest first.
    pub monthly: Vec<YieldCurve>,
}

pub fn market(cfg: &RunConfig, rows: &[EcbParamRow]) -> Result<Market> {
    let n = cfg.model.months;
    let anchor_date = cfg.data.anchor;
    let anchor = data::curve_on(rows, anchor_date, n)?;
    let daily = data::daily_curves(rows, anchor_date, cfg.data.pca_window_years, n)?;
    let need = cfg.model.maturities.iter().copied().max().unwrap_or(1);
    let monthly = data::monthly_curves(rows, anchor_date, need, n)?;
    Ok(Market { anchor, daily, monthly })
}

pub fn universe(cfg: &RunConfig) -> Result<Vec<BondSpec>> {
    cfg.model.maturities.iter().map(|&m| Ok(BondSpec::new(m)?)).collect()
}

pub fn runoff_setup(cfg: &RunConfig, market: &Market) -> Result<(RunoffSetup, OpeningBook)> {
    let universe = universe(cfg)?;
    let l = &cfg.liabilities;
    let liabilities = liability_schedule(l.a, l.b, cfg.model.months, l.face)?;
    let book = initial_state(&market.monthly, &market.anchor, cfg.equity.s0, &universe, &cfg.legacy)
        .context("building the opening balance sheet")?;
    let setup = RunoffSetup {
        months: cfg.model.months,
        universe,
        liabilities,
        frictions: cfg.frictions,
        initial: book.state.clone(),
    };
    Ok((setup, book))
}

pub fn calibrate(cfg: &RunConfig, market: &Market) -> Result<PcaModel> {
    calibrate_pca(&market.daily, cfg.model.n_factors, cfg.model.trading_days_per_month).context("calibrating the factor model")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Eval => "eval",
        }
    }

    pub fn count_and_seed(self, cfg: &RunConfig) -> (usize, u64) {
        let s = &cfg.scenarios;
        match self {
            Split::Train => (s.train_count, s.train_seed),
            Split::Validation => (s.validation_count, s.validation_seed),
            Split::Eval => (s.eval_count, s.eval_seed),
        }
    }
}

pub fn scenarios(cfg: &RunConfig, anchor: &YieldCurve, model: &PcaModel, split: Split) -> Result<ScenarioBatch> {
    let (count, seed) = split.count_and_seed(cfg);
    generate_batch(anchor, model, &cfg.equity, cfg.model.months, count, seed)
        .with_context(|| format!("generating the {} scenarios", split.name()))
}

pub fn initial_policy(cfg: &RunConfig, setup: &RunoffSetup) -> PolicyStack {
    let sizes = PolicyStack::layer_sizes(setup.universe.len(), cfg.model.hidden);
    PolicyStack::random(setup.months, &sizes, &cfg.policy_init)
}

pub fn benchmark(setup: &RunoffSetup) -> Benchmark {
    Benchmark {
        months: setup.months,
        initial_units: setup.initial.stock_units,
        liquidity_floor: setup.frictions.liquidity_floor,
        universe: setup.universe.clone(),
    }
}
