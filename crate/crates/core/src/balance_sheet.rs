//! Runoff balance-sheet mechanics: liability schedule, legacy portfolio,
//! restructuring and monthly roll-forward.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::termstructure::{
    self, dot, issue_bond, par_coupon, BondSpec, CashFlowVector, DiscountCurve, TermStructureError,
    YieldCurve,
};

#[derive(Debug, Error, PartialEq)]
pub enum BalanceSheetError {
    #[error("beta CDF argument out of range: x={x}, a={a}, b={b}")]
    BetaDomain { x: f64, a: f64, b: f64 },
    #[error("legacy history has {got} monthly curves, need {need}")]
    LegacyHistory { got: usize, need: usize },
    #[error("action has {got} bond holdings, universe has {expected}")]
    ActionShape { got: usize, expected: usize },
    #[error("action component {index} is negative or non-finite ({value})")]
    InvalidAction { index: usize, value: f64 },
    #[error("invalid legacy configuration: {0}")]
    LegacyConfig(String),
    #[error(transparent)]
    TermStructure(#[from] TermStructureError),
}

pub type Result<T> = std::result::Result<T, BalanceSheetError>;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for positive arguments.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn beta_cdf(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) || !(a > 0.0) || !(b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(BalanceSheetError::BetaDomain { x, a, b });
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let ln_beta = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    let front = (a * x.ln() + b * (1.0 - x).ln() - ln_beta).exp();
    if x > a / (a + b) {
        Ok(1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b)
    } else {
        Ok(front * beta_continued_fraction(x, a, b) / a)
    }
}

/// Scheduled liability payments; entry `t - 1` falls due in month `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiabilitySchedule {
    flows: CashFlowVector,
}

pub fn liability_schedule(a: f64, b: f64, months: usize, face: f64) -> Result<LiabilitySchedule> {
    let n = months as f64;
    let mut flows = Vec::with_capacity(months);
    let mut prev = beta_cdf(0.0, a, b)?;
    for t in 1..=months {
        let cur = beta_cdf(t as f64 / n, a, b)?;
        flows.push((cur - prev) * face);
        prev = cur;
    }
    Ok(LiabilitySchedule { flows: CashFlowVector::from_vec(flows) })
}

impl LiabilitySchedule {
    pub fn from_flows(flows: CashFlowVector) -> Self {
        LiabilitySchedule { flows }
    }

    pub fn flows(&self) -> &CashFlowVector {
        &self.flows
    }

    pub fn months(&self) -> usize {
        self.flows.len()
    }

    /// Payment due when rolling from month `t` to `t + 1`.
    pub fn due_after(&self, t: usize) -> f64 {
        self.flows.flows().get(t).copied().unwrap_or(0.0)
    }

    /// Present value at month `t` of the payments still outstanding,
    /// `<D_t, U^t L>`.
    pub fn value_at(&self, t: usize, discounts: &DiscountCurve) -> f64 {
        let remaining = self.flows.flows().get(t..).unwrap_or(&[]);
        dot(remaining, discounts.factors())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrictionParams {
    /// Proportional cost on equity trades.
    pub transaction_cost: f64,
    /// Annual penalty rate on the cash shortfall below the floor.
    pub penalty_rate: f64,
    /// Minimum cash as a fraction of total assets.
    pub liquidity_floor: f64,
}

impl Default for FrictionParams {
    fn default() -> Self {
        FrictionParams { transaction_cost: 0.005, penalty_rate: 0.24, liquidity_floor: 0.10 }
    }
}

impl FrictionParams {
    /// Monthly liquidity penalty for a post-restructuring position.
    pub fn penalty(&self, cash: f64, assets: f64) -> f64 {
        self.penalty_rate / 12.0 * (self.liquidity_floor * assets - cash).max(0.0)
    }
}

/// Holdings at a month: cash, aggregated bond flows and stock index units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceSheetState {
    pub t: usize,
    pub cash: f64,
    pub bonds: CashFlowVector,
    pub stock_units: f64,
}

/// Mark-to-market of a state at one curve and index price.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Valuation {
    pub cash: f64,
    pub bond_value: f64,
    pub stock_value: f64,
    pub assets: f64,
    pub liability_value: f64,
    pub equity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValuedState {
    pub state: BalanceSheetState,
    pub valuation: Valuation,
}

impl ValuedState {
    pub fn mark(
        state: BalanceSheetState,
        discounts: &DiscountCurve,
        price: f64,
        liabilities: &LiabilitySchedule,
    ) -> Self {
        let bond_value = dot(state.bonds.flows(), discounts.factors());
        let liability_value = liabilities.value_at(state.t, discounts);
        let valuation = Self::assemble(state.cash, bond_value, state.stock_units * price, liability_value);
        ValuedState { state, valuation }
    }

    fn assemble(cash: f64, bond_value: f64, stock_value: f64, liability_value: f64) -> Valuation {
        let assets = cash + bond_value + stock_value;
        Valuation { cash, bond_value, stock_value, assets, liability_value, equity: assets - liability_value }
    }
}

/// Restructuring decision at one month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    /// Units of newly issued face-100 bonds, one per universe entry.
    pub bonds: Vec<f64>,
    /// Stock index units held after the trade.
    pub stock_units: f64,
}

impl Action {
    pub fn hold(universe_len: usize, stock_units: f64) -> Self {
        Action { bonds: vec![0.0; universe_len], stock_units }
    }

    pub fn validate(&self, universe_len: usize) -> Result<()> {
        if self.bonds.len() != universe_len {
            return Err(BalanceSheetError::ActionShape { got: self.bonds.len(), expected: universe_len });
        }
        for (index, &value) in self.bonds.iter().chain(std::iter::once(&self.stock_units)).enumerate() {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(BalanceSheetError::InvalidAction { index, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RestructureRecord {
    pub bond_purchase: f64,
    pub stock_trade: f64,
    pub transaction_cost: f64,
}

pub fn restructure(
    pre: &ValuedState,
    action: &Action,
    price: f64,
    discounts: &DiscountCurve,
    universe: &[BondSpec],
    fr: &FrictionParams,
) -> Result<(ValuedState, RestructureRecord)> {
    action.validate(universe.len())?;
    let n = pre.state.bonds.len();
    let mut bonds = pre.state.bonds.clone();
    let mut bond_purchase = 0.0;
    for (spec, &units) in universe.iter().zip(&action.bonds) {
        bond_purchase += spec.face * units;
        if units != 0.0 {
            let coupon = par_coupon(discounts, *spec)?;
            bonds.add_scaled(units, &issue_bond(*spec, coupon, n)?);
        }
    }
    let trade = action.stock_units - pre.state.stock_units;
    let transaction_cost = fr.transaction_cost * trade.abs() * price;
    let cash = pre.state.cash - bond_purchase - (trade * price + transaction_cost);
    let bond_value = dot(bonds.flows(), discounts.factors());
    let valuation = ValuedState::assemble(
        cash,
        bond_value,
        action.stock_units * price,
        pre.valuation.liability_value,
    );
    let state = BalanceSheetState { t: pre.state.t, cash, bonds, stock_units: action.stock_units };
    Ok((
        ValuedState { state, valuation },
        RestructureRecord { bond_purchase, stock_trade: trade, transaction_cost },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RollRecord {
    pub bond_income: f64,
    pub liability_paid: f64,
    pub penalty: f64,
}

/// Advances a post-restructuring state by one month.
pub fn roll_forward(
    post: &ValuedState,
    next_discounts: &DiscountCurve,
    next_price: f64,
    liabilities: &LiabilitySchedule,
    fr: &FrictionParams,
) -> (ValuedState, RollRecord) {
    let t = post.state.t;
    let mut bonds = post.state.bonds.clone();
    let bond_income = termstructure::shift_in_place(&mut bonds);
    let liability_paid = liabilities.due_after(t);
    let penalty = fr.penalty(post.valuation.cash, post.valuation.assets);
    let cash = post.state.cash + bond_income - liability_paid - penalty;
    let state = BalanceSheetState { t: t + 1, cash, bonds, stock_units: post.state.stock_units };
    (
        ValuedState::mark(state, next_discounts, next_price, liabilities),
        RollRecord { bond_income, liability_paid, penalty },
    )
}

/// Parameters of the static legacy roll-over that produced the opening book.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegacyConfig {
    /// Face bought per month in series `i` is `tranche_face / i`.
    pub tranche_face: f64,
    pub total_assets: f64,
    /// Stock index value as a fraction of opening assets.
    pub stock_fraction: f64,
    /// Target share of opening assets in fixed income.
    pub fixed_income_target: f64,
    /// Allowed deviation from the target before the book is rescaled.
    pub fixed_income_tolerance: f64,
    /// Share the book is rescaled to when outside tolerance.
    pub fixed_income_rescaled: f64,
    /// Pad a short history with its earliest curve instead of failing.
    pub backfill: bool,
}

impl Default for LegacyConfig {
    fn default() -> Self {
        LegacyConfig {
            tranche_face: 15.0,
            total_assets: 100.0,
            stock_fraction: 0.10,
            fixed_income_target: 2.0 / 3.0,
            fixed_income_tolerance: 0.10,
            fixed_income_rescaled: 0.65,
            backfill: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpeningBook {
    pub state: BalanceSheetState,
    /// Bond value of the unscaled replay.
    pub replayed_value: f64,
    /// Factor applied to the replayed face amounts.
    pub scale: f64,
}

/// Replays the monthly roll-over of every series over the issuance curves
/// `history` (oldest first, the last entry being the anchor month) and
/// keeps the flows still outstanding at the anchor.
pub fn legacy_bonds(
    history: &[YieldCurve],
    universe: &[BondSpec],
    tranche_face: f64,
    months: usize,
    backfill: bool,
) -> Result<CashFlowVector> {
    let need = universe.iter().map(|s| s.maturity_months).max().unwrap_or(0);
    if history.is_empty() || (history.len() < need && !backfill) {
        return Err(BalanceSheetError::LegacyHistory { got: history.len(), need });
    }
    let mut book = vec![0.0; months];
    let last = history.len() - 1;
    for spec in universe {
        let m = spec.maturity_months;
        let face = tranche_face / m as f64;
        // tranches issued `age` months ago with maturity beyond today
        for age in 0..m {
            let curve = &history[last.saturating_sub(age)];
            let d = curve.discount();
            let bond = issue_bond(*spec, par_coupon(&d, *spec)?, curve.len())?;
            for (k, &flow) in bond.flows().iter().enumerate() {
                let month = k + 1;
                if flow != 0.0 && month > age {
                    book[month - age - 1] += face / spec.face * flow;
                }
            }
        }
    }
    Ok(CashFlowVector::from_vec(book))
}

pub fn initial_state(
    legacy_history: &[YieldCurve],
    anchor: &YieldCurve,
    s0: f64,
    universe: &[BondSpec],
    cfg: &LegacyConfig,
) -> Result<OpeningBook> {
    if !(s0 > 0.0) || !(cfg.total_assets > 0.0) {
        return Err(BalanceSheetError::LegacyConfig(format!("s0={s0}, assets={}", cfg.total_assets)));
    }
    let months = anchor.len();
    let mut bonds = legacy_bonds(legacy_history, universe, cfg.tranche_face, months, cfg.backfill)?;
    let d0 = anchor.discount();
    let replayed_value = dot(bonds.flows(), d0.factors());
    let share = replayed_value / cfg.total_assets;
    let scale = if (share - cfg.fixed_income_target).abs() > cfg.fixed_income_tolerance {
        cfg.fixed_income_rescaled * cfg.total_assets / replayed_value
    } else {
        1.0
    };
    bonds.scale(scale);
    let bond_value = dot(bonds.flows(), d0.factors());
    let stock_value = cfg.stock_fraction * cfg.total_assets;
    let cash = cfg.total_assets - bond_value - stock_value;
    Ok(OpeningBook {
        state: BalanceSheetState { t: 0, cash, bonds, stock_units: stock_value / s0 },
        replayed_value,
        scale,
    })
}

/// Everything an episode needs besides the market path.
#[derive(Debug, Clone, PartialEq)]
pub struct RunoffSetup {
    pub months: usize,
    pub universe: Vec<BondSpec>,
    pub liabilities: LiabilitySchedule,
    pub frictions: FrictionParams,
    pub initial: BalanceSheetState,
}
