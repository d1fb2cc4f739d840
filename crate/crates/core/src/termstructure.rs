//! Yield curves, discounting, par coupons and bond cash-flow vectors.
//!
//! Everything lives on a monthly grid of length `N`: component `T` (1-based)
//! of a vector refers to the payment or rate `T` months ahead.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maturities (in months) of the six bond series issued every month.
pub const STANDARD_MATURITIES: [usize; 6] = [1, 3, 6, 12, 60, 120];

/// Face amount of every issued bond.
pub const BOND_FACE: f64 = 100.0;

#[derive(Debug, Error, PartialEq)]
pub enum TermStructureError {
    #[error("Svensson decay parameters must be positive (tau1={tau1}, tau2={tau2})")]
    NonPositiveTau { tau1: f64, tau2: f64 },
    #[error("grid length must be at least 1")]
    EmptyGrid,
    #[error("length mismatch: cash-flows have {flows} entries, discount curve has {discounts}")]
    LengthMismatch { flows: usize, discounts: usize },
    #[error("unsupported bond maturity {0} months")]
    UnsupportedMaturity(usize),
    #[error("bond maturity {maturity} exceeds grid length {grid}")]
    MaturityBeyondGrid { maturity: usize, grid: usize },
    #[error("degenerate discount curve: par-coupon denominator is {0}")]
    DegenerateCurve(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, TermStructureError>;

/// The six Svensson parameters. Betas are decimals, taus in years.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvenssonParams {
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub tau1: f64,
    pub tau2: f64,
}

impl SvenssonParams {
    pub fn flat(rate: f64) -> Self {
        SvenssonParams { beta0: rate, beta1: 0.0, beta2: 0.0, beta3: 0.0, tau1: 1.0, tau2: 1.0 }
    }

    /// Continuously compounded yield for a maturity in years.
    pub fn yield_at(&self, years: f64) -> f64 {
        let x1 = years / self.tau1;
        let x2 = years / self.tau2;
        let e1 = (-x1).exp();
        let e2 = (-x2).exp();
        let slope = (1.0 - e1) / x1;
        let hump1 = slope - e1;
        let hump2 = (1.0 - e2) / x2 - e2;
        self.beta0 + self.beta1 * slope + self.beta2 * hump1 + self.beta3 * hump2
    }
}

/// Annualized continuously-compounded yields `Y^(1..=N)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldCurve(Vec<f64>);

impl YieldCurve {
    pub fn new(yields: Vec<f64>) -> Result<Self> {
        if yields.is_empty() {
            return Err(TermStructureError::EmptyGrid);
        }
        if yields.iter().any(|y| !y.is_finite()) {
            return Err(TermStructureError::NonFinite("yield curve"));
        }
        Ok(YieldCurve(yields))
    }

    pub fn flat(rate: f64, n: usize) -> Self {
        YieldCurve(vec![rate; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn yields(&self) -> &[f64] {
        &self.0
    }

    /// Yield for a maturity of `months` (1-based).
    pub fn at_month(&self, months: usize) -> f64 {
        self.0[months - 1]
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn discount(&self) -> DiscountCurve {
        discount(self)
    }
}

/// Discount factors `D^(T) = exp(-T/12 * Y^(T))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscountCurve(Vec<f64>);

impl DiscountCurve {
    pub fn from_factors(factors: Vec<f64>) -> Self {
        DiscountCurve(factors)
    }

    pub fn factors(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn at_month(&self, months: usize) -> f64 {
        self.0[months - 1]
    }
}

/// Future monthly payments; entry `k` (0-based) pays `k + 1` months ahead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CashFlowVector(Vec<f64>);

impl CashFlowVector {
    pub fn zeros(n: usize) -> Self {
        CashFlowVector(vec![0.0; n])
    }

    pub fn from_vec(flows: Vec<f64>) -> Self {
        CashFlowVector(flows)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn flows(&self) -> &[f64] {
        &self.0
    }

    pub fn flows_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Payment `months` ahead (1-based), zero beyond the grid.
    pub fn at_month(&self, months: usize) -> f64 {
        self.0.get(months - 1).copied().unwrap_or(0.0)
    }

    /// `self += weight * other`.
    pub fn add_scaled(&mut self, weight: f64, other: &CashFlowVector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += weight * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.0 {
            *a *= factor;
        }
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CouponFrequency {
    /// Single payment of principal plus accrued coupon at redemption.
    AtRedemption,
    SemiAnnual,
}

/// One of the primary-market bond series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BondSpec {
    pub maturity_months: usize,
    pub face: f64,
}

impl BondSpec {
    pub fn new(maturity_months: usize) -> Result<Self> {
        Self::with_face(maturity_months, BOND_FACE)
    }

    pub fn with_face(maturity_months: usize, face: f64) -> Result<Self> {
        if !STANDARD_MATURITIES.contains(&maturity_months) {
            return Err(TermStructureError::UnsupportedMaturity(maturity_months));
        }
        Ok(BondSpec { maturity_months, face })
    }

    /// The six standard series in the fixed order 1m, 3m, 6m, 1y, 5y, 10y.
    pub fn standard_universe() -> Vec<BondSpec> {
        STANDARD_MATURITIES
            .iter()
            .map(|&m| BondSpec { maturity_months: m, face: BOND_FACE })
            .collect()
    }

    pub fn frequency(&self) -> CouponFrequency {
        if self.maturity_months < 12 {
            CouponFrequency::AtRedemption
        } else {
            CouponFrequency::SemiAnnual
        }
    }
}

/// Evaluates the Svensson curve on the monthly grid `T = 1..=n`.
pub fn svensson_to_curve(params: &SvenssonParams, n: usize) -> Result<YieldCurve> {
    if !(params.tau1 > 0.0 && params.tau2 > 0.0) {
        return Err(TermStructureError::NonPositiveTau { tau1: params.tau1, tau2: params.tau2 });
    }
    if n == 0 {
        return Err(TermStructureError::EmptyGrid);
    }
    let yields = (1..=n).map(|t| params.yield_at(t as f64 / 12.0)).collect();
    YieldCurve::new(yields)
}

pub fn discount(curve: &YieldCurve) -> DiscountCurve {
    DiscountCurve(
        curve
            .0
            .iter()
            .enumerate()
            .map(|(k, y)| (-((k + 1) as f64) / 12.0 * y).exp())
            .collect(),
    )
}

/// Present value `<D, B>`.
pub fn value(cashflows: &CashFlowVector, discounts: &DiscountCurve) -> Result<f64> {
    if cashflows.len() != discounts.len() {
        return Err(TermStructureError::LengthMismatch {
            flows: cashflows.len(),
            discounts: discounts.len(),
        });
    }
    Ok(dot(cashflows.flows(), discounts.factors()))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Annualized coupon rate that makes a newly issued bond trade at face.
pub fn par_coupon(discounts: &DiscountCurve, spec: BondSpec) -> Result<f64> {
    let m = spec.maturity_months;
    if m > discounts.len() {
        return Err(TermStructureError::MaturityBeyondGrid { maturity: m, grid: discounts.len() });
    }
    match spec.frequency() {
        CouponFrequency::AtRedemption => {
            let d = discounts.at_month(m);
            if !(d > 0.0) || !d.is_finite() {
                return Err(TermStructureError::DegenerateCurve(d));
            }
            Ok((1.0 / d - 1.0) * 12.0 / m as f64)
        }
        CouponFrequency::SemiAnnual => {
            let annuity: f64 = (1..=m / 6).map(|k| discounts.at_month(6 * k)).sum();
            if !(annuity > 0.0) || !annuity.is_finite() {
                return Err(TermStructureError::DegenerateCurve(annuity));
            }
            Ok(2.0 * (1.0 - discounts.at_month(m)) / annuity)
        }
    }
}

/// Cash-flow vector of one bond issued today with the given annualized coupon.
pub fn issue_bond(spec: BondSpec, coupon: f64, n: usize) -> Result<CashFlowVector> {
    let m = spec.maturity_months;
    if m > n {
        return Err(TermStructureError::MaturityBeyondGrid { maturity: m, grid: n });
    }
    if !coupon.is_finite() {
        return Err(TermStructureError::NonFinite("coupon"));
    }
    let mut flows = vec![0.0; n];
    match spec.frequency() {
        CouponFrequency::AtRedemption => {
            flows[m - 1] = (1.0 + coupon * m as f64 / 12.0) * spec.face;
        }
        CouponFrequency::SemiAnnual => {
            for k in 1..m / 6 {
                flows[6 * k - 1] = coupon / 2.0 * spec.face;
            }
            flows[m - 1] = (1.0 + coupon / 2.0) * spec.face;
        }
    }
    Ok(CashFlowVector(flows))
}

/// Applies the update operator: returns the payment due now and the
/// remaining schedule moved one month closer.
pub fn shift(cashflows: &CashFlowVector) -> (f64, CashFlowVector) {
    let mut remaining = cashflows.clone();
    let paid = shift_in_place(&mut remaining);
    (paid, remaining)
}

pub fn shift_in_place(cashflows: &mut CashFlowVector) -> f64 {
    match cashflows.0.first().copied() {
        None => 0.0,
        Some(paid) => {
            cashflows.0.rotate_left(1);
            if let Some(last) = cashflows.0.last_mut() {
                *last = 0.0;
            }
            paid
        }
    }
}
