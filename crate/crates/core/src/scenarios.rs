//! PCA factor model for yield-curve increments, GBM equity, and seeded
//! scenario batches.

use std::io::{self, Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::termstructure::YieldCurve;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("history has {got} curves, need at least {need}")]
    HistoryTooShort { got: usize, need: usize },
    #[error("curve {index} has length {got}, expected {expected}")]
    CurveLength { index: usize, got: usize, expected: usize },
    #[error("n_factors={n_factors} exceeds grid length {grid}")]
    FactorCount { n_factors: usize, grid: usize },
    #[error("invalid equity parameters: {0}")]
    Equity(String),
    #[error("malformed scenario dump: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ScenarioError>;

/// Low-rank Gaussian model of monthly yield-curve increments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    /// Mean daily increment per maturity.
    pub mean: Vec<f64>,
    /// Orthonormal eigenvectors, stored column by column, sorted by eigenvalue.
    pub eigvecs: Vec<Vec<f64>>,
    /// Eigenvalues in descending order, clipped at zero.
    pub eigvals: Vec<f64>,
    pub n_factors: usize,
    pub trading_days_per_month: usize,
}

/// Calibrates the factor model on consecutive daily curve differences.
pub fn calibrate_pca(
    history: &[YieldCurve],
    n_factors: usize,
    trading_days_per_month: usize,
) -> Result<PcaModel> {
    let need = n_factors + 2;
    if history.len() < need {
        return Err(ScenarioError::HistoryTooShort { got: history.len(), need });
    }
    let n = history[0].len();
    for (index, c) in history.iter().enumerate() {
        if c.len() != n {
            return Err(ScenarioError::CurveLength { index, got: c.len(), expected: n });
        }
    }
    if n_factors > n {
        return Err(ScenarioError::FactorCount { n_factors, grid: n });
    }

    let increments: Vec<Vec<f64>> = history
        .windows(2)
        .map(|w| w[1].yields().iter().zip(w[0].yields()).map(|(b, a)| b - a).collect())
        .collect();
    let samples = increments.len() as f64;
    let mut mean = vec![0.0; n];
    for inc in &increments {
        for (m, x) in mean.iter_mut().zip(inc) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= samples);

    let mut cov = DMatrix::<f64>::zeros(n, n);
    if increments.len() > 1 {
        let mut centered = vec![0.0; n];
        for inc in &increments {
            for ((c, x), m) in centered.iter_mut().zip(inc).zip(&mean) {
                *c = x - m;
            }
            for i in 0..n {
                let ci = centered[i];
                if ci == 0.0 {
                    continue;
                }
                for j in i..n {
                    cov[(i, j)] += ci * centered[j];
                }
            }
        }
        let denom = samples - 1.0;
        for i in 0..n {
            for j in i..n {
                let v = cov[(i, j)] / denom;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut eigvals = Vec::with_capacity(n);
    let mut eigvecs = Vec::with_capacity(n);
    for &k in &order {
        eigvals.push(eig.eigenvalues[k].max(0.0));
        let mut col: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        // sign convention: largest-magnitude entry positive
        let pivot = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, &v)| if v.abs() > best.1.abs() { (i, v) } else { best })
            .0;
        if col[pivot] < 0.0 {
            col.iter_mut().for_each(|v| *v = -*v);
        }
        eigvecs.push(col);
    }

    Ok(PcaModel { mean, eigvecs, eigvals, n_factors, trading_days_per_month })
}

impl PcaModel {
    pub fn grid_len(&self) -> usize {
        self.mean.len()
    }

    fn days(&self) -> f64 {
        self.trading_days_per_month as f64
    }

    /// Standard deviations `sqrt(days * lambda_k)` of the retained factors.
    pub fn factor_std(&self) -> Vec<f64> {
        self.eigvals[..self.n_factors].iter().map(|l| (self.days() * l).sqrt()).collect()
    }

    /// Deterministic part of the monthly increment.
    pub fn monthly_mean(&self) -> Vec<f64> {
        self.mean.iter().map(|m| self.days() * m).collect()
    }

    /// Analytic covariance of the monthly increment (rank `n_factors`).
    pub fn monthly_covariance(&self) -> Vec<Vec<f64>> {
        let n = self.grid_len();
        let mut cov = vec![vec![0.0; n]; n];
        for k in 0..self.n_factors {
            let w = self.days() * self.eigvals[k];
            let v = &self.eigvecs[k];
            for i in 0..n {
                for j in 0..n {
                    cov[i][j] += w * v[i] * v[j];
                }
            }
        }
        cov
    }

    /// Draws the factor scores `Z_k ~ N(0, days * lambda_k)`.
    pub fn sample_factors<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.factor_std()
            .into_iter()
            .map(|s| {
                let z: f64 = rng.sample(StandardNormal);
                s * z
            })
            .collect()
    }

    pub fn increment_from_factors(&self, factors: &[f64]) -> Vec<f64> {
        let mut inc = self.monthly_mean();
        for (z, v) in factors.iter().zip(&self.eigvecs) {
            for (d, l) in inc.iter_mut().zip(v) {
                *d += z * l;
            }
        }
        inc
    }
}

pub fn sample_curve_increment<R: Rng + ?Sized>(model: &PcaModel, rng: &mut R) -> Vec<f64> {
    let z = model.sample_factors(rng);
    model.increment_from_factors(&z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquityParams {
    pub s0: f64,
    pub drift: f64,
    pub vol: f64,
}

impl Default for EquityParams {
    fn default() -> Self {
        EquityParams { s0: 100.0, drift: 0.05, vol: 0.18 }
    }
}

impl EquityParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.s0 > 0.0) || !(self.vol >= 0.0) || !self.drift.is_finite() {
            return Err(ScenarioError::Equity(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn log_return_mean(&self) -> f64 {
        (self.drift - 0.5 * self.vol * self.vol) / 12.0
    }

    pub fn log_return_var(&self) -> f64 {
        self.vol * self.vol / 12.0
    }
}

/// One month of discretised geometric Brownian motion.
pub fn sample_equity_step<R: Rng + ?Sized>(prev: f64, params: &EquityParams, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    prev * (params.log_return_mean() + params.log_return_var().sqrt() * z).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamTag {
    Curve = 1,
    Equity = 2,
}

/// Independent generator for one (seed, scenario, month, variable) cell.
pub fn substream(seed: u64, scenario: u64, month: u64, tag: StreamTag) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&scenario.to_le_bytes());
    key[16..24].copy_from_slice(&month.to_le_bytes());
    key[24..].copy_from_slice(&(tag as u64).to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

/// The random draws of a single scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioDraws {
    /// Factor scores, `months * n_factors`, month-major.
    pub factors: Vec<f64>,
    /// Equity prices for months `0..=months`.
    pub equity: Vec<f64>,
}

/// Realised market path: curves and equity prices for months `0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketPath {
    pub curves: Vec<YieldCurve>,
    pub equity: Vec<f64>,
}

impl MarketPath {
    pub fn months(&self) -> usize {
        self.curves.len() - 1
    }
}

/// A reproducible set of scenarios sharing one anchor curve and factor model.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioBatch {
    pub seed: u64,
    pub months: usize,
    pub anchor: YieldCurve,
    pub equity_params: EquityParams,
    drift: Vec<f64>,
    loadings: Vec<Vec<f64>>,
    scenarios: Vec<ScenarioDraws>,
}

pub fn generate_batch(
    anchor: &YieldCurve,
    model: &PcaModel,
    eq: &EquityParams,
    months: usize,
    count: usize,
    seed: u64,
) -> Result<ScenarioBatch> {
    if anchor.len() != model.grid_len() {
        return Err(ScenarioError::CurveLength {
            index: 0,
            got: anchor.len(),
            expected: model.grid_len(),
        });
    }
    eq.validate()?;
    let scenarios = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut factors = Vec::with_capacity(months * model.n_factors);
            let mut equity = Vec::with_capacity(months + 1);
            equity.push(eq.s0);
            for t in 1..=months {
                let mut rng = substream(seed, i as u64, t as u64, StreamTag::Curve);
                factors.extend(model.sample_factors(&mut rng));
                let mut rng = substream(seed, i as u64, t as u64, StreamTag::Equity);
                let prev = equity[t - 1];
                equity.push(sample_equity_step(prev, eq, &mut rng));
            }
            ScenarioDraws { factors, equity }
        })
        .collect();
    Ok(ScenarioBatch {
        seed,
        months,
        anchor: anchor.clone(),
        equity_params: *eq,
        drift: model.monthly_mean(),
        loadings: model.eigvecs[..model.n_factors].to_vec(),
        scenarios,
    })
}

impl ScenarioBatch {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn n_factors(&self) -> usize {
        self.loadings.len()
    }

    pub fn draws(&self, i: usize) -> &ScenarioDraws {
        &self.scenarios[i]
    }

    /// Keeps only the scenarios at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> ScenarioBatch {
        ScenarioBatch {
            scenarios: indices.iter().map(|&i| self.scenarios[i].clone()).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> ScenarioBatch {
        ScenarioBatch {
            seed: self.seed,
            months: self.months,
            anchor: self.anchor.clone(),
            equity_params: self.equity_params,
            drift: self.drift.clone(),
            loadings: self.loadings.clone(),
            scenarios: Vec::new(),
        }
    }

    /// Materialises the curves of scenario `i` by cumulating increments.
    pub fn path(&self, i: usize) -> MarketPath {
        let draws = &self.scenarios[i];
        let n = self.n_factors();
        let mut curves = Vec::with_capacity(self.months + 1);
        curves.push(self.anchor.clone());
        let mut current = self.anchor.yields().to_vec();
        for t in 0..self.months {
            let z = &draws.factors[t * n..(t + 1) * n];
            for (k, y) in current.iter_mut().enumerate() {
                let mut inc = self.drift[k];
                for (zf, load) in z.iter().zip(&self.loadings) {
                    inc += zf * load[k];
                }
                *y += inc;
            }
            curves.push(YieldCurve::new(current.clone()).expect("finite simulated curve"));
        }
        MarketPath { curves, equity: draws.equity.clone() }
    }

    const MAGIC: &'static [u8; 8] = b"DALMSCN1";

    /// Binary dump: little-endian header followed by all draws.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        let grid = self.anchor.len();
        for v in [self.seed, self.months as u64, grid as u64, self.n_factors() as u64, self.len() as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        let p = self.equity_params;
        let header = [p.s0, p.drift, p.vol];
        let mut floats = header
            .iter()
            .chain(self.anchor.yields())
            .chain(&self.drift)
            .chain(self.loadings.iter().flatten());
        floats.try_for_each(|x| w.write_all(&x.to_le_bytes()))?;
        for s in &self.scenarios {
            for x in s.factors.iter().chain(&s.equity) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<ScenarioBatch> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(ScenarioError::Format("bad magic".into()));
        }
        let mut u = [0u64; 5];
        for v in &mut u {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *v = u64::from_le_bytes(b);
        }
        let [seed, months, grid, n_factors, count] = u.map(|x| x as usize);
        let mut read_f64s = |len: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; len * 8];
            r.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let header = read_f64s(3)?;
        let anchor = YieldCurve::new(read_f64s(grid)?)
            .map_err(|e| ScenarioError::Format(e.to_string()))?;
        let drift = read_f64s(grid)?;
        let loadings = (0..n_factors).map(|_| read_f64s(grid)).collect::<Result<Vec<_>>>()?;
        let scenarios = (0..count)
            .map(|_| {
                Ok(ScenarioDraws {
                    factors: read_f64s(months * n_factors)?,
                    equity: read_f64s(months + 1)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ScenarioBatch {
            seed: seed as u64,
            months,
            anchor,
            equity_params: EquityParams { s0: header[0], drift: header[1], vol: header[2] },
            drift,
            loadings,
            scenarios,
        })
    }
}
