//! Objectives, the differentiable episode, its reverse-mode gradient and the
//! minibatch optimiser for the policy stack.
//!
//! The episode is simulated once forward while recording every quantity the
//! adjoint sweep needs; the sweep then walks the months backwards, carrying
//! the sensitivities of the loss to cash, the aggregated bond schedule and
//! the stock units. Market draws are fixed inputs: no gradient flows through
//! the scenarios.

use std::io::{self, Read, Write};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::balance_sheet::RunoffSetup;
use crate::scenarios::{MarketPath, ScenarioBatch};
use crate::strategies::{relu, Network, PolicyError, PolicyStack};
use crate::termstructure::{
    discount, dot, par_coupon, BondSpec, CouponFrequency, TermStructureError,
};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("utility argument must be positive, got {0}")]
    UtilityDomain(f64),
    #[error("initial equity must be positive for the iso-elastic objective, got {0}")]
    InitialEquity(f64),
    #[error("non-finite {what} in scenario {scenario}")]
    NonFinite { scenario: usize, what: &'static str },
    #[error("horizon {horizon} exceeds policy length {months} or market path length {path}")]
    Horizon { horizon: usize, months: usize, path: usize },
    #[error("empty scenario batch")]
    EmptyBatch,
    #[error("invalid optimizer configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64, report: Box<TrainReport> },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    TermStructure(#[from] TermStructureError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, TrainingError>;

/// Iso-elastic utility with relative risk aversion `gamma`.
pub fn utility(x: f64, gamma: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(TrainingError::UtilityDomain(x));
    }
    Ok(if gamma == 1.0 { x.ln() } else { (x.powf(1.0 - gamma) - 1.0) / (1.0 - gamma) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    IsoElastic,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub gamma: f64,
    pub epsilon: f64,
    /// Annual target return on equity (quadratic objective).
    pub target_return: f64,
    /// Terminal month; `None` means the full grid.
    pub horizon: Option<usize>,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec {
            kind: ObjectiveKind::IsoElastic,
            gamma: 1.0,
            epsilon: 1e-4,
            target_return: 0.02,
            horizon: None,
        }
    }
}

impl ObjectiveSpec {
    pub fn horizon_for(&self, months: usize) -> usize {
        self.horizon.unwrap_or(months)
    }

    /// Loss to minimise and its derivative with respect to terminal equity.
    pub fn loss_and_slope(&self, terminal: f64, initial: f64, horizon: usize) -> Result<(f64, f64)> {
        match self.kind {
            ObjectiveKind::IsoElastic => {
                if !(initial > 0.0) {
                    return Err(TrainingError::InitialEquity(initial));
                }
                let x = (self.epsilon + relu(terminal)) / initial;
                let loss = -utility(x, self.gamma)?;
                let slope = if terminal > 0.0 { -x.powf(-self.gamma) / initial } else { 0.0 };
                Ok((loss, slope))
            }
            ObjectiveKind::Quadratic => {
                let target = (1.0 + self.target_return).powf(horizon as f64 / 12.0) * initial;
                let gap = terminal - target;
                Ok((gap * gap, 2.0 * gap))
            }
        }
    }

    pub fn loss(&self, terminal: f64, initial: f64, horizon: usize) -> Result<f64> {
        Ok(self.loss_and_slope(terminal, initial, horizon)?.0)
    }
}

/// Source of market paths for batch evaluation.
pub trait Scenarios: Sync {
    fn count(&self) -> usize;
    fn market_path(&self, i: usize) -> MarketPath;
}

impl Scenarios for ScenarioBatch {
    fn count(&self) -> usize {
        self.len()
    }

    fn market_path(&self, i: usize) -> MarketPath {
        self.path(i)
    }
}

impl Scenarios for [MarketPath] {
    fn count(&self) -> usize {
        self.len()
    }

    fn market_path(&self, i: usize) -> MarketPath {
        self[i].clone()
    }
}

impl Scenarios for Vec<MarketPath> {
    fn count(&self) -> usize {
        self.len()
    }

    fn market_path(&self, i: usize) -> MarketPath {
        self[i].clone()
    }
}

/// `v += units * bond` for a freshly issued bond, touching only its payment dates.
fn add_bond(spec: &BondSpec, coupon: f64, units: f64, v: &mut [f64]) {
    let m = spec.maturity_months;
    match spec.frequency() {
        CouponFrequency::AtRedemption => {
            v[m - 1] += units * ((1.0 + coupon * m as f64 / 12.0) * spec.face);
        }
        CouponFrequency::SemiAnnual => {
            for k in 1..m / 6 {
                v[6 * k - 1] += units * (coupon / 2.0 * spec.face);
            }
            v[m - 1] += units * ((1.0 + coupon / 2.0) * spec.face);
        }
    }
}

/// `<bond, v>` for a freshly issued bond.
fn bond_dot(spec: &BondSpec, coupon: f64, v: &[f64]) -> f64 {
    let m = spec.maturity_months;
    match spec.frequency() {
        CouponFrequency::AtRedemption => (1.0 + coupon * m as f64 / 12.0) * spec.face * v[m - 1],
        CouponFrequency::SemiAnnual => {
            let coupons: f64 = (1..m / 6).map(|k| v[6 * k - 1]).sum();
            coupon / 2.0 * spec.face * coupons + (1.0 + coupon / 2.0) * spec.face * v[m - 1]
        }
    }
}

#[derive(Debug, Clone, Default)]
struct NetTape {
    /// Input followed by each layer's post-activation output.
    activations: Vec<Vec<f64>>,
    /// Pre-activation values per layer.
    pre: Vec<Vec<f64>>,
}

fn net_forward(net: &Network, x: Vec<f64>) -> NetTape {
    let mut tape = NetTape { activations: vec![x], pre: Vec::with_capacity(net.layers.len()) };
    for layer in &net.layers {
        let mut z = vec![0.0; layer.outputs];
        layer.apply(tape.activations.last().unwrap(), &mut z);
        let a = z.iter().map(|&v| relu(v)).collect();
        tape.pre.push(z);
        tape.activations.push(a);
    }
    tape
}

/// Accumulates parameter gradients into `grad` and returns the input sensitivity.
fn net_backward(net: &Network, tape: &NetTape, upstream: &[f64], grad: &mut Network) -> Vec<f64> {
    let mut delta: Vec<f64> = upstream.to_vec();
    for (li, layer) in net.layers.iter().enumerate().rev() {
        for (d, z) in delta.iter_mut().zip(&tape.pre[li]) {
            if *z <= 0.0 {
                *d = 0.0;
            }
        }
        let input = &tape.activations[li];
        let g = &mut grad.layers[li];
        let mut back = vec![0.0; layer.inputs];
        for (r, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            g.bias[r] += d;
            let row = r * layer.inputs;
            for c in 0..layer.inputs {
                g.weights[row + c] += d * input[c];
                back[c] += d * layer.weights[row + c];
            }
        }
        delta = back;
    }
    delta
}

#[derive(Debug, Clone)]
struct StepTape {
    discounts: Vec<f64>,
    price: f64,
    coupons: Vec<f64>,
    cash: f64,
    stock_value: f64,
    assets: f64,
    liability_value: f64,
    trade: f64,
    shortfall: f64,
    net: NetTape,
}

/// Recorded forward pass of one episode.
#[derive(Debug, Clone)]
pub struct EpisodeTape {
    steps: Vec<StepTape>,
    terminal_discounts: Vec<f64>,
    terminal_price: f64,
    pub initial_equity: f64,
    pub terminal_equity: f64,
    pub horizon: usize,
}

impl EpisodeTape {
    /// Side of every kink the episode passed: each ReLU, the sign of every
    /// stock trade, each penalty, each asset total and the terminal equity.
    /// The loss is smooth in any parameter neighbourhood where this is
    /// constant.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for s in &self.steps {
            for layer in &s.net.pre {
                out.extend(layer.iter().map(|&z| z > 0.0));
            }
            out.extend([s.trade > 0.0, s.trade < 0.0, s.shortfall > 0.0, s.assets > 0.0]);
        }
        out.push(self.terminal_equity > 0.0);
        out
    }
}

fn check(v: f64, scenario: usize, what: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainingError::NonFinite { scenario, what })
    }
}

/// Runs the policy through one market path, recording the tape.
pub fn record_episode(
    policy: &PolicyStack,
    setup: &RunoffSetup,
    path: &MarketPath,
    horizon: usize,
    scenario: usize,
) -> Result<EpisodeTape> {
    if horizon > policy.months() || horizon > path.months() || horizon > setup.months {
        return Err(TrainingError::Horizon { horizon, months: policy.months(), path: path.months() });
    }
    let fr = &setup.frictions;
    let universe = &setup.universe;
    let k = universe.len();
    let mut bonds = setup.initial.bonds.flows().to_vec();
    let mut cash = setup.initial.cash;
    let mut units = setup.initial.stock_units;
    let mut steps = Vec::with_capacity(horizon);
    let mut initial_equity = f64::NAN;

    for t in 0..horizon {
        let d = discount(&path.curves[t]);
        let price = path.equity[t];
        let bond_value = dot(&bonds, d.factors());
        let stock_value = units * price;
        let assets = cash + bond_value + stock_value;
        let liability_value = setup.liabilities.value_at(t, &d);
        let equity = assets - liability_value;
        check(equity, scenario, "equity")?;
        if t == 0 {
            initial_equity = equity;
        }

        let mut x = Vec::with_capacity(4 + k);
        if assets > 0.0 {
            x.extend([equity / assets, cash / assets, stock_value / assets]);
        } else {
            x.extend([0.0; 3]);
        }
        x.push(units);
        x.extend(universe.iter().map(|s| path.curves[t].at_month(s.maturity_months)));
        let net = net_forward(&policy.networks[t], x);
        let out = net.activations.last().unwrap();
        let (holdings, new_units) = (&out[..k], out[k]);

        let coupons = universe
            .iter()
            .map(|s| par_coupon(&d, *s))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut purchase = 0.0;
        for ((spec, &h), &c) in universe.iter().zip(holdings).zip(&coupons) {
            purchase += spec.face * h;
            if h != 0.0 {
                add_bond(spec, c, h, &mut bonds);
            }
        }
        let trade = new_units - units;
        let cost = fr.transaction_cost * trade.abs() * price;
        let cash_post = cash - purchase - (trade * price + cost);
        let bond_value_post = dot(&bonds, d.factors());
        let assets_post = cash_post + bond_value_post + new_units * price;
        let shortfall = fr.liquidity_floor * assets_post - cash_post;
        let penalty = fr.penalty(cash_post, assets_post);

        let income = bonds[0];
        bonds.rotate_left(1);
        *bonds.last_mut().unwrap() = 0.0;
        let next_cash = cash_post + income - setup.liabilities.due_after(t) - penalty;
        check(next_cash, scenario, "cash")?;

        steps.push(StepTape {
            discounts: d.factors().to_vec(),
            price,
            coupons,
            cash,
            stock_value,
            assets,
            liability_value,
            trade,
            shortfall,
            net,
        });
        cash = next_cash;
        units = new_units;
    }

    let d = discount(&path.curves[horizon]);
    let price = path.equity[horizon];
    let assets = cash + dot(&bonds, d.factors()) + units * price;
    let terminal_equity = check(assets - setup.liabilities.value_at(horizon, &d), scenario, "terminal equity")?;
    if horizon == 0 {
        initial_equity = terminal_equity;
    }
    Ok(EpisodeTape {
        steps,
        terminal_discounts: d.factors().to_vec(),
        terminal_price: price,
        initial_equity,
        terminal_equity,
        horizon,
    })
}

/// Adjoint sweep over a recorded episode; adds `weight * dloss/dparams` into `grad`.
fn backpropagate(
    policy: &PolicyStack,
    setup: &RunoffSetup,
    tape: &EpisodeTape,
    loss_slope: f64,
    weight: f64,
    grad: &mut PolicyStack,
) {
    let fr = &setup.frictions;
    let universe = &setup.universe;
    let k = universe.len();
    let n = tape.terminal_discounts.len();
    let seed = loss_slope * weight;

    // sensitivities of the loss to the pre-restructuring holdings
    let mut l_cash = seed;
    let mut l_bonds: Vec<f64> = tape.terminal_discounts.iter().map(|d| d * seed).collect();
    let mut l_units = seed * tape.terminal_price;

    let mut l_post = vec![0.0; n];
    let mut upstream = vec![0.0; k + 1];
    for (t, st) in tape.steps.iter().enumerate().rev() {
        // roll-forward: cash' + income - due - penalty; bonds shift by one month
        let mut l_cash_post = l_cash;
        l_post[0] = l_cash;
        l_post[1..].copy_from_slice(&l_bonds[..n - 1]);
        let mut l_assets_post = 0.0;
        if st.shortfall > 0.0 {
            let rate = fr.penalty_rate / 12.0;
            l_assets_post -= l_cash * rate * fr.liquidity_floor;
            l_cash_post += l_cash * rate;
        }
        let mut l_new_units = l_units;

        // post-restructuring assets = cash' + <D, B'> + units' * S
        l_cash_post += l_assets_post;
        l_new_units += l_assets_post * st.price;
        for (lp, d) in l_post.iter_mut().zip(&st.discounts) {
            *lp += l_assets_post * d;
        }

        // purchases: B' = B + sum h_i b_i, cash' = cash - sum face h_i - trade cost
        for (i, spec) in universe.iter().enumerate() {
            upstream[i] = bond_dot(spec, st.coupons[i], &l_post) - spec.face * l_cash_post;
        }
        let sign = if st.trade > 0.0 {
            1.0
        } else if st.trade < 0.0 {
            -1.0
        } else {
            0.0
        };
        let l_trade = -l_cash_post * st.price * (1.0 + fr.transaction_cost * sign);
        l_new_units += l_trade;
        upstream[k] = l_new_units;
        let mut l_units_pre = -l_trade;
        let mut l_cash_pre = l_cash_post;
        std::mem::swap(&mut l_bonds, &mut l_post);

        let l_x = net_backward(&policy.networks[t], &st.net, &upstream, &mut grad.networks[t]);

        // features
        l_units_pre += l_x[3];
        let mut l_assets = 0.0;
        let mut l_stock_value = 0.0;
        if st.assets > 0.0 {
            let a = st.assets;
            let a2 = a * a;
            l_assets += l_x[0] * st.liability_value / a2 - l_x[1] * st.cash / a2 - l_x[2] * st.stock_value / a2;
            l_cash_pre += l_x[1] / a;
            l_stock_value += l_x[2] / a;
        }
        // assets = cash + <D, B> + units * S
        l_cash_pre += l_assets;
        l_stock_value += l_assets;
        l_units_pre += l_stock_value * st.price;
        for (lb, d) in l_bonds.iter_mut().zip(&st.discounts) {
            *lb += l_assets * d;
        }
        l_cash = l_cash_pre;
        l_units = l_units_pre;
    }
}

/// Loss of one episode (negated utility or squared deviation).
pub fn episode_objective(
    policy: &PolicyStack,
    setup: &RunoffSetup,
    path: &MarketPath,
    obj: &ObjectiveSpec,
) -> Result<f64> {
    let horizon = obj.horizon_for(setup.months);
    let tape = record_episode(policy, setup, path, horizon, 0)?;
    obj.loss(tape.terminal_equity, tape.initial_equity, horizon)
}

/// Loss of one episode and its gradient, accumulated into `grad` with `weight`.
pub fn episode_gradient(
    policy: &PolicyStack,
    setup: &RunoffSetup,
    path: &MarketPath,
    obj: &ObjectiveSpec,
    scenario: usize,
    weight: f64,
    grad: &mut PolicyStack,
) -> Result<f64> {
    let horizon = obj.horizon_for(setup.months);
    let tape = record_episode(policy, setup, path, horizon, scenario)?;
    let (loss, slope) = obj.loss_and_slope(tape.terminal_equity, tape.initial_equity, horizon)?;
    backpropagate(policy, setup, &tape, slope, weight, grad);
    Ok(loss)
}

/// Scenarios per work unit; fixed so sums do not depend on the thread count.
const CHUNK: usize = 8;

/// Mean loss and its exact gradient over the selected scenarios.
pub fn gradient(
    policy: &PolicyStack,
    setup: &RunoffSetup,
    scenarios: &(impl Scenarios + ?Sized),
    indices: &[usize],
    obj: &ObjectiveSpec,
) -> Result<(f64, PolicyStack)> {
    if indices.is_empty() {
        return Err(TrainingError::EmptyBatch);
    }
    let partials = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = policy.zeros_like();
            let mut loss = 0.0;
            for &i in chunk {
                let path = scenarios.market_path(i);
                loss += episode_gradient(policy, setup, &path, obj, i, 1.0, &mut grad)?;
            }
            if !grad.params().all(|g| g.is_finite()) {
                return Err(first_non_finite(policy, setup, scenarios, chunk, obj));
            }
            Ok((loss, grad))
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / indices.len() as f64;
    let mut total = 0.0;
    let mut grad = policy.zeros_like();
    for (loss, g) in &partials {
        total += loss;
        grad.add_scaled(1.0, g);
    }
    grad.params_mut().for_each(|g| *g *= scale);
    let mean = total * scale;
    if !mean.is_finite() || !grad.params().all(|g| g.is_finite()) {
        return Err(first_non_finite(policy, setup, scenarios, indices, obj));
    }
    Ok((mean, grad))
}

/// Re-runs scenarios one at a time to name the first with a non-finite gradient.
fn first_non_finite(
    policy: &PolicyStack,
    setup: &RunoffSetup,
    scenarios: &(impl Scenarios + ?Sized),
    indices: &[usize],
    obj: &ObjectiveSpec,
) -> TrainingError {
    for &i in indices {
        let mut grad = policy.zeros_like();
        match episode_gradient(policy, setup, &scenarios.market_path(i), obj, i, 1.0, &mut grad) {
            Err(e) => return e,
            Ok(loss) if !loss.is_finite() || !grad.params().all(|g| g.is_finite()) => {
                return TrainingError::NonFinite { scenario: i, what: "gradient" };
            }
            Ok(_) => {}
        }
    }
    TrainingError::NonFinite { scenario: indices[0], what: "batch gradient" }
}

/// Mean loss over the selected scenarios, forward only.
pub fn batch_loss(
    policy: &PolicyStack,
    setup: &RunoffSetup,
    scenarios: &(impl Scenarios + ?Sized),
    indices: &[usize],
    obj: &ObjectiveSpec,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(TrainingError::EmptyBatch);
    }
    let horizon = obj.horizon_for(setup.months);
    let partials = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk.iter().try_fold(0.0, |acc, &i| {
                let tape = record_episode(policy, setup, &scenarios.market_path(i), horizon, i)?;
                Ok(acc + obj.loss(tape.terminal_equity, tape.initial_equity, horizon)?)
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(partials.iter().sum::<f64>() / indices.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip threshold.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 10.0,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(TrainingError::Config(format!(
                "learning_rate={} batch_size={}",
                self.learning_rate, self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.clip_norm > 0.0) {
            return Err(TrainingError::Config("decay rates must lie in [0, 1), clip_norm > 0".into()));
        }
        Ok(())
    }
}

/// Adaptive-moment optimiser state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl Adam {
    pub fn new(params: usize) -> Self {
        Adam { step: 0, first: vec![0.0; params], second: vec![0.0; params] }
    }

    pub fn update(&mut self, policy: &mut PolicyStack, grad: &PolicyStack, cfg: &OptimizerConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (((p, g), m), v) in policy
            .params_mut()
            .zip(grad.params())
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + cfg.epsilon);
        }
    }
}

/// Scales `grad` down to `max_norm` if its global norm exceeds it.
pub fn clip_gradient(grad: &mut PolicyStack, max_norm: f64) -> f64 {
    let norm = grad.norm();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.params_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub initial_validation_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub wall_time_secs: Vec<f64>,
    /// Epoch whose parameters were returned; `None` means the initial policy.
    pub best_epoch: Option<usize>,
    pub checksum: String,
}

impl TrainReport {
    /// Everything except the wall-clock times.
    pub fn deterministic_eq(&self, other: &TrainReport) -> bool {
        self.initial_validation_loss.to_bits() == other.initial_validation_loss.to_bits()
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.validation_loss.to_bits() == b.validation_loss.to_bits()
            })
            && self.best_epoch == other.best_epoch
            && self.checksum == other.checksum
    }

    pub fn write_loss_csv<W: Write>(&self, w: W) -> io::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "train_loss", "validation_loss"])?;
        out.write_record(["0".to_string(), String::new(), format!("{:?}", self.initial_validation_loss)])?;
        for r in &self.epochs {
            out.write_record([r.epoch.to_string(), format!("{:?}", r.train_loss), format!("{:?}", r.validation_loss)])?;
        }
        out.flush()
    }
}

pub fn policy_checksum(policy: &PolicyStack) -> String {
    let mut h = Sha256::new();
    for p in policy.params() {
        h.update(p.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Resumable optimisation state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub policy: PolicyStack,
    pub best: PolicyStack,
    pub best_loss: f64,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub report: TrainReport,
}

impl TrainState {
    pub fn start(
        policy: PolicyStack,
        setup: &RunoffSetup,
        validation: &(impl Scenarios + ?Sized),
        obj: &ObjectiveSpec,
    ) -> Result<Self> {
        let idx: Vec<usize> = (0..validation.count()).collect();
        let loss = batch_loss(&policy, setup, validation, &idx, obj)?;
        Ok(TrainState {
            adam: Adam::new(policy.param_count()),
            best: policy.clone(),
            best_loss: loss,
            policy,
            epoch: 0,
            report: TrainReport { initial_validation_loss: loss, checksum: String::new(), ..Default::default() },
        })
    }

    const MAGIC: &'static [u8; 8] = b"DALMCKP1";
    const VERSION: u32 = 1;

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&(self.epoch as u64).to_le_bytes())?;
        w.write_all(&self.adam.step.to_le_bytes())?;
        w.write_all(&self.best_loss.to_le_bytes())?;
        w.write_all(&self.report.initial_validation_loss.to_le_bytes())?;
        let best_epoch = self.report.best_epoch.map_or(-1i64, |e| e as i64);
        w.write_all(&best_epoch.to_le_bytes())?;
        w.write_all(&(self.report.epochs.len() as u64).to_le_bytes())?;
        for (r, secs) in self.report.epochs.iter().zip(&self.report.wall_time_secs) {
            w.write_all(&(r.epoch as u64).to_le_bytes())?;
            for x in [r.train_loss, r.validation_loss, *secs] {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.write_all(&(self.adam.first.len() as u64).to_le_bytes())?;
        for x in self.adam.first.iter().chain(&self.adam.second) {
            w.write_all(&x.to_le_bytes())?;
        }
        self.policy.write_to(&mut w)?;
        self.best.write_to(&mut w)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        fn word<R: Read>(r: &mut R) -> Result<[u8; 8]> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(b)
        }
        let magic = word(&mut r)?;
        if &magic != Self::MAGIC {
            return Err(TrainingError::Checkpoint("bad magic".into()));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v)?;
        if u32::from_le_bytes(v) != Self::VERSION {
            return Err(TrainingError::Checkpoint("unsupported version".into()));
        }
        let epoch = u64::from_le_bytes(word(&mut r)?) as usize;
        let step = u64::from_le_bytes(word(&mut r)?);
        let best_loss = f64::from_le_bytes(word(&mut r)?);
        let initial_validation_loss = f64::from_le_bytes(word(&mut r)?);
        let best_epoch = i64::from_le_bytes(word(&mut r)?);
        let records = u64::from_le_bytes(word(&mut r)?) as usize;
        let mut epochs = Vec::with_capacity(records);
        let mut wall = Vec::with_capacity(records);
        for _ in 0..records {
            let e = u64::from_le_bytes(word(&mut r)?) as usize;
            let train_loss = f64::from_le_bytes(word(&mut r)?);
            let validation_loss = f64::from_le_bytes(word(&mut r)?);
            wall.push(f64::from_le_bytes(word(&mut r)?));
            epochs.push(EpochRecord { epoch: e, train_loss, validation_loss });
        }
        let len = u64::from_le_bytes(word(&mut r)?) as usize;
        let mut moments = Vec::with_capacity(2 * len);
        for _ in 0..2 * len {
            moments.push(f64::from_le_bytes(word(&mut r)?));
        }
        let second = moments.split_off(len);
        let policy = PolicyStack::read_from(&mut r)?;
        let best = PolicyStack::read_from(&mut r)?;
        if policy.param_count() != len || !policy.same_shape(&best) {
            return Err(TrainingError::Checkpoint("optimizer state does not match policy shape".into()));
        }
        let checksum = policy_checksum(&best);
        Ok(TrainState {
            policy,
            best,
            best_loss,
            adam: Adam { step, first: moments, second },
            epoch,
            report: TrainReport {
                initial_validation_loss,
                epochs,
                wall_time_secs: wall,
                best_epoch: (best_epoch >= 0).then_some(best_epoch as usize),
                checksum,
            },
        })
    }
}

/// Continues optimisation from `state` up to `cfg.epochs` completed epochs.
/// `on_epoch` runs after every epoch (e.g. to write a checkpoint).
pub fn train_from(
    mut state: TrainState,
    setup: &RunoffSetup,
    train_set: &(impl Scenarios + ?Sized),
    validation: &(impl Scenarios + ?Sized),
    obj: &ObjectiveSpec,
    cfg: &OptimizerConfig,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<(PolicyStack, TrainReport)> {
    cfg.validate()?;
    if train_set.count() == 0 {
        return Err(TrainingError::EmptyBatch);
    }
    let val_idx: Vec<usize> = (0..validation.count()).collect();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.count()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, mut grad) = gradient(&state.policy, setup, train_set, batch, obj)?;
            clip_gradient(&mut grad, cfg.clip_norm);
            state.adam.update(&mut state.policy, &grad, cfg);
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        let validation_loss = batch_loss(&state.policy, setup, validation, &val_idx, obj)
            .unwrap_or(f64::NAN);
        state.report.epochs.push(EpochRecord { epoch, train_loss, validation_loss });
        state.report.wall_time_secs.push(started.elapsed().as_secs_f64());
        state.epoch = epoch;
        info!("epoch {epoch}: train {train_loss:.6} validation {validation_loss:.6}");

        if !train_loss.is_finite() || !validation_loss.is_finite() {
            let loss = if train_loss.is_finite() { validation_loss } else { train_loss };
            state.report.checksum = policy_checksum(&state.best);
            return Err(TrainingError::Diverged { epoch, loss, report: Box::new(state.report) });
        }
        if validation_loss < state.best_loss {
            state.best_loss = validation_loss;
            state.best = state.policy.clone();
            state.report.best_epoch = Some(epoch);
        }
        state.report.checksum = policy_checksum(&state.best);
        on_epoch(&state)?;
    }
    state.report.checksum = policy_checksum(&state.best);
    Ok((state.best, state.report))
}

/// Trains from scratch and returns the best-on-validation policy.
pub fn train(
    policy: PolicyStack,
    setup: &RunoffSetup,
    train_set: &(impl Scenarios + ?Sized),
    validation: &(impl Scenarios + ?Sized),
    obj: &ObjectiveSpec,
    cfg: &OptimizerConfig,
) -> Result<(PolicyStack, TrainReport)> {
    let state = TrainState::start(policy, setup, validation, obj)?;
    train_from(state, setup, train_set, validation, obj, cfg, |_| Ok(()))
}
