//! Policy inputs, the per-month feedforward networks and the static
//! benchmark strategy.

use std::io::{self, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balance_sheet::{Action, ValuedState};
use crate::termstructure::{par_coupon, BondSpec, DiscountCurve, YieldCurve};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("malformed policy file: {0}")]
    Format(String),
    #[error("policy shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Number of state features preceding the yields.
pub const STATE_FEATURES: usize = 4;

pub fn feature_len(universe_len: usize) -> usize {
    STATE_FEATURES + universe_len
}

/// Leverage, liquidity and risk ratios, stock units, then one yield per series.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

pub fn features(state: &ValuedState, curve: &YieldCurve, universe: &[BondSpec]) -> FeatureVector {
    let v = &state.valuation;
    let mut x = Vec::with_capacity(feature_len(universe.len()));
    if v.assets > 0.0 {
        x.extend([v.equity / v.assets, v.cash / v.assets, v.stock_value / v.assets]);
    } else {
        x.extend([0.0; 3]);
    }
    x.push(state.state.stock_units);
    x.extend(universe.iter().map(|s| curve.at_month(s.maturity_months)));
    FeatureVector(x)
}

/// Affine map `W x + b`; weights are row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    /// Writes `W x + b` into `out`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out.iter_mut().zip(self.weights.chunks_exact(self.inputs).zip(&self.bias)) {
            *o = b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `relu . W2 . relu . W1 . relu . W0`; every layer is followed by a ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Dense>,
}

impl Network {
    pub fn zeros(sizes: &[usize]) -> Self {
        Network { layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect() }
    }

    pub fn input_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let mut next = vec![0.0; layer.outputs];
            layer.apply(&cur, &mut next);
            next.iter_mut().for_each(|v| *v = relu(*v));
            cur = next;
        }
        cur
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }
}

/// Splits a network output into bond holdings and stock units.
pub fn to_action(output: &[f64]) -> Action {
    let (bonds, stock) = output.split_at(output.len() - 1);
    Action { bonds: bonds.to_vec(), stock_units: stock[0] }
}

pub fn forward(net: &Network, x: &FeatureVector) -> Action {
    to_action(&net.forward(&x.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyInit {
    /// Weights are `gain / sqrt(fan_in)` times a standard normal draw.
    pub weight_gain: f64,
    /// Initial bias of the output layer.
    pub output_bias: f64,
    pub seed: u64,
}

impl Default for PolicyInit {
    fn default() -> Self {
        PolicyInit { weight_gain: 1.0, output_bias: 0.0, seed: 0 }
    }
}

/// One independent network per decision month `0..N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyStack {
    pub networks: Vec<Network>,
}

impl PolicyStack {
    pub fn zeros(months: usize, sizes: &[usize]) -> Self {
        PolicyStack { networks: vec![Network::zeros(sizes); months] }
    }

    /// Layer sizes for a universe of `k` bond series and the given hidden width.
    pub fn layer_sizes(universe_len: usize, hidden: usize) -> [usize; 4] {
        [feature_len(universe_len), hidden, hidden, universe_len + 1]
    }

    pub fn random(months: usize, sizes: &[usize], init: &PolicyInit) -> Self {
        let mut stack = Self::zeros(months, sizes);
        for (t, net) in stack.networks.iter_mut().enumerate() {
            let mut rng = ChaCha12Rng::seed_from_u64(init.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let depth = net.layers.len();
            for (i, layer) in net.layers.iter_mut().enumerate() {
                let scale = init.weight_gain / (layer.inputs as f64).sqrt();
                for w in &mut layer.weights {
                    let z: f64 = rng.sample(StandardNormal);
                    *w = scale * z;
                }
                if i + 1 == depth {
                    layer.bias.iter_mut().for_each(|b| *b = init.output_bias);
                }
            }
        }
        stack
    }

    pub fn months(&self) -> usize {
        self.networks.len()
    }

    pub fn param_count(&self) -> usize {
        self.networks.iter().map(Network::param_count).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.networks
            .iter()
            .flat_map(|n| n.layers.iter())
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.networks
            .iter_mut()
            .flat_map(|n| n.layers.iter_mut())
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    /// Same shape with every parameter set to zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.params_mut().for_each(|p| *p = 0.0);
        z
    }

    pub fn same_shape(&self, other: &PolicyStack) -> bool {
        self.networks.len() == other.networks.len()
            && self.networks.iter().zip(&other.networks).all(|(a, b)| {
                a.layers.len() == b.layers.len()
                    && a.layers.iter().zip(&b.layers).all(|(x, y)| x.inputs == y.inputs && x.outputs == y.outputs)
            })
    }

    /// `self += weight * other`.
    pub fn add_scaled(&mut self, weight: f64, other: &PolicyStack) {
        for (a, b) in self.params_mut().zip(other.params()) {
            *a += weight * b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.params().map(|p| p * p).sum::<f64>().sqrt()
    }

    const MAGIC: &'static [u8; 8] = b"DALMPOL1";
    const VERSION: u32 = 1;

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), PolicyError> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&(self.networks.len() as u32).to_le_bytes())?;
        for net in &self.networks {
            w.write_all(&(net.layers.len() as u32).to_le_bytes())?;
            for l in &net.layers {
                w.write_all(&(l.inputs as u32).to_le_bytes())?;
                w.write_all(&(l.outputs as u32).to_le_bytes())?;
                for x in l.weights.iter().chain(&l.bias) {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, PolicyError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(PolicyError::Format("bad magic".into()));
        }
        let read_u32 = |r: &mut R| -> Result<u32, PolicyError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let version = read_u32(&mut r)?;
        if version != Self::VERSION {
            return Err(PolicyError::Format(format!("unsupported version {version}")));
        }
        let months = read_u32(&mut r)? as usize;
        let mut networks = Vec::with_capacity(months);
        for _ in 0..months {
            let depth = read_u32(&mut r)? as usize;
            let mut layers = Vec::with_capacity(depth);
            for _ in 0..depth {
                let inputs = read_u32(&mut r)? as usize;
                let outputs = read_u32(&mut r)? as usize;
                let mut buf = vec![0u8; (inputs + 1) * outputs * 8];
                r.read_exact(&mut buf)?;
                let mut vals: Vec<f64> =
                    buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                let bias = vals.split_off(inputs * outputs);
                layers.push(Dense { inputs, outputs, weights: vals, bias });
            }
            networks.push(Network { layers });
        }
        Ok(PolicyStack { networks })
    }

    /// Long-format CSV: `month,layer,kind,row,col,value`, shortest
    /// round-trip float formatting.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), PolicyError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["month", "layer", "kind", "row", "col", "value"])
            .map_err(|e| PolicyError::Format(e.to_string()))?;
        for (t, net) in self.networks.iter().enumerate() {
            for (li, l) in net.layers.iter().enumerate() {
                for r in 0..l.outputs {
                    for c in 0..l.inputs {
                        let v = l.weights[r * l.inputs + c];
                        out.write_record([t.to_string(), li.to_string(), "w".into(), r.to_string(), c.to_string(), format!("{v:?}")])
                            .map_err(|e| PolicyError::Format(e.to_string()))?;
                    }
                    out.write_record([t.to_string(), li.to_string(), "b".into(), r.to_string(), "0".into(), format!("{:?}", l.bias[r])])
                        .map_err(|e| PolicyError::Format(e.to_string()))?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Anything that maps the current balance sheet and market to an action.
pub trait Strategy: Sync {
    fn name(&self) -> &str;
    fn act(&self, state: &ValuedState, curve: &YieldCurve, discounts: &DiscountCurve, price: f64) -> Action;
}

/// Trained per-month networks.
pub struct PolicyStrategy<'a> {
    pub policy: &'a PolicyStack,
    pub universe: &'a [BondSpec],
}

impl Strategy for PolicyStrategy<'_> {
    fn name(&self) -> &str {
        "trained"
    }

    fn act(&self, state: &ValuedState, curve: &YieldCurve, _: &DiscountCurve, _: f64) -> Action {
        let x = features(state, curve, self.universe);
        forward(&self.policy.networks[state.state.t], &x)
    }
}

/// Buys 1m bonds with the cash above the liquidity floor (when their coupon
/// is positive) and sells the stock position down linearly.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub months: usize,
    pub initial_units: f64,
    pub liquidity_floor: f64,
    pub universe: Vec<BondSpec>,
}

impl Benchmark {
    pub fn stock_schedule(&self, t: usize) -> f64 {
        if self.months <= 1 {
            return 0.0;
        }
        let left = self.months.saturating_sub(1 + t) as f64;
        (self.initial_units * left / (self.months - 1) as f64).max(0.0)
    }
}

pub fn benchmark_action(
    state: &ValuedState,
    discounts: &DiscountCurve,
    universe: &[BondSpec],
    months: usize,
    initial_units: f64,
    liquidity_floor: f64,
) -> Action {
    let b = Benchmark { months, initial_units, liquidity_floor, universe: universe.to_vec() };
    b.decide(state, discounts)
}

impl Benchmark {
    fn decide(&self, state: &ValuedState, discounts: &DiscountCurve) -> Action {
        let v = &state.valuation;
        let mut action = Action::hold(self.universe.len(), self.stock_schedule(state.state.t));
        if let Some(i) = self.universe.iter().position(|s| s.maturity_months == 1) {
            let spec = self.universe[i];
            if par_coupon(discounts, spec).is_ok_and(|c| c > 0.0) {
                action.bonds[i] = (v.cash - self.liquidity_floor * v.assets).max(0.0) / spec.face;
            }
        }
        action
    }
}

impl Strategy for Benchmark {
    fn name(&self) -> &str {
        "benchmark"
    }

    fn act(&self, state: &ValuedState, _: &YieldCurve, discounts: &DiscountCurve, _: f64) -> Action {
        self.decide(state, discounts)
    }
}
