//! Independent oracles shared by the integration tests. Nothing here calls
//! the pricing or balance-sheet code under test.
#![allow(dead_code)]

use deep_alm::config::RunConfig;
use deep_alm::pipeline;

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };
    const LN2: Dd = Dd { hi: std::f64::consts::LN_2, lo: 2.319_046_813_846_299_6e-17 };

    pub fn from(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let r = quick_two_sum(s, e + t);
        quick_two_sum(r.hi, r.lo + f)
    }

    pub fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        quick_two_sum(p, e + (self.hi * o.lo + self.lo * o.hi))
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Dd::from(q1)));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul(Dd::from(q2)));
        let q3 = r.hi / o.hi;
        quick_two_sum(q1, q2).add(Dd::from(q3))
    }

    pub fn scale(self, k: f64) -> Dd {
        self.mul(Dd::from(k))
    }

    /// Range reduction by `ln 2` and `2^-10`, then a Taylor series.
    pub fn exp(self) -> Dd {
        let k = (self.hi / std::f64::consts::LN_2).round();
        let r = self.sub(Dd::LN2.scale(k)).scale(1.0 / 1024.0);
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for n in 1..30 {
            term = term.mul(r).div(Dd::from(n as f64));
            sum = sum.add(term);
            if term.hi.abs() < 1e-36 {
                break;
            }
        }
        for _ in 0..10 {
            sum = sum.mul(sum);
        }
        sum.scale(2f64.powi(k as i32))
    }
}

/// Svensson yield in double-double for a maturity of `months`.
pub fn svensson_dd(p: [f64; 6], months: usize) -> Dd {
    let [b0, b1, b2, b3, t1, t2] = p;
    let years = Dd::from(months as f64).div(Dd::from(12.0));
    let x1 = years.div(Dd::from(t1));
    let x2 = years.div(Dd::from(t2));
    let e1 = x1.neg().exp();
    let e2 = x2.neg().exp();
    let l1 = Dd::ONE.sub(e1).div(x1);
    let l2 = l1.sub(e1);
    let l3 = Dd::ONE.sub(e2).div(x2).sub(e2);
    Dd::from(b0).add(Dd::from(b1).mul(l1)).add(Dd::from(b2).mul(l2)).add(Dd::from(b3).mul(l3))
}

/// `exp(-k / 12 * y)` in double-double.
pub fn discount_dd(y: f64, months: usize) -> Dd {
    Dd::from(y).mul(Dd::from(months as f64)).div(Dd::from(12.0)).neg().exp()
}

/// Present value of `flows` (entry `k` paid `k + 1` months ahead) in double-double.
pub fn value_dd(yields: &[f64], flows: &[f64]) -> Dd {
    flows
        .iter()
        .enumerate()
        .fold(Dd::ZERO, |acc, (k, &b)| acc.add(discount_dd(yields[k], k + 1).mul(Dd::from(b))))
}

/// Payment schedule of a face-100 bond written from the contract terms:
/// one redemption with simple interest below a year, otherwise semi-annual
/// coupons.
pub fn bond_flows(maturity: usize, coupon: f64, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    if maturity < 12 {
        v[maturity - 1] = 100.0 * (1.0 + coupon * maturity as f64 / 12.0);
    } else {
        let mut m = 6;
        while m <= maturity {
            v[m - 1] += 100.0 * coupon / 2.0;
            m += 6;
        }
        v[maturity - 1] += 100.0;
    }
    v
}

/// Coupon pricing the bond at 100, by bisection on the double-double value.
pub fn par_by_bisection(yields: &[f64], maturity: usize) -> f64 {
    let price = |c: f64| value_dd(yields, &bond_flows(maturity, c, yields.len())).to_f64() - 100.0;
    let (mut lo, mut hi) = (-1.0, 1.0);
    assert!(price(lo) < 0.0 && price(hi) > 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if price(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `I_x(a, b)` by composite Simpson after `u = sin^2(theta)`, which removes
/// the endpoint singularities when `2a` and `2b` are integers.
pub fn beta_cdf_quadrature(x: f64, a: f64, b: f64) -> f64 {
    let density = |th: f64| 2.0 * th.sin().powf(2.0 * a - 1.0) * th.cos().powf(2.0 * b - 1.0);
    let simpson = |upper: f64| {
        let n = 20_000;
        let h = upper / n as f64;
        let mut s = density(0.0) + density(upper);
        for i in 1..n {
            s += density(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    simpson(x.sqrt().asin()) / simpson(std::f64::consts::FRAC_PI_2)
}

/// Config scaled down for quick end-to-end runs.
pub fn small_config(dir: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.output.dir = dir.to_path_buf();
    cfg.scenarios.train_count = 64;
    cfg.scenarios.validation_count = 32;
    cfg.scenarios.eval_count = 64;
    cfg.optimizer.epochs = 2;
    cfg.optimizer.batch_size = 32;
    cfg
}

/// Setup, factor model and anchor from the bundled fixture.
pub fn fixture_setup(cfg: &RunConfig) -> (deep_alm::balance_sheet::RunoffSetup, deep_alm::scenarios::PcaModel, deep_alm::termstructure::YieldCurve) {
    let rows = pipeline::load_rows(cfg).unwrap();
    let market = pipeline::market(cfg, &rows).unwrap();
    let model = pipeline::calibrate(cfg, &market).unwrap();
    let (setup, _) = pipeline::runoff_setup(cfg, &market).unwrap();
    (setup, model, market.anchor)
}

/// Two-month instance: one 1m bond, flat curve, deterministic stock.
pub struct Tiny {
    pub rate: f64,
    pub drift: f64,
    pub cash: f64,
    pub liability_face: f64,
    pub kappa: f64,
    pub penalty_rate: f64,
    pub floor: f64,
    pub s0: f64,
}

impl Default for Tiny {
    fn default() -> Self {
        Tiny { rate: 0.03, drift: 0.12, cash: 100.0, liability_face: 90.0, kappa: 0.005, penalty_rate: 0.24, floor: 0.10, s0: 100.0 }
    }
}

impl Tiny {
    /// Terminal equity for actions `[h0, d0, h1, d1]`, written out by hand.
    pub fn terminal_equity(&self, a: [f64; 4]) -> f64 {
        let [h0, d0, h1, d1] = a;
        let d1m = (-self.rate / 12.0).exp();
        let g = (self.drift / 12.0).exp();
        let pay = self.liability_face / 2.0;
        let pen = |cash: f64, assets: f64| self.penalty_rate / 12.0 * (self.floor * assets - cash).max(0.0);
        let s0 = self.s0;
        let s1 = s0 * g;
        let s2 = s1 * g;

        let c0 = self.cash - 100.0 * h0 - (d0 * s0 + self.kappa * d0.abs() * s0);
        let a0 = c0 + 100.0 * h0 + d0 * s0;
        let c1 = c0 + h0 * 100.0 / d1m - pay - pen(c0, a0);

        let trade = d1 - d0;
        let c1p = c1 - 100.0 * h1 - (trade * s1 + self.kappa * trade.abs() * s1);
        let a1 = c1p + 100.0 * h1 + d1 * s1;
        let c2 = c1p + h1 * 100.0 / d1m - pay - pen(c1p, a1);
        c2 + d1 * s2
    }

    pub fn initial_equity(&self) -> f64 {
        let pay = self.liability_face / 2.0;
        let l0 = pay * (-self.rate / 12.0).exp() + pay * (-2.0 * self.rate / 12.0).exp();
        self.cash - l0
    }

    /// Exhaustive multi-resolution search over the four actions.
    pub fn grid_optimum(&self, upper: f64) -> ([f64; 4], f64) {
        let mut lo = [0.0; 4];
        let mut hi = [upper; 4];
        let mut best = ([0.0; 4], f64::NEG_INFINITY);
        for _ in 0..5 {
            let steps = 24usize;
            let h: Vec<f64> = (0..4).map(|k| (hi[k] - lo[k]) / steps as f64).collect();
            for i in 0..=steps {
                for j in 0..=steps {
                    for k in 0..=steps {
                        for l in 0..=steps {
                            let a = [
                                lo[0] + i as f64 * h[0],
                                lo[1] + j as f64 * h[1],
                                lo[2] + k as f64 * h[2],
                                lo[3] + l as f64 * h[3],
                            ];
                            let e = self.terminal_equity(a);
                            if e > best.1 {
                                best = (a, e);
                            }
                        }
                    }
                }
            }
            for k in 0..4 {
                lo[k] = (best.0[k] - 2.0 * h[k]).max(0.0);
                hi[k] = best.0[k] + 2.0 * h[k];
            }
        }
        best
    }
}
