use chrono::NaiveDate;
use proptest::prelude::*;

use deep_alm::balance_sheet::{
    beta_cdf, liability_schedule, restructure, roll_forward, Action, BalanceSheetState, FrictionParams,
    LiabilitySchedule, ValuedState,
};
use deep_alm::data::{parse_ecb_reader, write_ecb_csv, BetaUnits, EcbParamRow};
use deep_alm::evaluation::{histogram, quantile_nearest_rank, summarize};
use deep_alm::scenarios::{calibrate_pca, generate_batch, EquityParams, ScenarioBatch};
use deep_alm::strategies::{features, PolicyInit, PolicyStack};
use deep_alm::termstructure::{
    discount, issue_bond, par_coupon, shift, svensson_to_curve, value, BondSpec, CashFlowVector, SvenssonParams,
    YieldCurve, STANDARD_MATURITIES,
};

fn svensson() -> impl Strategy<Value = SvenssonParams> {
    (0.0f64..0.08, -0.04f64..0.04, -0.05f64..0.05, -0.05f64..0.05, 0.2f64..8.0, 0.5f64..15.0).prop_map(
        |(beta0, beta1, beta2, beta3, tau1, tau2)| SvenssonParams { beta0, beta1, beta2, beta3, tau1, tau2 },
    )
}

fn flows(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn par_bonds_price_at_face(p in svensson()) {
        let curve = svensson_to_curve(&p, 120).unwrap();
        let d = discount(&curve);
        for m in STANDARD_MATURITIES {
            let spec = BondSpec::new(m).unwrap();
            let bond = issue_bond(spec, par_coupon(&d, spec).unwrap(), 120).unwrap();
            prop_assert!((value(&bond, &d).unwrap() - 100.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn shift_conserves_totals(v in flows(24)) {
        let cf = CashFlowVector::from_vec(v.clone());
        let (paid, rest) = shift(&cf);
        prop_assert_eq!(paid, v[0]);
        prop_assert_eq!(rest.flows()[23], 0.0);
        prop_assert_eq!(&rest.flows()[..23], &v[1..]);
        let mut c = cf;
        for _ in 0..24 {
            c = shift(&c).1;
        }
        prop_assert!(c.flows().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn valuation_is_linear(a in flows(12), b in flows(12), w in -3.0f64..3.0, r in -0.01f64..0.08) {
        let d = discount(&YieldCurve::flat(r, 12));
        let mut c = CashFlowVector::from_vec(a.clone());
        c.add_scaled(w, &CashFlowVector::from_vec(b.clone()));
        let lhs = value(&c, &d).unwrap();
        let rhs = value(&CashFlowVector::from_vec(a), &d).unwrap() + w * value(&CashFlowVector::from_vec(b), &d).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn liability_schedules_sum_to_face(a in 0.3f64..6.0, b in 0.3f64..6.0, n in 1usize..200, face in 1.0f64..500.0) {
        let l = liability_schedule(a, b, n, face).unwrap();
        let f = l.flows().flows();
        prop_assert!(f.iter().all(|&x| x >= 0.0));
        prop_assert!((f.iter().sum::<f64>() - face).abs() <= 1e-9 * face);
    }

    #[test]
    fn beta_cdf_is_monotone(a in 0.3f64..6.0, b in 0.3f64..6.0, x in 0.0f64..1.0, y in 0.0f64..1.0) {
        let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
        let (fl, fh) = (beta_cdf(lo, a, b).unwrap(), beta_cdf(hi, a, b).unwrap());
        prop_assert!((0.0..=1.0).contains(&fl) && (0.0..=1.0).contains(&fh));
        prop_assert!(fl <= fh + 1e-15);
    }

    /// Restructuring changes equity by exactly the transaction cost and
    /// the roll-forward moves cash by income less payments and penalty.
    #[test]
    fn restructure_and_roll_conserve_value(
        p in svensson(),
        q in svensson(),
        cash in -20.0f64..80.0,
        legacy in flows(24),
        units in 0.0f64..1.0,
        buys in prop::collection::vec(0.0f64..0.5, 6),
        new_units in 0.0f64..1.0,
        price in 20.0f64..300.0,
        next_price in 20.0f64..300.0,
        t in 0usize..23,
    ) {
        let n = 24;
        let universe: Vec<BondSpec> = [1, 3, 6, 12].iter().map(|&m| BondSpec::new(m).unwrap()).collect();
        let d0 = discount(&svensson_to_curve(&p, n).unwrap());
        let d1 = discount(&svensson_to_curve(&q, n).unwrap());
        let l = liability_schedule(1.5, 2.5, n, 100.0).unwrap();
        let fr = FrictionParams::default();
        let state = BalanceSheetState { t, cash, bonds: CashFlowVector::from_vec(legacy), stock_units: units };
        let pre = ValuedState::mark(state, &d0, price, &l);
        let action = Action { bonds: buys[..4].to_vec(), stock_units: new_units };
        let (post, rec) = restructure(&pre, &action, price, &d0, &universe, &fr).unwrap();
        let scale = 1.0 + pre.valuation.assets.abs() + pre.valuation.liability_value;
        prop_assert!((post.valuation.equity - (pre.valuation.equity - rec.transaction_cost)).abs() <= 1e-9 * scale);
        prop_assert!((rec.transaction_cost - 0.005 * (new_units - units).abs() * price).abs() <= 1e-12 * scale);
        let v = post.valuation;
        prop_assert!((v.assets - (v.cash + v.bond_value + v.stock_value)).abs() <= 1e-12 * scale);

        let (next, roll) = roll_forward(&post, &d1, next_price, &l, &fr);
        prop_assert_eq!(next.state.t, t + 1);
        prop_assert_eq!(roll.liability_paid, l.flows().flows()[t]);
        prop_assert!(roll.penalty >= 0.0);
        let expected = post.state.cash + roll.bond_income - roll.liability_paid - roll.penalty;
        prop_assert!((next.state.cash - expected).abs() <= 1e-12 * scale);
        let w = next.valuation;
        prop_assert!((w.equity - (w.assets - w.liability_value)).abs() <= 1e-12 * scale);
    }

    #[test]
    fn features_are_finite(cash in -200.0f64..200.0, units in 0.0f64..2.0, p in svensson()) {
        let curve = svensson_to_curve(&p, 12).unwrap();
        let l = LiabilitySchedule::from_flows(CashFlowVector::from_vec(vec![5.0; 12]));
        let state = BalanceSheetState { t: 0, cash, bonds: CashFlowVector::zeros(12), stock_units: units };
        let s = ValuedState::mark(state, &curve.discount(), 100.0, &l);
        let x = features(&s, &curve, &[BondSpec::new(1).unwrap(), BondSpec::new(12).unwrap()]);
        prop_assert_eq!(x.0.len(), 6);
        prop_assert!(x.0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn policy_round_trip(seed in any::<u64>(), months in 1usize..5, hidden in 1usize..8) {
        let sizes = PolicyStack::layer_sizes(3, hidden);
        let p = PolicyStack::random(months, &sizes, &PolicyInit { seed, ..Default::default() });
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        prop_assert_eq!(PolicyStack::read_from(buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn quantiles_are_ordered(mut v in prop::collection::vec(-1e3f64..1e3, 1..300)) {
        let s = summarize(&v, 10.0, 120).unwrap();
        prop_assert!(s.quantiles.windows(2).all(|w| w[0] <= w[1]));
        v.sort_by(f64::total_cmp);
        prop_assert_eq!(quantile_nearest_rank(&v, 1.0), v[v.len() - 1]);
        prop_assert!(v.contains(&s.quantiles[3]));
        prop_assert!(s.mean >= v[0] && s.mean <= v[v.len() - 1]);
        let h = histogram(&v, 13).unwrap();
        prop_assert_eq!(h.counts.iter().sum::<usize>(), v.len());
    }

    #[test]
    fn ingest_is_idempotent(rows in prop::collection::vec((0.0f64..8.0, -3.0f64..3.0, 0.1f64..5.0), 1..40)) {
        let start = NaiveDate::from_ymd_opt(2001, 1, 1).unwrap();
        let mut text = String::from("date,beta0,beta1,beta2,beta3,tau1,tau2\n");
        for (i, (b0, b1, tau)) in rows.iter().enumerate() {
            let d = start + chrono::Days::new(i as u64);
            text.push_str(&format!("{d},{b0},{b1},0.5,-0.5,{tau},{}\n", tau + 1.0));
        }
        let once = parse_ecb_reader(text.as_bytes(), BetaUnits::Percent).unwrap();
        let mut a = Vec::new();
        write_ecb_csv(&once, 1.0, &mut a).unwrap();
        let twice: Vec<EcbParamRow> = parse_ecb_reader(a.as_slice(), BetaUnits::Decimal).unwrap();
        let mut b = Vec::new();
        write_ecb_csv(&twice, 1.0, &mut b).unwrap();
        prop_assert_eq!(once, twice);
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Every scenario starts at the anchor and S0; a seed reproduces the
    /// batch and the dump round-trips.
    #[test]
    fn scenario_batches_are_reproducible(seed in any::<u64>(), count in 1usize..20) {
        let n = 12;
        let history: Vec<YieldCurve> = (0..30)
            .map(|i| YieldCurve::new((1..=n).map(|k| 0.02 + 1e-4 * ((i * k) % 7) as f64 + 1e-3 * (i as f64).sin()).collect()).unwrap())
            .collect();
        let model = calibrate_pca(&history, 2, 22).unwrap();
        let anchor = history[29].clone();
        let eq = EquityParams::default();
        let a = generate_batch(&anchor, &model, &eq, n, count, seed).unwrap();
        let b = generate_batch(&anchor, &model, &eq, n, count, seed).unwrap();
        prop_assert_eq!(&a, &b);
        for i in 0..count {
            let p = a.path(i);
            prop_assert_eq!(&p.curves[0], &anchor);
            prop_assert_eq!(p.equity[0], eq.s0);
            prop_assert_eq!(p.curves.len(), n + 1);
        }
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        prop_assert_eq!(ScenarioBatch::read_from(buf.as_slice()).unwrap(), a);
    }
}
