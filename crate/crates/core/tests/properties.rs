use cts_lab_core::calibrate::{self, Dependent, MarketSample};
use cts_lab_core::clearing::{clear, roster, BidProfile};
use cts_lab_core::game;
use cts_lab_core::learning::{self, ActionGrid, AgentState, InitOrder, RepeatedGame};
use cts_lab_core::spread::SpreadModel;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance() -> impl Strategy<Value = (f64, f64, Vec<f64>, Vec<f64>)> {
    (5.0..80.0f64, 0.01..1.0f64, 1usize..7).prop_flat_map(|(alpha, beta, n)| {
        let q_to = alpha / beta;
        (
            Just(alpha),
            Just(beta),
            prop::collection::vec(0.05 * q_to..q_to, n),
            prop::collection::vec(0.0..1.0f64, n),
        )
    })
}

proptest! {
    #[test]
    fn allocations_sum_to_schedule((alpha, beta, b, w) in instance(), share in 0.0..0.9f64) {
        let sum_b: f64 = b.iter().sum();
        let wsum: f64 = w.iter().sum::<f64>().max(1e-12);
        let thetas: Vec<f64> = w.iter().map(|x| share * alpha * sum_b * x / wsum).collect();
        let m = SpreadModel::affine(alpha, beta).unwrap();
        let r = clear(&m, &roster(&b, 0.0), &BidProfile(thetas)).unwrap();
        let total: f64 = r.allocations_x.iter().sum();
        prop_assert!((total - r.q_cts).abs() <= 1e-8 * sum_b);
        prop_assert!((r.price_p - (alpha - beta * r.q_cts)).abs() <= 1e-9 * alpha);
        prop_assert!(r.q_cts <= sum_b.min(alpha / beta) * (1.0 + 1e-12));
    }

    #[test]
    fn schedule_falls_as_bids_rise((alpha, beta, b, _w) in instance(), lo in 0.0..0.4f64, step in 0.01..0.4f64) {
        let sum_b: f64 = b.iter().sum();
        let m = SpreadModel::affine(alpha, beta).unwrap();
        let bidders = roster(&b, 0.0);
        let at = |share: f64| {
            let mut t = vec![0.0; b.len()];
            t[0] = share * alpha * sum_b;
            clear(&m, &bidders, &BidProfile(t)).unwrap().q_cts
        };
        prop_assert!(at(lo + step) < at(lo));
    }

    #[test]
    fn baseline_equilibria_pass_the_oracle((alpha, beta, b, _w) in instance()) {
        prop_assume!(game::nash_baseline(alpha, beta, &b, true).is_ok());
        let ne = game::nash_baseline(alpha, beta, &b, true).unwrap();
        let m = SpreadModel::affine(alpha, beta).unwrap();
        let v = game::verify_equilibrium(&m, &roster(&b, 0.0), &BidProfile(ne.thetas_ne), 501, None, game::PayoffKind::Baseline).unwrap();
        prop_assert!(v.is_confirmed(), "{:?}", v);
        prop_assert!(ne.efficiency.eta >= ne.efficiency.lower_bound - 1e-9);
        prop_assert!(ne.efficiency.eta <= 1.0 + 1e-12);
    }

    #[test]
    fn pull_counts_match_rounds(seed in 0u64..1000, rounds in 10usize..120) {
        let b = [2.0, 3.0, 6.0];
        let model = SpreadModel::affine(10.0, 1.0).unwrap();
        let out = RepeatedGame {
            settlement: model.clone(),
            so_model: model,
            bidders: roster(&b, 0.0),
            grids: learning::baseline_grids(10.0, 1.0, &b, 0.0, 20.0, 5).unwrap(),
            rho: 2.0,
            rounds,
            seed,
            init_order: InitOrder::Shuffled,
            noise_std: 0.3,
        }
        .run()
        .unwrap();
        prop_assert_eq!(out.records.len(), rounds);
        for i in 0..b.len() {
            let mut counts = [0usize; 5];
            for r in &out.records {
                counts[r.arms[i]] += 1;
            }
            prop_assert!(counts.iter().all(|&c| c >= 1));
            prop_assert_eq!(counts.iter().sum::<usize>(), rounds);
        }
    }

    #[test]
    fn price_scaling_is_equivariant(k in 0.1..10.0f64) {
        let base = samples(1.0, -0.02, 3.0, 0.5);
        let scaled: Vec<MarketSample> = base
            .iter()
            .map(|s| MarketSample { price_area_a: k * s.price_area_a, price_area_b: k * s.price_area_b, ..s.clone() })
            .collect();
        let f = calibrate::fit_regression(&base, Dependent::AreaB).unwrap();
        let g = calibrate::fit_regression(&scaled, Dependent::AreaB).unwrap();
        prop_assert!((f.w1 - g.w1).abs() < 1e-9);
        prop_assert!((f.adjusted_r2 - g.adjusted_r2).abs() < 1e-9);
        prop_assert!((k * f.w2 - g.w2).abs() < 1e-9 * k);
        prop_assert!((k * f.w3 - g.w3).abs() < 1e-7 * k);
        prop_assert!((k * f.implied_alpha - g.implied_alpha).abs() < 1e-7 * k);
        let s = calibrate::spread_stats(&base).unwrap();
        let t = calibrate::spread_stats(&scaled).unwrap();
        prop_assert!((k * s.mean - t.mean).abs() < 1e-9 * k);
        prop_assert!((k * s.abs_mean - t.abs_mean).abs() < 1e-9 * k);
        prop_assert!((k * s.std_dev - t.std_dev).abs() < 1e-9 * k);
    }

    #[test]
    fn affine_spreads_round_trip(alpha in 1.0..80.0f64, beta in 0.005..0.5f64) {
        let model = SpreadModel::affine(alpha, beta).unwrap();
        let s: Vec<MarketSample> = samples(1.0, 0.0, 0.0, 0.0)
            .into_iter()
            .map(|x| MarketSample { price_area_b: x.price_area_a + model.evaluate(x.interchange_q).unwrap(), ..x })
            .collect();
        let fit = calibrate::fit_regression(&s, Dependent::AreaB).unwrap();
        let back = calibrate::to_spread_model(&fit, &s).unwrap();
        let (a, b) = back.affine_params().unwrap();
        prop_assert!((a - alpha).abs() < 1e-8 * alpha);
        prop_assert!((b - beta).abs() < 1e-8 * beta);
    }
}

/// Hourly samples of `price_b = w1 price_a + w2 q + w3` plus uniform noise.
fn samples(w1: f64, w2: f64, w3: f64, noise: f64) -> Vec<MarketSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let start = calibrate::parse_timestamp("2018-01-01 00:00").unwrap();
    (0..300)
        .map(|h| {
            let a = 35.0 + 10.0 * (h as f64 * 0.21).sin() + rng.random_range(-3.0..3.0);
            let q = 1000.0 + rng.random_range(-600.0..600.0);
            MarketSample {
                timestamp: start + chrono::Duration::hours(h),
                price_area_a: a,
                price_area_b: w1 * a + w2 * q + w3 + noise * rng.random_range(-1.0..1.0),
                interchange_q: q,
            }
        })
        .collect()
}

#[test]
fn residuals_are_orthogonal_to_regressors() {
    let s = samples(0.97, -0.015, 1.0, 4.0);
    let fit = calibrate::fit_regression(&s, Dependent::AreaB).unwrap();
    let resid: Vec<f64> = s
        .iter()
        .map(|x| x.price_area_b - fit.w1 * x.price_area_a - fit.w2 * x.interchange_q - fit.w3)
        .collect();
    let columns: [Box<dyn Fn(&MarketSample) -> f64>; 3] =
        [Box::new(|x| x.price_area_a), Box::new(|x| x.interchange_q), Box::new(|_| 1.0)];
    for col in &columns {
        let dot: f64 = s.iter().zip(&resid).map(|(x, r)| col(x) * r).sum();
        let scale: f64 = s.iter().map(|x| col(x).powi(2)).sum::<f64>().sqrt() * resid.iter().map(|r| r * r).sum::<f64>().sqrt();
        assert!(dot.abs() <= 1e-6 * scale, "dot {dot}, scale {scale}");
    }
    assert!(fit.adjusted_r2 < 1.0);
}

#[test]
fn suboptimal_pulls_grow_sublinearly() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let means = [0.2, 0.5, 0.8];
    let mut agent = AgentState::new(ActionGrid::uniform(0.0, 1.0, 3, None).unwrap(), 0.5).unwrap();
    let mut early = 0;
    let mut late = 0;
    for t in 0..2000 {
        let k = agent.ucb_select();
        if k != 2 {
            if t < 1000 {
                early += 1;
            } else {
                late += 1;
            }
        }
        let r = means[k] + rng.random_range(-0.5..0.5);
        agent.ucb_update(k, r).unwrap();
    }
    assert!(late < early, "early {early}, late {late}");
}

#[test]
fn nash_flags_follow_the_baseline_equilibrium() {
    let b = [2.0, 3.0, 6.0];
    let model = SpreadModel::affine(10.0, 1.0).unwrap();
    let grids = learning::baseline_grids(10.0, 1.0, &b, 0.0, 20.0, 6).unwrap();
    let ne = game::nash_baseline(10.0, 1.0, &b, true).unwrap();
    let out = RepeatedGame {
        settlement: model.clone(),
        so_model: model,
        bidders: roster(&b, 0.0),
        grids: grids.clone(),
        rho: 2.0,
        rounds: 300,
        seed: 1,
        init_order: InitOrder::Sequential,
        noise_std: 0.0,
    }
    .run()
    .unwrap();
    for r in &out.records {
        for i in 0..3 {
            assert_eq!(r.nash_flags[i], r.thetas[i] == ne.thetas_ne[i]);
        }
    }
}
