use std::path::Path;

use evflex::admm::repair_bus;
use evflex::exact::solve_joint_fixed_tau;
use evflex::mechanism::run_vcg;
use evflex::model::{self, check_feasible, naive_parallel_schedule, soc_trajectory};
use evflex::qp::QpSettings;
use evflex::sim::{
    arbitrage_threshold_check, load_datasets, run_metrics, sample_scenario, schedule_baseline, synthetic_bundle,
    Baseline, DatasetPaths, StationConfig, SyntheticSpec,
};
use evflex::{Allocation, Ev, EvStaticParams, EvType, Solver, StationScenario};
use proptest::prelude::*;

fn ev_strategy(horizon: usize) -> impl Strategy<Value = Ev> {
    (
        0.0..40.0f64,
        0.0..20.0f64,
        0..=horizon,
        0.0..50.0f64,
        prop::sample::select(vec![0.0, 0.05, 0.13]),
        prop::bool::ANY,
    )
        .prop_map(move |(s0, need, tau, alpha, wear, v2g)| Ev {
            params: EvStaticParams {
                battery_capacity: 40.0,
                efficiency: 0.87,
                wear_cost: wear,
                initial_soc: s0,
                max_charge_rate: 6.6,
                max_discharge_rate: if v2g { 6.6 } else { 0.0 },
            },
            ty: EvType {
                desired_disconnect: tau,
                desired_soc: (s0 + need).min(40.0),
                temporal_inflexibility: alpha,
                soc_inflexibility: 10.0,
            },
        })
}

fn scenario_strategy(max_evs: usize, max_horizon: usize) -> impl Strategy<Value = StationScenario> {
    (1..=max_evs, 1..=max_horizon)
        .prop_flat_map(|(n, t)| {
            (
                prop::collection::vec(0.05..0.4f64, t),
                prop::collection::vec(ev_strategy(t), n),
                1.0..15.0f64,
                prop::sample::select(vec![0.25, 0.5, 1.0]),
            )
        })
        .prop_map(|(prices, fleet, bus, dt)| StationScenario {
            horizon: prices.len(),
            interval_hours: dt,
            prices,
            bus_capacity: bus,
            fleet,
        })
}

fn profiles_strategy(sc: StationScenario) -> impl Strategy<Value = (StationScenario, Vec<Allocation>)> {
    let t = sc.horizon;
    let n = sc.fleet.len();
    prop::collection::vec((0..=t, prop::collection::vec(-10.0..10.0f64, t)), n).prop_map(move |raw| {
        let allocs = raw
            .into_iter()
            .map(|(tau, power_profile)| Allocation {
                disconnect_time: tau,
                power_profile,
            })
            .collect();
        (sc.clone(), allocs)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn soc_is_affine_in_the_profile(
        (u, v) in (1..30usize).prop_flat_map(|t| (
            prop::collection::vec(-6.6..6.6f64, t),
            prop::collection::vec(-6.6..6.6f64, t),
        )),
        lam in -2.0..3.0f64,
        s0 in 0.0..40.0f64,
        eta in 0.5..1.0f64,
        dt in 0.05..1.0f64,
    ) {
        let p = EvStaticParams {
            battery_capacity: 40.0,
            efficiency: eta,
            wear_cost: 0.13,
            initial_soc: s0,
            max_charge_rate: 6.6,
            max_discharge_rate: 6.6,
        };
        let mix: Vec<f64> = u.iter().zip(&v).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
        let su = soc_trajectory(&p, &u, dt).unwrap();
        let sv = soc_trajectory(&p, &v, dt).unwrap();
        let sm = soc_trajectory(&p, &mix, dt).unwrap();
        prop_assert_eq!(sm.len(), u.len() + 1);
        for k in 0..sm.len() {
            prop_assert!((sm[k] - (lam * su[k] + (1.0 - lam) * sv[k])).abs() <= 1e-10);
        }
    }

    #[test]
    fn naive_schedule_is_feasible(sc in scenario_strategy(5, 16)) {
        let a = naive_parallel_schedule(&sc);
        let report = check_feasible(&sc, &a, 1e-9).unwrap();
        prop_assert!(report.is_feasible(), "{:?}", report);
    }

    #[test]
    fn repair_makes_any_profile_feasible((sc, raw) in scenario_strategy(4, 12).prop_flat_map(profiles_strategy)) {
        let fixed = repair_bus(&sc, &raw);
        let report = check_feasible(&sc, &fixed, 1e-9).unwrap();
        prop_assert!(report.is_feasible(), "{:?}", report);
        // Already-feasible input is left alone.
        let again = repair_bus(&sc, &fixed);
        for (a, b) in again.iter().zip(&fixed) {
            for (x, y) in a.power_profile.iter().zip(&b.power_profile) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn arbitrage_flag_is_monotone_in_wear(
        prices in prop::collection::vec(0.0..0.5f64, 1..48),
        b in 0.0..0.3f64,
        cheaper in 0.0..1.0f64,
    ) {
        if arbitrage_threshold_check(&prices, b) {
            prop_assert!(arbitrage_threshold_check(&prices, b * cheaper));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn admm_is_feasible_and_never_beats_exact(sc in scenario_strategy(3, 6)) {
        let exact = Solver::exact().schedule(&sc).unwrap();
        let admm = Solver::admm().schedule(&sc).unwrap();
        for sol in [&exact, &admm] {
            let report = check_feasible(&sc, &sol.allocations, 1e-6).unwrap();
            prop_assert!(report.is_feasible(), "{:?}", report);
            let direct = model::social_cost(&sc, &sol.allocations).unwrap();
            prop_assert!((direct - sol.social_cost).abs() <= 1e-9 * direct.abs().max(1.0));
        }
        prop_assert!(admm.social_cost >= exact.social_cost - 1e-6 * exact.social_cost.abs().max(1.0));
    }

    #[test]
    fn flexible_schedule_dominates_baselines(sc in scenario_strategy(3, 6)) {
        let solver = Solver::exact();
        let flex = solver.schedule(&sc).unwrap().social_cost;
        for b in [Baseline::Inflexible, Baseline::Unidirectional, Baseline::Naive, Baseline::MeanAlpha] {
            let c = schedule_baseline(&sc, b, &solver).unwrap().social_cost;
            prop_assert!(flex <= c + 1e-6, "{:?}: {} > {}", b, flex, c);
        }
    }

    #[test]
    fn vcg_is_individually_rational_and_budget_adds_up(sc in scenario_strategy(3, 5)) {
        let out = run_vcg(&sc, &sc.types(), &Solver::exact()).unwrap();
        prop_assert!(out.ir_satisfied.iter().all(|&ok| ok), "{:?}", out);
        let energy: f64 = out
            .allocations
            .iter()
            .map(|a| model::energy_cost(&sc.prices, &a.power_profile, sc.interval_hours).unwrap())
            .sum();
        let budget = out.payments.iter().sum::<f64>() - energy;
        prop_assert!((budget - out.station_budget).abs() <= 1e-9 * energy.abs().max(1.0));
        let metrics = run_metrics(&sc, &out.allocations).unwrap();
        prop_assert!(metrics.avg_delay_min >= 0.0 && metrics.v2g_energy_kwh >= 0.0);
    }
}

/// Staying one hour longer can earn at most one hour of full-rate trading
/// across the day's price range (plus what it saves on the shortfall).
#[test]
fn one_hour_delay_revenue_is_bounded_by_the_spread() {
    let station = StationConfig::default();
    let bundle = synthetic_bundle(&SyntheticSpec::default(), &station);
    let hour = (1.0 / station.interval_hours).round() as usize;
    let settings = QpSettings::default();
    let mut checked = 0;
    for seed in 0..6 {
        let sc = sample_scenario(&bundle, &station, seed).unwrap();
        let hi = sc.prices.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = sc.prices.iter().copied().fold(f64::INFINITY, f64::min);
        for ev in &sc.fleet {
            let tau = ev.ty.desired_disconnect;
            if tau + hour > sc.horizon {
                continue;
            }
            let alone = StationScenario {
                fleet: vec![ev.clone()],
                ..sc.clone()
            };
            let non_delay = |t: usize| {
                let (a, cost) = solve_joint_fixed_tau(&alone, &[t], &settings).unwrap();
                let s_end = *soc_trajectory(&ev.params, &a[0].power_profile, sc.interval_hours)
                    .unwrap()
                    .last()
                    .unwrap();
                (cost - model::delay_cost(&ev.ty, t, sc.interval_hours), model::shortfall_cost(&ev.ty, s_end))
            };
            let (r0, short0) = non_delay(tau);
            let (r1, short1) = non_delay(tau + hour);
            let revenue = (r0 - short0) - (r1 - short1);
            let bound = (hi - lo) * ev.params.max_discharge_rate.max(ev.params.max_charge_rate) + (short0 - short1);
            assert!(revenue <= bound + 1e-6, "revenue {revenue} exceeds {bound}");
            checked += 1;
        }
    }
    assert!(checked >= 20);
}

#[test]
fn bundled_dataset_files_parse_to_known_counts() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/data");
    let paths = DatasetPaths {
        prices: (0..18).map(|d| format!("prices_day{d:02}.csv").into()).collect(),
        disconnects: "disconnects.csv".into(),
        soc_pairs: "soc_pairs.csv".into(),
        alphas: "alphas.csv".into(),
    }
    .relative_to(&dir);
    let bundle = load_datasets(&paths, 48, 40.0).unwrap();
    assert_eq!(bundle.price_days.len(), 18);
    assert!(bundle.price_days.iter().all(|d| d.len() == 48));
    assert_eq!(bundle.disconnect_samples.len(), 200);
    assert_eq!(bundle.soc_pairs.len(), 200);
    assert_eq!(bundle.alpha_samples.len(), 200);

    // The files are the default synthetic bundle, rounded.
    let synth = synthetic_bundle(&SyntheticSpec::default(), &StationConfig::default());
    assert_eq!(bundle.disconnect_samples, synth.disconnect_samples);
    for (a, b) in bundle.price_days.iter().flatten().zip(synth.price_days.iter().flatten()) {
        assert!((a - b).abs() <= 5e-6);
    }
    for (a, b) in bundle.soc_pairs.iter().zip(&synth.soc_pairs) {
        assert!((a.initial_kwh - b.initial_kwh).abs() <= 5e-4 && (a.desired_kwh - b.desired_kwh).abs() <= 5e-4);
    }
    for day in &bundle.price_days {
        let hi = day.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = day.iter().copied().fold(f64::INFINITY, f64::min);
        assert!((hi - lo - 0.09).abs() <= 1e-5);
    }
}
