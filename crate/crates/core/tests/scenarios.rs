use std::path::PathBuf;

use proptest::prelude::*;

use storage_agg::scenario::{load_scenario, parse_scenario, run_pipeline, Command, RunSettings, Scenario};
use storage_agg::Error;

fn path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.json"))
}

fn example() -> Scenario {
    load_scenario(path("example1")).unwrap()
}

#[test]
fn bundled_fixtures_load() {
    let shapes = [("example1", 1, 2, 1), ("twobus", 2, 2, 2), ("threeperiod", 1, 3, 2)];
    for (name, buses, horizon, units) in shapes {
        let s = load_scenario(path(name)).unwrap();
        assert_eq!(s.network.n_buses, buses, "{name}");
        assert_eq!(s.network.horizon, horizon, "{name}");
        assert_eq!(s.units.len(), units, "{name}");
    }
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(matches!(load_scenario("/nonexistent.json"), Err(Error::Io(_))));
}

#[test]
fn shape_mismatch_names_the_field() {
    let mut s = example();
    s.demand.q[0].push(1.0);
    match parse_scenario(&s.to_json()) {
        Err(Error::Validation { field, .. }) => assert_eq!(field, "demand"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn repeated_runs_reproduce_every_scalar() {
    let mut settings = RunSettings {
        points: 9,
        ..Default::default()
    };
    settings.search.multistart = 2;
    for name in ["example1", "twobus", "threeperiod"] {
        let s = load_scenario(path(name)).unwrap();
        for command in [Command::Stackelberg, Command::Bargain, Command::Mpmp] {
            let a = run_pipeline(&s, command, &settings, None).unwrap();
            let b = run_pipeline(&s, command, &settings, None).unwrap();
            assert_eq!(a.scenario_hash, b.scenario_hash);
            assert_eq!(a.summary.len(), b.summary.len());
            for (k, v) in &a.summary {
                assert!((v - b.summary[k]).abs() <= 1e-9, "{name} {k}");
            }
        }
    }
}

#[test]
fn hash_ignores_formatting() {
    let s = example();
    let compact = serde_json::to_string(&s).unwrap();
    assert_eq!(parse_scenario(&compact).unwrap().hash(), s.hash());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn numeric_fields_round_trip_exactly(
        slope in 0.1f64..10.0,
        q in 0.0f64..100.0,
        eta in 0.5f64..1.0,
        w in 0.01f64..5.0,
        discount in 0.01f64..0.99,
    ) {
        let mut s = example();
        s.network.gen_cost.slope[0][1] = slope;
        s.demand.q[0][1] = q;
        s.units[0].eta_minus = eta;
        s.units[0].cost.w_plus = w;
        s.repeated.discount = discount;
        let back = parse_scenario(&s.to_json()).unwrap();
        prop_assert_eq!(back.network.gen_cost.slope[0][1].to_bits(), slope.to_bits());
        prop_assert_eq!(back.demand.q[0][1].to_bits(), q.to_bits());
        prop_assert_eq!(back.units[0].eta_minus.to_bits(), eta.to_bits());
        prop_assert_eq!(back.units[0].cost.w_plus.to_bits(), w.to_bits());
        prop_assert_eq!(back.repeated.discount.to_bits(), discount.to_bits());
        prop_assert_eq!(back, s);
    }

    #[test]
    fn efficiency_outside_unit_interval_is_rejected(eta in 1.0001f64..5.0) {
        let mut s = example();
        s.units[0].eta_plus = eta;
        match parse_scenario(&s.to_json()) {
            Err(Error::Validation { field, .. }) => prop_assert_eq!(field, "units[0].eta_plus"),
            other => prop_assert!(false, "{:?}", other),
        }
    }
}
