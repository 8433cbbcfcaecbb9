//! Cross-module properties: oracle equivalence and chain identities on random
//! configurations, region monotonicity of measured norms, determinism and
//! config round trips.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use restriction_core::combinatorics::{
    assign_exclusions, build_covers, check_kakeya_chain, incidences, nu_count, nu_count_brute, random_configuration,
    IncidenceMethod, TubeConfiguration,
};
use restriction_core::estimator::{focused_pair, run_experiment, ExperimentConfig, Exponent, Family, ProductSamples};
use restriction_core::extension::SamplingGrid;
use restriction_core::geometry::{Side, SpacetimePoint, SpacetimeRegion};

fn config(n: usize, r: f64, tubes: (usize, usize), seed: u64) -> TubeConfiguration {
    random_configuration(n, r, 0.1, tubes.0, tubes.1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hashed_incidences_equal_brute_force(
        n in 1usize..=2,
        r in prop::sample::select(vec![64.0, 128.0, 256.0]),
        t1 in 0usize..100,
        t2 in 0usize..100,
        seed in any::<u64>(),
    ) {
        let (_, fine) = build_covers(n, r, 0.1).unwrap();
        let c = config(n, r, (t1, t2), seed);
        let hashed = incidences(&c, &fine, IncidenceMethod::Hashed).unwrap();
        let brute = incidences(&c, &fine, IncidenceMethod::Brute).unwrap();
        prop_assert_eq!(hashed, brute);
    }

    #[test]
    fn chain_identities_and_pigeonhole_hold(
        n in 1usize..=2,
        r in prop::sample::select(vec![64.0, 128.0]),
        t1 in 1usize..60,
        t2 in 1usize..60,
        seed in any::<u64>(),
    ) {
        let (coarse, fine) = build_covers(n, r, 0.1).unwrap();
        let index = incidences(&config(n, r, (t1, t2), seed), &fine, IncidenceMethod::Hashed).unwrap();
        prop_assert!(index.laws_hold());
        let excl = assign_exclusions(&index, &coarse, 1.0).unwrap();
        prop_assert!(excl.pigeonhole_holds());
        let report = check_kakeya_chain(&index, &excl, 8.0).unwrap();
        prop_assert!(report.identities_hold(), "{:?}", report.rows);
    }

    #[test]
    fn nu_counts_equal_brute_force(t1 in 5usize..80, t2 in 5usize..80, seed in any::<u64>()) {
        let r = 128.0;
        let (coarse, fine) = build_covers(2, r, 0.1).unwrap();
        let index = incidences(&config(2, r, (t1, t2), seed), &fine, IncidenceMethod::Hashed).unwrap();
        let excl = assign_exclusions(&index, &coarse, 1.0).unwrap();
        let (xi1, xi2) = (Side::One.center(), Side::Two.center());
        for triple in index.tube_classes.keys().take(3) {
            for &q0 in index.ball_classes[&triple.mu()].iter().take(3) {
                for b in 0..coarse.len() {
                    if let Ok(fast) = nu_count(&index, &excl, q0 as usize, triple, b, &xi1, &xi2, 8.0) {
                        let slow = nu_count_brute(&index, &excl, q0 as usize, triple, b, &xi1, &xi2, 8.0).unwrap();
                        prop_assert_eq!(fast, slow);
                    }
                }
            }
        }
    }

    #[test]
    fn configurations_round_trip_through_json(n in 1usize..=3, t1 in 0usize..20, t2 in 0usize..20, seed in any::<u64>()) {
        let c = config(n, 64.0, (t1, t2), seed);
        let back = TubeConfiguration::from_json(&c.to_json()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn enlarging_the_region_never_decreases_the_norm(
        q in 1.2f64..4.0,
        radius in 4.0f64..20.0,
        extra in 1.0f64..20.0,
        seed in any::<u64>(),
    ) {
        let r = 64.0;
        let (f1, f2) = focused_pair(2, r, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let centre = SpacetimePoint::new(0.75 * r, [0.0; 3]);
        let inner = SamplingGrid::midpoint(2, SpacetimeRegion::Ball { center: centre, radius }, 6, 6).unwrap();
        let outer_part = SamplingGrid::midpoint(
            2,
            SpacetimeRegion::Ball { center: SpacetimePoint::new(0.75 * r, [radius + extra, 0.0, 0.0]), radius: extra },
            5,
            5,
        )
        .unwrap();
        let small = ProductSamples::sample(&f1, &f2, std::slice::from_ref(&inner)).unwrap().lq(q).unwrap();
        let large = ProductSamples::sample(&f1, &f2, &[inner.merge(outer_part).unwrap()]).unwrap().lq(q).unwrap();
        prop_assert!(large >= small, "{large} < {small}");
    }

    #[test]
    fn exponents_round_trip(a in 1u32..20, b in 1u32..20, v in 1.0f64..8.0) {
        for e in [Exponent::Ratio(a, b), Exponent::Value(v), Exponent::Critical] {
            let text = serde_json::to_string(&e).unwrap();
            let back: Exponent = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back.value(2), e.value(2));
        }
    }
}

#[test]
fn experiments_are_deterministic_in_the_seed() {
    let mut config: ExperimentConfig =
        serde_json::from_str(r#"{"n": 1, "R": [64, 128, 256], "q": "critical", "family": "random", "seed": 9}"#)
            .unwrap();
    assert_eq!(config.q.value(1), 2.0);
    assert_eq!(config.family, Family::Random);
    let a = run_experiment(&config).unwrap();
    let b = run_experiment(&config).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    config.seed = 10;
    let c = run_experiment(&config).unwrap();
    assert_ne!(a.rows, c.rows);
}

#[test]
fn malformed_configs_are_rejected() {
    let parse = |text: &str| serde_json::from_str::<ExperimentConfig>(text);
    assert!(parse(r#"{"n": 2, "R": [64], "q": 2, "family": "plate", "extra": 1}"#).is_err());
    assert!(parse(r#"{"n": 2, "R": [64], "q": "2/0", "family": "plate"}"#).is_err());
    assert!(parse(r#"{"n": 2, "R": [64], "q": 2, "family": "disk"}"#).is_err());
    let valid = |text: &str| parse(text).unwrap().validate();
    assert!(valid(r#"{"n": 2, "R": [64, 128], "q": 2, "family": "plate"}"#).is_ok());
    assert!(valid(r#"{"n": 4, "R": [64], "q": 2, "family": "plate"}"#).is_err());
    assert!(valid(r#"{"n": 2, "R": [128, 64], "q": 2, "family": "plate"}"#).is_err());
    assert!(valid(r#"{"n": 2, "R": [8], "q": 2, "family": "plate"}"#).is_err());
    assert!(valid(r#"{"n": 2, "R": [64], "q": 2, "delta": 0.7, "family": "plate"}"#).is_err());
    assert!(valid(r#"{"n": 2, "R": [64], "q": 2, "family": "plate", "budgets": {"samples": 0}}"#).is_err());
}
