use std::collections::{BTreeMap, BTreeSet};

use irda_core::encoding::{encode_ascii, encode_numeric, parse_ascii, render_parsed, Legend};
use irda_core::env::{rollout, EnvConfig, Event, Policy};
use irda_core::metrics::{balanced_accuracy, bootstrap_ci, fleiss_kappa, jaccard, LabelMatrix};
use irda_core::moral_machine::{generate_scenarios, standardize, vectorize};
use irda_core::sampling::{confidence_from_probs, kmeans, squared_distance, KmeansConfig};
use proptest::prelude::*;

fn policy() -> impl Strategy<Value = Policy> {
    prop_oneof![Just(Policy::UniformRandom), Just(Policy::StayHome), Just(Policy::GreedyApple)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ascii_parse_render_is_a_fixpoint(seed in any::<u64>(), p in policy()) {
        let t = rollout(&EnvConfig::default(), seed, p).unwrap();
        let legend = Legend::default();
        let text = encode_ascii(&t, &legend).unwrap().text;
        let parsed = parse_ascii(&text, &legend).unwrap();
        prop_assert_eq!(parsed.len(), t.states.len());
        prop_assert_eq!(render_parsed(&parsed, &legend), text);
    }

    #[test]
    fn items_are_conserved_and_agents_stay_on_grid(seed in any::<u64>(), p in policy()) {
        let config = EnvConfig::default();
        let t = rollout(&config, seed, p).unwrap();
        prop_assert_eq!(t.states.len(), config.episode_length + 1);
        let s0 = &t.states[0];
        let mut apples = 0;
        let mut garbage = 0;
        for (i, s) in t.states.iter().enumerate() {
            prop_assert!(s.agent_positions().iter().all(|pos| config.in_bounds(*pos)));
            prop_assert_eq!(s.total_apples() + apples, s0.total_apples());
            prop_assert_eq!(s.total_garbage() + garbage, s0.total_garbage());
            if let Some(events) = t.events.get(i) {
                apples += events.iter().filter(|e| matches!(e, Event::CollectedApple { .. })).count();
                garbage += events.iter().filter(|e| matches!(e, Event::CollectedGarbage { .. })).count();
            }
        }
        let enc = encode_numeric(&t);
        prop_assert!(enc.flat.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn stay_home_policy_keeps_main_agent_home(seed in any::<u64>()) {
        prop_assert!(rollout(&EnvConfig::default(), seed, Policy::StayHome).unwrap().main_stays_home());
    }

    #[test]
    fn vectorize_is_antisymmetric(seed in any::<u64>()) {
        for s in generate_scenarios(10, seed) {
            let a = vectorize(&s);
            let b = vectorize(&s.swapped());
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert_eq!(*x, -*y);
            }
        }
    }

    #[test]
    fn standardized_columns_are_centred(seed in any::<u64>()) {
        let vs: Vec<_> = generate_scenarios(50, seed).iter().map(vectorize).collect();
        let (scaled, _) = standardize(&vs).unwrap();
        for c in 0..26 {
            let col: Vec<f64> = scaled.iter().map(|v| v.values()[c]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / col.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!(var.abs() < 1e-9 || (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn kappa_is_at_most_one(rows in prop::collection::vec(prop::collection::vec(0u8..2, 3), 2..12)) {
        if let Ok(k) = fleiss_kappa(&LabelMatrix::new(rows).unwrap()) {
            prop_assert!(k.value <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn jaccard_is_symmetric_and_bounded(a in prop::collection::btree_set("[a-e]", 0..5), b in prop::collection::btree_set("[a-e]", 0..5)) {
        let (x, y) = (jaccard(&a, &b), jaccard(&b, &a));
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(jaccard(&a, &a), 1.0);
    }

    #[test]
    fn balanced_accuracy_is_bounded(pairs in prop::collection::vec((0u8..2, 0u8..2), 2..40)) {
        let (t, p): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        if let Ok(v) = balanced_accuracy(&t, &p) {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn bootstrap_is_deterministic_and_covers_mean(xs in prop::collection::vec(-10.0f64..10.0, 2..30), seed in any::<u64>()) {
        let a = bootstrap_ci(&xs, 500, 0.95, seed).unwrap();
        prop_assert_eq!(a, bootstrap_ci(&xs, 500, 0.95, seed).unwrap());
        prop_assert!(a.lo <= a.hi);
        prop_assert!(a.contains(a.mean));
    }

    #[test]
    fn confidence_is_bounded(p in 0.0f64..=1.0, q in 0.0f64..=1.0) {
        let c = confidence_from_probs(p, q).unwrap();
        prop_assert!((0.0..=1.0).contains(&c.value));
    }

    #[test]
    fn kmeans_assigns_points_to_nearest_centroid(
        pts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 6..30),
        k in 1usize..5,
        seed in any::<u64>(),
    ) {
        let r = kmeans(&pts, k, seed, KmeansConfig::default()).unwrap();
        prop_assert_eq!(r.centroids.len(), k);
        for c in 0..k {
            prop_assert!(r.members(c).count() > 0);
        }
        for w in r.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9);
        }
        for (i, p) in pts.iter().enumerate() {
            let own = squared_distance(p, &r.centroids[r.assignments[i]]);
            let best = r.centroids.iter().map(|c| squared_distance(p, c)).fold(f64::INFINITY, f64::min);
            prop_assert!(own <= best + 1e-9);
        }
    }
}

#[test]
fn jaccard_mean_over_identical_sets_is_one() {
    let set: BTreeSet<String> = ["a".to_string()].into();
    let sets: BTreeMap<String, BTreeSet<String>> = (0..3).map(|i| (format!("p{i}"), set.clone())).collect();
    assert_eq!(irda_core::metrics::jaccard_mean(&sets).unwrap().mean, 1.0);
}
