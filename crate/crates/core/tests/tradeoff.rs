use exitprune::exitnet::ExitProfile;
use exitprune::flopsmeter::{
    default_threshold_grid, operating_point, sweep_profile, time_share_envelope, ExitCostTable, OperatingPoint,
};
use proptest::prelude::*;

fn point(flops: f64, accuracy: f64) -> OperatingPoint {
    OperatingPoint {
        threshold: 0.0,
        accuracy,
        expected_flops: flops,
        exit_fractions: vec![1.0],
    }
}

fn points() -> impl Strategy<Value = Vec<OperatingPoint>> {
    prop::collection::vec((0.0f64..1000.0, 0.0f64..1.0), 1..30)
        .prop_map(|v| v.into_iter().map(|(f, a)| point(f, a)).collect())
}

/// Random profile: `exits` heads, `n` samples, 4 classes.
fn profiles() -> impl Strategy<Value = (ExitProfile, ExitCostTable)> {
    (2usize..5, 1usize..60).prop_flat_map(|(k, n)| {
        (
            prop::collection::vec(prop::collection::vec(0usize..4, n), k),
            prop::collection::vec(prop::collection::vec(0.25f64..=1.0, n), k),
            prop::collection::vec(0usize..4, n),
            prop::collection::vec(1.0f64..500.0, k),
            prop::collection::vec(0.0f64..50.0, k),
        )
            .prop_map(move |(predictions, confidences, labels, segments, heads)| {
                (
                    ExitProfile {
                        exits: (0..k).collect(),
                        predictions,
                        confidences,
                        labels,
                    },
                    ExitCostTable::from_parts(segments, heads).unwrap(),
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn hull_is_concave_and_dominates(pts in points()) {
        let curve = time_share_envelope(pts.clone()).unwrap();
        let h = &curve.hull;
        for w in h.windows(2) {
            prop_assert!(w[0].flops < w[1].flops);
            prop_assert!(w[0].accuracy < w[1].accuracy);
        }
        for w in h.windows(3) {
            let s1 = (w[1].accuracy - w[0].accuracy) / (w[1].flops - w[0].flops);
            let s2 = (w[2].accuracy - w[1].accuracy) / (w[2].flops - w[1].flops);
            prop_assert!(s2 <= s1 + 1e-12, "slopes {} then {}", s1, s2);
        }
        for p in &pts {
            if let Some(a) = curve.accuracy_at(p.expected_flops) {
                prop_assert!(a + 1e-12 >= p.accuracy);
            } else {
                prop_assert!(p.expected_flops < curve.min_flops());
            }
        }
    }

    #[test]
    fn midpoint_budget_averages_adjacent_vertices(pts in points()) {
        let curve = time_share_envelope(pts).unwrap();
        for w in curve.hull.windows(2) {
            let mid = (w[0].flops + w[1].flops) / 2.0;
            let a = curve.accuracy_at(mid).unwrap();
            prop_assert!((a - (w[0].accuracy + w[1].accuracy) / 2.0).abs() <= 1e-9);
            let m = curve.mixture_at(mid).unwrap();
            prop_assert!((m.p_right - 0.5).abs() <= 1e-9);
        }
    }

    #[test]
    fn flops_for_inverts_accuracy_at(pts in points(), q in 0.0f64..1.0) {
        let curve = time_share_envelope(pts).unwrap();
        let target = curve.min_accuracy() + q * (curve.max_accuracy() - curve.min_accuracy());
        let f = curve.flops_for(target).unwrap();
        let a = curve.accuracy_at(f).unwrap();
        prop_assert!((a - target).abs() <= 1e-9);
    }

    #[test]
    fn sweep_identity_and_monotonicity((profile, costs) in profiles()) {
        let sweep = sweep_profile(&profile, &costs, &default_threshold_grid()).unwrap();
        for p in &sweep {
            let sum: f64 = p.exit_fractions.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            let dot: f64 = p.exit_fractions.iter().zip(&costs.cumulative_cost).map(|(f, c)| f * c).sum();
            prop_assert!((dot - p.expected_flops).abs() <= 1e-9 * dot.max(1.0));
        }
        for w in sweep.windows(2) {
            prop_assert!(w[1].expected_flops >= w[0].expected_flops);
        }
        let zero = operating_point(&profile, &costs, 0.0).unwrap();
        prop_assert_eq!(zero.exit_fractions[0], 1.0);
    }
}

#[test]
fn empty_point_set_is_rejected() {
    assert!(time_share_envelope(Vec::new()).is_err());
}

#[test]
fn budget_below_cheapest_policy_has_no_mixture() {
    let curve = time_share_envelope(vec![point(10.0, 0.5), point(20.0, 0.9)]).unwrap();
    assert_eq!(curve.accuracy_at(9.0), None);
    assert_eq!(curve.accuracy_at(25.0), Some(0.9));
}
