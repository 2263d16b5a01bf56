use std::collections::BTreeSet;

use exitprune::pruner::{global_l1_prune, prune_count, sparsity_report, MaskSet, PruneScope};
use exitprune::tensorcore::{ParamRef, ParamStore, Tensor};
use proptest::prelude::*;

fn store(tensors: &[Vec<f64>]) -> (ParamStore, PruneScope) {
    let mut p = ParamStore::new();
    let mut refs = Vec::new();
    for (i, data) in tensors.iter().enumerate() {
        let r = ParamRef::weight(format!("t{i}"));
        p.insert(r.clone(), Tensor::new(vec![data.len()], data.clone()).unwrap())
            .unwrap();
        refs.push(r);
    }
    (p, PruneScope::new(refs).unwrap())
}

/// Full sort of survivors by (|w|, tensor, index); the first k.
fn oracle(params: &ParamStore, masks: &MaskSet, scope: &PruneScope, fraction: f64) -> BTreeSet<(ParamRef, usize)> {
    let mut all = Vec::new();
    for r in scope.refs() {
        let t = params.get(r).unwrap();
        let m = masks.get(r);
        for (i, w) in t.data().iter().enumerate() {
            if m.is_none_or(|m| m[i]) {
                all.push((w.abs(), r.clone(), i));
            }
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let k = prune_count(fraction, all.len());
    all.into_iter().take(k).map(|(_, r, i)| (r, i)).collect()
}

fn masked(masks: &MaskSet) -> BTreeSet<(ParamRef, usize)> {
    masks
        .iter()
        .flat_map(|(r, m)| {
            m.iter()
                .enumerate()
                .filter(|(_, keep)| !**keep)
                .map(move |(i, _)| (r.clone(), i))
        })
        .collect()
}

fn weights() -> impl Strategy<Value = Vec<Vec<f64>>> {
    // Few distinct magnitudes so ties are common.
    let value = prop_oneof![
        (-4i32..=4).prop_map(|v| v as f64 * 0.25),
        -1.0f64..1.0,
    ];
    prop::collection::vec(prop::collection::vec(value, 1..120), 1..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn global_prune_equals_full_sort_oracle(tensors in weights(), fraction in 0.01f64..0.95, rounds in 1usize..4) {
        let (mut params, scope) = store(&tensors);
        let mut masks = MaskSet::default();
        for _ in 0..rounds {
            let mut expected = masked(&masks);
            expected.extend(oracle(&params, &masks, &scope, fraction));
            global_l1_prune(&mut params, &mut masks, &scope, fraction).unwrap();
            prop_assert_eq!(masked(&masks), expected);
        }
    }

    #[test]
    fn masks_only_shrink_and_hold(tensors in weights(), fraction in 0.01f64..0.95) {
        let (mut params, scope) = store(&tensors);
        let mut masks = MaskSet::default();
        let mut previous = BTreeSet::new();
        for _ in 0..3 {
            let before = masks.nnz();
            let k = global_l1_prune(&mut params, &mut masks, &scope, fraction).unwrap();
            let now = masked(&masks);
            prop_assert!(previous.is_subset(&now));
            prop_assert_eq!(masks.nnz() + k, if before == 0 { masks.total() } else { before });
            prop_assert!(masks.holds_in(&params));
            previous = now;
        }
    }

    #[test]
    fn report_counts_are_consistent(tensors in weights(), fraction in 0.01f64..0.95) {
        let (mut params, scope) = store(&tensors);
        let mut masks = MaskSet::default();
        global_l1_prune(&mut params, &mut masks, &scope, fraction).unwrap();
        let report = sparsity_report(&params, &masks);
        let total: usize = report.rows.iter().map(|r| r.total).sum();
        let nnz: usize = report.rows.iter().map(|r| r.nnz).sum();
        prop_assert_eq!(report.global.total, total);
        prop_assert_eq!(report.global.nnz, nnz);
        for row in report.rows.iter().chain([&report.global]) {
            prop_assert!((0.0..=1.0).contains(&row.sparsity));
            prop_assert!((row.sparsity - (1.0 - row.nnz as f64 / row.total as f64)).abs() < 1e-15);
        }
    }

    #[test]
    fn prune_count_is_floor(fraction in 0.0f64..1.0, survivors in 0usize..1_000_000) {
        let k = prune_count(fraction, survivors);
        let exact = fraction * survivors as f64;
        prop_assert!(k as f64 <= exact * (1.0 + 1e-9) + 1e-9);
        prop_assert!((k + 1) as f64 > exact);
    }
}

#[test]
fn twenty_rounds_follow_the_floor_recurrence() {
    let data: Vec<f64> = (0..10_000).map(|i| ((i * 7919) % 10_007) as f64 + 1.0).collect();
    let (mut params, scope) = store(&[data]);
    let mut masks = MaskSet::default();
    let mut survivors = 10_000usize;
    for _ in 0..20 {
        global_l1_prune(&mut params, &mut masks, &scope, 0.1).unwrap();
        survivors -= survivors / 10;
        assert_eq!(masks.nnz(), survivors);
    }
    assert_eq!(survivors, 1219);
}

#[test]
fn fraction_outside_open_interval_is_rejected() {
    let (mut params, scope) = store(&[vec![1.0, 2.0]]);
    let mut masks = MaskSet::default();
    for f in [0.0, 1.0, -0.1, f64::NAN] {
        assert!(global_l1_prune(&mut params, &mut masks, &scope, f).is_err());
    }
}
