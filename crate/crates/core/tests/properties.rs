#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

use std::collections::HashSet;

use netperm_core::design::{column_multiset, GroupIter};
use netperm_core::estimation::{fit_sample, FitOptions};
use netperm_core::inference::{
    one_sided_p, permutation_variance, two_sided_p_with_ties, PermutationMode, VarianceMethod,
};
use netperm_core::synthlab::{counterfactual_sample, generate_world, OracleOutcome, WorldConfig};
use netperm_core::{
    assignment_probabilities, NodeRecord, OfficeSample, Permutation, SampleMode, StratifiedPermutation,
    TemporalNetwork, TreatmentArray,
};
use proptest::prelude::*;

fn perm_of(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<usize>>()).prop_shuffle()
}

fn stratified(sizes: Vec<usize>) -> impl Strategy<Value = StratifiedPermutation> {
    sizes
        .into_iter()
        .map(perm_of)
        .collect::<Vec<_>>()
        .prop_map(|offices| StratifiedPermutation { offices })
}

fn three_of(
    sizes: Vec<usize>,
) -> impl Strategy<Value = (StratifiedPermutation, StratifiedPermutation, StratifiedPermutation)> {
    (stratified(sizes.clone()), stratified(sizes.clone()), stratified(sizes))
}

fn treatment_array() -> impl Strategy<Value = TreatmentArray> {
    (2usize..6, 1usize..6).prop_flat_map(|(rows, cols)| {
        prop::collection::vec(0u8..3, rows * cols).prop_map(move |v| {
            let mut data = Vec::with_capacity(rows * cols * 2);
            for x in v {
                data.push(1.0);
                data.push(f64::from(x));
            }
            TreatmentArray::from_parts(
                rows,
                cols,
                vec!["intercept".into(), "x".into()],
                vec![false, true],
                data,
            )
            .unwrap()
        })
    })
}

fn small_world(seed: u64, sizes: Vec<usize>, mode: SampleMode) -> Option<netperm_core::synthlab::SyntheticWorld> {
    generate_world(&WorldConfig {
        office_sizes: sizes,
        seniors_per_office: 5,
        mode,
        seed,
        max_attempts: 20,
        ..WorldConfig::default()
    })
    .ok()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn node_permutations_form_a_group(a in perm_of(7), b in perm_of(7), c in perm_of(7)) {
        let (a, b, c) = (Permutation::new(a).unwrap(), Permutation::new(b).unwrap(), Permutation::new(c).unwrap());
        let id = Permutation::identity(7);
        prop_assert_eq!(a.compose(&b).compose(&c), a.compose(&b.compose(&c)));
        prop_assert_eq!(a.compose(&a.inverse()), id.clone());
        prop_assert_eq!(a.inverse().compose(&a), id.clone());
        prop_assert_eq!(a.compose(&id), a);
    }

    #[test]
    fn stratified_permutations_form_a_group((a, b, c) in three_of(vec![3, 1, 4])) {
        let id = StratifiedPermutation::identity(&[3, 1, 4]);
        prop_assert_eq!(a.compose(&b).compose(&c), a.compose(&b.compose(&c)));
        prop_assert_eq!(a.compose(&a.inverse()), id.clone());
        prop_assert_eq!(a.inverse().compose(&a), id.clone());
        prop_assert_eq!(id.compose(&a), a);
    }

    #[test]
    fn relabelling_round_trips(p in perm_of(6), edges in prop::collection::vec((0usize..6, 0usize..6), 0..15)) {
        let nodes: Vec<NodeRecord> = (0..6).map(|k| NodeRecord::new(format!("n{k}"))).collect();
        let edges: Vec<(usize, usize)> = edges.into_iter().filter(|(a, b)| a != b).collect();
        let (net, _) = TemporalNetwork::from_index_edges(nodes, &edges, &[]).unwrap();
        let p = Permutation::new(p).unwrap();
        let back = net.apply_permutation(&p).unwrap().apply_permutation(&p.inverse()).unwrap();
        prop_assert_eq!(back, net);
    }

    #[test]
    fn probabilities_follow_rows(d in treatment_array(), seed in any::<u64>()) {
        let m = d.rows();
        let mut order: Vec<usize> = (0..m).collect();
        order.rotate_left((seed % m as u64) as usize);
        let moved = d.permute_rows(&order);
        let before = assignment_probabilities(&d).unwrap();
        let after = assignment_probabilities(&moved).unwrap();
        for j in 0..d.cols() {
            prop_assert_eq!(column_multiset(&d, j), column_multiset(&moved, j));
            for i in 0..m {
                prop_assert_eq!(after.realized[i * d.cols() + j], before.realized[order[i] * d.cols() + j]);
            }
        }
    }

    #[test]
    fn group_iteration_is_exhaustive(sizes in prop::collection::vec(1usize..5, 1..4)) {
        let it = GroupIter::new(&sizes, 100_000).unwrap();
        let order = it.order();
        let all: Vec<StratifiedPermutation> = it.collect();
        let expected: u128 = sizes.iter().map(|&m| (1..=m as u128).product::<u128>()).product();
        prop_assert_eq!(order, expected);
        prop_assert_eq!(all.len() as u128, expected);
        let distinct: HashSet<_> = all.iter().cloned().collect();
        prop_assert_eq!(distinct.len(), all.len());
        prop_assert_eq!(&all[0], &StratifiedPermutation::identity(&sizes));
    }

    #[test]
    fn two_sided_p_is_bounded(obs in -3.0f64..3.0, draws in prop::collection::vec(-3.0f64..3.0, 1..40)) {
        let mut with_identity = draws.clone();
        with_identity.push(obs);
        for (mode, draws) in [(PermutationMode::Enumerated, &with_identity), (PermutationMode::MonteCarlo, &draws)] {
            let one = one_sided_p(obs, draws, mode);
            let two = two_sided_p_with_ties(obs, draws, mode);
            prop_assert!(one > 0.0 && one <= 1.0);
            prop_assert!(two > 0.0 && two <= 1.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn diagonal_sums_match_refits(seed in any::<u64>(), late in any::<bool>(), draws in prop::collection::vec(any::<u64>(), 4)) {
        let mode = if late { SampleMode::Late } else { SampleMode::Ipw };
        let Some(world) = small_world(seed, vec![3, 4], mode) else { return Ok(()) };
        let fit = fit_sample(&world.sample, FitOptions::default()).unwrap();
        for d in draws {
            let p = world.sample.design_plan(seed).sample_permutation(d);
            let fast = fit.permuted_estimate(&world.sample, &p.offices).unwrap();
            let mut moved = world.sample.clone();
            for (o, local) in moved.offices.iter_mut().zip(&p.offices) {
                let treatments = o.treatments.permute_rows(local);
                let probabilities = assignment_probabilities(&treatments).unwrap();
                *o = OfficeSample { treatments, probabilities, ..o.clone() };
            }
            let slow = fit_sample(&moved, FitOptions::default()).unwrap();
            for (a, b) in fast.iter().zip(&slow.estimate) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn closed_form_variance_matches_enumeration(seed in any::<u64>(), late in any::<bool>()) {
        let mode = if late { SampleMode::Late } else { SampleMode::Ipw };
        let Some(world) = small_world(seed, vec![4, 3, 2], mode) else { return Ok(()) };
        let fit = fit_sample(&world.sample, FitOptions::default()).unwrap();
        let a = permutation_variance(&fit, &world.sample, VarianceMethod::Hoeffding).unwrap();
        let b = permutation_variance(&fit, &world.sample, VarianceMethod::Enumerated { cap: 1000 }).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn drops_conserve_pairs(seed in any::<u64>()) {
        let Some(world) = small_world(seed, vec![3, 3], SampleMode::Late) else { return Ok(()) };
        let s = &world.sample;
        prop_assert_eq!(s.input_pairs, s.edges() + s.dropped_pairs());
    }

    #[test]
    fn counterfactuals_respect_exclusion(seed in any::<u64>(), a in perm_of(3), b in perm_of(3)) {
        let Some(world) = small_world(seed, vec![3, 3], SampleMode::Ipw) else { return Ok(()) };
        let pa = StratifiedPermutation { offices: vec![a, vec![0, 1, 2]] };
        let pb = StratifiedPermutation { offices: vec![b, vec![0, 1, 2]] };
        let ca = counterfactual_sample(&world, &world.sample, &OracleOutcome::Structural, &pa).unwrap();
        let cb = counterfactual_sample(&world, &world.sample, &OracleOutcome::Structural, &pb).unwrap();
        for (oa, ob) in ca.offices.iter().zip(&cb.offices) {
            for i in 0..oa.m() {
                for j in 0..oa.candidates.len() {
                    if oa.treatments.get(i, j) == ob.treatments.get(i, j) {
                        prop_assert_eq!(oa.outcomes.get(i, j), ob.outcomes.get(i, j));
                    }
                }
            }
        }
    }
}

#[test]
fn property_worlds_are_generated() {
    let made = (0..20u64)
        .filter(|&s| small_world(s, vec![3, 4], SampleMode::Late).is_some())
        .count();
    assert!(made >= 15, "only {made} of 20 worlds generated");
}
