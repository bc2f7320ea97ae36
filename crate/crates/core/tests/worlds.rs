use netperm_core::pipeline::OutcomeSpec;
use netperm_core::synthlab::{counterfactual_sample, generate_world, OracleOutcome, SyntheticWorld, WorldConfig};
use netperm_core::{treatment_matrix, Error, SampleMode, SnapshotId, StratifiedPermutation};

fn two_hire_world() -> SyntheticWorld {
    generate_world(&WorldConfig {
        office_sizes: vec![2],
        seniors_per_office: 6,
        senior_edge_prob: 0.4,
        delta: vec![-0.5, 1.5],
        seed: 2,
        ..WorldConfig::default()
    })
    .unwrap()
}

#[test]
fn swap_counterfactual_matches_full_rebuild() {
    let world = two_hire_world();
    let swap = StratifiedPermutation {
        offices: vec![vec![1, 0]],
    };
    let cf = counterfactual_sample(&world, &world.sample, &OracleOutcome::Structural, &swap).unwrap();

    let global = swap.to_node_permutation(&world.plan, world.network.n()).unwrap();
    let moved = world.network.apply_permutation(&global).unwrap();
    let office = &world.sample.offices[0];
    let d = treatment_matrix(
        &moved,
        &world.spec,
        &office.hires,
        &office.candidates,
        world.stat_options(),
    )
    .unwrap();
    let got = &cf.offices[0];
    for (r, &i) in office.hires.iter().enumerate() {
        for (c, &j) in office.candidates.iter().enumerate() {
            assert_eq!(got.treatments.get(r, c), d.get(r, c));
            let y = f64::from(u8::from(world.potential_outcome(i, j, d.get(r, c))));
            assert_eq!(got.outcomes.get(r, c), y);
        }
    }
}

#[test]
fn worlds_replay_from_their_parts() {
    let world = generate_world(&WorldConfig {
        office_sizes: vec![3, 2],
        covariates: vec!["female".into()],
        homophily: 1.5,
        seed: 11,
        ..WorldConfig::default()
    })
    .unwrap();
    let edges: Vec<_> = world.network.snapshot(SnapshotId::First).edges().collect();
    let again = SyntheticWorld::assemble(
        world.config.clone(),
        world.attempt,
        world.network.nodes().to_vec(),
        &edges,
        world.latent.clone(),
        world.shocks.clone(),
    )
    .unwrap();
    assert_eq!(again.network, world.network);
    assert_eq!(again.sample, world.sample);
}

#[test]
fn constant_placebo_covariate_is_rejected() {
    let mut world = two_hire_world();
    let nodes: Vec<_> = world
        .network
        .nodes()
        .iter()
        .cloned()
        .map(|n| n.with_covariate("all_one", 1.0))
        .collect();
    let edges: Vec<_> = world.network.snapshot(SnapshotId::First).edges().collect();
    world = SyntheticWorld::assemble(
        world.config.clone(),
        world.attempt,
        nodes,
        &edges,
        world.latent,
        world.shocks,
    )
    .unwrap();
    let err = world
        .sample_for(&OutcomeSpec::Covariate("all_one".into()), SampleMode::Ipw)
        .unwrap_err();
    assert!(matches!(err, Error::ConstantCovariate(_)), "{err:?}");
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = WorldConfig {
        office_sizes: vec![1, 3],
        ..WorldConfig::default()
    };
    assert!(generate_world(&bad).is_err());
    let bad = WorldConfig {
        delta: vec![1.0],
        ..WorldConfig::default()
    };
    assert!(generate_world(&bad).is_err());
}
