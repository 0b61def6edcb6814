use std::collections::BTreeMap;
use std::io::Cursor;

use cfdt::data::{
    build_weights, collect_counterfactual, collect_factual, estimate_ate, layout_book, parse_trajectories,
    returns_to_go, rollout, sample_batch, Provenance, WeightedDataset,
};
use cfdt::gridworld::{generate_layout, Cell, GridLayout, LayoutId, RewardSpec};
use cfdt::policy::{FailSafeConfig, PolicyTable};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 7x8 empty room: the shortest route from (1,1) east to (5,6) takes
/// 10 actions, worth 0.91.
fn ten_step_room() -> GridLayout {
    let mut l = generate_layout(0, 7, 8, 0).unwrap();
    l.obstacles.clear();
    l
}

#[test]
fn blocked_route_gives_ate_of_minus_191() {
    let spec = RewardSpec::default();
    let source = ten_step_room();
    let policy = PolicyTable::solve(&source, &spec).unwrap();
    let t = rollout(&source, &policy, &spec, None, 0, Provenance::Factual).unwrap();
    assert_eq!(t.episode_length, 10);
    assert!((t.total_return - 0.91).abs() < 1e-15);
    // Block the second cell of the route: the table keeps walking into it.
    let route: Vec<Cell> = t.steps.iter().map(|s| s.pose.cell()).collect();
    let blocker = route.iter().copied().find(|&c| c != source.start.cell()).unwrap();
    let mut cf = source.clone();
    cf.obstacles.insert(blocker);
    cf.validate().unwrap();
    let est = estimate_ate(&cf, &source, &policy, &spec, 1, None, 3).unwrap();
    assert!((est.ate - (-1.91)).abs() < 1e-12, "{}", est.ate);
    assert_eq!(est.ate, est.cf_mean_return - est.source_mean_return);
    assert_eq!(est.std_error, 0.0);
    let same = estimate_ate(&source, &source, &policy, &spec, 4, None, 3).unwrap();
    assert_eq!(same.ate, 0.0);
}

#[test]
fn ate_standard_error_shrinks_with_more_rollouts() {
    let spec = RewardSpec::default();
    let source = generate_layout(21, 8, 8, 6).unwrap();
    let policy = PolicyTable::solve(&source, &spec).unwrap();
    let fs = Some(FailSafeConfig { explore_steps: 10, rng_seed: 1 });
    let cf = (0..200)
        .map(|s| cfdt::gridworld::intervene(&source, s, 6).unwrap())
        .find(|l| {
            let e = estimate_ate(l, &source, &policy, &spec, 20, fs, 0).unwrap();
            e.std_error > 0.05
        })
        .expect("a layout where exploration matters");
    let small = estimate_ate(&cf, &source, &policy, &spec, 100, fs, 7).unwrap();
    let large = estimate_ate(&cf, &source, &policy, &spec, 400, fs, 8).unwrap();
    let ratio = large.std_error / small.std_error;
    assert!((0.35..0.65).contains(&ratio), "ratio {ratio}");
}

#[test]
fn factual_rollouts_are_identical_without_exploration() {
    let spec = RewardSpec::default();
    let source = generate_layout(4, 8, 8, 6).unwrap();
    let policy = PolicyTable::solve(&source, &spec).unwrap();
    let fs = Some(FailSafeConfig::default());
    let trajs = collect_factual(&source, &policy, &spec, 100, 9, fs).unwrap();
    assert_eq!(trajs.len(), 100);
    for t in &trajs {
        assert_eq!(t.steps, trajs[0].steps);
        assert_eq!(t.layout_id, source.id());
        assert_eq!(t.provenance, Provenance::Factual);
        assert_eq!(t.failsafe_activations, 0);
        assert!(t.total_return > 0.0);
    }
    assert!(collect_factual(&source, &policy, &spec, 0, 9, fs).unwrap().is_empty());
    let again = collect_factual(&source, &policy, &spec, 5, 9, fs).unwrap();
    assert_eq!(again.iter().map(|t| t.seed).collect::<Vec<_>>(), trajs[..5].iter().map(|t| t.seed).collect::<Vec<_>>());
}

#[test]
fn counterfactual_collection_shapes() {
    let spec = RewardSpec::default();
    let source = generate_layout(4, 8, 8, 6).unwrap();
    let policy = PolicyTable::solve(&source, &spec).unwrap();
    let fs = Some(FailSafeConfig::default());
    let (trajs, layouts) = collect_counterfactual(&source, &policy, &spec, 12, 3, 6, 5, fs).unwrap();
    assert_eq!(layouts.len(), 12);
    assert_eq!(trajs.len(), 36);
    for (i, t) in trajs.iter().enumerate() {
        assert_eq!(t.layout_id, layouts[i / 3].id());
        assert_eq!(t.provenance, Provenance::Counterfactual);
        t.validate().unwrap();
    }
    assert!(layouts.iter().all(GridLayout::is_reachable));
    assert!(collect_counterfactual(&source, &policy, &spec, 0, 3, 6, 5, fs).is_err());
}

#[test]
fn missing_ate_entry_is_a_data_error() {
    let spec = RewardSpec::default();
    let l = generate_layout(4, 8, 8, 6).unwrap();
    let p = PolicyTable::solve(&l, &spec).unwrap();
    let t = rollout(&l, &p, &spec, None, 0, Provenance::Factual).unwrap();
    assert!(build_weights(vec![t.clone()], &BTreeMap::new(), 1.0).is_err());
    assert!(build_weights(vec![t], &BTreeMap::from([(l.id(), 0.0)]), -1.0).is_err());
}

fn dataset_with(ates: &[f64], beta: f64) -> WeightedDataset {
    let spec = RewardSpec::default();
    let l = generate_layout(4, 8, 8, 6).unwrap();
    let p = PolicyTable::solve(&l, &spec).unwrap();
    let base = rollout(&l, &p, &spec, None, 0, Provenance::Factual).unwrap();
    let mut map = BTreeMap::new();
    let trajs = ates
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let mut t = base.clone();
            t.layout_id = LayoutId(format!("l{i}"));
            map.insert(t.layout_id.clone(), a);
            t
        })
        .collect();
    build_weights(trajs, &map, beta).unwrap()
}

proptest! {
    #[test]
    fn weights_normalize_and_ignore_shifts(
        ates in prop::collection::vec(-2.0f64..0.5, 1..30),
        beta in 0.0f64..20.0,
        shift in -5.0f64..5.0,
    ) {
        let ds = dataset_with(&ates, beta);
        prop_assert!((ds.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(ds.weights.iter().all(|&w| w >= 0.0));
        let shifted: Vec<f64> = ates.iter().map(|a| a + shift).collect();
        let ds2 = dataset_with(&shifted, beta);
        for (a, b) in ds.weights.iter().zip(&ds2.weights) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        // Higher effect, no smaller weight.
        for i in 0..ates.len() {
            for j in 0..ates.len() {
                if ates[i] > ates[j] {
                    prop_assert!(ds.weights[i] >= ds.weights[j]);
                }
            }
        }
    }

    #[test]
    fn returns_to_go_recurrence(rewards in prop::collection::vec(-1.0f64..1.0, 0..120)) {
        let r = returns_to_go(&rewards);
        prop_assert_eq!(r.len(), rewards.len());
        for t in 0..r.len() {
            let next = r.get(t + 1).copied().unwrap_or(0.0);
            prop_assert_eq!(r[t], rewards[t] + next);
        }
    }
}

#[test]
fn zero_beta_is_uniform_and_matches_unweighted_first_batch() {
    let uniform = dataset_with(&[0.0, -1.0, -0.5, -1.9], 0.0);
    assert!(uniform.weights.iter().all(|&w| (w - 0.25).abs() < 1e-15));
    let flat = dataset_with(&[-0.3, -0.3, -0.3, -0.3], 5.0);
    let l = generate_layout(4, 8, 8, 6).unwrap();
    let mut book = layout_book([&l]);
    for i in 0..4 {
        book.insert(LayoutId(format!("l{i}")), l.clone());
    }
    let a = sample_batch(&uniform, &book, 8, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = sample_batch(&flat, &book, 8, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn short_trajectories_are_left_padded() {
    let ds = dataset_with(&[0.0], 0.0);
    let l = generate_layout(4, 8, 8, 6).unwrap();
    let mut book = layout_book([&l]);
    book.insert(LayoutId("l0".into()), l.clone());
    let len = ds.trajectories[0].len();
    let k = len + 7;
    let batch = sample_batch(&ds, &book, 2, k, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for b in 0..2 {
        let row = &batch.mask[b * k..(b + 1) * k];
        assert!(row[..7].iter().all(|&m| m == 0.0));
        assert!(row[7..].iter().all(|&m| m == 1.0));
        assert_eq!(batch.timesteps[b * k + 7], 0);
    }
    assert!(sample_batch(&ds, &book, 2, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn trajectory_file_round_trip_and_rejection() {
    let ds = dataset_with(&[0.0, -1.0], 2.0);
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path(), "set").unwrap();
    let back = WeightedDataset::load(dir.path(), "set").unwrap();
    assert_eq!(back, ds);
    for (a, b) in back.weights.iter().zip(&ds.weights) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    let bad = "{\"layout_id\": 3}\n";
    assert!(parse_trajectories(Cursor::new(bad)).is_err());
    let blank = format!("\n{}\n\n", ds.trajectories[0].to_json_line());
    assert_eq!(parse_trajectories(Cursor::new(blank)).unwrap().len(), 1);
}
