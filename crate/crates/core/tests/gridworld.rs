use std::collections::{BTreeSet, HashMap, VecDeque};

use cfdt::gridworld::{
    encode_observation, generate_layout, intervene, observation_len, step, Action, Cell, EnvState, GridLayout,
    Heading, Pose, RewardSpec,
};
use proptest::prelude::*;

/// Reachability over free interior cells, written independently of the
/// library's own search.
fn oracle_reachable(l: &GridLayout) -> bool {
    let free = |x: i32, y: i32| {
        x >= 1 && y >= 1 && x < l.width as i32 - 1 && y < l.height as i32 - 1 && !l.obstacles.contains(&Cell { x, y })
    };
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::from([(l.start.x, l.start.y)]);
    seen.insert((l.start.x, l.start.y));
    while let Some((x, y)) = queue.pop_front() {
        if (x, y) == (l.goal.x, l.goal.y) {
            return true;
        }
        for (nx, ny) in [(x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)] {
            if free(nx, ny) && seen.insert((nx, ny)) {
                queue.push_back((nx, ny));
            }
        }
    }
    false
}

#[test]
fn impossible_obstacle_counts_are_errors() {
    // 5x5 has 9 interior cells; start, goal and a 3-cell path leave room for 4.
    generate_layout(0, 5, 5, 4).unwrap();
    assert!(generate_layout(0, 5, 5, 5).is_err());
    assert!(generate_layout(0, 5, 5, 8).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn generated_layouts_are_valid_and_reachable(seed in any::<u64>(), w in 5u32..12, h in 5u32..12, n in 0usize..8) {
        // Start, goal and the cells of a monotone path must stay free.
        let interior = ((w - 2) * (h - 2)) as usize;
        prop_assume!(n + 2 + (w + h - 7) as usize <= interior);
        let l = generate_layout(seed, w, h, n).unwrap();
        prop_assert_eq!(l.obstacles.len(), n);
        prop_assert!(oracle_reachable(&l));
        prop_assert!(!l.obstacles.contains(&l.start.cell()));
        prop_assert!(!l.obstacles.contains(&l.goal_cell()));
        prop_assert!(l.obstacles.iter().all(|&c| l.is_interior(c)));
        prop_assert_eq!(l.start, Pose { x: 1, y: 1, heading: Heading::East });
        prop_assert_eq!((l.goal.x, l.goal.y), (w as i32 - 2, h as i32 - 2));
        l.validate().unwrap();
    }

    #[test]
    fn json_round_trip_preserves_layout_and_id(seed in any::<u64>(), n in 0usize..7) {
        let l = generate_layout(seed, 8, 8, n).unwrap();
        let back = GridLayout::from_json(&l.to_json()).unwrap();
        prop_assert_eq!(&back, &l);
        prop_assert_eq!(back.id(), l.id());
        prop_assert_eq!(back.to_json(), l.to_json());
    }

    #[test]
    fn interventions_keep_geometry_and_count(seed in any::<u64>(), cf in any::<u64>(), n in 0usize..8) {
        let base = generate_layout(seed, 8, 8, 6).unwrap();
        let l = intervene(&base, cf, n).unwrap();
        prop_assert_eq!((l.width, l.height, l.start, l.goal), (base.width, base.height, base.start, base.goal));
        prop_assert_eq!(l.obstacles.len(), n);
        prop_assert!(oracle_reachable(&l));
    }

    #[test]
    fn random_walks_respect_dynamics(seed in any::<u64>(), actions in prop::collection::vec(0usize..3, 1..150)) {
        let l = generate_layout(seed, 8, 8, 6).unwrap();
        let spec = RewardSpec::default();
        let mut s = EnvState::reset(&l);
        for a in actions {
            let a = Action::from_index(a).unwrap();
            let out = step(&s, a, &spec).unwrap();
            prop_assert_eq!(out.state.step_count, s.step_count + 1);
            prop_assert!(!l.is_blocked(out.state.pose.cell()));
            match a {
                Action::Forward => {
                    let ahead = s.pose.cell().ahead(s.pose.heading);
                    prop_assert_eq!(out.bumped, l.is_blocked(ahead));
                    let expected = if out.bumped { s.pose.cell() } else { ahead };
                    prop_assert_eq!(out.state.pose.cell(), expected);
                }
                _ => {
                    prop_assert!(!out.bumped);
                    prop_assert_eq!(out.state.pose.cell(), s.pose.cell());
                }
            }
            if out.done {
                if out.state.at_goal() {
                    prop_assert_eq!(out.reward, spec.success_reward(out.state.step_count));
                } else {
                    prop_assert_eq!(out.reward, -1.0);
                    prop_assert_eq!(out.state.step_count, spec.horizon);
                }
                prop_assert!(step(&out.state, Action::Forward, &spec).is_err());
                break;
            }
            prop_assert_eq!(out.reward, 0.0);
            s = out.state;
        }
    }

    #[test]
    fn observation_is_one_hot_per_cell(seed in any::<u64>(), x in 1i32..7, y in 1i32..7, h in 0usize..4) {
        let l = generate_layout(seed, 8, 8, 6).unwrap();
        let pose = Pose { x, y, heading: Heading::from_index(h).unwrap() };
        let mut obs = vec![0.0f32; observation_len(8, 8)];
        encode_observation(&l, pose, &mut obs);
        for cell in 0..64 {
            let hot: f32 = obs[cell * 4..cell * 4 + 4].iter().sum();
            prop_assert_eq!(hot, 1.0);
        }
        let agent = (y * 8 + x) as usize * 4 + 3;
        prop_assert_eq!(obs[agent], 1.0);
        let heading = &obs[256..260];
        prop_assert_eq!(heading.iter().sum::<f32>(), 1.0);
        prop_assert_eq!(heading[h], 1.0);
    }
}

#[test]
fn layouts_differing_only_in_seed_share_an_id() {
    let a = generate_layout(3, 8, 8, 6).unwrap();
    let mut b = a.clone();
    b.layout_seed ^= 0xFFFF;
    assert_eq!(a.id(), b.id());
    let mut c = a.clone();
    let extra = (1..7)
        .flat_map(|x| (1..7).map(move |y| Cell::new(x, y)))
        .find(|&cell| !a.obstacles.contains(&cell) && cell != a.start.cell() && cell != a.goal_cell())
        .unwrap();
    c.obstacles.insert(extra);
    assert_ne!(a.id(), c.id());
}

#[test]
fn distinct_seeds_mostly_give_distinct_layouts() {
    let ids: HashMap<_, _> = (0..500u64).map(|s| (generate_layout(s, 8, 8, 6).unwrap().id(), s)).collect();
    assert!(ids.len() > 490);
}

#[test]
fn reward_examples() {
    let spec = RewardSpec::default();
    assert!((spec.success_reward(10) - 0.91).abs() < 1e-15);
    assert!((spec.success_reward(100) - 0.1).abs() < 1e-15);
    assert!((spec.success_reward(1) - 0.991).abs() < 1e-15);
}
