//! Source policy: exact value iteration on one layout, plus the wall-bump
//! exploration wrapper used while collecting rollouts.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CfdtError, Result};
use crate::gridworld::{Action, Cell, EnvState, GridLayout, Heading, Pose, RewardSpec};
use crate::seed;

/// Anything that maps a state to an action.
pub trait Policy: Sync {
    fn act(&self, state: &EnvState<'_>) -> Result<Action>;
}

/// Convergence threshold on the sup-norm value change between sweeps.
pub const VI_TOLERANCE: f64 = 1e-12;

/// Greedy policy for one layout, keyed by pose on the full grid.
///
/// Poses on obstacle cells are solved as if the agent could stand there, so
/// the table stays total when it is queried on a different obstacle layout
/// of the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    layout: GridLayout,
    actions: Vec<Action>,
    values: Vec<f64>,
}

fn pose_index(layout: &GridLayout, pose: Pose) -> Option<usize> {
    if !layout.in_bounds(pose.cell()) {
        return None;
    }
    Some((pose.y as usize * layout.width as usize + pose.x as usize) * 4 + pose.heading.index())
}

fn successor(layout: &GridLayout, pose: Pose, action: Action) -> Pose {
    match action {
        Action::TurnLeft => Pose { heading: pose.heading.left(), ..pose },
        Action::TurnRight => Pose { heading: pose.heading.right(), ..pose },
        Action::Forward => {
            let target = pose.cell().ahead(pose.heading);
            if layout.is_blocked(target) {
                pose
            } else {
                Pose::at(target, pose.heading)
            }
        }
    }
}

fn interior_poses(layout: &GridLayout) -> impl Iterator<Item = Pose> + '_ {
    (1..layout.height as i32 - 1).flat_map(move |y| {
        (1..layout.width as i32 - 1)
            .flat_map(move |x| Heading::ALL.into_iter().map(move |h| Pose::at(Cell::new(x, y), h)))
    })
}

impl PolicyTable {
    /// Value iteration over `(cell, heading)`.
    ///
    /// Values are returns for an episode started from that pose: reaching
    /// the goal after `d` steps is worth `1 - success_scale * d / horizon`,
    /// floored at `failure_reward`. Ties go to the first of
    /// TurnLeft, TurnRight, Forward.
    pub fn solve(layout: &GridLayout, spec: &RewardSpec) -> Result<PolicyTable> {
        layout.validate()?;
        spec.validate()?;
        let n = layout.width as usize * layout.height as usize * 4;
        let step_cost = spec.success_scale / spec.horizon as f64;
        let goal = layout.goal_cell();
        let poses: Vec<Pose> = interior_poses(layout).filter(|p| p.cell() != goal).collect();
        let mut values = vec![spec.failure_reward; n];
        for h in Heading::ALL {
            values[pose_index(layout, Pose::at(goal, h)).unwrap()] = 0.0;
        }
        let q = |values: &[f64], pose: Pose, a: Action| {
            let next = successor(layout, pose, a);
            if next.cell() == goal {
                1.0 - step_cost
            } else {
                values[pose_index(layout, next).unwrap()] - step_cost
            }
        };
        loop {
            let mut next_values = values.clone();
            let mut delta: f64 = 0.0;
            for &pose in &poses {
                let i = pose_index(layout, pose).unwrap();
                let best = Action::ALL
                    .into_iter()
                    .map(|a| q(&values, pose, a))
                    .fold(spec.failure_reward, f64::max);
                delta = delta.max((best - values[i]).abs());
                next_values[i] = best;
            }
            values = next_values;
            if delta < VI_TOLERANCE {
                break;
            }
        }
        let mut actions = vec![Action::TurnLeft; n];
        for &pose in &poses {
            let mut best = (Action::TurnLeft, q(&values, pose, Action::TurnLeft));
            for a in [Action::TurnRight, Action::Forward] {
                let v = q(&values, pose, a);
                if v > best.1 {
                    best = (a, v);
                }
            }
            actions[pose_index(layout, pose).unwrap()] = best.0;
        }
        Ok(PolicyTable {
            layout: layout.clone(),
            actions,
            values,
        })
    }

    pub fn layout(&self) -> &GridLayout {
        &self.layout
    }

    pub fn action_at(&self, pose: Pose) -> Result<Action> {
        pose_index(&self.layout, pose)
            .map(|i| self.actions[i])
            .ok_or_else(|| CfdtError::Usage(format!("pose ({}, {}) outside the grid", pose.x, pose.y)))
    }

    pub fn value_at(&self, pose: Pose) -> Option<f64> {
        pose_index(&self.layout, pose).map(|i| self.values[i])
    }

    /// Largest violation of the Bellman optimality equation over all
    /// non-goal interior poses.
    pub fn bellman_residual(&self, spec: &RewardSpec) -> f64 {
        let step_cost = spec.success_scale / spec.horizon as f64;
        let goal = self.layout.goal_cell();
        interior_poses(&self.layout)
            .filter(|p| p.cell() != goal)
            .map(|pose| {
                let best = Action::ALL
                    .into_iter()
                    .map(|a| {
                        let next = successor(&self.layout, pose, a);
                        if next.cell() == goal {
                            1.0 - step_cost
                        } else {
                            self.value_at(next).unwrap() - step_cost
                        }
                    })
                    .fold(spec.failure_reward, f64::max);
                (best - self.value_at(pose).unwrap()).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        let actions: BTreeMap<String, &'static str> = interior_poses(&self.layout)
            .map(|p| {
                (
                    format!("{},{},{}", p.x, p.y, p.heading.name()),
                    self.action_at(p).unwrap().name(),
                )
            })
            .collect();
        serde_json::to_string(&PolicyFile {
            layout: self.layout.clone(),
            actions: actions.into_iter().map(|(k, v)| (k, v.to_string())).collect(),
        })
        .expect("policy serializes")
    }

    /// Parses a serialized table. Every interior pose must be present.
    pub fn from_json(text: &str) -> Result<PolicyTable> {
        let file: PolicyFile = serde_json::from_str(text)?;
        file.layout.validate()?;
        let layout = file.layout;
        let n = layout.width as usize * layout.height as usize * 4;
        let mut actions = vec![Action::TurnLeft; n];
        let mut seen = vec![false; n];
        for (key, name) in &file.actions {
            let bad = || CfdtError::Data(format!("bad policy entry {key:?} -> {name:?}"));
            let mut parts = key.split(',');
            let (Some(x), Some(y), Some(h), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(bad());
            };
            let x: i32 = x.parse().map_err(|_| bad())?;
            let y: i32 = y.parse().map_err(|_| bad())?;
            let heading = Heading::parse(h).ok_or_else(bad)?;
            let action = Action::parse(name).ok_or_else(bad)?;
            let pose = Pose { x, y, heading };
            if !layout.is_interior(pose.cell()) {
                return Err(bad());
            }
            let i = pose_index(&layout, pose).ok_or_else(bad)?;
            actions[i] = action;
            seen[i] = true;
        }
        if let Some(p) = interior_poses(&layout).find(|p| !seen[pose_index(&layout, *p).unwrap()]) {
            return Err(CfdtError::Data(format!(
                "policy missing pose {},{},{}",
                p.x,
                p.y,
                p.heading.name()
            )));
        }
        Ok(PolicyTable {
            layout,
            actions,
            values: vec![f64::NAN; n],
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    layout: GridLayout,
    actions: BTreeMap<String, String>,
}

impl Policy for PolicyTable {
    /// Table lookup by pose only; the obstacles of `state.layout` are ignored.
    fn act(&self, state: &EnvState<'_>) -> Result<Action> {
        if state.layout.width != self.layout.width || state.layout.height != self.layout.height {
            return Err(CfdtError::Usage("layout dimensions differ from the policy's".into()));
        }
        self.action_at(state.pose)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailSafeConfig {
    pub explore_steps: u32,
    pub rng_seed: u64,
}

impl Default for FailSafeConfig {
    fn default() -> Self {
        FailSafeConfig {
            explore_steps: 10,
            rng_seed: 0,
        }
    }
}

/// Per-rollout exploration state: after a bump the next `explore_steps`
/// actions are drawn uniformly at random.
#[derive(Debug, Clone)]
pub struct FailSafe {
    config: FailSafeConfig,
    remaining: u32,
    rng: ChaCha8Rng,
    activations: u32,
}

impl FailSafe {
    pub fn new(config: FailSafeConfig) -> Result<Self> {
        if config.explore_steps == 0 {
            return Err(CfdtError::Config("explore_steps must be at least 1".into()));
        }
        Ok(FailSafe {
            config,
            remaining: 0,
            rng: ChaCha8Rng::seed_from_u64(seed::mix(config.rng_seed)),
            activations: 0,
        })
    }

    pub fn remaining(&self) -> u32 {
        self.remaining
    }

    /// Number of times exploration has been triggered.
    pub fn activations(&self) -> u32 {
        self.activations
    }

    pub fn act(&mut self, policy: &dyn Policy, state: &EnvState<'_>, bumped_last: bool) -> Result<Action> {
        if bumped_last && self.remaining == 0 {
            self.remaining = self.config.explore_steps;
            self.activations += 1;
        }
        if self.remaining > 0 {
            self.remaining -= 1;
            return Ok(Action::ALL[self.rng.gen_range(0..Action::COUNT)]);
        }
        policy.act(state)
    }
}
