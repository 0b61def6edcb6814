//! Deterministic obstacle gridworld.
//!
//! The outer ring of cells is wall. Obstacles live in the interior and are
//! the structural feature that interventions resample; the start pose and
//! goal cell stay fixed across a layout family.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CfdtError, Result};

/// Largest accepted grid side when validating external layouts.
pub const MAX_DIM: u32 = 64;
/// Obstacle resampling budget before generation gives up.
pub const MAX_RESAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heading {
    East,
    South,
    West,
    North,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::East, Heading::South, Heading::West, Heading::North];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Heading> {
        Heading::ALL.get(i).copied()
    }

    pub fn left(self) -> Heading {
        Heading::ALL[(self.index() + 3) % 4]
    }

    pub fn right(self) -> Heading {
        Heading::ALL[(self.index() + 1) % 4]
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Heading::East => (1, 0),
            Heading::South => (0, 1),
            Heading::West => (-1, 0),
            Heading::North => (0, -1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Heading::East => "east",
            Heading::South => "south",
            Heading::West => "west",
            Heading::North => "north",
        }
    }

    pub fn parse(s: &str) -> Option<Heading> {
        Heading::ALL.into_iter().find(|h| h.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub fn new(x: i32, y: i32) -> Self {
        Cell { x, y }
    }

    pub fn ahead(self, heading: Heading) -> Cell {
        let (dx, dy) = heading.delta();
        Cell::new(self.x + dx, self.y + dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pose {
    pub x: i32,
    pub y: i32,
    pub heading: Heading,
}

impl Pose {
    pub fn cell(self) -> Cell {
        Cell::new(self.x, self.y)
    }

    pub fn at(cell: Cell, heading: Heading) -> Pose {
        Pose {
            x: cell.x,
            y: cell.y,
            heading,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    TurnLeft,
    TurnRight,
    Forward,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::TurnLeft, Action::TurnRight, Action::Forward];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::TurnLeft => "turn_left",
            Action::TurnRight => "turn_right",
            Action::Forward => "forward",
        }
    }

    pub fn parse(s: &str) -> Option<Action> {
        Action::ALL.into_iter().find(|a| a.name() == s)
    }
}

/// Reward and horizon numerics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub horizon: u32,
    pub success_scale: f64,
    pub failure_reward: f64,
    /// Carried for completeness; returns-to-go are undiscounted.
    pub discount: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec {
            horizon: 100,
            success_scale: 0.9,
            failure_reward: -1.0,
            discount: 1.0,
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(CfdtError::Config("horizon must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.success_scale) {
            return Err(CfdtError::Config(format!(
                "success_scale {} outside [0, 1]",
                self.success_scale
            )));
        }
        if !self.failure_reward.is_finite() {
            return Err(CfdtError::Config("failure_reward must be finite".into()));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(CfdtError::Config(format!("discount {} outside (0, 1]", self.discount)));
        }
        Ok(())
    }

    /// Reward for reaching the goal when the step counter has reached `steps`.
    pub fn success_reward(&self, steps: u32) -> f64 {
        1.0 - self.success_scale * (steps as f64 / self.horizon as f64)
    }
}

/// Content hash of a layout's structure. The generation seed is excluded,
/// so two seeds that produce the same obstacle set share an id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayoutId(pub String);

impl fmt::Display for LayoutId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub x: i32,
    pub y: i32,
}

/// One member of the layout family: the value the intervention fixes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridLayout {
    pub width: u32,
    pub height: u32,
    #[serde(with = "cell_pairs")]
    pub obstacles: BTreeSet<Cell>,
    pub start: Pose,
    pub goal: Goal,
    pub layout_seed: u64,
}

mod cell_pairs {
    use super::Cell;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeSet;

    pub fn serialize<S: Serializer>(cells: &BTreeSet<Cell>, s: S) -> Result<S::Ok, S::Error> {
        let pairs: Vec<[i32; 2]> = cells.iter().map(|c| [c.x, c.y]).collect();
        pairs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeSet<Cell>, D::Error> {
        let pairs = Vec::<[i32; 2]>::deserialize(d)?;
        Ok(pairs.into_iter().map(|[x, y]| Cell::new(x, y)).collect())
    }
}

impl GridLayout {
    pub fn goal_cell(&self) -> Cell {
        Cell::new(self.goal.x, self.goal.y)
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as u32) < self.width && (c.y as u32) < self.height
    }

    pub fn is_interior(&self, c: Cell) -> bool {
        c.x >= 1 && c.y >= 1 && (c.x as u32) < self.width - 1 && (c.y as u32) < self.height - 1
    }

    /// True for border walls, obstacles and anything off-grid.
    pub fn is_blocked(&self, c: Cell) -> bool {
        !self.is_interior(c) || self.obstacles.contains(&c)
    }

    pub fn id(&self) -> LayoutId {
        let mut h = Sha256::new();
        h.update(format!("{}x{};", self.width, self.height));
        for c in &self.obstacles {
            h.update(format!("{},{};", c.x, c.y));
        }
        h.update(format!(
            "s{},{},{};g{},{}",
            self.start.x,
            self.start.y,
            self.start.heading.name(),
            self.goal.x,
            self.goal.y
        ));
        let digest = h.finalize();
        LayoutId(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Shortest 4-connected path length from start to goal, if any.
    pub fn path_length(&self) -> Option<usize> {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut dist = vec![usize::MAX; w * h];
        let start = self.start.cell();
        let idx = |c: Cell| c.y as usize * w + c.x as usize;
        dist[idx(start)] = 0;
        let mut queue = VecDeque::from([start]);
        while let Some(c) = queue.pop_front() {
            if c == self.goal_cell() {
                return Some(dist[idx(c)]);
            }
            for hd in Heading::ALL {
                let n = c.ahead(hd);
                if !self.is_blocked(n) && dist[idx(n)] == usize::MAX {
                    dist[idx(n)] = dist[idx(c)] + 1;
                    queue.push_back(n);
                }
            }
        }
        None
    }

    pub fn is_reachable(&self) -> bool {
        self.path_length().is_some()
    }

    /// Checks every structural invariant. Used on layouts read from disk.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CfdtError::InvalidLayout(m));
        if self.width < 3 || self.height < 3 || self.width > MAX_DIM || self.height > MAX_DIM {
            return bad(format!("dimensions {}x{} out of range", self.width, self.height));
        }
        if let Some(c) = self.obstacles.iter().find(|c| !self.is_interior(**c)) {
            return bad(format!("obstacle ({}, {}) outside the interior", c.x, c.y));
        }
        let start = self.start.cell();
        let goal = self.goal_cell();
        if !self.is_interior(start) || self.obstacles.contains(&start) {
            return bad("start must be a free interior cell".into());
        }
        if !self.is_interior(goal) || self.obstacles.contains(&goal) {
            return bad("goal must be a free interior cell".into());
        }
        if start == goal {
            return bad("start and goal coincide".into());
        }
        if !self.is_reachable() {
            return bad("goal unreachable from start".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let layout: GridLayout = serde_json::from_str(text)?;
        layout.validate()?;
        Ok(layout)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("layout serializes")
    }
}

fn check_dims(width: u32, height: u32, n_obstacles: usize) -> Result<()> {
    if width < 3 || height < 3 || width > MAX_DIM || height > MAX_DIM {
        return Err(CfdtError::Config(format!(
            "grid {width}x{height} outside supported range 3..={MAX_DIM}"
        )));
    }
    let interior = (width as usize - 2) * (height as usize - 2);
    if interior < n_obstacles + 2 {
        return Err(CfdtError::Config(format!(
            "{width}x{height} interior has {interior} cells, need at least {}",
            n_obstacles + 2
        )));
    }
    Ok(())
}

/// Draws `n_obstacles` interior cells (never start or goal), resampling until
/// the goal is reachable.
fn sample_obstacles(
    seed: u64,
    width: u32,
    height: u32,
    start: Pose,
    goal: Goal,
    n_obstacles: usize,
) -> Result<GridLayout> {
    check_dims(width, height, n_obstacles)?;
    let mut layout = GridLayout {
        width,
        height,
        obstacles: BTreeSet::new(),
        start,
        goal,
        layout_seed: seed,
    };
    let candidates: Vec<Cell> = (1..height as i32 - 1)
        .flat_map(|y| (1..width as i32 - 1).map(move |x| Cell::new(x, y)))
        .filter(|&c| c != start.cell() && c != layout.goal_cell())
        .collect();
    if candidates.len() < n_obstacles {
        return Err(CfdtError::Config(format!(
            "only {} free interior cells for {n_obstacles} obstacles",
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_RESAMPLES {
        layout.obstacles = index::sample(&mut rng, candidates.len(), n_obstacles)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        if layout.is_reachable() {
            return Ok(layout);
        }
    }
    Err(CfdtError::Generation(format!(
        "no reachable configuration of {n_obstacles} obstacles on {width}x{height} after {MAX_RESAMPLES} draws"
    )))
}

/// Layout with start at the top-left interior cell facing east and goal at
/// the bottom-right interior cell. Deterministic in all arguments.
pub fn generate_layout(seed: u64, width: u32, height: u32, n_obstacles: usize) -> Result<GridLayout> {
    check_dims(width, height, n_obstacles)?;
    let start = Pose {
        x: 1,
        y: 1,
        heading: Heading::East,
    };
    let goal = Goal {
        x: width as i32 - 2,
        y: height as i32 - 2,
    };
    sample_obstacles(seed, width, height, start, goal, n_obstacles)
}

/// Intervention on the obstacle configuration: keeps dimensions, start and
/// goal of `base` and resamples obstacles from `cf_seed`.
pub fn intervene(base: &GridLayout, cf_seed: u64, n_obstacles: usize) -> Result<GridLayout> {
    sample_obstacles(
        cf_seed,
        base.width,
        base.height,
        base.start,
        base.goal,
        n_obstacles,
    )
}

/// Agent state inside one episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState<'a> {
    pub layout: &'a GridLayout,
    pub pose: Pose,
    pub step_count: u32,
}

impl<'a> EnvState<'a> {
    pub fn reset(layout: &'a GridLayout) -> Self {
        EnvState {
            layout,
            pose: layout.start,
            step_count: 0,
        }
    }

    pub fn at_goal(&self) -> bool {
        self.pose.cell() == self.layout.goal_cell()
    }

    pub fn is_terminal(&self, spec: &RewardSpec) -> bool {
        self.at_goal() || self.step_count >= spec.horizon
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome<'a> {
    pub state: EnvState<'a>,
    pub reward: f64,
    pub done: bool,
    pub bumped: bool,
}

/// Advances one step. Forward into a wall or obstacle leaves the agent in
/// place and reports a bump.
pub fn step<'a>(state: &EnvState<'a>, action: Action, spec: &RewardSpec) -> Result<StepOutcome<'a>> {
    if state.is_terminal(spec) {
        return Err(CfdtError::Usage(format!(
            "step called on terminal state at step {}",
            state.step_count
        )));
    }
    let mut next = *state;
    next.step_count += 1;
    let mut bumped = false;
    match action {
        Action::TurnLeft => next.pose.heading = state.pose.heading.left(),
        Action::TurnRight => next.pose.heading = state.pose.heading.right(),
        Action::Forward => {
            let target = state.pose.cell().ahead(state.pose.heading);
            if state.layout.is_blocked(target) {
                bumped = true;
            } else {
                next.pose.x = target.x;
                next.pose.y = target.y;
            }
        }
    }
    let (reward, done) = if next.at_goal() {
        (spec.success_reward(next.step_count), true)
    } else if next.step_count >= spec.horizon {
        (spec.failure_reward, true)
    } else {
        (0.0, false)
    };
    Ok(StepOutcome {
        state: next,
        reward,
        done,
        bumped,
    })
}

/// Cell channels of the observation encoding.
pub const CHANNELS: usize = 4;
const CH_EMPTY: usize = 0;
const CH_OBSTACLE: usize = 1;
const CH_GOAL: usize = 2;
const CH_AGENT: usize = 3;

pub fn observation_len(width: u32, height: u32) -> usize {
    width as usize * height as usize * CHANNELS + 4
}

/// Fully observable one-hot encoding of the whole grid plus heading.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub values: Vec<f32>,
}

/// Writes the encoding of `pose` on `layout` into `out`, which must have
/// `observation_len` entries. Every cell has exactly one hot channel.
pub fn encode_observation<T: cfdt_nn::Scalar>(layout: &GridLayout, pose: Pose, out: &mut [T]) {
    debug_assert_eq!(out.len(), observation_len(layout.width, layout.height));
    out.iter_mut().for_each(|v| *v = T::zero());
    let w = layout.width as i32;
    let goal = layout.goal_cell();
    for y in 0..layout.height as i32 {
        for x in 0..w {
            let c = Cell::new(x, y);
            let ch = if c == pose.cell() {
                CH_AGENT
            } else if c == goal {
                CH_GOAL
            } else if layout.is_blocked(c) {
                CH_OBSTACLE
            } else {
                CH_EMPTY
            };
            out[((y * w + x) as usize) * CHANNELS + ch] = T::one();
        }
    }
    let base = layout.width as usize * layout.height as usize * CHANNELS;
    out[base + pose.heading.index()] = T::one();
}

pub fn observe(state: &EnvState<'_>) -> Observation {
    let mut values = vec![0f32; observation_len(state.layout.width, state.layout.height)];
    encode_observation(state.layout, state.pose, &mut values);
    Observation { values }
}
