//! Rollout collection, treatment-effect estimation and the weighted
//! trajectory sampler.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CfdtError, Result};
use crate::gridworld::{
    encode_observation, intervene, observation_len, step, Action, EnvState, GridLayout, LayoutId,
    Pose, RewardSpec,
};
use crate::policy::{FailSafe, FailSafeConfig, Policy};
use crate::seed::{self, Stream};

pub type LayoutBook = BTreeMap<LayoutId, GridLayout>;

pub fn layout_book<'a>(layouts: impl IntoIterator<Item = &'a GridLayout>) -> LayoutBook {
    layouts.into_iter().map(|l| (l.id(), l.clone())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Factual,
    Counterfactual,
}

/// One transition: the pose observed before acting, the action, the reward.
/// The observation itself is `encode_observation(layout, pose)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    #[serde(flatten)]
    pub pose: Pose,
    pub action: Action,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub layout_id: LayoutId,
    pub provenance: Provenance,
    pub seed: u64,
    pub steps: Vec<Step>,
    pub returns_to_go: Vec<f64>,
    pub total_return: f64,
    pub episode_length: u32,
    pub reached_goal: bool,
    pub failsafe_activations: u32,
}

/// Undiscounted suffix sums, built right to left so that
/// `rtg[t] == rewards[t] + rtg[t + 1]` holds bit-for-bit.
pub fn returns_to_go(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, &r) in rewards.iter().enumerate().rev() {
        acc = r + acc;
        out[t] = acc;
    }
    out
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|s| s.reward)
    }

    /// Checks the stored returns-to-go and summary fields.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CfdtError::Data(format!("trajectory {}: {m}", self.layout_id)));
        if self.returns_to_go.len() != self.steps.len() || self.episode_length as usize != self.steps.len() {
            return bad("length fields disagree");
        }
        for t in 0..self.steps.len() {
            let next = self.returns_to_go.get(t + 1).copied().unwrap_or(0.0);
            if self.returns_to_go[t] != self.steps[t].reward + next {
                return bad("returns-to-go recurrence violated");
            }
        }
        let total = self.returns_to_go.first().copied().unwrap_or(0.0);
        if total != self.total_return {
            return bad("total_return differs from first return-to-go");
        }
        Ok(())
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let t: Trajectory = serde_json::from_str(line)?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory serializes")
    }
}

/// Plays one episode of `policy` on `layout`, optionally behind the
/// exploration wrapper (seeded from `failsafe.rng_seed` and `seed`).
pub fn rollout(
    layout: &GridLayout,
    policy: &dyn Policy,
    spec: &RewardSpec,
    failsafe: Option<FailSafeConfig>,
    seed: u64,
    provenance: Provenance,
) -> Result<Trajectory> {
    let mut fs = failsafe
        .map(|cfg| {
            FailSafe::new(FailSafeConfig {
                rng_seed: seed::child(cfg.rng_seed, seed),
                ..cfg
            })
        })
        .transpose()?;
    let mut state = EnvState::reset(layout);
    let mut steps = Vec::new();
    let mut bumped = false;
    let reached_goal = loop {
        let action = match fs.as_mut() {
            Some(fs) => fs.act(policy, &state, bumped)?,
            None => policy.act(&state)?,
        };
        let out = step(&state, action, spec)?;
        steps.push(Step {
            pose: state.pose,
            action,
            reward: out.reward,
        });
        bumped = out.bumped;
        state = out.state;
        if out.done {
            break state.at_goal();
        }
    };
    let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
    let rtg = returns_to_go(&rewards);
    Ok(Trajectory {
        layout_id: layout.id(),
        provenance,
        seed,
        total_return: rtg.first().copied().unwrap_or(0.0),
        episode_length: steps.len() as u32,
        returns_to_go: rtg,
        steps,
        reached_goal,
        failsafe_activations: fs.map_or(0, |f| f.activations()),
    })
}

/// `n` rollouts on the source layout; rollout `i` uses
/// `seed::derive(seed, FactualRollouts, i)`.
pub fn collect_factual(
    source: &GridLayout,
    policy: &dyn Policy,
    spec: &RewardSpec,
    n: usize,
    seed: u64,
    failsafe: Option<FailSafeConfig>,
) -> Result<Vec<Trajectory>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            rollout(
                source,
                policy,
                spec,
                failsafe,
                seed::derive(seed, Stream::FactualRollouts, i as u64),
                Provenance::Factual,
            )
        })
        .collect()
}

/// `rollouts_per_env` rollouts on each layout; rollout `j` on layout `i`
/// uses `seed::derive(seed, CounterfactualRollouts, i * rollouts_per_env + j)`.
pub fn collect_on_layouts(
    layouts: &[GridLayout],
    policy: &dyn Policy,
    spec: &RewardSpec,
    rollouts_per_env: usize,
    seed: u64,
    failsafe: Option<FailSafeConfig>,
) -> Result<Vec<Trajectory>> {
    let nested: Vec<Vec<Trajectory>> = layouts
        .par_iter()
        .enumerate()
        .map(|(i, layout)| {
            (0..rollouts_per_env)
                .map(|j| {
                    let s = seed::derive(seed, Stream::CounterfactualRollouts, (i * rollouts_per_env + j) as u64);
                    rollout(layout, policy, spec, failsafe, s, Provenance::Counterfactual)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// Interventions on `base` drawn from the `CounterfactualLayouts` stream of `seed`.
pub fn counterfactual_layouts(base: &GridLayout, n_envs: usize, n_obstacles: usize, seed: u64) -> Result<Vec<GridLayout>> {
    (0..n_envs)
        .into_par_iter()
        .map(|i| intervene(base, seed::derive(seed, Stream::CounterfactualLayouts, i as u64), n_obstacles))
        .collect()
}

/// Draws `n_envs` interventions on `base` and rolls the policy out on each.
#[allow(clippy::too_many_arguments)]
pub fn collect_counterfactual(
    base: &GridLayout,
    policy: &dyn Policy,
    spec: &RewardSpec,
    n_envs: usize,
    rollouts_per_env: usize,
    n_obstacles: usize,
    seed: u64,
    failsafe: Option<FailSafeConfig>,
) -> Result<(Vec<Trajectory>, Vec<GridLayout>)> {
    if n_envs == 0 {
        return Err(CfdtError::Usage("n_envs must be at least 1".into()));
    }
    let layouts = counterfactual_layouts(base, n_envs, n_obstacles, seed)?;
    let trajectories = collect_on_layouts(&layouts, policy, spec, rollouts_per_env, seed, failsafe)?;
    Ok((trajectories, layouts))
}

/// Monte-Carlo estimate of the treatment effect of one intervention on the
/// total return of a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteEstimate {
    pub layout_id: LayoutId,
    pub ate: f64,
    pub n_cf_rollouts: usize,
    pub n_source_rollouts: usize,
    pub cf_mean_return: f64,
    pub source_mean_return: f64,
    pub std_error: f64,
}

fn mean_and_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Mean total return on `cf_layout` minus mean total return on
/// `source_layout`, `m` rollouts per side. The standard error combines the
/// two sample variances.
pub fn estimate_ate(
    cf_layout: &GridLayout,
    source_layout: &GridLayout,
    policy: &dyn Policy,
    spec: &RewardSpec,
    m: usize,
    failsafe: Option<FailSafeConfig>,
    seed: u64,
) -> Result<AteEstimate> {
    if m == 0 {
        return Err(CfdtError::Usage("ATE needs at least one rollout per side".into()));
    }
    let side = |layout: &GridLayout, stream: Stream| -> Result<Vec<f64>> {
        (0..m)
            .map(|i| {
                rollout(layout, policy, spec, failsafe, seed::derive(seed, stream, i as u64), Provenance::Counterfactual)
                    .map(|t| t.total_return)
            })
            .collect()
    };
    let cf = side(cf_layout, Stream::AteCounterfactualSide)?;
    let src = side(source_layout, Stream::AteSourceSide)?;
    let (cf_mean, cf_var) = mean_and_var(&cf);
    let (src_mean, src_var) = mean_and_var(&src);
    Ok(AteEstimate {
        layout_id: cf_layout.id(),
        ate: cf_mean - src_mean,
        n_cf_rollouts: m,
        n_source_rollouts: m,
        cf_mean_return: cf_mean,
        source_mean_return: src_mean,
        std_error: (cf_var / m as f64 + src_var / m as f64).sqrt(),
    })
}

/// Trajectories with normalized sampling weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedDataset {
    pub trajectories: Vec<Trajectory>,
    pub weights: Vec<f64>,
    pub beta: f64,
    pub manifest: serde_json::Value,
}

/// Softmax of `beta * ate` over trajectories, each trajectory taking the ATE
/// of its layout. The maximum is subtracted before exponentiating.
pub fn build_weights(
    trajectories: Vec<Trajectory>,
    ate_by_layout: &BTreeMap<LayoutId, f64>,
    beta: f64,
) -> Result<WeightedDataset> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(CfdtError::Config(format!("beta must be finite and non-negative, got {beta}")));
    }
    let ates = trajectories
        .iter()
        .map(|t| {
            ate_by_layout
                .get(&t.layout_id)
                .copied()
                .ok_or_else(|| CfdtError::Data(format!("no ATE entry for layout {}", t.layout_id)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let max = ates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = ates.iter().map(|a| (beta * (a - max)).exp()).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    Ok(WeightedDataset {
        trajectories,
        weights,
        beta,
        manifest: serde_json::Value::Null,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetSidecar {
    beta: f64,
    weights: Vec<f64>,
    manifest: serde_json::Value,
}

/// Writes one JSON object per line.
pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for t in trajectories {
        writeln!(w, "{}", t.to_json_line()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    parse_trajectories(BufReader::new(file)).map_err(|e| match e {
        CfdtError::Io { source, .. } => io_err(path)(source),
        other => other,
    })
}

/// Parses JSON-lines trajectories, skipping blank lines.
pub fn parse_trajectories(reader: impl BufRead) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(io_err(Path::new("<trajectories>")))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(Trajectory::from_json_line(&line)?);
    }
    Ok(out)
}

impl WeightedDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.trajectories.len() {
            return Err(CfdtError::Data("weight count differs from trajectory count".into()));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(CfdtError::Data("weights must be finite and non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if !self.weights.is_empty() && (total - 1.0).abs() > 1e-9 {
            return Err(CfdtError::Data(format!("weights sum to {total}")));
        }
        self.trajectories.iter().try_for_each(Trajectory::validate)
    }

    /// Writes `<stem>.jsonl` (trajectories) and `<stem>.weights.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        write_trajectories(&dir.join(format!("{stem}.jsonl")), &self.trajectories)?;
        let side = DatasetSidecar {
            beta: self.beta,
            weights: self.weights.clone(),
            manifest: self.manifest.clone(),
        };
        let path = dir.join(format!("{stem}.weights.json"));
        fs::write(&path, serde_json::to_string(&side)?).map_err(io_err(&path))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let trajectories = read_trajectories(&dir.join(format!("{stem}.jsonl")))?;
        let path = dir.join(format!("{stem}.weights.json"));
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let side: DatasetSidecar = serde_json::from_str(&text)?;
        let ds = WeightedDataset {
            trajectories,
            weights: side.weights,
            beta: side.beta,
            manifest: side.manifest,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Fixed-length training windows, left-padded. Row-major `[batch, k, ..]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub k: usize,
    pub obs_dim: usize,
    pub returns_to_go: Vec<f64>,
    pub observations: Vec<f64>,
    pub actions: Vec<usize>,
    pub timesteps: Vec<usize>,
    /// 1 for real steps, 0 for padding.
    pub mask: Vec<f64>,
    /// Which trajectory each row came from.
    pub source: Vec<usize>,
}

impl Batch {
    pub fn zeros(batch: usize, k: usize, obs_dim: usize) -> Self {
        Batch {
            batch,
            k,
            obs_dim,
            returns_to_go: vec![0.0; batch * k],
            observations: vec![0.0; batch * k * obs_dim],
            actions: vec![0; batch * k],
            timesteps: vec![0; batch * k],
            mask: vec![0.0; batch * k],
            source: vec![0; batch],
        }
    }

    /// Copies steps `from..from + len` of `traj` into row `b`, right-aligned.
    pub fn fill_row(&mut self, b: usize, traj: &Trajectory, layout: &GridLayout, from: usize, len: usize) {
        let pad = self.k - len;
        for i in 0..len {
            let t = from + i;
            let slot = b * self.k + pad + i;
            let s = &traj.steps[t];
            self.returns_to_go[slot] = traj.returns_to_go[t];
            self.actions[slot] = s.action.index();
            self.timesteps[slot] = t;
            self.mask[slot] = 1.0;
            encode_observation(layout, s.pose, &mut self.observations[slot * self.obs_dim..(slot + 1) * self.obs_dim]);
        }
    }
}

/// Draws trajectory indices with probability proportional to the weights.
pub struct WeightedSampler {
    dist: WeightedIndex<f64>,
}

impl WeightedSampler {
    pub fn new(ds: &WeightedDataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(CfdtError::Data("cannot sample from an empty dataset".into()));
        }
        let dist = WeightedIndex::new(&ds.weights).map_err(|e| CfdtError::Data(format!("bad weights: {e}")))?;
        Ok(WeightedSampler { dist })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.dist.sample(rng)
    }
}

/// Samples `batch` trajectories (with replacement, by weight) and a uniform
/// `k`-step window from each. Shorter trajectories are left-padded.
pub fn sample_batch<R: Rng + ?Sized>(
    ds: &WeightedDataset,
    layouts: &LayoutBook,
    batch: usize,
    k: usize,
    rng: &mut R,
) -> Result<Batch> {
    let sampler = WeightedSampler::new(ds)?;
    sample_batch_with(ds, &sampler, layouts, batch, k, rng)
}

pub fn sample_batch_with<R: Rng + ?Sized>(
    ds: &WeightedDataset,
    sampler: &WeightedSampler,
    layouts: &LayoutBook,
    batch: usize,
    k: usize,
    rng: &mut R,
) -> Result<Batch> {
    if k < 1 {
        return Err(CfdtError::Usage("context length must be at least 1".into()));
    }
    let first = layouts
        .values()
        .next()
        .ok_or_else(|| CfdtError::Data("no layouts available for observations".into()))?;
    let obs_dim = observation_len(first.width, first.height);
    let mut out = Batch::zeros(batch, k, obs_dim);
    for b in 0..batch {
        let i = sampler.draw(rng);
        let traj = &ds.trajectories[i];
        let layout = layouts
            .get(&traj.layout_id)
            .ok_or_else(|| CfdtError::Data(format!("layout {} not found", traj.layout_id)))?;
        if observation_len(layout.width, layout.height) != obs_dim {
            return Err(CfdtError::Data("layouts of different sizes in one dataset".into()));
        }
        let len = traj.len();
        let (from, take) = if len >= k {
            (rng.gen_range(0..=len - k), k)
        } else {
            (0, len)
        };
        out.source[b] = i;
        out.fill_row(b, traj, layout, from, take);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::generate_layout;
    use crate::policy::PolicyTable;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn traj_with(layout: &GridLayout, rewards: &[f64]) -> Trajectory {
        let steps: Vec<Step> = rewards
            .iter()
            .map(|&r| Step {
                pose: layout.start,
                action: Action::Forward,
                reward: r,
            })
            .collect();
        let rtg = returns_to_go(rewards);
        Trajectory {
            layout_id: layout.id(),
            provenance: Provenance::Factual,
            seed: 0,
            total_return: rtg.first().copied().unwrap_or(0.0),
            episode_length: steps.len() as u32,
            returns_to_go: rtg,
            steps,
            reached_goal: false,
            failsafe_activations: 0,
        }
    }

    #[test]
    fn returns_to_go_suffix_sums() {
        assert_eq!(returns_to_go(&[0.0, 0.0, 0.91]), vec![0.91, 0.91, 0.91]);
        assert_eq!(returns_to_go(&[0.0, 0.0, 0.0, -1.0]), vec![-1.0; 4]);
        assert!(returns_to_go(&[]).is_empty());
    }

    #[test]
    fn source_rollout_succeeds_without_exploration() {
        let spec = RewardSpec::default();
        let l = generate_layout(7, 8, 8, 6).unwrap();
        let p = PolicyTable::solve(&l, &spec).unwrap();
        let t = rollout(&l, &p, &spec, Some(FailSafeConfig::default()), 3, Provenance::Factual).unwrap();
        assert!(t.total_return > 0.0);
        assert!(t.reached_goal);
        assert_eq!(t.failsafe_activations, 0);
        t.validate().unwrap();
    }

    #[test]
    fn factual_collection_is_deterministic() {
        let spec = RewardSpec::default();
        let l = generate_layout(7, 8, 8, 6).unwrap();
        let p = PolicyTable::solve(&l, &spec).unwrap();
        let ts = collect_factual(&l, &p, &spec, 100, 9, None).unwrap();
        assert_eq!(ts.len(), 100);
        assert!(ts.iter().all(|t| t.steps == ts[0].steps && t.layout_id == l.id()));
        assert!(collect_factual(&l, &p, &spec, 0, 9, None).unwrap().is_empty());
        assert_eq!(ts[4].seed, seed::derive(9, Stream::FactualRollouts, 4));
    }

    #[test]
    fn ate_of_source_against_itself_is_zero() {
        let spec = RewardSpec::default();
        let l = generate_layout(7, 8, 8, 6).unwrap();
        let p = PolicyTable::solve(&l, &spec).unwrap();
        let est = estimate_ate(&l, &l, &p, &spec, 5, None, 1).unwrap();
        assert_eq!(est.ate, 0.0);
        assert_eq!(est.std_error, 0.0);
        assert!(estimate_ate(&l, &l, &p, &spec, 0, None, 1).is_err());
    }

    #[test]
    fn uniform_weights_at_zero_temperature() {
        let l = generate_layout(7, 8, 8, 6).unwrap();
        let ts = vec![traj_with(&l, &[1.0]), traj_with(&l, &[0.5]), traj_with(&l, &[0.2])];
        let ates = BTreeMap::from([(l.id(), -0.7)]);
        let ds = build_weights(ts, &ates, 0.0).unwrap();
        assert!(ds.weights.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_weights_match_direct_evaluation() {
        let a = generate_layout(7, 8, 8, 6).unwrap();
        let b = generate_layout(8, 8, 8, 6).unwrap();
        let ts = vec![traj_with(&a, &[1.0]), traj_with(&b, &[-1.0])];
        let ates = BTreeMap::from([(a.id(), 0.0), (b.id(), -1.91)]);
        let ds = build_weights(ts, &ates, 5.0).unwrap();
        let tail = (-9.55f64).exp();
        assert!((ds.weights[1] - tail / (1.0 + tail)).abs() < 1e-15);
        assert!((ds.weights[0] - 0.999929).abs() < 1e-6);
        assert!((ds.weights[1] - 7.08e-5).abs() < 1e-6);
    }

    #[test]
    fn missing_ate_is_a_data_error() {
        let l = generate_layout(7, 8, 8, 6).unwrap();
        let err = build_weights(vec![traj_with(&l, &[1.0])], &BTreeMap::new(), 1.0);
        assert!(matches!(err, Err(CfdtError::Data(_))));
    }

    #[test]
    fn short_trajectories_are_left_padded() {
        let l = generate_layout(7, 8, 8, 6).unwrap();
        let ts = vec![traj_with(&l, &[0.0, 0.0, 0.5])];
        let ds = build_weights(ts, &BTreeMap::from([(l.id(), 0.0)]), 0.0).unwrap();
        let book = layout_book([&l]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_batch(&ds, &book, 2, 20, &mut rng).unwrap();
        for row in 0..2 {
            let mask = &b.mask[row * 20..(row + 1) * 20];
            assert_eq!(mask.iter().filter(|&&m| m == 0.0).count(), 17);
            assert!(mask[..17].iter().all(|&m| m == 0.0));
            assert_eq!(&b.timesteps[row * 20 + 17..row * 20 + 20], &[0, 1, 2]);
        }
        assert!(sample_batch(&ds, &book, 2, 0, &mut rng).is_err());
    }

    #[test]
    fn long_trajectories_yield_full_windows() {
        let l = generate_layout(7, 8, 8, 6).unwrap();
        let rewards: Vec<f64> = (0..30).map(|i| if i == 29 { -1.0 } else { 0.0 }).collect();
        let ds = build_weights(vec![traj_with(&l, &rewards)], &BTreeMap::from([(l.id(), 0.0)]), 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_batch(&ds, &layout_book([&l]), 50, 8, &mut rng).unwrap();
        assert!(b.mask.iter().all(|&m| m == 1.0));
        for row in b.timesteps.chunks(8) {
            assert!(row.windows(2).all(|w| w[1] == w[0] + 1));
            assert!(row[7] < 30);
        }
    }

    #[test]
    fn dataset_round_trip_is_identical() {
        let spec = RewardSpec::default();
        let l = generate_layout(7, 8, 8, 6).unwrap();
        let p = PolicyTable::solve(&l, &spec).unwrap();
        let (ts, layouts) = collect_counterfactual(&l, &p, &spec, 5, 2, 6, 3, Some(FailSafeConfig::default())).unwrap();
        let mut ates: BTreeMap<LayoutId, f64> = layouts.iter().map(|c| (c.id(), -0.3 * c.obstacles.len() as f64 / 7.0)).collect();
        ates.insert(l.id(), 0.0);
        let mut ds = build_weights(ts, &ates, 5.0).unwrap();
        ds.manifest = serde_json::json!({"seed": 3});
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path(), "cf").unwrap();
        let back = WeightedDataset::load(dir.path(), "cf").unwrap();
        assert_eq!(back, ds);
        assert!(back.weights.iter().zip(&ds.weights).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn tampered_returns_are_rejected() {
        let l = generate_layout(7, 8, 8, 6).unwrap();
        let mut t = traj_with(&l, &[0.0, 1.0]);
        t.returns_to_go[0] = 0.5;
        assert!(Trajectory::from_json_line(&serde_json::to_string(&t).unwrap()).is_err());
    }
}
