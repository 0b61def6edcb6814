//! Run-directory pipeline: `gen`, `collect`, `train`, `eval`, `report`.
//!
//! Every stage reads its inputs from the run directory and writes its
//! outputs next to them, so stages can run as separate processes. The
//! configuration is fixed at `gen` time and stored in `manifest.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cfdt_nn::Checkpoint;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_weights, collect_factual, collect_on_layouts, counterfactual_layouts, estimate_ate, layout_book,
    read_trajectories, rollout, write_trajectories, AteEstimate, LayoutBook, Provenance, Trajectory,
    WeightedDataset,
};
use crate::dt::{self, DecisionTransformer, DtConfig, EpisodeResult, LossPoint};
use crate::error::{io_err, CfdtError, Result};
use crate::gridworld::{generate_layout, observation_len, GridLayout, LayoutId, RewardSpec, MAX_DIM};
use crate::policy::{FailSafeConfig, PolicyTable};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Easy,
    Hard,
}

impl FromStr for Scenario {
    type Err = CfdtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Scenario::Easy),
            "hard" => Ok(Scenario::Hard),
            _ => Err(CfdtError::Usage(format!("unknown scenario {s:?} (expected easy or hard)"))),
        }
    }
}

/// The six agents being compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "source")]
    Source,
    #[serde(rename = "dt-f")]
    DtF,
    #[serde(rename = "dt-cf")]
    DtCf,
    #[serde(rename = "dt-fcf")]
    DtFcf,
    #[serde(rename = "dt-cf-ate")]
    DtCfAte,
    #[serde(rename = "dt-fcf-ate")]
    DtFcfAte,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Source,
        Variant::DtF,
        Variant::DtCf,
        Variant::DtFcf,
        Variant::DtCfAte,
        Variant::DtFcfAte,
    ];
    pub const TRAINED: [Variant; 5] = [
        Variant::DtF,
        Variant::DtCf,
        Variant::DtFcf,
        Variant::DtCfAte,
        Variant::DtFcfAte,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Source => "source",
            Variant::DtF => "dt-f",
            Variant::DtCf => "dt-cf",
            Variant::DtFcf => "dt-fcf",
            Variant::DtCfAte => "dt-cf-ate",
            Variant::DtFcfAte => "dt-fcf-ate",
        }
    }

    pub fn uses_factual(self) -> bool {
        matches!(self, Variant::DtF | Variant::DtFcf | Variant::DtFcfAte)
    }

    pub fn uses_counterfactual(self) -> bool {
        matches!(self, Variant::DtCf | Variant::DtFcf | Variant::DtCfAte | Variant::DtFcfAte)
    }

    pub fn uses_ate(self) -> bool {
        matches!(self, Variant::DtCfAte | Variant::DtFcfAte)
    }

    pub fn composition(self) -> &'static str {
        match (self.uses_factual(), self.uses_counterfactual()) {
            (true, true) => "factual+counterfactual",
            (true, false) => "factual",
            (false, true) => "counterfactual",
            (false, false) => "none",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = CfdtError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| CfdtError::Usage(format!("unknown variant {s:?}")))
    }
}

/// Where the exploration wrapper is switched on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FailSafeFlags {
    pub collect: bool,
    pub ate: bool,
    pub source_eval: bool,
    pub explore_steps: u32,
}

impl Default for FailSafeFlags {
    fn default() -> Self {
        FailSafeFlags {
            collect: true,
            ate: true,
            source_eval: false,
            explore_steps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub width: u32,
    pub height: u32,
    pub n_obstacles_source: usize,
    pub n_obstacles_target: usize,
    pub n_cf_envs: usize,
    pub n_target_envs: usize,
    /// Rollouts of the source policy on the source layout.
    pub n_factual: usize,
    pub rollouts_per_env: usize,
    pub ate_rollouts: usize,
    pub beta: f64,
    pub reward: RewardSpec,
    pub dt: DtConfig,
    pub seed: u64,
    /// Training seeds per DT variant.
    pub n_seeds: usize,
    pub scenario: Scenario,
    pub failsafe: FailSafeFlags,
    pub eval_episodes_per_layout: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            width: 8,
            height: 8,
            n_obstacles_source: 6,
            n_obstacles_target: 6,
            n_cf_envs: 200,
            n_target_envs: 100,
            n_factual: 3,
            rollouts_per_env: 3,
            ate_rollouts: 5,
            beta: 5.0,
            reward: RewardSpec::default(),
            dt: DtConfig {
                context: 10,
                embed_dim: 32,
                layers: 2,
                heads: 2,
                learning_rate: 1e-3,
                batch_size: 32,
                training_steps: 3_000,
                warmup_steps: 200,
                ..DtConfig::default()
            },
            seed: 0,
            n_seeds: 3,
            scenario: Scenario::Easy,
            failsafe: FailSafeFlags::default(),
            eval_episodes_per_layout: 1,
        }
        .resolved()
    }
}

impl ExperimentConfig {
    /// Parses JSON, or TOML when `toml` is set. Fields that are absent,
    /// including inside nested tables, keep their default values.
    pub fn parse(text: &str, toml: bool) -> Result<Self> {
        let user: serde_json::Value = if toml {
            let v: ::toml::Value = ::toml::from_str(text).map_err(|e| CfdtError::Config(e.to_string()))?;
            serde_json::to_value(v)?
        } else {
            serde_json::from_str(text).map_err(|e| CfdtError::Config(e.to_string()))?
        };
        let mut merged = serde_json::to_value(ExperimentConfig::default())?;
        merge(&mut merged, user);
        let cfg: ExperimentConfig = serde_json::from_value(merged).map_err(|e| CfdtError::Config(e.to_string()))?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let toml = path.extension().is_some_and(|e| e == "toml");
        Self::parse(&text, toml)
    }

    /// Fills the model dimensions that follow from the grid and horizon.
    pub fn resolved(mut self) -> Self {
        self.dt.obs_dim = observation_len(self.width, self.height);
        self.dt.max_timestep = self.reward.horizon as usize;
        self
    }

    /// Switches scenario, adjusting the target obstacle count to match.
    pub fn with_scenario(mut self, scenario: Scenario) -> Self {
        self.scenario = scenario;
        self.n_obstacles_target = match scenario {
            Scenario::Easy => self.n_obstacles_source,
            Scenario::Hard => self.n_obstacles_source + 1,
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CfdtError::Config(m));
        if !(3..=MAX_DIM).contains(&self.width) || !(3..=MAX_DIM).contains(&self.height) {
            return bad(format!("grid {}x{} outside 3..={MAX_DIM}", self.width, self.height));
        }
        let expected = match self.scenario {
            Scenario::Easy => self.n_obstacles_source,
            Scenario::Hard => self.n_obstacles_source + 1,
        };
        if self.n_obstacles_target != expected {
            return bad(format!(
                "{:?} scenario needs {expected} target obstacles, config has {}",
                self.scenario, self.n_obstacles_target
            ));
        }
        if self.n_cf_envs == 0 || self.n_target_envs == 0 || self.n_factual == 0 {
            return bad("n_cf_envs, n_target_envs and n_factual must be positive".into());
        }
        if self.rollouts_per_env == 0 || self.ate_rollouts == 0 || self.n_seeds == 0 {
            return bad("rollouts_per_env, ate_rollouts and n_seeds must be positive".into());
        }
        if self.eval_episodes_per_layout == 0 {
            return bad("eval_episodes_per_layout must be positive".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be finite and non-negative, got {}", self.beta));
        }
        if self.failsafe.explore_steps == 0 {
            return bad("failsafe.explore_steps must be at least 1".into());
        }
        self.reward.validate()?;
        if self.dt.obs_dim != observation_len(self.width, self.height)
            || self.dt.max_timestep != self.reward.horizon as usize
        {
            return bad("dt.obs_dim and dt.max_timestep must match the grid and horizon".into());
        }
        self.dt.validate()
    }

    fn failsafe(&self, on: bool) -> Option<FailSafeConfig> {
        on.then(|| FailSafeConfig {
            explore_steps: self.failsafe.explore_steps,
            rng_seed: seed::derive(self.seed, Stream::Exploration, 0),
        })
    }

    /// Model configuration for training seed `index`.
    pub fn dt_for_seed(&self, index: usize) -> DtConfig {
        DtConfig {
            seed: self.training_seed(index),
            ..self.dt.clone()
        }
    }

    pub fn training_seed(&self, index: usize) -> u64 {
        seed::derive(self.seed, Stream::Training, index as u64)
    }

    fn evaluation_seed(&self, index: usize) -> u64 {
        seed::derive(self.seed, Stream::Evaluation, index as u64)
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Source, counterfactual and target layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct Layouts {
    pub source: GridLayout,
    pub counterfactual: Vec<GridLayout>,
    pub target: Vec<GridLayout>,
}

impl Layouts {
    /// Number of target layouts whose id also appears among the source and
    /// counterfactual layouts.
    pub fn leaked_targets(&self) -> usize {
        let seen: BTreeSet<LayoutId> = std::iter::once(&self.source)
            .chain(&self.counterfactual)
            .map(GridLayout::id)
            .collect();
        self.target.iter().filter(|l| seen.contains(&l.id())).count()
    }

    pub fn book(&self) -> LayoutBook {
        layout_book(std::iter::once(&self.source).chain(&self.counterfactual))
    }
}

/// Draws all layouts. Target draws that coincide with the source or any
/// counterfactual layout are skipped, so evaluation never sees a training
/// configuration even when two seed streams happen to produce the same
/// obstacle set.
pub fn generate_layouts(cfg: &ExperimentConfig) -> Result<Layouts> {
    let source = generate_layout(
        seed::derive(cfg.seed, Stream::SourceLayout, 0),
        cfg.width,
        cfg.height,
        cfg.n_obstacles_source,
    )?;
    let counterfactual = counterfactual_layouts(&source, cfg.n_cf_envs, cfg.n_obstacles_source, cfg.seed)?;
    let mut seen: BTreeSet<LayoutId> = std::iter::once(&source).chain(&counterfactual).map(GridLayout::id).collect();
    let mut target = Vec::with_capacity(cfg.n_target_envs);
    let mut index = 0u64;
    while target.len() < cfg.n_target_envs {
        if index >= (cfg.n_target_envs as u64).saturating_mul(100) + 1000 {
            return Err(CfdtError::Generation(format!(
                "could only draw {} distinct unseen target layouts",
                target.len()
            )));
        }
        let l = generate_layout(
            seed::derive(cfg.seed, Stream::TargetLayouts, index),
            cfg.width,
            cfg.height,
            cfg.n_obstacles_target,
        )?;
        index += 1;
        if seen.insert(l.id()) {
            target.push(l);
        }
    }
    let layouts = Layouts {
        source,
        counterfactual,
        target,
    };
    if layouts.leaked_targets() != 0 {
        return Err(CfdtError::Generation("target layouts overlap training layouts".into()));
    }
    Ok(layouts)
}

/// Collected rollouts plus per-layout treatment effects.
#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub factual: Vec<Trajectory>,
    pub counterfactual: Vec<Trajectory>,
    pub ate: Vec<AteEstimate>,
}

impl Datasets {
    /// ATE per layout, with the source layout at zero.
    pub fn ate_by_layout(&self, source: &GridLayout) -> BTreeMap<LayoutId, f64> {
        let mut map: BTreeMap<LayoutId, f64> = self.ate.iter().map(|a| (a.layout_id.clone(), a.ate)).collect();
        map.insert(source.id(), 0.0);
        map
    }
}

pub fn collect_datasets(cfg: &ExperimentConfig, layouts: &Layouts, policy: &PolicyTable) -> Result<Datasets> {
    let spec = &cfg.reward;
    let fs = cfg.failsafe(cfg.failsafe.collect);
    let factual = collect_factual(&layouts.source, policy, spec, cfg.n_factual, cfg.seed, fs)?;
    let counterfactual = collect_on_layouts(&layouts.counterfactual, policy, spec, cfg.rollouts_per_env, cfg.seed, fs)?;
    let ate_fs = cfg.failsafe(cfg.failsafe.ate);
    let ate = layouts
        .counterfactual
        .par_iter()
        .enumerate()
        .map(|(i, l)| {
            let s = seed::derive(cfg.seed, Stream::AteCounterfactualSide, i as u64);
            estimate_ate(l, &layouts.source, policy, spec, cfg.ate_rollouts, ate_fs, s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Datasets {
        factual,
        counterfactual,
        ate,
    })
}

/// Training set for a DT variant: its trajectory mix and weighting.
pub fn variant_dataset(
    cfg: &ExperimentConfig,
    variant: Variant,
    data: &Datasets,
    source: &GridLayout,
) -> Result<WeightedDataset> {
    if variant == Variant::Source {
        return Err(CfdtError::Usage("the source agent is not trained".into()));
    }
    let mut trajectories = Vec::new();
    if variant.uses_factual() {
        trajectories.extend(data.factual.iter().cloned());
    }
    if variant.uses_counterfactual() {
        trajectories.extend(data.counterfactual.iter().cloned());
    }
    let beta = if variant.uses_ate() { cfg.beta } else { 0.0 };
    let mut ds = build_weights(trajectories, &data.ate_by_layout(source), beta)?;
    ds.manifest = serde_json::json!({
        "variant": variant.name(),
        "composition": variant.composition(),
        "beta": beta,
    });
    Ok(ds)
}

/// Trains one model for `variant` with training seed `index`.
pub fn train_variant(
    cfg: &ExperimentConfig,
    ds: &WeightedDataset,
    book: &LayoutBook,
    index: usize,
) -> Result<(DecisionTransformer<f32>, Vec<LossPoint>)> {
    let mut model = DecisionTransformer::new(cfg.dt_for_seed(index))?;
    let trace = dt::train(&mut model, ds, book)?;
    Ok((model, trace))
}

/// Plays the source table on every target layout.
pub fn evaluate_source(
    cfg: &ExperimentConfig,
    policy: &PolicyTable,
    targets: &[GridLayout],
    index: usize,
) -> Result<Vec<EpisodeResult>> {
    let fs = cfg.failsafe(cfg.failsafe.source_eval);
    let base = cfg.evaluation_seed(index);
    let n = cfg.eval_episodes_per_layout;
    (0..targets.len() * n)
        .into_par_iter()
        .map(|k| {
            let layout = &targets[k / n];
            let t = rollout(layout, policy, &cfg.reward, fs, seed::child(base, k as u64), Provenance::Factual)?;
            Ok(EpisodeResult {
                layout_id: t.layout_id,
                total_return: t.total_return,
                length: t.episode_length,
                reached_goal: t.reached_goal,
            })
        })
        .collect()
}

/// Plays a trained model on every target layout. The greedy policy is
/// deterministic, so repeated episodes on a layout are identical.
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    model: &DecisionTransformer<f32>,
    targets: &[GridLayout],
) -> Result<Vec<EpisodeResult>> {
    let once = dt::evaluate(model, targets, &cfg.reward)?;
    let n = cfg.eval_episodes_per_layout;
    Ok(once
        .into_iter()
        .flat_map(|r| std::iter::repeat_n(r, n))
        .collect())
}

/// Failure mass at the failure reward plus uniform bins over `(0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub failure_reward: f64,
    pub failure_count: usize,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Returns that fall in neither the failure bin nor `(0, 1]`.
    pub other_count: usize,
}

pub const HISTOGRAM_BINS: usize = 20;

impl Histogram {
    pub fn new(returns: &[f64], failure_reward: f64) -> Self {
        let bins = HISTOGRAM_BINS;
        let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        let (mut failure_count, mut other_count) = (0, 0);
        for &r in returns {
            if r == failure_reward {
                failure_count += 1;
            } else if r > 0.0 && r <= 1.0 {
                let i = ((r * bins as f64).ceil() as usize).clamp(1, bins) - 1;
                counts[i] += 1;
            } else {
                other_count += 1;
            }
        }
        Histogram {
            failure_reward,
            failure_count,
            edges,
            counts,
            other_count,
        }
    }

    pub fn total(&self) -> usize {
        self.failure_count + self.other_count + self.counts.iter().sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed_index: usize,
    pub seed: u64,
    pub episodes: usize,
    pub mean_return: f64,
    pub mean_length: f64,
    pub goal_rate: f64,
    pub histogram: Histogram,
}

impl SeedSummary {
    pub fn new(seed_index: usize, seed: u64, results: &[EpisodeResult], failure_reward: f64) -> Self {
        let n = results.len().max(1) as f64;
        let returns: Vec<f64> = results.iter().map(|r| r.total_return).collect();
        SeedSummary {
            seed_index,
            seed,
            episodes: results.len(),
            mean_return: returns.iter().sum::<f64>() / n,
            mean_length: results.iter().map(|r| r.length as f64).sum::<f64>() / n,
            goal_rate: results.iter().filter(|r| r.reached_goal).count() as f64 / n,
            histogram: Histogram::new(&returns, failure_reward),
        }
    }
}

/// One report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub variant: Variant,
    pub composition: String,
    pub beta: f64,
    pub n_trajectories: usize,
    pub mean_return: f64,
    pub mean_length: f64,
    pub goal_rate: f64,
    pub per_seed: Vec<SeedSummary>,
}

impl AgentSummary {
    pub fn new(cfg: &ExperimentConfig, variant: Variant, n_trajectories: usize, per_seed: Vec<SeedSummary>) -> Self {
        let n = per_seed.len().max(1) as f64;
        let avg = |f: fn(&SeedSummary) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
        AgentSummary {
            variant,
            composition: variant.composition().to_string(),
            beta: if variant.uses_ate() { cfg.beta } else { 0.0 },
            n_trajectories,
            mean_return: avg(|s| s.mean_return),
            mean_length: avg(|s| s.mean_length),
            goal_rate: avg(|s| s.goal_rate),
            per_seed,
        }
    }
}

/// `lhs` goal rate must exceed `rhs` goal rate by at least `margin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub lhs: Variant,
    pub rhs: Variant,
    pub margin: f64,
    pub lhs_goal_rate: f64,
    pub rhs_goal_rate: f64,
    pub passed: bool,
}

/// Goal-rate orderings expected for a scenario.
pub fn expected_orderings(scenario: Scenario) -> Vec<(Variant, Variant, f64)> {
    match scenario {
        Scenario::Easy => vec![
            (Variant::DtFcfAte, Variant::DtFcf, 0.10),
            (Variant::DtFcf, Variant::DtF, 0.10),
            (Variant::DtFcfAte, Variant::Source, 0.20),
        ],
        Scenario::Hard => vec![(Variant::DtFcfAte, Variant::DtF, 0.10)],
    }
}

pub fn check_orderings(scenario: Scenario, agents: &[AgentSummary]) -> Vec<OrderingCheck> {
    let rate = |v: Variant| agents.iter().find(|a| a.variant == v).map(|a| a.goal_rate);
    expected_orderings(scenario)
        .into_iter()
        .filter_map(|(lhs, rhs, margin)| {
            let (l, r) = (rate(lhs)?, rate(rhs)?);
            Some(OrderingCheck {
                lhs,
                rhs,
                margin,
                lhs_goal_rate: l,
                rhs_goal_rate: r,
                // Rounded so that rates like 0.7 - 0.6 compare as 0.1.
                passed: ((l - r - margin) * 1e9).round() >= 0.0,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: Scenario,
    pub master_seed: u64,
    pub training_seeds: Vec<u64>,
    pub agents: Vec<AgentSummary>,
    pub orderings: Vec<OrderingCheck>,
    pub all_orderings_passed: bool,
    pub config: ExperimentConfig,
}

impl RunReport {
    pub fn new(cfg: &ExperimentConfig, agents: Vec<AgentSummary>) -> Self {
        let orderings = check_orderings(cfg.scenario, &agents);
        RunReport {
            scenario: cfg.scenario,
            master_seed: cfg.seed,
            training_seeds: (0..cfg.n_seeds).map(|i| cfg.training_seed(i)).collect(),
            all_orderings_passed: !orderings.is_empty() && orderings.iter().all(|o| o.passed),
            agents,
            orderings,
            config: cfg.clone(),
        }
    }

    pub fn agent(&self, v: Variant) -> Option<&AgentSummary> {
        self.agents.iter().find(|a| a.variant == v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,composition,beta,n_trajectories,mean_return,mean_length,goal_rate\n");
        for a in &self.agents {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                a.variant, a.composition, a.beta, a.n_trajectories, a.mean_return, a.mean_length, a.goal_rate
            ));
        }
        out
    }
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn layouts(&self, which: &str) -> PathBuf {
        self.root.join("layouts").join(format!("{which}.json"))
    }

    pub fn policy(&self) -> PathBuf {
        self.root.join("data").join("source_policy.json")
    }

    pub fn trajectories(&self, which: &str) -> PathBuf {
        self.root.join("data").join(format!("{which}.jsonl"))
    }

    pub fn ate(&self) -> PathBuf {
        self.root.join("data").join("ate.json")
    }

    pub fn data_manifest(&self) -> PathBuf {
        self.root.join("data").join("manifest.json")
    }

    pub fn checkpoint(&self, v: Variant, index: usize) -> PathBuf {
        self.root.join("models").join(format!("{v}-s{index}.json"))
    }

    pub fn loss_trace(&self, v: Variant, index: usize) -> PathBuf {
        self.root.join("models").join(format!("{v}-s{index}.loss.csv"))
    }

    pub fn eval(&self, v: Variant, ext: &str) -> PathBuf {
        self.root.join("eval").join(format!("{v}.{ext}"))
    }

    pub fn report(&self, ext: &str) -> PathBuf {
        self.root.join(format!("report.{ext}"))
    }

    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CfdtError::Incomplete(format!("missing {}", path.display())))
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CfdtError::Incomplete(format!("missing {}", path.display()))
        } else {
            io_err(path)(e)
        }
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read(path)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub source_layout: LayoutId,
    pub n_counterfactual_layouts: usize,
    pub n_target_layouts: usize,
    /// Size of the intersection between target ids and training ids.
    pub target_overlap: usize,
    pub seeds: BTreeMap<String, u64>,
}

pub fn gen(cfg: &ExperimentConfig, run: &RunDir) -> Result<Manifest> {
    cfg.validate()?;
    let layouts = generate_layouts(cfg)?;
    write(&run.layouts("source"), layouts.source.to_json() + "\n")?;
    write_json(&run.layouts("counterfactual"), &layouts.counterfactual)?;
    write_json(&run.layouts("target"), &layouts.target)?;
    let seeds = BTreeMap::from([
        ("master".to_string(), cfg.seed),
        ("source_layout".to_string(), layouts.source.layout_seed),
        ("exploration".to_string(), seed::derive(cfg.seed, Stream::Exploration, 0)),
    ]);
    let manifest = Manifest {
        config: cfg.clone(),
        source_layout: layouts.source.id(),
        n_counterfactual_layouts: layouts.counterfactual.len(),
        n_target_layouts: layouts.target.len(),
        target_overlap: layouts.leaked_targets(),
        seeds,
    };
    write_json(&run.manifest(), &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(run: &RunDir) -> Result<Manifest> {
    let m: Manifest = read_json(&run.manifest())?;
    m.config.validate()?;
    Ok(m)
}

fn parse_layouts(text: &str) -> Result<Vec<GridLayout>> {
    let layouts: Vec<GridLayout> = serde_json::from_str(text)?;
    layouts.iter().try_for_each(GridLayout::validate)?;
    Ok(layouts)
}

pub fn load_layouts(run: &RunDir) -> Result<Layouts> {
    Ok(Layouts {
        source: GridLayout::from_json(&read(&run.layouts("source"))?)?,
        counterfactual: parse_layouts(&read(&run.layouts("counterfactual"))?)?,
        target: parse_layouts(&read(&run.layouts("target"))?)?,
    })
}

pub fn collect(run: &RunDir) -> Result<Datasets> {
    let cfg = load_manifest(run)?.config;
    let layouts = load_layouts(run)?;
    let policy = PolicyTable::solve(&layouts.source, &cfg.reward)?;
    let data = collect_datasets(&cfg, &layouts, &policy)?;
    write(&run.policy(), policy.to_json() + "\n")?;
    write_trajectories(&run.trajectories("factual"), &data.factual)?;
    write_trajectories(&run.trajectories("counterfactual"), &data.counterfactual)?;
    write_json(&run.ate(), &data.ate)?;
    write_json(
        &run.data_manifest(),
        &serde_json::json!({
            "factual": {
                "trajectories": data.factual.len(),
                "rollout_seeds": data.factual.iter().map(|t| t.seed).collect::<Vec<_>>(),
                "failsafe": cfg.failsafe.collect,
            },
            "counterfactual": {
                "trajectories": data.counterfactual.len(),
                "rollout_seeds": data.counterfactual.iter().map(|t| t.seed).collect::<Vec<_>>(),
                "failsafe": cfg.failsafe.collect,
            },
            "ate": { "rows": data.ate.len(), "rollouts": cfg.ate_rollouts, "failsafe": cfg.failsafe.ate },
        }),
    )?;
    Ok(data)
}

pub fn load_datasets(run: &RunDir) -> Result<Datasets> {
    Ok(Datasets {
        factual: read_trajectories(&require(run.trajectories("factual"))?)?,
        counterfactual: read_trajectories(&require(run.trajectories("counterfactual"))?)?,
        ate: read_json(&run.ate())?,
    })
}

fn loss_csv(trace: &[LossPoint]) -> String {
    let mut out = String::from("step,loss\n");
    for p in trace {
        out.push_str(&format!("{},{}\n", p.step, p.loss));
    }
    out
}

/// Trains every seed of `variant` and writes checkpoints and loss traces.
pub fn train(run: &RunDir, variant: Variant) -> Result<()> {
    let cfg = load_manifest(run)?.config;
    let layouts = load_layouts(run)?;
    let data = load_datasets(run)?;
    let ds = variant_dataset(&cfg, variant, &data, &layouts.source)?;
    let book = layouts.book();
    let models = (0..cfg.n_seeds)
        .into_par_iter()
        .map(|i| train_variant(&cfg, &ds, &book, i))
        .collect::<Result<Vec<_>>>()?;
    for (i, (model, trace)) in models.iter().enumerate() {
        write(&run.checkpoint(variant, i), model.to_checkpoint().to_json()?)?;
        write(&run.loss_trace(variant, i), loss_csv(trace))?;
    }
    Ok(())
}

pub fn load_model(run: &RunDir, variant: Variant, index: usize) -> Result<DecisionTransformer<f32>> {
    let ckpt = Checkpoint::from_json(&read(&run.checkpoint(variant, index))?)?;
    DecisionTransformer::from_checkpoint(&ckpt)
}

fn episodes_csv(summary: &AgentSummary, per_seed: &[(usize, Vec<EpisodeResult>)]) -> String {
    let mut out = String::from("layout_id,total_return,length,reached_goal,agent_variant,seed\n");
    for ((_, results), s) in per_seed.iter().zip(&summary.per_seed) {
        for r in results {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.layout_id, r.total_return, r.length, r.reached_goal, summary.variant, s.seed
            ));
        }
    }
    out
}

/// Evaluates `variant` on the target layouts, all training seeds.
pub fn eval(run: &RunDir, variant: Variant) -> Result<AgentSummary> {
    let cfg = load_manifest(run)?.config;
    let layouts = load_layouts(run)?;
    let (results, n_traj) = if variant == Variant::Source {
        let policy = PolicyTable::solve(&layouts.source, &cfg.reward)?;
        let r = (0..cfg.n_seeds)
            .map(|i| Ok((i, evaluate_source(&cfg, &policy, &layouts.target, i)?)))
            .collect::<Result<Vec<_>>>()?;
        (r, 0)
    } else {
        let data = load_datasets(run)?;
        let n = variant_dataset(&cfg, variant, &data, &layouts.source)?.len();
        let r = (0..cfg.n_seeds)
            .map(|i| Ok((i, evaluate_model(&cfg, &load_model(run, variant, i)?, &layouts.target)?)))
            .collect::<Result<Vec<_>>>()?;
        (r, n)
    };
    let summary = summarize(&cfg, variant, n_traj, &results);
    write(&run.eval(variant, "csv"), episodes_csv(&summary, &results))?;
    write_json(&run.eval(variant, "json"), &summary)?;
    Ok(summary)
}

pub fn summarize(
    cfg: &ExperimentConfig,
    variant: Variant,
    n_trajectories: usize,
    results: &[(usize, Vec<EpisodeResult>)],
) -> AgentSummary {
    let per_seed = results
        .iter()
        .map(|(i, r)| {
            let seed = if variant == Variant::Source {
                cfg.evaluation_seed(*i)
            } else {
                cfg.training_seed(*i)
            };
            SeedSummary::new(*i, seed, r, cfg.reward.failure_reward)
        })
        .collect();
    AgentSummary::new(cfg, variant, n_trajectories, per_seed)
}

/// Consolidates the six evaluation fragments.
pub fn report(run: &RunDir) -> Result<RunReport> {
    let cfg = load_manifest(run)?.config;
    let agents = Variant::ALL
        .into_iter()
        .map(|v| read_json::<AgentSummary>(&run.eval(v, "json")))
        .collect::<Result<Vec<_>>>()?;
    let report = RunReport::new(&cfg, agents);
    write_json(&run.report("json"), &report)?;
    write(&run.report("csv"), report.to_csv())?;
    Ok(report)
}

/// Every stage in order. Wall-clock per stage goes to `timings.json`, kept
/// apart from the report so reports from identical runs compare equal.
pub fn run_all(cfg: &ExperimentConfig, run: &RunDir, mut progress: impl FnMut(&str)) -> Result<RunReport> {
    let mut timings = BTreeMap::new();
    let mut timed = |name: &str, progress: &mut dyn FnMut(&str), f: &mut dyn FnMut() -> Result<()>| {
        progress(name);
        let start = std::time::Instant::now();
        let r = f();
        timings.insert(name.to_string(), start.elapsed().as_secs_f64());
        r
    };
    timed("gen", &mut progress, &mut || gen(cfg, run).map(drop))?;
    timed("collect", &mut progress, &mut || collect(run).map(drop))?;
    for v in Variant::TRAINED {
        timed(&format!("train {v}"), &mut progress, &mut || train(run, v))?;
    }
    for v in Variant::ALL {
        timed(&format!("eval {v}"), &mut progress, &mut || eval(run, v).map(drop))?;
    }
    let report = report(run)?;
    write_json(&run.timings(), &timings)?;
    Ok(report)
}
