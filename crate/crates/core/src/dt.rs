//! Decision transformer over (return-to-go, observation, action) triplets.
//!
//! Tokens are interleaved as `R_0, s_0, a_0, R_1, s_1, a_1, ...`, each
//! triplet sharing one timestep embedding. Action logits are read at every
//! observation token, which under the causal mask sees the current return
//! and observation plus the full preceding history, but not the action it
//! predicts.

use std::collections::BTreeMap;

use cfdt_nn::{AdamConfig, Checkpoint, OptimizerState, ParamStore, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_batch_with, Batch, LayoutBook, WeightedDataset, WeightedSampler};
use crate::error::{CfdtError, Result};
use crate::gridworld::{observation_len, step, Action, EnvState, GridLayout, LayoutId, Pose, RewardSpec};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DtConfig {
    /// Context length K in triplets.
    pub context: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub n_actions: usize,
    pub obs_dim: usize,
    /// Size of the timestep embedding table; later steps share the last row.
    pub max_timestep: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub training_steps: usize,
    pub log_every: usize,
    /// Return-to-go the policy is conditioned on at evaluation.
    pub target_return: f64,
    pub seed: u64,
}

impl Default for DtConfig {
    fn default() -> Self {
        DtConfig {
            context: 20,
            embed_dim: 64,
            layers: 3,
            heads: 4,
            dropout: 0.1,
            n_actions: Action::COUNT,
            obs_dim: observation_len(8, 8),
            max_timestep: 100,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            warmup_steps: 0,
            batch_size: 64,
            training_steps: 10_000,
            log_every: 100,
            target_return: 1.0,
            seed: 0,
        }
    }
}

impl DtConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CfdtError::Config(m));
        if self.context < 1 {
            return bad("context must be at least 1".into());
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.n_actions != Action::COUNT {
            return bad(format!("n_actions must be {}", Action::COUNT));
        }
        if self.obs_dim == 0 || self.max_timestep == 0 || self.batch_size == 0 || self.log_every == 0 {
            return bad("obs_dim, max_timestep, batch_size and log_every must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be finite and non-negative", self.weight_decay));
        }
        if !self.target_return.is_finite() {
            return bad("target_return must be finite".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Parameter count implied by the configuration, computed without
    /// allocating; `None` on overflow.
    pub fn num_parameters(&self) -> Option<usize> {
        let d = self.embed_dim as u128;
        let na = self.n_actions as u128;
        let block = 12 * d * d + 13 * d;
        let total = 2 * d
            + (self.obs_dim as u128 + 1) * d
            + (na + self.max_timestep as u128) * d
            + 4 * d
            + self.layers as u128 * block
            + d * na
            + na;
        usize::try_from(total).ok()
    }
}

#[derive(Debug, Clone)]
struct BlockSlots {
    ln1: (usize, usize),
    q: (usize, usize),
    k: (usize, usize),
    v: (usize, usize),
    proj: (usize, usize),
    ln2: (usize, usize),
    fc: (usize, usize),
    out: (usize, usize),
}

#[derive(Debug, Clone)]
struct Slots {
    ret: (usize, usize),
    obs: (usize, usize),
    act: usize,
    pos: usize,
    ln_in: (usize, usize),
    blocks: Vec<BlockSlots>,
    ln_out: (usize, usize),
    head: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct DecisionTransformer<T> {
    config: DtConfig,
    params: ParamStore<T>,
    slots: Slots,
}

/// Past triplet fed back to the model while acting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryStep {
    pub return_to_go: f64,
    pub pose: Pose,
    pub action: Action,
}

fn linear<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    init: &Normal<f64>,
    rng: &mut R,
) -> (usize, usize) {
    let w: Vec<T> = (0..fan_in * fan_out).map(|_| T::from_f64(init.sample(rng))).collect();
    let wi = store.push(format!("{name}.weight"), Tensor::new(vec![fan_in, fan_out], w).unwrap(), true);
    let bi = store.push(format!("{name}.bias"), Tensor::zeros(vec![fan_out]), false);
    (wi, bi)
}

fn norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> (usize, usize) {
    let g = store.push(format!("{name}.gamma"), Tensor::full(vec![dim], T::one()), false);
    let b = store.push(format!("{name}.beta"), Tensor::zeros(vec![dim]), false);
    (g, b)
}

impl<T: Scalar> DecisionTransformer<T> {
    /// Fresh model with N(0, 0.02) weights, zero biases and unit norms.
    pub fn new(config: DtConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, Stream::Training, 1));
        let init = Normal::new(0.0, 0.02).expect("valid normal");
        let d = config.embed_dim;
        let mut p = ParamStore::new();
        let ret = linear(&mut p, "embed_return", 1, d, &init, &mut rng);
        let obs = linear(&mut p, "embed_obs", config.obs_dim, d, &init, &mut rng);
        let table = |rows: usize, rng: &mut ChaCha8Rng| {
            let v: Vec<T> = (0..rows * d).map(|_| T::from_f64(init.sample(rng))).collect();
            Tensor::new(vec![rows, d], v).unwrap()
        };
        let act = p.push("embed_action.table", table(config.n_actions, &mut rng), false);
        let pos = p.push("embed_timestep.table", table(config.max_timestep, &mut rng), false);
        let ln_in = norm(&mut p, "ln_in", d);
        let blocks = (0..config.layers)
            .map(|i| BlockSlots {
                ln1: norm(&mut p, &format!("block{i}.ln1"), d),
                q: linear(&mut p, &format!("block{i}.attn.q"), d, d, &init, &mut rng),
                k: linear(&mut p, &format!("block{i}.attn.k"), d, d, &init, &mut rng),
                v: linear(&mut p, &format!("block{i}.attn.v"), d, d, &init, &mut rng),
                proj: linear(&mut p, &format!("block{i}.attn.proj"), d, d, &init, &mut rng),
                ln2: norm(&mut p, &format!("block{i}.ln2"), d),
                fc: linear(&mut p, &format!("block{i}.mlp.fc"), d, 4 * d, &init, &mut rng),
                out: linear(&mut p, &format!("block{i}.mlp.out"), 4 * d, d, &init, &mut rng),
            })
            .collect();
        let ln_out = norm(&mut p, "ln_out", d);
        let head = linear(&mut p, "action_head", d, config.n_actions, &init, &mut rng);
        Ok(DecisionTransformer {
            config,
            params: p,
            slots: Slots {
                ret,
                obs,
                act,
                pos,
                ln_in,
                blocks,
                ln_out,
                head,
            },
        })
    }

    pub fn config(&self) -> &DtConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), trainable)).collect()
    }

    /// Action logits `[batch * K, n_actions]` for a batch of windows, using
    /// parameter leaves previously produced by [`bind`](Self::bind).
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        batch: &Batch,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        let c = &self.config;
        let (b, k) = (batch.batch, batch.k);
        if batch.obs_dim != c.obs_dim || k > c.context || batch.returns_to_go.len() != b * k {
            return Err(CfdtError::Usage(format!(
                "batch ({b}x{k}, obs {}) does not fit model (K {}, obs {})",
                batch.obs_dim, c.context, c.obs_dim
            )));
        }
        let rate = if dropout_rng.is_some() { c.dropout } else { 0.0 };
        let mut drop = |tape: &mut Tape<T>, x: Var| match dropout_rng.as_deref_mut() {
            Some(r) => tape.dropout(x, rate, r),
            None => x,
        };
        let n = b * k;
        let s = &self.slots;
        let rtg = tape.constant(Tensor::new(
            vec![n, 1],
            batch.returns_to_go.iter().map(|&v| T::from_f64(v)).collect(),
        )?);
        let obs = tape.constant(Tensor::new(
            vec![n, c.obs_dim],
            batch.observations.iter().map(|&v| T::from_f64(v)).collect(),
        )?);
        let steps: Vec<usize> = batch.timesteps.iter().map(|&t| t.min(c.max_timestep - 1)).collect();
        let pos = tape.embedding(params[s.pos], &steps)?;

        let r = tape.matmul(rtg, params[s.ret.0])?;
        let r = tape.add_bias(r, params[s.ret.1])?;
        let r = tape.add(r, pos)?;
        let o = tape.matmul(obs, params[s.obs.0])?;
        let o = tape.add_bias(o, params[s.obs.1])?;
        let o = tape.add(o, pos)?;
        let a = tape.embedding(params[s.act], &batch.actions)?;
        let a = tape.add(a, pos)?;

        // Stacked [R; s; a] rows reordered into per-window triplets.
        let stacked = tape.concat_rows(&[r, o, a])?;
        let seq = 3 * k;
        let mut order = Vec::with_capacity(b * seq);
        let mut valid = Vec::with_capacity(b * seq);
        for bi in 0..b {
            for t in 0..k {
                for j in 0..3 {
                    order.push(j * n + bi * k + t);
                    valid.push(batch.mask[bi * k + t] > 0.0);
                }
            }
        }
        let x = tape.select_rows(stacked, &order)?;
        let x = tape.layer_norm(x, params[s.ln_in.0], params[s.ln_in.1])?;
        let mut x = drop(tape, x);

        for blk in &s.blocks {
            let h = tape.layer_norm(x, params[blk.ln1.0], params[blk.ln1.1])?;
            let proj = |tape: &mut Tape<T>, slot: (usize, usize)| -> Result<Var> {
                let y = tape.matmul(h, params[slot.0])?;
                Ok(tape.add_bias(y, params[slot.1])?)
            };
            let q = proj(tape, blk.q)?;
            let kk = proj(tape, blk.k)?;
            let v = proj(tape, blk.v)?;
            let att = tape.causal_attention(q, kk, v, b, seq, c.heads, &valid)?;
            let att = tape.matmul(att, params[blk.proj.0])?;
            let att = tape.add_bias(att, params[blk.proj.1])?;
            let att = drop(tape, att);
            x = tape.add(x, att)?;

            let h = tape.layer_norm(x, params[blk.ln2.0], params[blk.ln2.1])?;
            let m = tape.matmul(h, params[blk.fc.0])?;
            let m = tape.add_bias(m, params[blk.fc.1])?;
            let m = tape.gelu(m);
            let m = tape.matmul(m, params[blk.out.0])?;
            let m = tape.add_bias(m, params[blk.out.1])?;
            let m = drop(tape, m);
            x = tape.add(x, m)?;
        }
        let x = tape.layer_norm(x, params[s.ln_out.0], params[s.ln_out.1])?;
        let state_rows: Vec<usize> = (0..n).map(|i| (i / k) * seq + 3 * (i % k) + 1).collect();
        let x = tape.select_rows(x, &state_rows)?;
        let logits = tape.matmul(x, params[s.head.0])?;
        Ok(tape.add_bias(logits, params[s.head.1])?)
    }

    /// Masked cross-entropy of the predicted actions.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        batch: &Batch,
        dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        let logits = self.forward(tape, params, batch, dropout_rng)?;
        let weights: Vec<T> = batch.mask.iter().map(|&m| T::from_f64(m)).collect();
        Ok(tape.cross_entropy(logits, &batch.actions, &weights)?)
    }

    /// Logits without dropout, as plain values `[batch * K * n_actions]`.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let out = self.forward::<ChaCha8Rng>(&mut tape, &params, batch, None)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Builds the window ending at the current observation: up to `K - 1`
    /// most recent history triplets followed by `(rtg, current, ·)`.
    pub fn window(&self, layout: &GridLayout, history: &[HistoryStep], current: Pose, rtg: f64) -> Batch {
        let k = self.config.context;
        let keep = history.len().min(k - 1);
        let recent = &history[history.len() - keep..];
        let t0 = history.len() - keep;
        let len = keep + 1;
        let mut batch = Batch::zeros(1, k, self.config.obs_dim);
        let pad = k - len;
        for (i, h) in recent.iter().chain(std::iter::once(&HistoryStep {
            return_to_go: rtg,
            pose: current,
            action: Action::TurnLeft,
        }))
        .enumerate()
        {
            let slot = pad + i;
            batch.returns_to_go[slot] = h.return_to_go;
            batch.actions[slot] = h.action.index();
            batch.timesteps[slot] = t0 + i;
            batch.mask[slot] = 1.0;
            crate::gridworld::encode_observation(
                layout,
                h.pose,
                &mut batch.observations[slot * self.config.obs_dim..(slot + 1) * self.config.obs_dim],
            );
        }
        batch
    }

    /// Greedy action at the current observation; ties go to the lowest index.
    pub fn act(&self, layout: &GridLayout, history: &[HistoryStep], current: Pose, rtg: f64) -> Result<Action> {
        let batch = self.window(layout, history, current, rtg);
        let logits = self.predict(&batch)?;
        let na = self.config.n_actions;
        let last = &logits[(batch.k - 1) * na..batch.k * na];
        Ok(Action::from_index(argmax(last)).expect("action index in range"))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.params
            .to_checkpoint(serde_json::to_value(&self.config).expect("config serializes"))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: DtConfig = serde_json::from_value(ckpt.config.clone())?;
        config.validate()?;
        let stored: usize = ckpt.params.iter().map(|p| p.values.len()).sum();
        if config.num_parameters() != Some(stored) {
            return Err(CfdtError::Config(format!(
                "checkpoint holds {stored} values but its config implies {:?}",
                config.num_parameters()
            )));
        }
        let mut model = DecisionTransformer::new(config)?;
        model.params.load_checkpoint(ckpt)?;
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> DecisionTransformer<U> {
        DecisionTransformer {
            config: self.config.clone(),
            params: self.params.cast(),
            slots: self.slots.clone(),
        }
    }
}

/// Index of the first maximum.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

/// Fits `model` on weighted windows drawn from `ds`. Sampling, dropout and
/// initialization all derive from `cfg.seed`, so a run is reproducible.
pub fn train(
    model: &mut DecisionTransformer<f32>,
    ds: &WeightedDataset,
    layouts: &LayoutBook,
) -> Result<Vec<LossPoint>> {
    let cfg = model.config().clone();
    let sampler = WeightedSampler::new(ds)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, Stream::Training, 2));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, Stream::Training, 3));
    let mut opt = OptimizerState::new(
        AdamConfig {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut trace = Vec::new();
    for step_i in 0..cfg.training_steps {
        let batch = sample_batch_with(ds, &sampler, layouts, cfg.batch_size, cfg.context, &mut batch_rng)?;
        let mut tape = Tape::<f32>::new();
        let params = model.bind(&mut tape, true);
        let loss = model.loss(&mut tape, &params, &batch, Some(&mut drop_rng))?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(CfdtError::Training(format!("loss became {value} at step {step_i}")));
        }
        if step_i % cfg.log_every == 0 {
            trace.push(LossPoint { step: step_i, loss: value });
        }
        let grads = tape.backward(loss)?;
        let grads: Vec<Vec<f32>> = params
            .iter()
            .zip(model.params().iter())
            .map(|(&v, p)| grads.get_or_zeros(v, p.value.len()))
            .collect();
        if cfg.warmup_steps > 0 {
            let frac = ((step_i + 1) as f64 / cfg.warmup_steps as f64).min(1.0);
            opt.config.lr = cfg.learning_rate * frac;
        }
        opt.step(model.params_mut(), &grads)?;
    }
    Ok(trace)
}

/// Outcome of one evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub layout_id: LayoutId,
    pub total_return: f64,
    pub length: u32,
    pub reached_goal: bool,
}

/// Plays one greedy episode conditioned on `target_return`, decrementing
/// the return-to-go by each received reward.
pub fn run_episode<T: Scalar>(
    model: &DecisionTransformer<T>,
    layout: &GridLayout,
    spec: &RewardSpec,
    target_return: f64,
) -> Result<EpisodeResult> {
    let mut state = EnvState::reset(layout);
    let mut history: Vec<HistoryStep> = Vec::new();
    let mut rtg = target_return;
    let mut total = 0.0;
    loop {
        let action = model.act(layout, &history, state.pose, rtg)?;
        let out = step(&state, action, spec)?;
        history.push(HistoryStep {
            return_to_go: rtg,
            pose: state.pose,
            action,
        });
        rtg -= out.reward;
        total += out.reward;
        state = out.state;
        if out.done {
            return Ok(EpisodeResult {
                layout_id: layout.id(),
                total_return: total,
                length: state.step_count,
                reached_goal: state.at_goal(),
            });
        }
    }
}

/// One episode per layout, in layout order.
pub fn evaluate<T: Scalar>(
    model: &DecisionTransformer<T>,
    layouts: &[GridLayout],
    spec: &RewardSpec,
) -> Result<Vec<EpisodeResult>> {
    let target = model.config().target_return;
    layouts
        .par_iter()
        .map(|l| run_episode(model, l, spec, target))
        .collect()
}

/// Fraction of steps where the greedy prediction matches the recorded
/// action, using teacher-forced windows over each whole trajectory.
pub fn action_accuracy<T: Scalar>(
    model: &DecisionTransformer<T>,
    ds: &WeightedDataset,
    layouts: &LayoutBook,
) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for traj in &ds.trajectories {
        let layout = layouts
            .get(&traj.layout_id)
            .ok_or_else(|| CfdtError::Data(format!("layout {} not found", traj.layout_id)))?;
        let history: Vec<HistoryStep> = traj
            .steps
            .iter()
            .zip(&traj.returns_to_go)
            .map(|(s, &r)| HistoryStep {
                return_to_go: r,
                pose: s.pose,
                action: s.action,
            })
            .collect();
        for t in 0..history.len() {
            let a = model.act(layout, &history[..t], history[t].pose, history[t].return_to_go)?;
            hit += (a == history[t].action) as usize;
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Per-parameter name to element count, for reporting.
pub fn parameter_summary<T: Scalar>(model: &DecisionTransformer<T>) -> BTreeMap<String, usize> {
    model.params().iter().map(|p| (p.name.clone(), p.value.len())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_weights, rollout, Provenance};
    use crate::gridworld::generate_layout;
    use crate::policy::PolicyTable;

    fn tiny() -> DtConfig {
        DtConfig {
            context: 4,
            embed_dim: 8,
            layers: 1,
            heads: 2,
            dropout: 0.0,
            obs_dim: observation_len(5, 5),
            max_timestep: 20,
            ..DtConfig::default()
        }
    }

    fn sample(cfg: &DtConfig, batch: usize, seed: u64) -> (Batch, LayoutBook) {
        let spec = RewardSpec { horizon: 20, ..RewardSpec::default() };
        let l = generate_layout(seed, 5, 5, 2).unwrap();
        let p = PolicyTable::solve(&l, &spec).unwrap();
        let t = rollout(&l, &p, &spec, None, 0, Provenance::Factual).unwrap();
        let ds = build_weights(vec![t], &BTreeMap::from([(l.id(), 0.0)]), 0.0).unwrap();
        let book = crate::data::layout_book([&l]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (crate::data::sample_batch(&ds, &book, batch, cfg.context, &mut rng).unwrap(), book)
    }

    #[test]
    fn logits_have_batch_by_context_by_actions_shape() {
        let cfg = DtConfig { context: 20, embed_dim: 16, layers: 1, heads: 2, ..tiny() };
        let m = DecisionTransformer::<f32>::new(cfg.clone()).unwrap();
        let (b, _) = sample(&cfg, 2, 1);
        assert_eq!(m.predict(&b).unwrap().len(), 2 * 20 * 3);
    }

    #[test]
    fn heads_must_divide_embedding() {
        assert!(DecisionTransformer::<f32>::new(DtConfig { embed_dim: 10, heads: 4, ..tiny() }).is_err());
        assert!(DecisionTransformer::<f32>::new(DtConfig { context: 0, ..tiny() }).is_err());
    }

    #[test]
    fn batch_rows_are_independent() {
        let cfg = tiny();
        let m = DecisionTransformer::<f64>::new(cfg.clone()).unwrap();
        let (b1, _) = sample(&cfg, 1, 3);
        let (b2, _) = sample(&cfg, 1, 4);
        let join = |a: &Batch, b: &Batch| {
            let mut out = Batch::zeros(2, a.k, a.obs_dim);
            out.returns_to_go = [a.returns_to_go.clone(), b.returns_to_go.clone()].concat();
            out.mask = [a.mask.clone(), b.mask.clone()].concat();
            out.observations = [a.observations.clone(), b.observations.clone()].concat();
            out.actions = [a.actions.clone(), b.actions.clone()].concat();
            out.timesteps = [a.timesteps.clone(), b.timesteps.clone()].concat();
            out
        };
        let ab = m.predict(&join(&b1, &b2)).unwrap();
        let ba = m.predict(&join(&b2, &b1)).unwrap();
        let half = ab.len() / 2;
        assert_eq!(ab[..half], ba[half..]);
        assert_eq!(ab[half..], ba[..half]);
    }

    #[test]
    fn untrained_loss_is_near_uniform_entropy() {
        let cfg = DtConfig { obs_dim: observation_len(8, 8), ..DtConfig::default() };
        let m = DecisionTransformer::<f32>::new(cfg.clone()).unwrap();
        let spec = RewardSpec::default();
        let l = generate_layout(2, 8, 8, 6).unwrap();
        let p = PolicyTable::solve(&l, &spec).unwrap();
        let t = rollout(&l, &p, &spec, None, 0, Provenance::Factual).unwrap();
        let ds = build_weights(vec![t], &BTreeMap::from([(l.id(), 0.0)]), 0.0).unwrap();
        let book = crate::data::layout_book([&l]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = crate::data::sample_batch(&ds, &book, 8, cfg.context, &mut rng).unwrap();
        let mut tape = Tape::new();
        let params = m.bind(&mut tape, false);
        let loss = m.loss::<ChaCha8Rng>(&mut tape, &params, &batch, None).unwrap();
        assert!((tape.value(loss).data()[0] as f64 - 3f64.ln()).abs() < 0.1);
    }

    #[test]
    fn window_keeps_only_recent_history() {
        let cfg = tiny();
        let m = DecisionTransformer::<f32>::new(cfg.clone()).unwrap();
        let l = generate_layout(1, 5, 5, 2).unwrap();
        let h: Vec<HistoryStep> = (0..9)
            .map(|i| HistoryStep { return_to_go: i as f64, pose: l.start, action: Action::Forward })
            .collect();
        let w = m.window(&l, &h, l.start, 0.5);
        assert_eq!(w.returns_to_go, vec![6.0, 7.0, 8.0, 0.5]);
        assert_eq!(w.timesteps, vec![6, 7, 8, 9]);
        let empty = m.window(&l, &[], l.start, 0.5);
        assert_eq!(empty.mask, vec![0.0, 0.0, 0.0, 1.0]);
        // Older history beyond the window does not change the choice.
        let mut other = h.clone();
        other[0].return_to_go = -5.0;
        assert_eq!(m.act(&l, &h, l.start, 0.5).unwrap(), m.act(&l, &other, l.start, 0.5).unwrap());
    }

    #[test]
    fn argmax_prefers_lowest_index_and_ignores_shift() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0f64, 2.0, 2.0]), 0);
        let v = [0.3f64, -1.0, 0.29];
        let shifted: Vec<f64> = v.iter().map(|x| x + 100.0).collect();
        assert_eq!(argmax(&v), argmax(&shifted));
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let cfg = tiny();
        let m = DecisionTransformer::<f32>::new(cfg.clone()).unwrap();
        let text = m.to_checkpoint().to_json().unwrap();
        let back = DecisionTransformer::<f32>::from_checkpoint(&Checkpoint::from_json(&text).unwrap()).unwrap();
        let (b, _) = sample(&cfg, 2, 5);
        assert_eq!(m.predict(&b).unwrap(), back.predict(&b).unwrap());
        let mut huge = m.to_checkpoint();
        huge.config["embed_dim"] = serde_json::json!(1usize << 40);
        huge.config["heads"] = serde_json::json!(1);
        assert!(DecisionTransformer::<f32>::from_checkpoint(&huge).is_err());
    }

    #[test]
    fn configured_parameter_count_matches_allocation() {
        for (layers, d, heads) in [(0, 4, 1), (1, 8, 2), (3, 12, 3)] {
            let cfg = DtConfig { layers, embed_dim: d, heads, ..tiny() };
            let m = DecisionTransformer::<f32>::new(cfg.clone()).unwrap();
            assert_eq!(cfg.num_parameters(), Some(m.num_parameters()));
        }
    }
}
