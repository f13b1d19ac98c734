//! On-policy training (A2C, PPO-clip) on rollouts collected straight from
//! the data store.

use std::time::Instant;

use indexmap::IndexMap;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_store::{DataStore, StoreError, OBSERVATIONS, REWARDS, SAMPLED_ACTIONS, DONE};
use crate::policy_model::{clip_grad_norm, Adam, PolicyDims, PolicyError, PolicyMap, PolicyParams};
use crate::reset_manager::{done_envs, ResetManager};
use crate::sampler::{sample_into, LogitShape, SamplerError};
use crate::step_engine::{Engine, EngineError, StepHooks};
use crate::vec_env::{EnvSpec, VecEnv};

/// Name of the optional per-agent flag array; rows of inactive agents are
/// excluded from every loss term.
pub const ACTIVE_MASK: &str = "active";

/// Rows per forward/backward chunk during the update.
const CHUNK_ROWS: usize = 8192;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("non-finite {what} for policy {tag:?} at iteration {iteration}")]
    Divergence {
        iteration: u64,
        tag: String,
        what: &'static str,
    },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    A2c,
    Ppo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub rollout_horizon: usize,
    pub learning_rate: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub algorithm: Algorithm,
    pub ppo_clip: f64,
    pub ppo_epochs: usize,
    pub max_grad_norm: f64,
    pub iterations: usize,
    pub seed: u64,
    pub hidden_sizes: Vec<usize>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            rollout_horizon: 100,
            learning_rate: 3e-4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            algorithm: Algorithm::A2c,
            ppo_clip: 0.2,
            ppo_epochs: 4,
            max_grad_norm: 0.5,
            iterations: 100,
            seed: 0,
            hidden_sizes: vec![64, 64],
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |m: &str| Err(TrainerError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie strictly between 0 and 1");
        }
        if self.rollout_horizon == 0 {
            return bad("rollout_horizon must be at least 1");
        }
        if !(self.ppo_clip > 0.0) {
            return bad("ppo_clip must be positive");
        }
        if self.algorithm == Algorithm::Ppo && self.ppo_epochs == 0 {
            return bad("ppo_epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive and finite");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive");
        }
        if self.hidden_sizes.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        Ok(())
    }
}

/// Experience of one policy tag over a rollout. Rows are ordered by step,
/// then env, then agent (ascending ids within the tag).
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub horizon: usize,
    /// Rows per step: envs × agents of this tag.
    pub width: usize,
    pub categories: usize,
    pub obs: Array2<f64>,
    /// `categories` entries per row.
    pub actions: Vec<i32>,
    pub rewards: Vec<f64>,
    /// The env finished on this transition.
    pub dones: Vec<bool>,
    pub values: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// The agent was active when it observed and acted.
    pub active: Vec<bool>,
    /// Value estimate and activity after the last transition.
    pub bootstrap: Vec<f64>,
    pub bootstrap_active: Vec<bool>,
}

impl RolloutBatch {
    fn new(horizon: usize, width: usize, obs_dim: usize, categories: usize) -> Self {
        let rows = horizon * width;
        Self {
            horizon,
            width,
            categories,
            obs: Array2::zeros((rows, obs_dim)),
            actions: vec![0; rows * categories],
            rewards: vec![0.0; rows],
            dones: vec![false; rows],
            values: vec![0.0; rows],
            log_probs: vec![0.0; rows],
            active: vec![true; rows],
            bootstrap: vec![0.0; width],
            bootstrap_active: vec![true; width],
        }
    }

    pub fn rows(&self) -> usize {
        self.horizon * self.width
    }

    /// Per-row flag ending the discounted sum: the episode ended, or the
    /// agent is inactive from the next step on.
    pub fn terminals(&self) -> Vec<bool> {
        (0..self.rows())
            .map(|i| {
                let next_active = if i + self.width < self.rows() {
                    self.active[i + self.width]
                } else {
                    self.bootstrap_active[i % self.width]
                };
                self.dones[i] || !next_active
            })
            .collect()
    }

    pub fn returns(&self, gamma: f64) -> Vec<f64> {
        compute_returns(&self.rewards, &self.terminals(), &self.bootstrap, gamma, self.width)
    }
}

/// `R_t = r_t + γ R_{t+1}` walked backwards over a step-major layout of
/// `width` columns. Terminal rows drop the tail; the last step bootstraps
/// from `bootstrap`.
pub fn compute_returns(rewards: &[f64], terminals: &[bool], bootstrap: &[f64], gamma: f64, width: usize) -> Vec<f64> {
    assert_eq!(rewards.len(), terminals.len());
    assert_eq!(bootstrap.len(), width);
    assert_eq!(rewards.len() % width.max(1), 0);
    let mut out = vec![0.0; rewards.len()];
    let mut next = bootstrap.to_vec();
    for t in (0..rewards.len() / width.max(1)).rev() {
        for col in 0..width {
            let i = t * width + col;
            let tail = if terminals[i] { 0.0 } else { next[col] };
            out[i] = rewards[i] + gamma * tail;
            next[col] = out[i];
        }
    }
    out
}

fn log_softmax(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    for (o, &l) in out.iter_mut().zip(row) {
        *o = l - max - log_total;
    }
}

/// Sum over categories of the log-probability of the chosen choice.
pub fn action_log_prob(logits: ArrayView1<f64>, actions: &[i32], choices: usize) -> f64 {
    let row = logits.as_slice().map(<[f64]>::to_vec).unwrap_or_else(|| logits.to_vec());
    let mut buf = vec![0.0; choices];
    row.chunks(choices)
        .zip(actions)
        .map(|(cat, &a)| {
            log_softmax(cat, &mut buf);
            buf[a as usize]
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCoefs {
    pub value_coef: f64,
    pub entropy_coef: f64,
}

/// Mean loss components over active rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub policy: f64,
    pub value: f64,
    /// Mean entropy, summed over categories.
    pub entropy: f64,
    pub total: f64,
    pub active_rows: usize,
}

impl LossTerms {
    fn accumulate(&mut self, other: &LossTerms) {
        self.policy += other.policy;
        self.value += other.value;
        self.entropy += other.entropy;
        self.total += other.total;
        self.active_rows += other.active_rows;
    }
}

/// What a loss needs besides the network outputs.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    pub actions: &'a [i32],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
    pub active: &'a [bool],
    pub categories: usize,
    pub choices: usize,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub terms: LossTerms,
    pub d_logits: Array2<f64>,
    pub d_values: Array1<f64>,
}

/// Shared body of both losses. `surrogate(row, log_prob)` returns the
/// policy term and its derivative with respect to the log-probability.
/// Everything is divided by `denom` so chunks of one batch add up.
fn loss_core(
    logits: ArrayView2<f64>,
    values: ArrayView1<f64>,
    batch: &LossBatch<'_>,
    coefs: LossCoefs,
    denom: f64,
    surrogate: impl Fn(usize, f64) -> (f64, f64),
) -> Result<LossOutput, TrainerError> {
    let rows = logits.nrows();
    let (c, k) = (batch.categories, batch.choices);
    let mut d_logits = Array2::zeros((rows, c * k));
    let mut d_values = Array1::zeros(rows);
    let mut terms = LossTerms::default();
    let mut logp = vec![0.0; k];
    let mut row_buf = vec![0.0; c * k];
    for i in 0..rows {
        if !batch.active[i] {
            continue;
        }
        terms.active_rows += 1;
        for (dst, &src) in row_buf.iter_mut().zip(logits.row(i)) {
            *dst = src;
        }
        let actions = &batch.actions[i * c..(i + 1) * c];

        let mut total_logp = 0.0;
        let mut entropy = 0.0;
        let mut grad_row = d_logits.row_mut(i);
        for cat in 0..c {
            log_softmax(&row_buf[cat * k..(cat + 1) * k], &mut logp);
            total_logp += logp[actions[cat] as usize];
            let h: f64 = -logp.iter().map(|&lp| lp.exp() * lp).sum::<f64>();
            entropy += h;
            // -entropy_coef * H: dH/dz_j = -p_j (log p_j + H)
            for j in 0..k {
                let p = logp[j].exp();
                grad_row[cat * k + j] = coefs.entropy_coef * p * (logp[j] + h) / denom;
            }
        }
        let (pg, d_pg) = surrogate(i, total_logp);
        // d log pi / dz_j = 1[j = a] - p_j, per category
        for cat in 0..c {
            log_softmax(&row_buf[cat * k..(cat + 1) * k], &mut logp);
            for j in 0..k {
                let indicator = if j as i32 == actions[cat] { 1.0 } else { 0.0 };
                grad_row[cat * k + j] += d_pg * (indicator - logp[j].exp()) / denom;
            }
        }
        let err = values[i] - batch.returns[i];
        d_values[i] = 2.0 * coefs.value_coef * err / denom;

        terms.policy += pg / denom;
        terms.value += err * err / denom;
        terms.entropy += entropy / denom;
    }
    terms.total = terms.policy + coefs.value_coef * terms.value - coefs.entropy_coef * terms.entropy;
    if !terms.total.is_finite() {
        return Err(TrainerError::NonFiniteLoss);
    }
    Ok(LossOutput {
        terms,
        d_logits,
        d_values,
    })
}

fn active_count(active: &[bool]) -> f64 {
    active.iter().filter(|&&a| a).count().max(1) as f64
}

/// Advantage actor-critic loss averaged over active rows:
/// `-log π(a|s)·A + value_coef·(V - R)² - entropy_coef·H`.
pub fn a2c_loss(
    logits: ArrayView2<f64>,
    values: ArrayView1<f64>,
    batch: &LossBatch<'_>,
    coefs: LossCoefs,
) -> Result<LossOutput, TrainerError> {
    a2c_loss_scaled(logits, values, batch, coefs, active_count(batch.active))
}

fn a2c_loss_scaled(
    logits: ArrayView2<f64>,
    values: ArrayView1<f64>,
    batch: &LossBatch<'_>,
    coefs: LossCoefs,
    denom: f64,
) -> Result<LossOutput, TrainerError> {
    loss_core(logits, values, batch, coefs, denom, |i, logp| {
        let a = batch.advantages[i];
        (-logp * a, -a)
    })
}

/// Clipped-surrogate loss: the policy term is
/// `-min(ρA, clip(ρ, 1-ε, 1+ε)A)` with `ρ = exp(log π - old log π)`.
pub fn ppo_loss(
    logits: ArrayView2<f64>,
    values: ArrayView1<f64>,
    batch: &LossBatch<'_>,
    old_log_probs: &[f64],
    clip: f64,
    coefs: LossCoefs,
) -> Result<LossOutput, TrainerError> {
    ppo_loss_scaled(logits, values, batch, old_log_probs, clip, coefs, active_count(batch.active))
}

fn ppo_loss_scaled(
    logits: ArrayView2<f64>,
    values: ArrayView1<f64>,
    batch: &LossBatch<'_>,
    old_log_probs: &[f64],
    clip: f64,
    coefs: LossCoefs,
    denom: f64,
) -> Result<LossOutput, TrainerError> {
    loss_core(logits, values, batch, coefs, denom, |i, logp| {
        let a = batch.advantages[i];
        let ratio = (logp - old_log_probs[i]).exp();
        let unclipped = ratio * a;
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * a;
        if unclipped <= clipped {
            (-unclipped, -unclipped)
        } else {
            (-clipped, 0.0)
        }
    })
}

/// Where rollout actions come from.
#[derive(Debug, Clone, Copy)]
pub enum Behavior<'a> {
    /// Tags missing from the map act uniformly at random.
    Policies(&'a IndexMap<String, PolicyParams>),
    /// Equal logits everywhere.
    Uniform,
}

impl Behavior<'_> {
    /// Logits and values for the observation rows of one tag.
    fn outputs(&self, tag: &str, x: &Array2<f64>, width: usize) -> Result<(Array2<f64>, Array1<f64>), PolicyError> {
        match self {
            Behavior::Policies(policies) if policies.contains_key(tag) => {
                let out = policies[tag].forward(x.view())?;
                Ok((out.logits, out.values))
            }
            _ => Ok((Array2::zeros((x.nrows(), width)), Array1::zeros(x.nrows()))),
        }
    }
}

/// Drives one rollout through [`Engine::run_rollout`].
struct Collector<'a> {
    engine: &'a Engine,
    resetter: &'a mut ResetManager,
    spec: EnvSpec,
    map: &'a PolicyMap,
    behavior: Behavior<'a>,
    seed: u64,
    start_step: u64,
    batches: Option<Vec<RolloutBatch>>,
    logits: Vec<f32>,
    step_logits: Vec<Array2<f64>>,
    agent_tag: Vec<usize>,
    tracker: &'a mut EpisodeTracker,
}

/// Running per-agent episode returns and the episodes finished so far.
#[derive(Debug, Clone)]
pub struct EpisodeTracker {
    sums: Vec<f64>,
    completed: Vec<Vec<f64>>,
}

impl EpisodeTracker {
    pub fn new(spec: &EnvSpec, num_tags: usize) -> Self {
        Self {
            sums: vec![0.0; spec.num_envs * spec.num_agents],
            completed: vec![Vec::new(); num_tags],
        }
    }

    /// Per tag: finished-episode returns collected since the last drain.
    pub fn drain(&mut self) -> Vec<Vec<f64>> {
        self.completed.iter_mut().map(std::mem::take).collect()
    }
}

fn gather_obs(obs: &[f32], spec: &EnvSpec, agents: &[usize]) -> Array2<f64> {
    let d = spec.obs_dim;
    let mut x = Array2::zeros((spec.num_envs * agents.len(), d));
    for env in 0..spec.num_envs {
        for (j, &agent) in agents.iter().enumerate() {
            let src = &obs[(env * spec.num_agents + agent) * d..][..d];
            for (dst, &v) in x.row_mut(env * agents.len() + j).iter_mut().zip(src) {
                *dst = v as f64;
            }
        }
    }
    x
}

fn active_flags(store: &DataStore, spec: &EnvSpec) -> Vec<u8> {
    store
        .array::<u8>(ACTIVE_MASK)
        .map(<[u8]>::to_vec)
        .unwrap_or_else(|_| vec![1; spec.num_envs * spec.num_agents])
}

impl StepHooks for Collector<'_> {
    fn policy_forward(&mut self, store: &mut DataStore, step: u64) -> Result<(), EngineError> {
        let t = (step - self.start_step) as usize;
        let spec = self.spec;
        let width = spec.categories * spec.choices;
        let obs = store.array::<f32>(OBSERVATIONS)?;
        let active = active_flags(store, &spec);
        for (tag_idx, (tag, agents)) in self.map.iter().enumerate() {
            let x = gather_obs(obs, &spec, agents);
            let rows = x.nrows();
            let (logits, values) = self.behavior.outputs(tag, &x, width).map_err(|e| EngineError::Hook {
                hook: "policy_forward",
                message: e.to_string(),
            })?;
            for env in 0..spec.num_envs {
                for (j, &agent) in agents.iter().enumerate() {
                    let dst = &mut self.logits[(env * spec.num_agents + agent) * width..][..width];
                    for (d, &v) in dst.iter_mut().zip(logits.row(env * agents.len() + j)) {
                        *d = v as f32;
                    }
                }
            }
            if let Some(batches) = self.batches.as_mut() {
                let b = &mut batches[tag_idx];
                b.obs.slice_mut(s![t * rows..(t + 1) * rows, ..]).assign(&x);
                b.values[t * rows..(t + 1) * rows].copy_from_slice(values.as_slice().unwrap());
                for env in 0..spec.num_envs {
                    for (j, &agent) in agents.iter().enumerate() {
                        b.active[t * rows + env * agents.len() + j] = active[env * spec.num_agents + agent] != 0;
                    }
                }
            }
            self.step_logits[tag_idx] = logits;
        }
        Ok(())
    }

    fn sample(&mut self, store: &mut DataStore, step: u64) -> Result<(), EngineError> {
        let spec = self.spec;
        let shape = LogitShape {
            num_envs: spec.num_envs,
            num_agents: spec.num_agents,
            categories: spec.categories,
            choices: spec.choices,
        };
        let (seed, logits) = (self.seed, &self.logits);
        let out = store.array_mut::<i32>(SAMPLED_ACTIONS)?;
        self.engine
            .install(|| sample_into(logits, shape, seed, step, out))
            .map_err(|e| EngineError::Hook {
                hook: "sample",
                message: e.to_string(),
            })?;
        let Some(batches) = self.batches.as_mut() else {
            return Ok(());
        };
        let t = (step - self.start_step) as usize;
        let actions = store.array::<i32>(SAMPLED_ACTIONS)?;
        let c = spec.categories;
        for (tag_idx, (_, agents)) in self.map.iter().enumerate() {
            let b = &mut batches[tag_idx];
            let rows = spec.num_envs * agents.len();
            for env in 0..spec.num_envs {
                for (j, &agent) in agents.iter().enumerate() {
                    let local = env * agents.len() + j;
                    let row = t * rows + local;
                    let src = &actions[(env * spec.num_agents + agent) * c..][..c];
                    b.actions[row * c..(row + 1) * c].copy_from_slice(src);
                    b.log_probs[row] = action_log_prob(self.step_logits[tag_idx].row(local), src, spec.choices);
                }
            }
        }
        Ok(())
    }

    fn record(&mut self, store: &DataStore, step: u64) -> Result<(), EngineError> {
        let spec = self.spec;
        let n = spec.num_agents;
        let rewards = store.array::<f32>(REWARDS)?;
        let done = store.array::<u8>(DONE)?;
        for (i, &r) in rewards.iter().enumerate() {
            self.tracker.sums[i] += r as f64;
        }
        for env in done_envs(done) {
            for agent in 0..n {
                let sum = std::mem::take(&mut self.tracker.sums[env * n + agent]);
                self.tracker.completed[self.agent_tag[agent]].push(sum);
            }
        }
        if let Some(batches) = self.batches.as_mut() {
            let t = (step - self.start_step) as usize;
            for (tag_idx, (_, agents)) in self.map.iter().enumerate() {
                let b = &mut batches[tag_idx];
                let rows = spec.num_envs * agents.len();
                for env in 0..spec.num_envs {
                    for (j, &agent) in agents.iter().enumerate() {
                        let row = t * rows + env * agents.len() + j;
                        b.rewards[row] = rewards[env * n + agent] as f64;
                        b.dones[row] = done[env] != 0;
                    }
                }
            }
        }
        Ok(())
    }

    fn done_check(&mut self, store: &DataStore, _step: u64) -> Result<Vec<usize>, EngineError> {
        Ok(self.resetter.detect_done(store))
    }

    fn auto_reset(&mut self, store: &mut DataStore, env_ids: &[usize], _step: u64) -> Result<(), EngineError> {
        if self.resetter.policy().auto {
            self.resetter.auto_reset(store, env_ids)?;
        }
        Ok(())
    }
}

/// Logits for every (env, agent) in store order, `categories * choices`
/// per agent.
pub fn joint_logits(
    store: &DataStore,
    spec: &EnvSpec,
    map: &PolicyMap,
    behavior: Behavior<'_>,
) -> Result<Vec<f32>, TrainerError> {
    let width = spec.categories * spec.choices;
    let mut out = vec![0.0f32; spec.num_envs * spec.num_agents * width];
    let obs = store.array::<f32>(OBSERVATIONS)?;
    for (tag, agents) in map.iter() {
        let (logits, _) = behavior.outputs(tag, &gather_obs(obs, spec, agents), width)?;
        for env in 0..spec.num_envs {
            for (j, &agent) in agents.iter().enumerate() {
                let dst = &mut out[(env * spec.num_agents + agent) * width..][..width];
                for (d, &v) in dst.iter_mut().zip(logits.row(env * agents.len() + j)) {
                    *d = v as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Runs `horizon` steps of `env` under `behavior`, optionally recording a
/// batch per policy tag (in map order).
#[allow(clippy::too_many_arguments)]
pub fn collect_rollout(
    env: &mut VecEnv,
    engine: &Engine,
    map: &PolicyMap,
    behavior: Behavior<'_>,
    seed: u64,
    start_step: u64,
    horizon: usize,
    record: bool,
    tracker: &mut EpisodeTracker,
) -> Result<Option<Vec<RolloutBatch>>, TrainerError> {
    let spec = env.spec;
    let mut agent_tag = vec![0; spec.num_agents];
    for (tag_idx, (_, agents)) in map.iter().enumerate() {
        for &a in agents {
            agent_tag[a] = tag_idx;
        }
    }
    let batches = record.then(|| {
        map.iter()
            .map(|(_, agents)| {
                RolloutBatch::new(horizon, spec.num_envs * agents.len(), spec.obs_dim, spec.categories)
            })
            .collect()
    });
    let VecEnv {
        store, plan, resetter, ..
    } = env;
    let mut collector = Collector {
        engine,
        resetter,
        spec,
        map,
        behavior,
        seed,
        start_step,
        batches,
        logits: vec![0.0; spec.num_envs * spec.num_agents * spec.categories * spec.choices],
        step_logits: vec![Array2::zeros((0, 0)); map.iter().count()],
        agent_tag,
        tracker,
    };
    engine.run_rollout(plan, store, start_step, horizon, &mut collector)?;
    let mut batches = collector.batches;

    if let Some(batches) = batches.as_mut() {
        let obs = store.array::<f32>(OBSERVATIONS)?;
        let active = active_flags(store, &spec);
        let width = spec.categories * spec.choices;
        for ((tag, agents), b) in map.iter().zip(batches.iter_mut()) {
            let (_, values) = behavior.outputs(tag, &gather_obs(obs, &spec, agents), width)?;
            b.bootstrap = values.to_vec();
            for env in 0..spec.num_envs {
                for (j, &agent) in agents.iter().enumerate() {
                    b.bootstrap_active[env * agents.len() + j] = active[env * spec.num_agents + agent] != 0;
                }
            }
        }
    }
    Ok(batches)
}

/// Statistics of one policy tag for one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagMetrics {
    /// Mean over agents of this tag and episodes finished during the
    /// iteration; `None` when no episode finished.
    pub mean_episode_reward: Option<f64>,
    pub episodes: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub wall_ms: f64,
    pub steps_per_sec: f64,
    pub tags: IndexMap<String, TagMetrics>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub struct Trainer {
    config: TrainerConfig,
    env: VecEnv,
    engine: Engine,
    map: PolicyMap,
    policies: IndexMap<String, PolicyParams>,
    optimizers: IndexMap<String, Adam>,
    tracker: EpisodeTracker,
    iteration: u64,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("config", &self.config)
            .field("iteration", &self.iteration)
            .finish_non_exhaustive()
    }
}

impl Trainer {
    /// Fresh policies for every tag of `map`, seeded from `config.seed`.
    pub fn new(config: TrainerConfig, env: VecEnv, engine: Engine, map: PolicyMap) -> Result<Self, TrainerError> {
        config.validate()?;
        if map.num_agents() != env.spec.num_agents {
            return Err(TrainerError::Config(format!(
                "policy map covers {} agents, environment has {}",
                map.num_agents(),
                env.spec.num_agents
            )));
        }
        let dims = PolicyDims {
            obs_dim: env.spec.obs_dim,
            hidden: config.hidden_sizes.clone(),
            categories: env.spec.categories,
            choices: env.spec.choices,
        };
        let mut policies = IndexMap::new();
        let mut optimizers = IndexMap::new();
        for (i, tag) in map.tags().enumerate() {
            let params = PolicyParams::init(config.seed.wrapping_add(i as u64), dims.clone())?;
            optimizers.insert(tag.to_string(), Adam::new(config.learning_rate, params.num_params()));
            policies.insert(tag.to_string(), params);
        }
        let tracker = EpisodeTracker::new(&env.spec, policies.len());
        Ok(Self {
            config,
            env,
            engine,
            map,
            policies,
            optimizers,
            tracker,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn policies(&self) -> &IndexMap<String, PolicyParams> {
        &self.policies
    }

    pub fn map(&self) -> &PolicyMap {
        &self.map
    }

    pub fn env(&self) -> &VecEnv {
        &self.env
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    /// Continues from saved parameters; iteration numbering and sampler
    /// steps resume from `iteration`.
    pub fn resume(&mut self, policies: IndexMap<String, PolicyParams>, iteration: u64) -> Result<(), TrainerError> {
        for (tag, params) in &policies {
            let current = self
                .policies
                .get(tag)
                .ok_or_else(|| TrainerError::Config(format!("checkpoint has unknown policy {tag:?}")))?;
            if current.dims != params.dims {
                return Err(TrainerError::Config(format!("checkpoint dims for {tag:?} do not match")));
            }
        }
        if policies.len() != self.policies.len() {
            return Err(TrainerError::Config("checkpoint is missing a policy".into()));
        }
        self.policies = policies;
        self.iteration = iteration;
        Ok(())
    }

    /// One rollout plus one update per policy tag.
    pub fn step(&mut self) -> Result<IterationMetrics, TrainerError> {
        let started = Instant::now();
        let horizon = self.config.rollout_horizon;
        let start_step = self.iteration * horizon as u64;
        let batches = collect_rollout(
            &mut self.env,
            &self.engine,
            &self.map,
            Behavior::Policies(&self.policies),
            self.config.seed,
            start_step,
            horizon,
            true,
            &mut self.tracker,
        )?
        .expect("recording requested");
        let finished = self.tracker.drain();

        let mut tags = IndexMap::new();
        let tag_names: Vec<String> = self.map.tags().map(String::from).collect();
        for ((tag, batch), episodes) in tag_names.iter().zip(&batches).zip(&finished) {
            let (terms, norm) = self.update(tag, batch)?;
            tags.insert(
                tag.to_string(),
                TagMetrics {
                    mean_episode_reward: mean(episodes),
                    episodes: episodes.len(),
                    policy_loss: terms.policy,
                    value_loss: terms.value,
                    entropy: terms.entropy,
                    grad_norm: norm,
                },
            );
        }
        let elapsed = started.elapsed().as_secs_f64();
        let metrics = IterationMetrics {
            iteration: self.iteration,
            wall_ms: elapsed * 1e3,
            steps_per_sec: (horizon * self.env.spec.num_envs) as f64 / elapsed.max(1e-12),
            tags,
        };
        self.iteration += 1;
        Ok(metrics)
    }

    /// Runs `iterations` steps, handing each row to `on_iteration`.
    pub fn train(
        &mut self,
        iterations: usize,
        mut on_iteration: impl FnMut(&Self, &IterationMetrics) -> Result<(), TrainerError>,
    ) -> Result<Vec<IterationMetrics>, TrainerError> {
        let mut rows = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let row = self.step()?;
            on_iteration(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }

    fn update(&mut self, tag: &str, batch: &RolloutBatch) -> Result<(LossTerms, f64), TrainerError> {
        let cfg = &self.config;
        let returns = batch.returns(cfg.gamma);
        let mut advantages: Vec<f64> = returns.iter().zip(&batch.values).map(|(r, v)| r - v).collect();
        if cfg.algorithm == Algorithm::Ppo {
            normalize_active(&mut advantages, &batch.active);
        }
        let coefs = LossCoefs {
            value_coef: cfg.value_coef,
            entropy_coef: cfg.entropy_coef,
        };
        let epochs = match cfg.algorithm {
            Algorithm::A2c => 1,
            Algorithm::Ppo => cfg.ppo_epochs,
        };
        let denom = active_count(&batch.active);
        let iteration = self.iteration;
        let diverged = |what| TrainerError::Divergence {
            iteration,
            tag: tag.to_string(),
            what,
        };

        let mut first = None;
        let mut first_norm = 0.0;
        for _ in 0..epochs {
            let params = &self.policies[tag];
            let mut grads = PolicyParams::zeros(params.dims.clone())?;
            let mut terms = LossTerms::default();
            for start in (0..batch.rows()).step_by(CHUNK_ROWS) {
                let end = (start + CHUNK_ROWS).min(batch.rows());
                let c = batch.categories;
                let part = LossBatch {
                    actions: &batch.actions[start * c..end * c],
                    advantages: &advantages[start..end],
                    returns: &returns[start..end],
                    active: &batch.active[start..end],
                    categories: c,
                    choices: params.dims.choices,
                };
                if !part.active.iter().any(|&a| a) {
                    continue;
                }
                let out = params.forward(batch.obs.slice(s![start..end, ..]))?;
                let loss = match cfg.algorithm {
                    Algorithm::A2c => a2c_loss_scaled(out.logits.view(), out.values.view(), &part, coefs, denom),
                    Algorithm::Ppo => ppo_loss_scaled(
                        out.logits.view(),
                        out.values.view(),
                        &part,
                        &batch.log_probs[start..end],
                        cfg.ppo_clip,
                        coefs,
                        denom,
                    ),
                }
                .map_err(|_| diverged("loss"))?;
                terms.accumulate(&loss.terms);
                let g = params.backward(&out.cache, loss.d_logits.view(), &loss.d_values)?;
                for (acc, part) in grads.layers_mut().into_iter().zip(g.layers()) {
                    acc.w += &part.w;
                    acc.b += &part.b;
                }
            }
            terms.total = terms.policy + coefs.value_coef * terms.value - coefs.entropy_coef * terms.entropy;
            let norm = clip_grad_norm(&mut grads, cfg.max_grad_norm);
            if !norm.is_finite() {
                return Err(diverged("gradient"));
            }
            let params = self.policies.get_mut(tag).unwrap();
            let before = params.clone();
            self.optimizers.get_mut(tag).unwrap().step(params, &grads);
            if !params.is_finite() {
                *params = before;
                return Err(diverged("parameters"));
            }
            if first.is_none() {
                first = Some(terms);
                first_norm = norm;
            }
        }
        Ok((first.unwrap_or_default(), first_norm))
    }

    /// Mean episode reward per tag over the episodes that finish within
    /// `steps` steps of `env`, acting under `behavior`.
    pub fn evaluate(
        env: &mut VecEnv,
        engine: &Engine,
        map: &PolicyMap,
        behavior: Behavior<'_>,
        seed: u64,
        steps: usize,
    ) -> Result<IndexMap<String, Option<f64>>, TrainerError> {
        let mut tracker = EpisodeTracker::new(&env.spec, map.iter().count());
        collect_rollout(env, engine, map, behavior, seed, 0, steps, false, &mut tracker)?;
        Ok(map
            .tags()
            .zip(tracker.drain())
            .map(|(tag, eps)| (tag.to_string(), mean(&eps)))
            .collect())
    }
}

fn normalize_active(values: &mut [f64], active: &[bool]) {
    let picked: Vec<f64> = values.iter().zip(active).filter(|(_, &a)| a).map(|(&v, _)| v).collect();
    let Some(m) = mean(&picked) else { return };
    let var = picked.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / picked.len() as f64;
    let std = var.sqrt() + 1e-8;
    for v in values.iter_mut() {
        *v = (*v - m) / std;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn three_step_returns() {
        let r = compute_returns(&[1.0, 1.0, 1.0], &[false, false, true], &[100.0], 0.9, 1);
        let expected = [2.71, 1.9, 1.0];
        for (a, b) in r.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gamma_returns_rewards() {
        let rewards = [0.5, -1.0, 2.0, 3.0];
        let r = compute_returns(&rewards, &[false; 4], &[7.0, 7.0], 1e-300, 2);
        for (a, b) in r.iter().zip(rewards) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn done_cuts_tail() {
        let r = compute_returns(&[1.0, 2.0, 5.0], &[false, true, false], &[10.0], 0.5, 1);
        assert_eq!(r, vec![2.0, 2.0, 10.0]);
    }

    #[test]
    fn uniform_entropy_is_ln5() {
        let logits = Array2::zeros((1, 5));
        let batch = LossBatch {
            actions: &[2],
            advantages: &[0.0],
            returns: &[0.0],
            active: &[true],
            categories: 1,
            choices: 5,
        };
        let out = a2c_loss(
            logits.view(),
            array![0.0].view(),
            &batch,
            LossCoefs {
                value_coef: 0.5,
                entropy_coef: 0.01,
            },
        )
        .unwrap();
        assert!((out.terms.entropy - 5f64.ln()).abs() < 1e-12);
        assert_eq!(out.terms.policy, 0.0);
        assert_eq!(out.terms.value, 0.0);
    }

    #[test]
    fn inactive_rows_do_nothing() {
        let logits = array![[0.3, -0.2, 1.0], [9.0, -9.0, 4.0]];
        let coefs = LossCoefs {
            value_coef: 0.5,
            entropy_coef: 0.1,
        };
        let batch = LossBatch {
            actions: &[1, 2],
            advantages: &[0.7, 100.0],
            returns: &[1.0, -50.0],
            active: &[true, false],
            categories: 1,
            choices: 3,
        };
        let both = a2c_loss(logits.view(), array![0.2, 30.0].view(), &batch, coefs).unwrap();
        let single = LossBatch {
            actions: &[1],
            advantages: &[0.7],
            returns: &[1.0],
            active: &[true],
            ..batch
        };
        let one = a2c_loss(logits.slice(s![0..1, ..]), array![0.2].view(), &single, coefs).unwrap();
        assert_eq!(both.terms, one.terms);
        assert!(both.d_logits.row(1).iter().all(|&g| g == 0.0));
        assert_eq!(both.d_values[1], 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainerConfig::default().validate().is_ok());
        for bad in [
            TrainerConfig { gamma: 1.0, ..Default::default() },
            TrainerConfig { rollout_horizon: 0, ..Default::default() },
            TrainerConfig { ppo_clip: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
