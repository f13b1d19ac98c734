//! Helpers shared by several integration test targets.
#![allow(dead_code)]

use ndarray::Array2;
use warp_core::data_store::{DONE, REWARDS, SAMPLED_ACTIONS};
use warp_core::policy_model::{PolicyDims, PolicyParams};
use warp_core::trainer::{a2c_loss, ppo_loss, LossBatch, LossCoefs};
use warp_core::sampler::{uniform, SampleKey};
use warp_core::step_engine::Engine;
use warp_core::tag_env::{TagConfig, TagEnv, ACTIVE, LOC_X, LOC_Y, STEP_COUNT};

/// Per-env bookkeeping of one episode, rebuilt from raw array transitions.
#[derive(Debug, Default, Clone)]
pub struct EpisodeLog {
    pub steps: usize,
    pub tag_events: usize,
    pub tagger_reward: f64,
    /// Per runner: how many times it received a nonzero reward and its sum.
    pub runner_hits: Vec<usize>,
    pub runner_reward: Vec<f64>,
    pub runner_deactivations: Vec<usize>,
}

#[derive(Debug, Default)]
pub struct Violations(pub Vec<String>);

impl Violations {
    fn push(&mut self, msg: String) {
        if self.0.len() < 20 {
            self.0.push(msg);
        }
    }
}

/// Plays uniformly random actions until `episodes` episodes have finished
/// across all envs, checking state invariants after every step, and returns
/// the finished episode logs.
pub fn random_episodes(
    config: &TagConfig,
    num_envs: usize,
    engine: &Engine,
    episodes: usize,
    seed: u64,
    violations: &mut Violations,
) -> Vec<EpisodeLog> {
    let mut env = TagEnv::build(config, num_envs).unwrap();
    let (categories, choices) = config.action_shape();
    let n = config.num_agents();
    let nt = config.num_taggers;
    let max = config.max_coord();
    let fresh = || EpisodeLog {
        runner_hits: vec![0; n - nt],
        runner_reward: vec![0.0; n - nt],
        runner_deactivations: vec![0; n - nt],
        ..Default::default()
    };
    let mut logs = vec![fresh(); num_envs];
    let mut finished = Vec::new();
    let mut step = 0u64;
    while finished.len() < episodes {
        let rt = &mut env.runtime;
        let before: Vec<u8> = rt.store.array::<u8>(ACTIVE).unwrap().to_vec();
        for (i, a) in rt.store.array_mut::<i32>(SAMPLED_ACTIONS).unwrap().iter_mut().enumerate() {
            let u = uniform(&SampleKey::new(seed, step, i / (n * categories), (i / categories) % n, i % categories, 0));
            *a = (u * choices as f64) as i32;
        }
        engine.run_step(&rt.plan, &mut rt.store, step).unwrap();
        let store = &rt.store;
        let active = store.array::<u8>(ACTIVE).unwrap();
        let rewards = store.array::<f32>(REWARDS).unwrap();
        let done = store.array::<u8>(DONE).unwrap();
        let clock = store.array::<i32>(STEP_COUNT).unwrap();
        let xs = store.array::<f32>(LOC_X).unwrap();
        let ys = store.array::<f32>(LOC_Y).unwrap();
        for e in 0..num_envs {
            let log = &mut logs[e];
            log.steps += 1;
            let row = e * n..(e + 1) * n;
            for i in row.clone() {
                if !(0.0..=max).contains(&xs[i]) || !(0.0..=max).contains(&ys[i]) {
                    violations.push(format!("step {step} env {e}: agent {} out of bounds", i - e * n));
                }
            }
            for t in 0..nt {
                if active[e * n + t] != 1 {
                    violations.push(format!("step {step} env {e}: tagger {t} inactive"));
                }
                log.tagger_reward += rewards[e * n + t] as f64;
            }
            let mut runners_left = 0;
            for r in nt..n {
                let i = e * n + r;
                if active[i] > before[i] {
                    violations.push(format!("step {step} env {e}: runner {r} reactivated mid-episode"));
                }
                if before[i] == 1 && active[i] == 0 {
                    log.tag_events += 1;
                    log.runner_deactivations[r - nt] += 1;
                }
                if rewards[i] != 0.0 {
                    log.runner_hits[r - nt] += 1;
                    log.runner_reward[r - nt] += rewards[i] as f64;
                }
                runners_left += usize::from(active[i] == 1);
            }
            let expect_done = clock[e] as u32 >= config.episode_length || runners_left == 0;
            if (done[e] == 1) != expect_done {
                violations.push(format!("step {step} env {e}: done={} clock={} runners={runners_left}", done[e], clock[e]));
            }
            if log.steps > config.episode_length as usize {
                violations.push(format!("env {e}: episode exceeded {} steps", config.episode_length));
            }
        }
        let done_ids = rt.resetter.detect_done(&rt.store);
        for &e in &done_ids {
            finished.push(std::mem::replace(&mut logs[e], fresh()));
        }
        if !done_ids.is_empty() {
            rt.resetter.auto_reset(&mut rt.store, &done_ids).unwrap();
        }
        step += 1;
    }
    finished.truncate(episodes);
    finished
}

/// Checks the per-episode reward bookkeeping: taggers collectively earn
/// `tag_reward` per tag event and every tagged runner is charged exactly
/// once with `tagged_penalty`.
pub fn check_conservation(config: &TagConfig, log: &EpisodeLog) -> Result<(), String> {
    let expected = config.tag_reward as f64 * log.tag_events as f64;
    if (log.tagger_reward - expected).abs() > 1e-4 {
        return Err(format!("tagger reward {} != {expected} ({} events)", log.tagger_reward, log.tag_events));
    }
    for r in 0..log.runner_hits.len() {
        let tagged = log.runner_deactivations[r];
        if tagged > 1 {
            return Err(format!("runner {r} tagged {tagged} times"));
        }
        if log.runner_hits[r] != tagged {
            return Err(format!("runner {r}: {} penalties for {tagged} tags", log.runner_hits[r]));
        }
        if tagged == 1 && (log.runner_reward[r] - config.tagged_penalty as f64).abs() > 1e-6 {
            return Err(format!("runner {r} penalty {}", log.runner_reward[r]));
        }
    }
    Ok(())
}

/// Independent discounted sum: walk forward from each row until a terminal
/// or the end of the horizon, then add the discounted bootstrap.
pub fn brute_force_returns(rewards: &[f64], terminals: &[bool], bootstrap: &[f64], gamma: f64, width: usize) -> Vec<f64> {
    let horizon = rewards.len() / width;
    let mut out = vec![0.0; rewards.len()];
    for t in 0..horizon {
        for col in 0..width {
            let mut total = 0.0;
            let mut discount = 1.0;
            let mut ended = false;
            for s in t..horizon {
                let i = s * width + col;
                total += discount * rewards[i];
                discount *= gamma;
                if terminals[i] {
                    ended = true;
                    break;
                }
            }
            if !ended {
                total += discount * bootstrap[col];
            }
            out[t * width + col] = total;
        }
    }
    out
}

/// Deterministic pseudo-random value in [-1, 1).
pub fn noise(seed: u64, stream: u64, i: usize) -> f64 {
    uniform(&SampleKey::new(seed, stream, i, 0, 0, 0)) * 2.0 - 1.0
}

pub fn grad_dims() -> PolicyDims {
    PolicyDims {
        obs_dim: 4,
        hidden: vec![6, 5],
        categories: 2,
        choices: 3,
    }
}

pub struct GradFixture {
    pub obs: Array2<f64>,
    pub actions: Vec<i32>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub active: Vec<bool>,
    pub old_log_probs: Vec<f64>,
}

pub const GRAD_COEFS: LossCoefs = LossCoefs {
    value_coef: 0.5,
    entropy_coef: 0.05,
};

impl GradFixture {
    pub fn new(seed: u64, rows: usize) -> Self {
        let d = grad_dims();
        Self {
            obs: Array2::from_shape_fn((rows, d.obs_dim), |(r, c)| noise(seed, 1, r * 16 + c) * 2.0),
            actions: (0..rows * d.categories)
                .map(|i| ((noise(seed, 2, i) + 1.0) / 2.0 * d.choices as f64) as i32)
                .collect(),
            advantages: (0..rows).map(|i| noise(seed, 3, i) * 3.0).collect(),
            returns: (0..rows).map(|i| noise(seed, 4, i) * 2.0).collect(),
            active: (0..rows).map(|i| noise(seed, 5, i) > -0.6).collect(),
            old_log_probs: (0..rows).map(|i| -2.2 + noise(seed, 6, i) * 0.3).collect(),
        }
    }

    pub fn batch(&self) -> LossBatch<'_> {
        let d = grad_dims();
        LossBatch {
            actions: &self.actions,
            advantages: &self.advantages,
            returns: &self.returns,
            active: &self.active,
            categories: d.categories,
            choices: d.choices,
        }
    }

    /// Scalar loss re-derived directly from logits and values.
    pub fn oracle_loss(&self, params: &PolicyParams, ppo_clip: Option<f64>) -> f64 {
        let out = params.forward(self.obs.view()).unwrap();
        let (c, k) = (grad_dims().categories, grad_dims().choices);
        let mut total = 0.0;
        let mut n = 0.0f64;
        for i in 0..self.obs.nrows() {
            if !self.active[i] {
                continue;
            }
            n += 1.0;
            let mut logp_a = 0.0;
            let mut ent = 0.0;
            for cat in 0..c {
                let z: Vec<f64> = (0..k).map(|j| out.logits[[i, cat * k + j]]).collect();
                let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
                logp_a += z[self.actions[i * c + cat] as usize] - lse;
                ent -= z.iter().map(|v| (v - lse).exp() * (v - lse)).sum::<f64>();
            }
            let a = self.advantages[i];
            let pg = match ppo_clip {
                None => -logp_a * a,
                Some(eps) => {
                    let r = (logp_a - self.old_log_probs[i]).exp();
                    -(r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a)
                }
            };
            let v = out.values[i] - self.returns[i];
            total += pg + GRAD_COEFS.value_coef * v * v - GRAD_COEFS.entropy_coef * ent;
        }
        total / n.max(1.0)
    }

    pub fn analytic_grads(&self, params: &PolicyParams, ppo_clip: Option<f64>) -> (f64, Vec<f64>) {
        let out = params.forward(self.obs.view()).unwrap();
        let loss = match ppo_clip {
            None => a2c_loss(out.logits.view(), out.values.view(), &self.batch(), GRAD_COEFS).unwrap(),
            Some(eps) => ppo_loss(
                out.logits.view(),
                out.values.view(),
                &self.batch(),
                &self.old_log_probs,
                eps,
                GRAD_COEFS,
            )
            .unwrap(),
        };
        let grads = params.backward(&out.cache, loss.d_logits.view(), &loss.d_values).unwrap();
        (loss.terms.total, grads.flat())
    }
}

/// Largest relative difference between the analytic gradient and central
/// differences with step `eps`, relative to max(|analytic|, |numeric|, 1e-6).
pub fn max_gradient_error(seed: u64, ppo_clip: Option<f64>, eps: f64) -> f64 {
    let params = PolicyParams::init(seed, grad_dims()).unwrap();
    let fixture = GradFixture::new(seed, 12);
    let (total, analytic) = fixture.analytic_grads(&params, ppo_clip);
    assert!((total - fixture.oracle_loss(&params, ppo_clip)).abs() < 1e-9);
    let base = params.flat();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut theta = base.clone();
        theta[i] += eps;
        probe.set_flat(&theta).unwrap();
        let up = fixture.oracle_loss(&probe, ppo_clip);
        theta[i] -= 2.0 * eps;
        probe.set_flat(&theta).unwrap();
        let down = fixture.oracle_loss(&probe, ppo_clip);
        let numeric = (up - down) / (2.0 * eps);
        let scale = numeric.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max((numeric - analytic[i]).abs() / scale);
    }
    worst
}
