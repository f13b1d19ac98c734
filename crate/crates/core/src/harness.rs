//! Run configuration, consistency checking, benchmarks and training runs,
//! with CSV/JSON reports that parse back to the same values.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data_store::{DataStore, StoreError, DONE, OBSERVATIONS, REWARDS, SAMPLED_ACTIONS};
use crate::policy_model::{CheckpointMeta, PolicyError, PolicyParams};
use crate::reset_manager::ResetError;
use crate::sampler::{categorical_from_logits, sample_into, uniform, LogitShape, SampleKey};
use crate::step_engine::{Engine, EngineConfig, EngineError};
use crate::tag_env::reference::TagReference;
use crate::tag_env::{ObsMode, TagConfig, TagEnv, TagError, ACTIVE, IS_TAGGER, LOC_X, LOC_Y};
use crate::trainer::{collect_rollout, joint_logits, Behavior, EpisodeTracker, IterationMetrics, TagMetrics, Trainer, TrainerConfig, TrainerError};

#[cfg(feature = "fault-injection")]
use crate::tag_env::Fault;

pub const VERSION: &str = concat!("warp ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reset(#[from] ResetError),
    #[error("training diverged; last good parameters saved to {checkpoint}: {source}")]
    Diverged {
        checkpoint: PathBuf,
        #[source]
        source: TrainerError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Check,
    BenchEnvs,
    BenchAgents,
    Train,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineSection {
    pub num_envs: usize,
    /// `None` uses every available core.
    pub worker_count: Option<usize>,
}

impl Default for EngineSection {
    fn default() -> Self {
        Self {
            num_envs: 60,
            worker_count: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Informational; the CLI subcommand decides what runs.
    pub mode: Option<Mode>,
    pub out_dir: PathBuf,
    /// Steps compared by `check`.
    pub check_steps: usize,
    pub env_counts: Vec<usize>,
    pub agent_counts: Vec<usize>,
    /// Environments stepped together in the agent-scaling benchmark.
    pub bench_agent_envs: usize,
    /// Steps per timed repetition.
    pub bench_steps: usize,
    /// Timed repetitions after one discarded warm-up.
    pub bench_reps: usize,
    /// Also time one rollout+update iteration per env count.
    pub bench_training: bool,
    /// Save checkpoints every this many iterations; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub trajectory_dump: bool,
    /// Directory holding `<tag>.ckpt` files to continue from.
    pub resume_from: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            mode: None,
            out_dir: PathBuf::from("warp-out"),
            check_steps: 100,
            env_counts: vec![1, 2, 4, 8, 16, 32, 60, 120],
            agent_counts: vec![10, 100, 1000],
            bench_agent_envs: 2,
            bench_steps: 20,
            bench_reps: 3,
            bench_training: false,
            checkpoint_every: 0,
            trajectory_dump: true,
            resume_from: None,
        }
    }
}

/// Contents of a `--config` JSON file. Every section and field is optional
/// and falls back to its default; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: TagConfig,
    pub engine: EngineSection,
    pub trainer: TrainerConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.env.validate()?;
        self.trainer.validate()?;
        if self.engine.num_envs == 0 {
            return Err(HarnessError::Config("engine.num_envs must be positive".into()));
        }
        if self.engine.worker_count == Some(0) {
            return Err(HarnessError::Config("engine.worker_count must be positive".into()));
        }
        if self.run.env_counts.contains(&0) {
            return Err(HarnessError::Config("run.env_counts must be positive".into()));
        }
        if self.run.agent_counts.iter().any(|&n| n < 2) {
            return Err(HarnessError::Config("run.agent_counts must be at least 2".into()));
        }
        if self.run.bench_reps == 0 || self.run.bench_steps == 0 || self.run.bench_agent_envs == 0 {
            return Err(HarnessError::Config("benchmark steps, reps and envs must be positive".into()));
        }
        Ok(())
    }

    /// Uses `seed` for both placement and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.env.seed = seed;
        self.trainer.seed = seed;
        self
    }

    /// Hex SHA-256 of the canonical JSON form of the parsed config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn available_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Worker count by precedence: command-line flag, then the `WARP_WORKERS`
/// value, then the config file, then all cores.
pub fn resolve_workers(flag: Option<usize>, env_var: Option<&str>, config: Option<usize>) -> Result<usize, HarnessError> {
    let from_env = match env_var.map(str::trim).filter(|v| !v.is_empty()) {
        Some(v) => Some(
            v.parse::<usize>()
                .map_err(|_| HarnessError::Config(format!("WARP_WORKERS={v:?} is not a count")))?,
        ),
        None => None,
    };
    let workers = flag.or(from_env).or(config).unwrap_or_else(available_cores);
    if workers == 0 {
        return Err(HarnessError::Config("worker count must be positive".into()));
    }
    Ok(workers)
}

/// Provenance embedded in every report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub cores: usize,
    pub workers: usize,
}

impl ReportMeta {
    pub fn new(config: &RunConfig, workers: usize) -> Self {
        Self {
            config_hash: config.hash(),
            seed: config.trainer.seed,
            version: VERSION.to_string(),
            cores: available_cores(),
            workers,
        }
    }

    fn comment_lines(&self) -> String {
        format!(
            "# config_hash={}\n# seed={}\n# version={}\n# cores={}\n# workers={}\n",
            self.config_hash, self.seed, self.version, self.cores, self.workers
        )
    }

    fn from_comment_lines(text: &str) -> Option<Self> {
        let mut fields = IndexMap::new();
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            if let Some((k, v)) = line.trim_start_matches('#').trim().split_once('=') {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        Some(Self {
            config_hash: fields.get("config_hash")?.clone(),
            seed: fields.get("seed")?.parse().ok()?,
            version: fields.get("version")?.clone(),
            cores: fields.get("cores")?.parse().ok()?,
            workers: fields.get("workers")?.parse().ok()?,
        })
    }
}

// ---------------------------------------------------------------------------
// Consistency

/// Where the parallel and reference runs first disagreed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: u64,
    /// Set when the mismatch was in the observations written by a reset.
    pub after_reset: bool,
    pub env: usize,
    pub agent: Option<usize>,
    pub array: String,
    /// Flat index into the whole array.
    pub index: usize,
    pub engine_value: String,
    pub reference_value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub meta: ReportMeta,
    pub variant: String,
    pub obs_mode: String,
    pub num_envs: usize,
    pub num_agents: usize,
    pub steps_requested: usize,
    pub steps_compared: usize,
    pub passed: bool,
    pub first_divergence: Option<Divergence>,
}

const LOGIT_SALT: u64 = 0x6c8e_9cf5_7093_2bd5;

/// Reproducible, non-uniform logits so the sampler comparison is not trivial.
fn probe_logits(seed: u64, step: u64, shape: LogitShape) -> Vec<f32> {
    let mut out = Vec::with_capacity(shape.len());
    for env in 0..shape.num_envs {
        for agent in 0..shape.num_agents {
            for cat in 0..shape.categories {
                for choice in 0..shape.choices {
                    let u = uniform(&SampleKey::new(seed ^ LOGIT_SALT, step, env, agent, cat, choice));
                    out.push((4.0 * u - 2.0) as f32);
                }
            }
        }
    }
    out
}

/// The sampler contract evaluated one key at a time.
fn sequential_sample(logits: &[f32], shape: LogitShape, seed: u64, step: u64) -> Vec<i32> {
    let mut out = Vec::with_capacity(shape.num_envs * shape.num_agents * shape.categories);
    for (slot, row) in logits.chunks(shape.choices).enumerate() {
        let env = slot / (shape.num_agents * shape.categories);
        let agent = slot / shape.categories % shape.num_agents;
        let category = slot % shape.categories;
        let u = uniform(&SampleKey::new(seed, step, env, agent, category, 0));
        out.push(categorical_from_logits(row, u) as i32);
    }
    out
}

trait Bits: Copy + std::fmt::Debug {
    fn bits(self) -> u32;
}
impl Bits for f32 {
    fn bits(self) -> u32 {
        self.to_bits()
    }
}
impl Bits for i32 {
    fn bits(self) -> u32 {
        self as u32
    }
}
impl Bits for u8 {
    fn bits(self) -> u32 {
        self as u32
    }
}

fn first_mismatch<T: Bits>(
    store: &DataStore,
    name: &str,
    engine: &[T],
    reference: &[T],
    step: u64,
    after_reset: bool,
) -> Option<Divergence> {
    let index = engine
        .iter()
        .zip(reference)
        .position(|(a, b)| a.bits() != b.bits())
        .or_else(|| (engine.len() != reference.len()).then(|| engine.len().min(reference.len())))?;
    let spec = store.spec_by_name(name).ok()?;
    let env_stride = spec.env_stride();
    Some(Divergence {
        step,
        after_reset,
        env: index / env_stride,
        agent: spec.agent_stride().map(|s| index % env_stride / s),
        array: name.to_string(),
        index,
        engine_value: engine.get(index).map_or("missing".into(), |v| format!("{v:?}")),
        reference_value: reference.get(index).map_or("missing".into(), |v| format!("{v:?}")),
    })
}

/// Options of one consistency run.
#[derive(Debug, Clone, Copy, Default)]
pub struct CheckOptions {
    pub num_envs: usize,
    pub steps: usize,
    pub workers: usize,
    pub seed: u64,
    #[cfg(feature = "fault-injection")]
    pub fault: Option<Fault>,
}

/// Steps the parallel env and the sequential reference in lockstep and
/// compares, each step and bit for bit: sampled actions, then rewards,
/// done flags and observations, then observations again after resets.
pub fn check_consistency(config: &TagConfig, opts: CheckOptions, meta: ReportMeta) -> Result<ConsistencyReport, HarnessError> {
    #[cfg(feature = "fault-injection")]
    let mut env = match opts.fault {
        Some(fault) => TagEnv::build_with_fault(config, opts.num_envs, fault)?,
        None => TagEnv::build(config, opts.num_envs)?,
    };
    #[cfg(not(feature = "fault-injection"))]
    let mut env = TagEnv::build(config, opts.num_envs)?;
    let mut reference = TagReference::new(config, opts.num_envs)?;
    let spec = env.runtime.spec;
    let engine = Engine::new(EngineConfig::new(spec.num_envs, spec.num_agents, opts.workers))?;
    let shape = LogitShape {
        num_envs: spec.num_envs,
        num_agents: spec.num_agents,
        categories: spec.categories,
        choices: spec.choices,
    };

    let mut report = ConsistencyReport {
        meta,
        variant: format!("{:?}", config.variant).to_lowercase(),
        obs_mode: format!("{:?}", config.obs_mode).to_lowercase(),
        num_envs: spec.num_envs,
        num_agents: spec.num_agents,
        steps_requested: opts.steps,
        steps_compared: 0,
        passed: true,
        first_divergence: None,
    };
    let fail = |report: &mut ConsistencyReport, d: Divergence| {
        report.passed = false;
        report.first_divergence = Some(d);
    };

    let store = &env.runtime.store;
    if let Some(d) = first_mismatch(store, OBSERVATIONS, store.array::<f32>(OBSERVATIONS)?, &reference.observations, 0, true) {
        fail(&mut report, d);
        return Ok(report);
    }

    for step in 0..opts.steps as u64 {
        let logits = probe_logits(opts.seed, step, shape);
        {
            let out = env.runtime.store.array_mut::<i32>(SAMPLED_ACTIONS)?;
            engine
                .install(|| sample_into(&logits, shape, opts.seed, step, out))
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        let ref_actions = sequential_sample(&logits, shape, opts.seed, step);
        let store = &env.runtime.store;
        let actions = store.array::<i32>(SAMPLED_ACTIONS)?.to_vec();
        if let Some(d) = first_mismatch(store, SAMPLED_ACTIONS, &actions, &ref_actions, step, false) {
            fail(&mut report, d);
            return Ok(report);
        }

        engine.run_step(&env.runtime.plan, &mut env.runtime.store, step)?;
        reference
            .step(&ref_actions)
            .map_err(|m| HarnessError::Config(format!("reference step failed: {m}")))?;
        let store = &env.runtime.store;
        let checks = [
            first_mismatch(store, REWARDS, store.array::<f32>(REWARDS)?, &reference.rewards, step, false),
            first_mismatch(store, DONE, store.array::<u8>(DONE)?, &reference.done, step, false),
            first_mismatch(store, OBSERVATIONS, store.array::<f32>(OBSERVATIONS)?, &reference.observations, step, false),
        ];
        if let Some(d) = checks.into_iter().flatten().next() {
            fail(&mut report, d);
            return Ok(report);
        }

        let done = env.runtime.resetter.detect_done(&env.runtime.store);
        if !done.is_empty() {
            env.runtime.resetter.auto_reset(&mut env.runtime.store, &done)?;
        }
        let ref_done = reference.reset_done();
        if done != ref_done {
            let env_id = done
                .iter()
                .filter(|e| !ref_done.contains(e))
                .chain(ref_done.iter().filter(|e| !done.contains(e)))
                .copied()
                .min()
                .unwrap_or(0);
            fail(
                &mut report,
                Divergence {
                    step,
                    after_reset: true,
                    env: env_id,
                    agent: None,
                    array: DONE.to_string(),
                    index: env_id,
                    engine_value: format!("{done:?}"),
                    reference_value: format!("{ref_done:?}"),
                },
            );
            return Ok(report);
        }
        let store = &env.runtime.store;
        if let Some(d) = first_mismatch(store, OBSERVATIONS, store.array::<f32>(OBSERVATIONS)?, &reference.observations, step, true) {
            fail(&mut report, d);
            return Ok(report);
        }
        report.steps_compared += 1;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Benchmarks

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Median seconds of `reps` calls after one discarded warm-up call.
fn time_median(reps: usize, mut run: impl FnMut() -> Result<(), HarnessError>) -> Result<f64, HarnessError> {
    run()?;
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        run()?;
        samples.push(start.elapsed().as_secs_f64());
    }
    Ok(median(&mut samples))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvBenchRow {
    pub num_envs: usize,
    /// Environment steps (summed over replicas) per second of rollout.
    pub steps_per_sec: Option<f64>,
    pub iterations_per_sec: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvBenchReport {
    pub meta: ReportMeta,
    pub rows: Vec<EnvBenchRow>,
}

fn bench_one_env_count(config: &RunConfig, num_envs: usize, workers: usize) -> Result<EnvBenchRow, HarnessError> {
    let run = &config.run;
    let mut env = TagEnv::build(&config.env, num_envs)?;
    let map = env.policy_map();
    let spec = env.runtime.spec;
    let engine = Engine::new(EngineConfig::new(num_envs, spec.num_agents, workers))?;
    let mut tracker = EpisodeTracker::new(&spec, map.iter().count());
    let mut start_step = 0;
    let secs = time_median(run.bench_reps, || {
        collect_rollout(
            &mut env.runtime,
            &engine,
            &map,
            Behavior::Uniform,
            config.trainer.seed,
            start_step,
            run.bench_steps,
            false,
            &mut tracker,
        )?;
        start_step += run.bench_steps as u64;
        Ok(())
    })?;
    let steps_per_sec = (num_envs * run.bench_steps) as f64 / secs;

    let iterations_per_sec = if run.bench_training {
        let env = TagEnv::build(&config.env, num_envs)?;
        let trainer_config = TrainerConfig {
            rollout_horizon: run.bench_steps,
            ..config.trainer.clone()
        };
        let engine = Engine::new(EngineConfig::new(num_envs, spec.num_agents, workers))?;
        let mut trainer = Trainer::new(trainer_config, env.runtime, engine, map)?;
        let secs = time_median(run.bench_reps, || {
            trainer.step()?;
            Ok(())
        })?;
        Some(1.0 / secs)
    } else {
        None
    };
    Ok(EnvBenchRow {
        num_envs,
        steps_per_sec: Some(steps_per_sec),
        iterations_per_sec,
        error: None,
    })
}

/// Throughput against environment count. A count that fails (for example
/// by exhausting memory during allocation) becomes an error row.
pub fn bench_envs(config: &RunConfig, workers: usize, meta: ReportMeta) -> Result<EnvBenchReport, HarnessError> {
    let mut rows = Vec::new();
    for &count in &config.run.env_counts {
        let row = bench_one_env_count(config, count, workers).unwrap_or_else(|e| EnvBenchRow {
            num_envs: count,
            steps_per_sec: None,
            iterations_per_sec: None,
            error: Some(e.to_string()),
        });
        rows.push(row);
    }
    Ok(EnvBenchReport { meta, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentBenchRow {
    pub obs_mode: String,
    pub num_agents: usize,
    /// Median wall time of one step of one environment, in milliseconds.
    pub step_ms: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentBenchReport {
    pub meta: ReportMeta,
    pub rows: Vec<AgentBenchRow>,
    /// Least-squares slope of ln(step time) against ln(N), per obs mode.
    pub slopes: IndexMap<String, f64>,
}

/// Tag config for `n` agents derived from `base`: about 5% taggers (at
/// least one) and `k_nearest` capped at `n - 1`.
pub fn scaled_config(base: &TagConfig, n: usize, obs_mode: ObsMode) -> TagConfig {
    let num_taggers = (n / 20).max(1).min(n - 1);
    TagConfig {
        num_taggers,
        num_runners: n - num_taggers,
        obs_mode,
        k_nearest: base.k_nearest.min(n - 1),
        ..base.clone()
    }
}

/// Ordinary least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

fn bench_one_agent_count(config: &RunConfig, n: usize, mode: ObsMode, workers: usize) -> Result<f64, HarnessError> {
    let run = &config.run;
    let tag = scaled_config(&config.env, n, mode);
    let num_envs = run.bench_agent_envs;
    let mut env = TagEnv::build(&tag, num_envs)?;
    let map = env.policy_map();
    let engine = Engine::new(EngineConfig::new(num_envs, n, workers))?;
    let mut tracker = EpisodeTracker::new(&env.runtime.spec, map.iter().count());
    let mut start_step = 0;
    let secs = time_median(run.bench_reps, || {
        collect_rollout(
            &mut env.runtime,
            &engine,
            &map,
            Behavior::Uniform,
            config.trainer.seed,
            start_step,
            run.bench_steps,
            false,
            &mut tracker,
        )?;
        start_step += run.bench_steps as u64;
        Ok(())
    })?;
    Ok(secs * 1e3 / (run.bench_steps * num_envs) as f64)
}

/// Per-environment step time against agent count, for partial and full
/// observations, with fitted log-log slopes.
pub fn bench_agents(config: &RunConfig, workers: usize, meta: ReportMeta) -> Result<AgentBenchReport, HarnessError> {
    let mut rows = Vec::new();
    let mut slopes = IndexMap::new();
    for mode in [ObsMode::Partial, ObsMode::Full] {
        let label = format!("{mode:?}").to_lowercase();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for &n in &config.run.agent_counts {
            match bench_one_agent_count(config, n, mode, workers) {
                Ok(ms) => {
                    xs.push((n as f64).ln());
                    ys.push(ms.ln());
                    rows.push(AgentBenchRow {
                        obs_mode: label.clone(),
                        num_agents: n,
                        step_ms: Some(ms),
                        error: None,
                    });
                }
                Err(e) => rows.push(AgentBenchRow {
                    obs_mode: label.clone(),
                    num_agents: n,
                    step_ms: None,
                    error: Some(e.to_string()),
                }),
            }
        }
        if xs.len() >= 2 {
            slopes.insert(label, fit_slope(&xs, &ys));
        }
    }
    Ok(AgentBenchReport { meta, rows, slopes })
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub meta: ReportMeta,
    pub start_iteration: u64,
    pub rows: Vec<IterationMetrics>,
    pub checkpoints: Vec<PathBuf>,
    pub trajectories: Vec<PathBuf>,
}

/// One row of a trajectory dump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: u64,
    pub env: usize,
    pub agent: usize,
    pub x: f32,
    pub y: f32,
    pub active: u8,
    pub is_tagger: u8,
}

fn ckpt_file(dir: &Path, tag: &str) -> PathBuf {
    dir.join(format!("{tag}.ckpt"))
}

fn save_checkpoints(trainer: &Trainer, dir: &Path, meta: &ReportMeta) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (tag, params) in trainer.policies() {
        let path = ckpt_file(dir, tag);
        params.save(
            &path,
            &CheckpointMeta {
                tag: tag.clone(),
                seed: meta.seed,
                config_hash: meta.config_hash.clone(),
                iteration: trainer.iteration(),
                dims: params.dims.clone(),
            },
        )?;
        written.push(path);
    }
    Ok(written)
}

/// Loads `<tag>.ckpt` for every tag in `tags`; returns the parameters and
/// the iteration they were saved at.
pub fn load_checkpoints<'a>(
    dir: &Path,
    tags: impl IntoIterator<Item = &'a str>,
) -> Result<(IndexMap<String, PolicyParams>, u64), HarnessError> {
    let mut policies = IndexMap::new();
    let mut iteration = None;
    for tag in tags {
        let (params, meta) = PolicyParams::load(&ckpt_file(dir, tag))?;
        if *iteration.get_or_insert(meta.iteration) != meta.iteration {
            return Err(HarnessError::Config(format!("checkpoints in {} disagree on iteration", dir.display())));
        }
        policies.insert(tag.to_string(), params);
    }
    Ok((policies, iteration.unwrap_or(0)))
}

/// Plays one episode in a single fresh environment with the given
/// policies. Exactly `episode_length` steps are logged; after an early
/// finish the final state is repeated.
pub fn record_trajectory(
    config: &TagConfig,
    policies: &IndexMap<String, PolicyParams>,
    seed: u64,
) -> Result<Vec<TrajectoryRow>, HarnessError> {
    let mut env = TagEnv::build(config, 1)?;
    let map = env.policy_map();
    let spec = env.runtime.spec;
    let engine = Engine::new(EngineConfig::new(1, spec.num_agents, 1))?;
    let shape = LogitShape {
        num_envs: 1,
        num_agents: spec.num_agents,
        categories: spec.categories,
        choices: spec.choices,
    };
    let mut rows = Vec::with_capacity(config.episode_length as usize * spec.num_agents);
    let mut finished = false;
    let mut last: Vec<TrajectoryRow> = Vec::new();
    for step in 0..config.episode_length as u64 {
        if !finished {
            let store = &mut env.runtime.store;
            let logits = joint_logits(store, &spec, &map, Behavior::Policies(policies))?;
            sample_into(&logits, shape, seed, step, store.array_mut::<i32>(SAMPLED_ACTIONS)?)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            engine.run_step(&env.runtime.plan, store, step)?;
            let store = &env.runtime.store;
            let (xs, ys) = (store.array::<f32>(LOC_X)?, store.array::<f32>(LOC_Y)?);
            let (active, tagger) = (store.array::<u8>(ACTIVE)?, store.array::<u8>(IS_TAGGER)?);
            last = (0..spec.num_agents)
                .map(|agent| TrajectoryRow {
                    step,
                    env: 0,
                    agent,
                    x: xs[agent],
                    y: ys[agent],
                    active: active[agent],
                    is_tagger: tagger[agent],
                })
                .collect();
            finished = store.array::<u8>(DONE)?[0] != 0;
        }
        rows.extend(last.iter().map(|r| TrajectoryRow { step, ..*r }));
    }
    Ok(rows)
}

/// Trains per `config`, writing `metrics.csv`, `report.json`, checkpoints
/// under `checkpoints/iter_<n>/` and optional trajectory CSVs to `out_dir`.
pub fn run_training(config: &RunConfig, workers: usize, out_dir: &Path, meta: ReportMeta) -> Result<TrainingReport, HarnessError> {
    fs::create_dir_all(out_dir)?;
    let env = TagEnv::build(&config.env, config.engine.num_envs)?;
    let map = env.policy_map();
    let engine = Engine::new(EngineConfig::new(config.engine.num_envs, env.runtime.spec.num_agents, workers))?;
    let mut trainer = Trainer::new(config.trainer.clone(), env.runtime, engine, map.clone())?;
    if let Some(dir) = &config.run.resume_from {
        let (policies, iteration) = load_checkpoints(dir, map.tags())?;
        trainer.resume(policies, iteration)?;
    }
    let start_iteration = trainer.iteration();

    let mut report = TrainingReport {
        meta: meta.clone(),
        start_iteration,
        rows: Vec::new(),
        checkpoints: Vec::new(),
        trajectories: Vec::new(),
    };
    let snapshot = |trainer: &Trainer, report: &mut TrainingReport| -> Result<(), HarnessError> {
        let dir = out_dir.join("checkpoints").join(format!("iter_{}", trainer.iteration()));
        report.checkpoints.extend(save_checkpoints(trainer, &dir, &meta)?);
        if config.run.trajectory_dump {
            let rows = record_trajectory(&config.env, trainer.policies(), config.trainer.seed)?;
            let path = dir.join("trajectory.csv");
            write_csv_rows(&path, None, &rows)?;
            report.trajectories.push(path);
        }
        Ok(())
    };

    let every = config.run.checkpoint_every;
    for i in 0..config.trainer.iterations {
        match trainer.step() {
            Ok(row) => report.rows.push(row),
            Err(source @ TrainerError::Divergence { .. }) => {
                let dir = out_dir.join("checkpoints").join("diverged");
                save_checkpoints(&trainer, &dir, &meta)?;
                write_training_outputs(out_dir, &report)?;
                return Err(HarnessError::Diverged { checkpoint: dir, source });
            }
            Err(e) => return Err(e.into()),
        }
        let last = i + 1 == config.trainer.iterations;
        if last || (every > 0 && (i + 1) % every == 0) {
            snapshot(&trainer, &mut report)?;
        }
    }
    if config.trainer.iterations == 0 {
        snapshot(&trainer, &mut report)?;
    }
    write_training_outputs(out_dir, &report)?;
    Ok(report)
}

fn write_training_outputs(out_dir: &Path, report: &TrainingReport) -> Result<(), HarnessError> {
    write_metrics_csv(&out_dir.join("metrics.csv"), &report.meta, &report.rows)?;
    write_json(&out_dir.join("report.json"), report)
}

// ---------------------------------------------------------------------------
// Report files

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Writes serializable rows as CSV with an optional `#` comment header.
pub fn write_csv_rows<T: Serialize>(path: &Path, meta: Option<&ReportMeta>, rows: &[T]) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut buf = meta.map(ReportMeta::comment_lines).unwrap_or_default().into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for row in rows {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_csv_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(Option<ReportMeta>, Vec<T>), HarnessError> {
    let text = fs::read_to_string(path)?;
    let meta = ReportMeta::from_comment_lines(&text);
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let rows = reader.deserialize().collect::<Result<Vec<T>, _>>()?;
    Ok((meta, rows))
}

const TAG_COLUMNS: [&str; 6] = ["mean_episode_reward", "episodes", "policy_loss", "value_loss", "entropy", "grad_norm"];

/// One row per iteration: `iteration, wall_ms, steps_per_sec`, then six
/// columns per policy tag prefixed with the tag name.
pub fn write_metrics_csv(path: &Path, meta: &ReportMeta, rows: &[IterationMetrics]) -> Result<(), HarnessError> {
    let mut buf = meta.comment_lines().into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let tags: Vec<&String> = rows.first().map(|r| r.tags.keys().collect()).unwrap_or_default();
        let mut header = vec!["iteration".to_string(), "wall_ms".into(), "steps_per_sec".into()];
        for tag in &tags {
            header.extend(TAG_COLUMNS.iter().map(|c| format!("{tag}_{c}")));
        }
        w.write_record(&header)?;
        for row in rows {
            let mut record = vec![row.iteration.to_string(), row.wall_ms.to_string(), row.steps_per_sec.to_string()];
            for tag in &tags {
                let m = &row.tags[*tag];
                record.extend([
                    m.mean_episode_reward.map(|v| v.to_string()).unwrap_or_default(),
                    m.episodes.to_string(),
                    m.policy_loss.to_string(),
                    m.value_loss.to_string(),
                    m.entropy.to_string(),
                    m.grad_norm.to_string(),
                ]);
            }
            w.write_record(&record)?;
        }
        w.flush()?;
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<(Option<ReportMeta>, Vec<IterationMetrics>), HarnessError> {
    let text = fs::read_to_string(path)?;
    let meta = ReportMeta::from_comment_lines(&text);
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    let bad = |m: String| HarnessError::Config(format!("{}: {m}", path.display()));
    if header.len() < 3 || (header.len() - 3) % TAG_COLUMNS.len() != 0 {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let tags: Vec<String> = header
        .iter()
        .skip(3)
        .step_by(TAG_COLUMNS.len())
        .map(|h| h.strip_suffix("_mean_episode_reward").map(String::from).ok_or_else(|| bad(format!("column {h}"))))
        .collect::<Result<_, _>>()?;
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("not a number: {s:?}")));
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let mut tag_metrics = IndexMap::new();
        for (i, tag) in tags.iter().enumerate() {
            let f = |j: usize| &record[3 + i * TAG_COLUMNS.len() + j];
            tag_metrics.insert(
                tag.clone(),
                TagMetrics {
                    mean_episode_reward: if f(0).is_empty() { None } else { Some(num(f(0))?) },
                    episodes: f(1).parse().map_err(|_| bad(format!("episodes {:?}", f(1))))?,
                    policy_loss: num(f(2))?,
                    value_loss: num(f(3))?,
                    entropy: num(f(4))?,
                    grad_norm: num(f(5))?,
                },
            );
        }
        rows.push(IterationMetrics {
            iteration: record[0].parse().map_err(|_| bad(format!("iteration {:?}", &record[0])))?,
            wall_ms: num(&record[1])?,
            steps_per_sec: num(&record[2])?,
            tags: tag_metrics,
        });
    }
    Ok((meta, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.engine.num_envs, 60);
        assert_eq!(c.trainer.gamma, 0.99);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"env": {"grid": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"trainer": {"gamma": 1.5}}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig::default().with_seed(9);
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn worker_precedence() {
        assert_eq!(resolve_workers(Some(3), Some("5"), Some(7)).unwrap(), 3);
        assert_eq!(resolve_workers(None, Some("5"), Some(7)).unwrap(), 5);
        assert_eq!(resolve_workers(None, None, Some(7)).unwrap(), 7);
        assert_eq!(resolve_workers(None, Some(""), None).unwrap(), available_cores());
        assert!(resolve_workers(None, Some("many"), None).is_err());
        assert!(resolve_workers(Some(0), None, None).is_err());
    }

    #[test]
    fn slope_of_power_law() {
        let xs: Vec<f64> = [10.0f64, 100.0, 1000.0].iter().map(|v| v.ln()).collect();
        let ys: Vec<f64> = [10.0f64, 100.0, 1000.0].iter().map(|v| (3.0 * v * v).ln()).collect();
        assert!((fit_slope(&xs, &ys) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn scaled_config_bounds() {
        let base = TagConfig::default();
        let c = scaled_config(&base, 2, ObsMode::Partial);
        assert_eq!((c.num_taggers, c.num_runners, c.k_nearest), (1, 1, 1));
        let c = scaled_config(&base, 1000, ObsMode::Full);
        assert_eq!((c.num_taggers, c.num_runners), (50, 950));
    }
}
