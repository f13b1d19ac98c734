//! Phase-barriered parallel stepping of every environment replica.
//!
//! One environment is the unit of work: a worker runs a phase for all agents
//! of an environment (agent index ascending) before moving on. Consecutive
//! phases are separated by a join, so no phase ever sees partial writes of the
//! phase before it. Because kernels only touch their own environment row,
//! results do not depend on the worker count.

use std::collections::HashSet;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::data_store::{DataStore, EnvView, StoreError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("engine config: {0}")]
    Config(String),
    #[error("phase `{phase}` failed in env {env}{agent}: {message}", agent = fmt_agent(*.agent))]
    StepFailure {
        phase: String,
        env: usize,
        agent: Option<usize>,
        message: String,
    },
    #[error("invalid plan: {}", join_diagnostics(.0))]
    InvalidPlan(Vec<Diagnostic>),
    #[error("rollout horizon must be at least 1")]
    EmptyHorizon,
    #[error("store does not match engine: {0}")]
    StoreMismatch(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("hook `{hook}` failed: {message}")]
    Hook { hook: &'static str, message: String },
}

fn fmt_agent(agent: Option<usize>) -> String {
    agent.map(|a| format!(", agent {a}")).unwrap_or_default()
}

fn join_diagnostics(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ")
}

/// Context handed to every kernel invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepContext {
    pub step_index: u64,
}

/// Error value a kernel returns to abort the step.
pub type KernelResult = Result<(), String>;

pub type AgentKernel = dyn Fn(&StepContext, &mut EnvView<'_>, usize) -> KernelResult + Send + Sync;
pub type EnvKernel = dyn Fn(&StepContext, &mut EnvView<'_>) -> KernelResult + Send + Sync;

#[derive(Clone)]
pub enum Kernel {
    PerAgent(Arc<AgentKernel>),
    PerEnv(Arc<EnvKernel>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerAgent,
    PerEnv,
}

/// Which part of an environment row a phase touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Only the row of the agent being processed.
    OwnAgent,
    /// Any part of the environment row.
    Env,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Access {
    pub array: String,
    pub scope: Scope,
}

#[derive(Clone)]
pub struct Phase {
    name: String,
    kernel: Kernel,
    reads: Vec<Access>,
    writes: Vec<Access>,
}

impl fmt::Debug for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Phase")
            .field("name", &self.name)
            .field("granularity", &self.granularity())
            .field("reads", &self.reads)
            .field("writes", &self.writes)
            .finish()
    }
}

impl Phase {
    pub fn per_agent<F>(name: impl Into<String>, kernel: F) -> Self
    where
        F: Fn(&StepContext, &mut EnvView<'_>, usize) -> KernelResult + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            kernel: Kernel::PerAgent(Arc::new(kernel)),
            reads: Vec::new(),
            writes: Vec::new(),
        }
    }

    pub fn per_env<F>(name: impl Into<String>, kernel: F) -> Self
    where
        F: Fn(&StepContext, &mut EnvView<'_>) -> KernelResult + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            kernel: Kernel::PerEnv(Arc::new(kernel)),
            reads: Vec::new(),
            writes: Vec::new(),
        }
    }

    pub fn reads(mut self, array: impl Into<String>, scope: Scope) -> Self {
        self.reads.push(Access {
            array: array.into(),
            scope,
        });
        self
    }

    pub fn writes(mut self, array: impl Into<String>, scope: Scope) -> Self {
        self.writes.push(Access {
            array: array.into(),
            scope,
        });
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn granularity(&self) -> Granularity {
        match self.kernel {
            Kernel::PerAgent(_) => Granularity::PerAgent,
            Kernel::PerEnv(_) => Granularity::PerEnv,
        }
    }

    pub fn read_set(&self) -> &[Access] {
        &self.reads
    }

    pub fn write_set(&self) -> &[Access] {
        &self.writes
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub phase: Option<String>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.phase {
            Some(p) => write!(f, "phase `{p}`: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Ordered list of phases making up one simulation step.
#[derive(Debug, Clone, Default)]
pub struct PhasePlan {
    phases: Vec<Phase>,
}

impl PhasePlan {
    pub fn new(phases: Vec<Phase>) -> Self {
        Self { phases }
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    /// Structural checks on granularity and declared ownership.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut diags = Vec::new();
        if self.phases.is_empty() {
            diags.push(Diagnostic {
                phase: None,
                message: "no phases".into(),
            });
        }
        let mut seen = HashSet::new();
        for phase in &self.phases {
            let mut diag = |message: String| {
                diags.push(Diagnostic {
                    phase: Some(phase.name.clone()),
                    message,
                })
            };
            if !seen.insert(phase.name.as_str()) {
                diag("duplicate phase name".into());
            }
            if phase.granularity() != Granularity::PerAgent {
                continue;
            }
            for w in &phase.writes {
                if w.scope != Scope::OwnAgent {
                    diag(format!(
                        "ownership: per-agent phase writes `{}` outside its own agent slice",
                        w.array
                    ));
                }
            }
            for r in &phase.reads {
                if r.scope == Scope::Env && phase.writes.iter().any(|w| w.array == r.array) {
                    diag(format!(
                        "hazard: per-agent phase reads other agents' `{}` while writing it",
                        r.array
                    ));
                }
            }
        }
        diags
    }

    /// [`validate`](Self::validate) plus checks against a concrete store layout.
    pub fn validate_for(&self, store: &DataStore) -> Vec<Diagnostic> {
        let mut diags = self.validate();
        for phase in &self.phases {
            for access in phase.reads.iter().chain(&phase.writes) {
                match store.spec_by_name(&access.array) {
                    Err(_) => diags.push(Diagnostic {
                        phase: Some(phase.name.clone()),
                        message: format!("unknown array `{}`", access.array),
                    }),
                    Ok(spec) if access.scope == Scope::OwnAgent && !spec.agent_axis => {
                        diags.push(Diagnostic {
                            phase: Some(phase.name.clone()),
                            message: format!(
                                "ownership: `{}` has no agent axis, cannot be agent-scoped",
                                access.array
                            ),
                        })
                    }
                    Ok(_) => {}
                }
            }
        }
        diags
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineConfig {
    pub num_envs: usize,
    pub num_agents: usize,
    pub worker_count: usize,
    pub deterministic: bool,
}

impl EngineConfig {
    pub fn new(num_envs: usize, num_agents: usize, worker_count: usize) -> Self {
        Self {
            num_envs,
            num_agents,
            worker_count,
            deterministic: true,
        }
    }
}

/// Callbacks driven by [`Engine::run_rollout`], invoked once per step in
/// declaration order.
pub trait StepHooks {
    fn policy_forward(&mut self, _store: &mut DataStore, _step: u64) -> Result<(), EngineError> {
        Ok(())
    }

    fn sample(&mut self, _store: &mut DataStore, _step: u64) -> Result<(), EngineError> {
        Ok(())
    }

    /// Runs after the step's phases, before done detection.
    fn record(&mut self, _store: &DataStore, _step: u64) -> Result<(), EngineError> {
        Ok(())
    }

    /// Environments that finished this step.
    fn done_check(&mut self, _store: &DataStore, _step: u64) -> Result<Vec<usize>, EngineError> {
        Ok(Vec::new())
    }

    fn auto_reset(
        &mut self,
        _store: &mut DataStore,
        _env_ids: &[usize],
        _step: u64,
    ) -> Result<(), EngineError> {
        Ok(())
    }
}

/// Hooks that do nothing; the rollout only runs the phases.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHooks;

impl StepHooks for NoHooks {}

pub struct Engine {
    config: EngineConfig,
    pool: Option<rayon::ThreadPool>,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine").field("config", &self.config).finish()
    }
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, EngineError> {
        if config.worker_count == 0 || config.num_envs == 0 || config.num_agents == 0 {
            return Err(EngineError::Config(format!(
                "worker_count, num_envs and num_agents must be >= 1 (got {config:?})"
            )));
        }
        if !config.deterministic {
            return Err(EngineError::Config(
                "only deterministic execution is supported".into(),
            ));
        }
        let pool = if config.worker_count > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.worker_count)
                    .build()
                    .map_err(|e| EngineError::Config(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Self { config, pool })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn worker_count(&self) -> usize {
        self.config.worker_count
    }

    /// Runs `f` inside this engine's worker pool (or inline when sequential).
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.pool {
            Some(pool) => pool.install(f),
            None => f(),
        }
    }

    fn check_store(&self, store: &DataStore) -> Result<(), EngineError> {
        if !store.is_locked() {
            return Err(EngineError::Store(StoreError::NotLocked));
        }
        if store.num_envs() != self.config.num_envs || store.num_agents() != self.config.num_agents {
            return Err(EngineError::StoreMismatch(format!(
                "store is {}x{}, engine expects {}x{}",
                store.num_envs(),
                store.num_agents(),
                self.config.num_envs,
                self.config.num_agents
            )));
        }
        Ok(())
    }

    /// Executes every phase of `plan` once over all environments.
    pub fn run_step(&self, plan: &PhasePlan, store: &mut DataStore, step_index: u64) -> Result<(), EngineError> {
        self.check_store(store)?;
        let diags = plan.validate();
        if !diags.is_empty() {
            return Err(EngineError::InvalidPlan(diags));
        }
        self.step_unchecked(plan, store, step_index)
    }

    fn step_unchecked(&self, plan: &PhasePlan, store: &mut DataStore, step_index: u64) -> Result<(), EngineError> {
        let ctx = StepContext { step_index };
        let mut views = store.env_views();
        for phase in &plan.phases {
            let outcomes: Vec<Result<(), EngineError>> = match &self.pool {
                Some(pool) => pool.install(|| {
                    views
                        .par_iter_mut()
                        .map(|view| run_phase(phase, &ctx, view))
                        .collect()
                }),
                None => views
                    .iter_mut()
                    .map(|view| run_phase(phase, &ctx, view))
                    .collect(),
            };
            // lowest env id wins so the reported failure is schedule-independent
            if let Some(err) = outcomes.into_iter().find_map(Result::err) {
                return Err(err);
            }
        }
        Ok(())
    }

    /// Runs `horizon` steps starting at `start_step`, calling `hooks` around each.
    pub fn run_rollout(
        &self,
        plan: &PhasePlan,
        store: &mut DataStore,
        start_step: u64,
        horizon: usize,
        hooks: &mut dyn StepHooks,
    ) -> Result<(), EngineError> {
        if horizon == 0 {
            return Err(EngineError::EmptyHorizon);
        }
        self.check_store(store)?;
        let diags = plan.validate_for(store);
        if !diags.is_empty() {
            return Err(EngineError::InvalidPlan(diags));
        }
        for offset in 0..horizon as u64 {
            let step = start_step + offset;
            hooks.policy_forward(store, step)?;
            hooks.sample(store, step)?;
            self.step_unchecked(plan, store, step)?;
            hooks.record(store, step)?;
            let done = hooks.done_check(store, step)?;
            if !done.is_empty() {
                hooks.auto_reset(store, &done, step)?;
            }
        }
        Ok(())
    }
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "kernel panicked".into()
    }
}

fn run_phase(phase: &Phase, ctx: &StepContext, view: &mut EnvView<'_>) -> Result<(), EngineError> {
    let env = view.env_id();
    let failure = |agent, message| EngineError::StepFailure {
        phase: phase.name.clone(),
        env,
        agent,
        message,
    };
    match &phase.kernel {
        Kernel::PerAgent(kernel) => {
            for agent in 0..view.num_agents() {
                match catch_unwind(AssertUnwindSafe(|| kernel(ctx, view, agent))) {
                    Ok(Ok(())) => {}
                    Ok(Err(message)) => return Err(failure(Some(agent), message)),
                    Err(payload) => return Err(failure(Some(agent), panic_message(payload))),
                }
            }
            Ok(())
        }
        Kernel::PerEnv(kernel) => match catch_unwind(AssertUnwindSafe(|| kernel(ctx, view))) {
            Ok(Ok(())) => Ok(()),
            Ok(Err(message)) => Err(failure(None, message)),
            Err(payload) => Err(failure(None, panic_message(payload))),
        },
    }
}
