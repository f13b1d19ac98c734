//! A runnable batch of environment replicas: store, step plan and resetter.

use crate::data_store::DataStore;
use crate::reset_manager::{ResetError, ResetManager};
use crate::step_engine::{Engine, EngineError, PhasePlan};

/// Static shape information a policy needs about an environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvSpec {
    pub num_envs: usize,
    pub num_agents: usize,
    pub obs_dim: usize,
    pub categories: usize,
    pub choices: usize,
}

#[derive(Debug)]
pub struct VecEnv {
    pub store: DataStore,
    pub plan: PhasePlan,
    pub resetter: ResetManager,
    pub spec: EnvSpec,
}

impl From<ResetError> for EngineError {
    fn from(err: ResetError) -> Self {
        match err {
            ResetError::Store(e) => EngineError::Store(e),
            other => EngineError::Hook {
                hook: "auto_reset",
                message: other.to_string(),
            },
        }
    }
}

impl VecEnv {
    /// One step of every replica. Finished replicas are reset in place when
    /// the reset policy is automatic; their ids are returned either way.
    pub fn step(&mut self, engine: &Engine, step_index: u64) -> Result<Vec<usize>, EngineError> {
        engine.run_step(&self.plan, &mut self.store, step_index)?;
        let done = self.resetter.detect_done(&self.store);
        if self.resetter.policy().auto && !done.is_empty() {
            self.resetter.auto_reset(&mut self.store, &done)?;
        }
        Ok(done)
    }
}
