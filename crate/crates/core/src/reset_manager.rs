//! Detection and in-place reset of finished environments.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::data_store::{ArrayId, DataStore, EnvView, StoreError, DONE};

#[derive(Debug, Error, PartialEq)]
pub enum ResetError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("array `{0}` is both snapshot-restored and zero-filled")]
    AmbiguousCoverage(String),
}

/// Which arrays are restored how when an environment resets.
///
/// Arrays flagged `snapshot_on_reset` are restored from their saved copy,
/// arrays named in `zero_on_reset` are zero-filled, and everything else is
/// left alone. The `done` flag is always cleared.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ResetPolicy {
    pub auto: bool,
    pub zero_on_reset: Vec<String>,
}

/// Environment-specific re-initialization after the generic restore, given
/// the new episode index of that environment.
pub type ReinitFn = dyn Fn(&mut EnvView<'_>, u64) + Send + Sync;

#[derive(Clone)]
pub struct ResetManager {
    policy: ResetPolicy,
    zero_ids: Vec<ArrayId>,
    done_id: ArrayId,
    reinit: Option<Arc<ReinitFn>>,
    episodes: Vec<u64>,
}

impl fmt::Debug for ResetManager {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ResetManager")
            .field("policy", &self.policy)
            .field("has_reinit", &self.reinit.is_some())
            .field("episodes", &self.episodes)
            .finish()
    }
}

impl ResetManager {
    pub fn new(policy: ResetPolicy, store: &DataStore, reinit: Option<Arc<ReinitFn>>) -> Result<Self, ResetError> {
        let done_id = store.id(DONE)?;
        let mut zero_ids = Vec::new();
        let mut seen = HashSet::new();
        for name in &policy.zero_on_reset {
            let id = store.id(name)?;
            if store.spec(id).snapshot_on_reset {
                return Err(ResetError::AmbiguousCoverage(name.clone()));
            }
            if seen.insert(id) {
                zero_ids.push(id);
            }
        }
        if seen.insert(done_id) {
            zero_ids.push(done_id);
        }
        Ok(Self {
            policy,
            zero_ids,
            done_id,
            reinit,
            episodes: vec![0; store.num_envs()],
        })
    }

    pub fn policy(&self) -> &ResetPolicy {
        &self.policy
    }

    /// Episode index currently running in `env` (0 for the first episode).
    pub fn episode(&self, env: usize) -> u64 {
        self.episodes[env]
    }

    pub fn detect_done(&self, store: &DataStore) -> Vec<usize> {
        let done = store
            .array_by_id::<u8>(self.done_id)
            .expect("done placeholder is boolean");
        done_envs(done)
    }

    /// Restores `env_ids` to a fresh initial state, leaving other envs untouched.
    pub fn auto_reset(&mut self, store: &mut DataStore, env_ids: &[usize]) -> Result<(), ResetError> {
        if env_ids.is_empty() {
            return Ok(());
        }
        store.restore_snapshot(env_ids)?;
        for &id in &self.zero_ids {
            store.zero_envs(id, env_ids)?;
        }
        for &env in env_ids {
            self.episodes[env] += 1;
        }
        if let Some(reinit) = &self.reinit {
            let mut views = store.env_views();
            for &env in env_ids {
                reinit(&mut views[env], self.episodes[env]);
            }
        }
        Ok(())
    }
}

/// Indices of set flags in a per-env done array.
pub fn done_envs(done: &[u8]) -> Vec<usize> {
    done.iter()
        .enumerate()
        .filter_map(|(i, &d)| (d != 0).then_some(i))
        .collect()
}

/// Reads the done placeholder of any store.
pub fn detect_done(store: &DataStore) -> Result<Vec<usize>, StoreError> {
    Ok(done_envs(store.array::<u8>(DONE)?))
}
