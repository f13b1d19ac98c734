//! Discrete and continuous Tag as phase plans over the data store.
//!
//! A step is three phases: per-agent movement, per-env catch resolution
//! (which also rebuilds the spatial index and advances the clock), and
//! per-agent observation plus reward. [`reference::TagReference`] runs the
//! same game sequentially with brute-force queries.

mod config;
pub mod dynamics;
pub mod observe;
pub mod reference;
pub mod spatial;

use std::sync::Arc;

use thiserror::Error;

pub use config::{ObsMode, TagConfig, Variant};
pub use dynamics::{move_continuous, move_discrete, placement, Motion};
pub use observe::{compute_reward, write_observation, EnvState, ObsLayout};
pub use spatial::GridGeometry;

use crate::data_store::{
    ArrayId, ArrayRead, ArraySpec, DataStore, ElementKind, EnvView, StoreError, DONE, OBSERVATIONS, REWARDS,
    SAMPLED_ACTIONS,
};
use crate::policy_model::PolicyMap;
use crate::reset_manager::{ResetError, ResetManager, ResetPolicy};
use crate::step_engine::{KernelResult, Phase, PhasePlan, Scope};
use crate::vec_env::{EnvSpec, VecEnv};
use spatial::CatchScene;

#[derive(Debug, Error)]
pub enum TagError {
    #[error("invalid Tag config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Reset(#[from] ResetError),
}

pub const LOC_X: &str = "loc_x";
pub const LOC_Y: &str = "loc_y";
pub const SPEED: &str = "speed";
pub const DIRECTION: &str = "direction";
pub const IS_TAGGER: &str = "is_tagger";
pub const ACTIVE: &str = "active";
pub const STEP_COUNT: &str = "step_count";
pub const TAG_CREDIT: &str = "tag_credit";
pub const TAGGED_NOW: &str = "tagged_now";
pub const SPATIAL_INDEX: &str = "spatial_index";

pub const TAGGER_POLICY: &str = "tagger";
pub const RUNNER_POLICY: &str = "runner";

/// Handles of every Tag array in the store.
#[derive(Debug, Clone, Copy)]
pub struct TagArrays {
    pub loc_x: ArrayId,
    pub loc_y: ArrayId,
    pub speed: Option<ArrayId>,
    pub direction: Option<ArrayId>,
    pub is_tagger: ArrayId,
    pub active: ArrayId,
    pub step_count: ArrayId,
    pub observations: ArrayId,
    pub sampled_actions: ArrayId,
    pub rewards: ArrayId,
    pub done: ArrayId,
    pub tag_credit: ArrayId,
    pub tagged_now: ArrayId,
    pub spatial_index: ArrayId,
}

/// Deliberate kernel defects for mutation-testing the consistency checker.
#[cfg(feature = "fault-injection")]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Fault {
    /// Added to the catch radius in the parallel kernels only.
    pub tag_radius_offset: f32,
}

#[derive(Debug, Clone)]
struct Kernels {
    config: Arc<TagConfig>,
    layout: ObsLayout,
    geom: GridGeometry,
    ids: TagArrays,
    catch_radius: f32,
}

impl Kernels {
    fn state<'r, R: ArrayRead>(&self, reader: &'r R) -> EnvState<'r> {
        EnvState {
            loc_x: reader.read(self.ids.loc_x),
            loc_y: reader.read(self.ids.loc_y),
            speed: self.ids.speed.map_or(&[][..], |id| reader.read(id)),
            direction: self.ids.direction.map_or(&[][..], |id| reader.read(id)),
            is_tagger: reader.read(self.ids.is_tagger),
            active: reader.read(self.ids.active),
            step_count: reader.read::<i32>(self.ids.step_count)[0],
        }
    }

    fn move_agent(&self, view: &mut EnvView<'_>, agent: usize) -> KernelResult {
        if view.get::<u8>(self.ids.active)[agent] == 0 {
            return Ok(());
        }
        let (categories, choices) = self.config.action_shape();
        let actions = &view.get::<i32>(self.ids.sampled_actions)[agent * categories..(agent + 1) * categories];
        if let Some(a) = actions.iter().find(|&&a| a < 0 || a as usize >= choices) {
            return Err(format!("action {a} outside 0..{choices}"));
        }
        let (x, y) = (view.get::<f32>(self.ids.loc_x)[agent], view.get::<f32>(self.ids.loc_y)[agent]);
        match self.config.variant {
            Variant::Discrete => {
                let (nx, ny) = move_discrete(actions[0], x, y, self.config.grid_size);
                view.get_mut::<f32>(self.ids.loc_x)[agent] = nx;
                view.get_mut::<f32>(self.ids.loc_y)[agent] = ny;
            }
            Variant::Continuous => {
                let (speed_id, dir_id) = (self.ids.speed.unwrap(), self.ids.direction.unwrap());
                let tagger = view.get::<u8>(self.ids.is_tagger)[agent] != 0;
                let m = move_continuous(
                    actions[0],
                    actions[1],
                    Motion {
                        speed: view.get::<f32>(speed_id)[agent],
                        direction: view.get::<f32>(dir_id)[agent],
                        x,
                        y,
                    },
                    &self.config,
                    tagger,
                );
                view.get_mut::<f32>(speed_id)[agent] = m.speed;
                view.get_mut::<f32>(dir_id)[agent] = m.direction;
                view.get_mut::<f32>(self.ids.loc_x)[agent] = m.x;
                view.get_mut::<f32>(self.ids.loc_y)[agent] = m.y;
            }
        }
        Ok(())
    }

    fn rebuild_index(&self, view: &mut EnvView<'_>) {
        let (index, reader) = view.split_mut::<i32>(self.ids.spatial_index);
        spatial::build_index(
            &self.geom,
            reader.get(self.ids.loc_x),
            reader.get(self.ids.loc_y),
            index,
        );
    }

    fn resolve(&self, view: &mut EnvView<'_>) -> KernelResult {
        self.rebuild_index(view);
        let num_taggers = self.config.num_taggers;
        let events: Vec<(usize, usize)> = {
            let scene = CatchScene {
                xs: view.get(self.ids.loc_x),
                ys: view.get(self.ids.loc_y),
                is_tagger: view.get(self.ids.is_tagger),
                active: view.get(self.ids.active),
                radius: self.catch_radius,
            };
            let index = view.get::<i32>(self.ids.spatial_index);
            (num_taggers..view.num_agents())
                .filter(|&r| scene.active[r] != 0)
                .filter_map(|r| spatial::nearest_tagger_indexed(&self.geom, index, &scene, r).map(|t| (r, t)))
                .collect()
        };
        view.get_mut::<i32>(self.ids.tag_credit).fill(0);
        view.get_mut::<u8>(self.ids.tagged_now).fill(0);
        for &(runner, tagger) in &events {
            view.get_mut::<u8>(self.ids.active)[runner] = 0;
            view.get_mut::<u8>(self.ids.tagged_now)[runner] = 1;
            view.get_mut::<i32>(self.ids.tag_credit)[tagger] += 1;
        }
        let runners_left = view.get::<u8>(self.ids.active)[num_taggers..]
            .iter()
            .any(|&a| a != 0);
        let clock = &mut view.get_mut::<i32>(self.ids.step_count)[0];
        *clock += 1;
        let finished = *clock >= self.config.episode_length as i32 || !runners_left;
        view.get_mut::<u8>(self.ids.done)[0] = u8::from(finished);
        Ok(())
    }

    fn observe_agent(&self, view: &mut EnvView<'_>, agent: usize, scratch: &mut Vec<(f32, u32)>) {
        let dim = self.layout.obs_dim;
        let (obs, reader) = view.split_mut::<f32>(self.ids.observations);
        let state = self.state(&reader);
        let out = &mut obs[agent * dim..(agent + 1) * dim];
        match self.config.obs_mode {
            ObsMode::Full => {
                let others = (0..state.loc_x.len()).filter(|&j| j != agent);
                write_observation(&self.config, &self.layout, &state, agent, others, out);
            }
            ObsMode::Partial => {
                if state.active[agent] != 0 {
                    spatial::k_nearest_indexed(
                        &self.geom,
                        reader.get(self.ids.spatial_index),
                        state.loc_x,
                        state.loc_y,
                        agent,
                        self.config.k_nearest,
                        scratch,
                    );
                } else {
                    scratch.clear();
                }
                let nearest = scratch.iter().map(|&(_, j)| j as usize);
                write_observation(&self.config, &self.layout, &state, agent, nearest, out);
            }
        }
    }

    fn reward_agent(&self, view: &mut EnvView<'_>, agent: usize) {
        let reward = compute_reward(
            &self.config,
            view.get::<u8>(self.ids.is_tagger)[agent] != 0,
            view.get::<i32>(self.ids.tag_credit)[agent],
            view.get::<u8>(self.ids.tagged_now)[agent] != 0,
        );
        view.get_mut::<f32>(self.ids.rewards)[agent] = reward;
    }

    fn observe_all(&self, view: &mut EnvView<'_>) {
        self.rebuild_index(view);
        let mut scratch = Vec::with_capacity(self.config.k_nearest);
        for agent in 0..view.num_agents() {
            self.observe_agent(view, agent, &mut scratch);
        }
    }

    /// Fresh episode `episode` in this env, after the generic restore.
    fn reinit(&self, view: &mut EnvView<'_>, episode: u64) {
        let env = view.env_id();
        for agent in 0..view.num_agents() {
            let (x, y, heading) = placement(&self.config, episode, env, agent);
            view.get_mut::<f32>(self.ids.loc_x)[agent] = x;
            view.get_mut::<f32>(self.ids.loc_y)[agent] = y;
            if let Some(dir) = self.ids.direction {
                view.get_mut::<f32>(dir)[agent] = heading;
            }
        }
        self.observe_all(view);
    }
}

/// A ready-to-run batch of Tag replicas.
#[derive(Debug)]
pub struct TagEnv {
    pub config: TagConfig,
    pub layout: ObsLayout,
    pub geom: GridGeometry,
    pub ids: TagArrays,
    pub runtime: VecEnv,
}

impl TagEnv {
    /// Registers all Tag arrays for `num_envs` replicas, locks the store and
    /// returns the three-phase plan with an auto-resetting reset manager.
    pub fn build(config: &TagConfig, num_envs: usize) -> Result<Self, TagError> {
        Self::build_inner(config, num_envs, 0.0)
    }

    #[cfg(feature = "fault-injection")]
    pub fn build_with_fault(config: &TagConfig, num_envs: usize, fault: Fault) -> Result<Self, TagError> {
        Self::build_inner(config, num_envs, fault.tag_radius_offset)
    }

    fn build_inner(config: &TagConfig, num_envs: usize, radius_offset: f32) -> Result<Self, TagError> {
        config.validate()?;
        if num_envs == 0 {
            return Err(TagError::InvalidConfig("num_envs must be positive".into()));
        }
        let n = config.num_agents();
        let layout = ObsLayout::for_config(config);
        let geom = GridGeometry::for_config(config);
        let (categories, choices) = config.action_shape();
        let continuous = config.variant == Variant::Continuous;

        let mut xs = Vec::with_capacity(num_envs * n);
        let mut ys = Vec::with_capacity(num_envs * n);
        let mut headings = Vec::with_capacity(num_envs * n);
        for env in 0..num_envs {
            for agent in 0..n {
                let (x, y, h) = placement(config, 0, env, agent);
                xs.push(x);
                ys.push(y);
                headings.push(h);
            }
        }
        let tagger_flags: Vec<u8> = (0..num_envs)
            .flat_map(|_| (0..n).map(|a| u8::from(config.is_tagger(a))))
            .collect();

        let mut store = DataStore::new(num_envs, n)?;
        let agent_array = |name: &str, kind, trailing: &[usize]| ArraySpec::per_agent(name, kind, num_envs, n, trailing);
        let real = ElementKind::Real;
        let int = ElementKind::Integer;
        let boolean = ElementKind::Boolean;

        let loc_x = store.register(agent_array(LOC_X, real, &[]).with_snapshot(), xs)?;
        let loc_y = store.register(agent_array(LOC_Y, real, &[]).with_snapshot(), ys)?;
        let (speed, direction) = if continuous {
            (
                Some(store.register_zeros(agent_array(SPEED, real, &[]).with_snapshot())?),
                Some(store.register(agent_array(DIRECTION, real, &[]).with_snapshot(), headings)?),
            )
        } else {
            (None, None)
        };
        let is_tagger = store.register(agent_array(IS_TAGGER, boolean, &[]).with_snapshot(), tagger_flags)?;
        let active = store.register(
            agent_array(ACTIVE, boolean, &[]).with_snapshot(),
            vec![1u8; num_envs * n],
        )?;
        let step_count = store.register_zeros(ArraySpec::per_env(STEP_COUNT, int, num_envs, &[]))?;
        let observations = store.register_zeros(agent_array(OBSERVATIONS, real, &[layout.obs_dim]))?;
        let sampled_actions = store.register_zeros(agent_array(SAMPLED_ACTIONS, int, &[categories]))?;
        let rewards = store.register_zeros(agent_array(REWARDS, real, &[]))?;
        let done = store.register_zeros(ArraySpec::per_env(DONE, boolean, num_envs, &[]))?;
        let tag_credit = store.register_zeros(agent_array(TAG_CREDIT, int, &[]))?;
        let tagged_now = store.register_zeros(agent_array(TAGGED_NOW, boolean, &[]))?;
        let spatial_index = store.register_zeros(ArraySpec::per_env(
            SPATIAL_INDEX,
            int,
            num_envs,
            &[geom.index_len(n)],
        ))?;
        store.lock()?;

        let ids = TagArrays {
            loc_x,
            loc_y,
            speed,
            direction,
            is_tagger,
            active,
            step_count,
            observations,
            sampled_actions,
            rewards,
            done,
            tag_credit,
            tagged_now,
            spatial_index,
        };
        let kernels = Arc::new(Kernels {
            config: Arc::new(config.clone()),
            layout,
            geom,
            ids,
            catch_radius: config.effective_tag_radius() + radius_offset,
        });

        for view in store.env_views().iter_mut() {
            kernels.observe_all(view);
        }

        let plan = build_plan(&kernels);
        let reset_policy = ResetPolicy {
            auto: true,
            zero_on_reset: [STEP_COUNT, OBSERVATIONS, REWARDS, TAG_CREDIT, TAGGED_NOW]
                .map(String::from)
                .to_vec(),
        };
        let reinit_kernels = Arc::clone(&kernels);
        let resetter = ResetManager::new(
            reset_policy,
            &store,
            Some(Arc::new(move |view: &mut EnvView<'_>, episode| reinit_kernels.reinit(view, episode))),
        )?;

        Ok(Self {
            config: config.clone(),
            layout,
            geom,
            ids,
            runtime: VecEnv {
                store,
                plan,
                resetter,
                spec: EnvSpec {
                    num_envs,
                    num_agents: n,
                    obs_dim: layout.obs_dim,
                    categories,
                    choices,
                },
            },
        })
    }

    /// Taggers share one policy, runners another.
    pub fn policy_map(&self) -> PolicyMap {
        tag_policy_map(&self.config)
    }

    pub fn store(&self) -> &DataStore {
        &self.runtime.store
    }
}

pub fn tag_policy_map(config: &TagConfig) -> PolicyMap {
    let n = config.num_agents();
    PolicyMap::new(
        n,
        [
        (TAGGER_POLICY.to_string(), (0..config.num_taggers).collect()),
            (RUNNER_POLICY.to_string(), (config.num_taggers..n).collect()),
        ],
    )
    .expect("taggers and runners partition the agents")
}

fn build_plan(kernels: &Arc<Kernels>) -> PhasePlan {
    let k_move = Arc::clone(kernels);
    let k_resolve = Arc::clone(kernels);
    let k_observe = Arc::clone(kernels);
    let continuous = kernels.ids.speed.is_some();

    let mut movement = Phase::per_agent("move", move |_, view, agent| k_move.move_agent(view, agent))
        .reads(SAMPLED_ACTIONS, Scope::OwnAgent)
        .reads(ACTIVE, Scope::OwnAgent)
        .reads(IS_TAGGER, Scope::OwnAgent)
        .writes(LOC_X, Scope::OwnAgent)
        .writes(LOC_Y, Scope::OwnAgent);
    if continuous {
        movement = movement.writes(SPEED, Scope::OwnAgent).writes(DIRECTION, Scope::OwnAgent);
    }

    let resolve = Phase::per_env("resolve_tags", move |_, view| k_resolve.resolve(view))
        .reads(LOC_X, Scope::Env)
        .reads(LOC_Y, Scope::Env)
        .reads(IS_TAGGER, Scope::Env)
        .writes(SPATIAL_INDEX, Scope::Env)
        .writes(ACTIVE, Scope::Env)
        .writes(TAG_CREDIT, Scope::Env)
        .writes(TAGGED_NOW, Scope::Env)
        .writes(STEP_COUNT, Scope::Env)
        .writes(DONE, Scope::Env);

    let mut observe = Phase::per_agent("observe_reward", move |_, view, agent| {
        let mut scratch = Vec::new();
        k_observe.observe_agent(view, agent, &mut scratch);
        k_observe.reward_agent(view, agent);
        Ok(())
    })
    .reads(LOC_X, Scope::Env)
    .reads(LOC_Y, Scope::Env)
    .reads(IS_TAGGER, Scope::Env)
    .reads(ACTIVE, Scope::Env)
    .reads(STEP_COUNT, Scope::Env)
    .reads(SPATIAL_INDEX, Scope::Env)
    .reads(TAG_CREDIT, Scope::OwnAgent)
    .reads(TAGGED_NOW, Scope::OwnAgent)
    .writes(OBSERVATIONS, Scope::OwnAgent)
    .writes(REWARDS, Scope::OwnAgent);
    if continuous {
        observe = observe.reads(SPEED, Scope::Env).reads(DIRECTION, Scope::Env);
    }

    PhasePlan::new(vec![movement, resolve, observe])
}
