//! Sequential Tag used as ground truth for the parallel kernels.
//!
//! Same rules, plain vectors, one env at a time and exhaustive neighbor and
//! catch searches instead of the spatial grid.

use super::config::{ObsMode, TagConfig, Variant};
use super::dynamics::{move_continuous, move_discrete, placement, Motion};
use super::observe::{compute_reward, write_observation, EnvState, ObsLayout};
use super::spatial::{k_nearest_brute, nearest_tagger_brute, CatchScene};
use super::TagError;

#[derive(Debug, Clone)]
pub struct TagReference {
    config: TagConfig,
    layout: ObsLayout,
    num_envs: usize,
    num_agents: usize,
    pub loc_x: Vec<f32>,
    pub loc_y: Vec<f32>,
    pub speed: Vec<f32>,
    pub direction: Vec<f32>,
    pub is_tagger: Vec<u8>,
    pub active: Vec<u8>,
    pub step_count: Vec<i32>,
    pub observations: Vec<f32>,
    pub rewards: Vec<f32>,
    pub done: Vec<u8>,
    episodes: Vec<u64>,
}

impl TagReference {
    pub fn new(config: &TagConfig, num_envs: usize) -> Result<Self, TagError> {
        config.validate()?;
        let n = config.num_agents();
        let layout = ObsLayout::for_config(config);
        let total = num_envs * n;
        let mut this = Self {
            config: config.clone(),
            layout,
            num_envs,
            num_agents: n,
            loc_x: vec![0.0; total],
            loc_y: vec![0.0; total],
            speed: vec![0.0; total],
            direction: vec![0.0; total],
            is_tagger: (0..num_envs)
                .flat_map(|_| (0..n).map(|a| u8::from(config.is_tagger(a))))
                .collect(),
            active: vec![1; total],
            step_count: vec![0; num_envs],
            observations: vec![0.0; total * layout.obs_dim],
            rewards: vec![0.0; total],
            done: vec![0; num_envs],
            episodes: vec![0; num_envs],
        };
        for env in 0..num_envs {
            this.start_episode(env);
        }
        Ok(this)
    }

    pub fn layout(&self) -> &ObsLayout {
        &self.layout
    }

    pub fn episode(&self, env: usize) -> u64 {
        self.episodes[env]
    }

    fn agents(&self, env: usize) -> std::ops::Range<usize> {
        env * self.num_agents..(env + 1) * self.num_agents
    }

    fn start_episode(&mut self, env: usize) {
        let episode = self.episodes[env];
        for agent in 0..self.num_agents {
            let i = env * self.num_agents + agent;
            let (x, y, heading) = placement(&self.config, episode, env, agent);
            self.loc_x[i] = x;
            self.loc_y[i] = y;
            self.speed[i] = 0.0;
            self.direction[i] = if self.config.variant == Variant::Continuous { heading } else { 0.0 };
            self.active[i] = 1;
            self.rewards[i] = 0.0;
        }
        self.step_count[env] = 0;
        self.done[env] = 0;
        self.observe_env(env);
    }

    fn observe_env(&mut self, env: usize) {
        let range = self.agents(env);
        let dim = self.layout.obs_dim;
        let continuous = self.config.variant == Variant::Continuous;
        let state = EnvState {
            loc_x: &self.loc_x[range.clone()],
            loc_y: &self.loc_y[range.clone()],
            speed: if continuous { &self.speed[range.clone()] } else { &[] },
            direction: if continuous { &self.direction[range.clone()] } else { &[] },
            is_tagger: &self.is_tagger[range.clone()],
            active: &self.active[range.clone()],
            step_count: self.step_count[env],
        };
        let obs = &mut self.observations[range.start * dim..range.end * dim];
        for (agent, out) in obs.chunks_exact_mut(dim).enumerate() {
            match self.config.obs_mode {
                ObsMode::Full => {
                    let others = (0..self.num_agents).filter(|&j| j != agent);
                    write_observation(&self.config, &self.layout, &state, agent, others, out);
                }
                ObsMode::Partial => {
                    let nearest = k_nearest_brute(state.loc_x, state.loc_y, agent, self.config.k_nearest);
                    write_observation(&self.config, &self.layout, &state, agent, nearest, out);
                }
            }
        }
    }

    /// Advances every env by one step. `actions` is laid out like the
    /// store's `sampled_actions`: env, then agent, then category.
    pub fn step(&mut self, actions: &[i32]) -> Result<(), String> {
        let (categories, choices) = self.config.action_shape();
        if actions.len() != self.num_envs * self.num_agents * categories {
            return Err(format!("expected {} actions, got {}", self.num_envs * self.num_agents * categories, actions.len()));
        }
        for env in 0..self.num_envs {
            self.step_env(env, actions, categories, choices)?;
        }
        Ok(())
    }

    fn step_env(&mut self, env: usize, actions: &[i32], categories: usize, choices: usize) -> Result<(), String> {
        let nt = self.config.num_taggers;
        for i in self.agents(env) {
            if self.active[i] == 0 {
                continue;
            }
            let a = &actions[i * categories..(i + 1) * categories];
            if let Some(bad) = a.iter().find(|&&v| v < 0 || v as usize >= choices) {
                return Err(format!("action {bad} outside 0..{choices}"));
            }
            match self.config.variant {
                Variant::Discrete => {
                    (self.loc_x[i], self.loc_y[i]) = move_discrete(a[0], self.loc_x[i], self.loc_y[i], self.config.grid_size);
                }
                Variant::Continuous => {
                    let m = move_continuous(
                        a[0],
                        a[1],
                        Motion {
                            speed: self.speed[i],
                            direction: self.direction[i],
                            x: self.loc_x[i],
                            y: self.loc_y[i],
                        },
                        &self.config,
                        self.is_tagger[i] != 0,
                    );
                    self.speed[i] = m.speed;
                    self.direction[i] = m.direction;
                    self.loc_x[i] = m.x;
                    self.loc_y[i] = m.y;
                }
            }
        }

        let range = self.agents(env);
        let mut credits = vec![0i32; self.num_agents];
        let mut tagged = vec![false; self.num_agents];
        {
            let scene = CatchScene {
                xs: &self.loc_x[range.clone()],
                ys: &self.loc_y[range.clone()],
                is_tagger: &self.is_tagger[range.clone()],
                active: &self.active[range.clone()],
                radius: self.config.effective_tag_radius(),
            };
            for runner in nt..self.num_agents {
                if scene.active[runner] == 0 {
                    continue;
                }
                if let Some(t) = nearest_tagger_brute(&scene, runner) {
                    credits[t] += 1;
                    tagged[runner] = true;
                }
            }
        }
        for (agent, &hit) in tagged.iter().enumerate() {
            if hit {
                self.active[range.start + agent] = 0;
            }
        }
        self.step_count[env] += 1;
        let runners_left = self.active[range.start + nt..range.end].iter().any(|&a| a != 0);
        let finished = self.step_count[env] >= self.config.episode_length as i32 || !runners_left;
        self.done[env] = u8::from(finished);

        self.observe_env(env);
        for agent in 0..self.num_agents {
            self.rewards[range.start + agent] =
                compute_reward(&self.config, self.config.is_tagger(agent), credits[agent], tagged[agent]);
        }
        Ok(())
    }

    /// Starts the next episode in every finished env; returns their ids.
    pub fn reset_done(&mut self) -> Vec<usize> {
        let finished: Vec<usize> = (0..self.num_envs).filter(|&e| self.done[e] != 0).collect();
        for &env in &finished {
            self.episodes[env] += 1;
            self.start_episode(env);
        }
        finished
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tag_env::dynamics::STAY;

    #[test]
    fn everyone_staying_only_counts_time() {
        let config = TagConfig {
            num_taggers: 1,
            num_runners: 3,
            episode_length: 3,
            ..TagConfig::default()
        };
        let mut r = TagReference::new(&config, 2).unwrap();
        // move apart so nobody shares a cell
        for env in 0..2 {
            for a in 0..4 {
                r.loc_x[env * 4 + a] = a as f32 * 3.0;
                r.loc_y[env * 4 + a] = 0.0;
            }
        }
        let actions = vec![STAY; 8];
        for _ in 0..2 {
            r.step(&actions).unwrap();
            assert_eq!(r.done, vec![0, 0]);
        }
        r.step(&actions).unwrap();
        assert_eq!(r.done, vec![1, 1]);
        assert!(r.rewards.iter().all(|&v| v == 0.0));
        assert_eq!(r.reset_done(), vec![0, 1]);
        assert_eq!(r.episode(1), 1);
        assert_eq!(r.step_count, vec![0, 0]);
    }

    #[test]
    fn rejects_out_of_range_action() {
        let config = TagConfig::default();
        let mut r = TagReference::new(&config, 1).unwrap();
        let mut actions = vec![STAY; config.num_agents()];
        actions[3] = 7;
        assert!(r.step(&actions).is_err());
    }
}
