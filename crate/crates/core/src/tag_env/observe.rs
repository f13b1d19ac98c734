//! Observation vectors and rewards.
//!
//! Layout per agent: one block per observed agent (relative position scaled
//! by the world side, tagger flag, active flag, and in the continuous game
//! relative speed plus heading as sin/cos), then the agent's own features,
//! then the elapsed fraction of the episode. Inactive agents observe zeros.

use super::config::{ObsMode, TagConfig, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObsLayout {
    pub neighbors: usize,
    pub block: usize,
    pub self_len: usize,
    pub obs_dim: usize,
}

impl ObsLayout {
    pub fn for_config(config: &TagConfig) -> Self {
        let neighbors = match config.obs_mode {
            ObsMode::Full => config.num_agents() - 1,
            ObsMode::Partial => config.k_nearest,
        };
        let (block, self_len) = match config.variant {
            Variant::Discrete => (4, 2),
            Variant::Continuous => (7, 5),
        };
        Self {
            neighbors,
            block,
            self_len,
            obs_dim: neighbors * block + self_len + 1,
        }
    }
}

/// Borrowed per-env state an observation is computed from.
#[derive(Debug, Clone, Copy)]
pub struct EnvState<'a> {
    pub loc_x: &'a [f32],
    pub loc_y: &'a [f32],
    /// Empty in the discrete game.
    pub speed: &'a [f32],
    pub direction: &'a [f32],
    pub is_tagger: &'a [u8],
    pub active: &'a [u8],
    pub step_count: i32,
}

fn speed_ratio(config: &TagConfig, state: &EnvState<'_>, agent: usize) -> f32 {
    let max = config.max_speed(state.is_tagger[agent] != 0);
    if max > 0.0 {
        state.speed[agent] / max
    } else {
        0.0
    }
}

/// Fills `out` (length `obs_dim`) for `agent`, observing `neighbors` in the
/// given order.
pub fn write_observation(
    config: &TagConfig,
    layout: &ObsLayout,
    state: &EnvState<'_>,
    agent: usize,
    neighbors: impl IntoIterator<Item = usize>,
    out: &mut [f32],
) {
    debug_assert_eq!(out.len(), layout.obs_dim);
    if state.active[agent] == 0 {
        out.fill(0.0);
        return;
    }
    let continuous = config.variant == Variant::Continuous;
    let side = config.extent();
    let (x, y) = (state.loc_x[agent], state.loc_y[agent]);
    let mut filled = 0;
    for (block, j) in out[..layout.neighbors * layout.block]
        .chunks_exact_mut(layout.block)
        .zip(neighbors)
    {
        block[0] = (state.loc_x[j] - x) / side;
        block[1] = (state.loc_y[j] - y) / side;
        block[2] = f32::from(state.is_tagger[j]);
        block[3] = f32::from(state.active[j]);
        if continuous {
            block[4] = speed_ratio(config, state, j);
            block[5] = state.direction[j].sin();
            block[6] = state.direction[j].cos();
        }
        filled += 1;
    }
    out[filled * layout.block..layout.neighbors * layout.block].fill(0.0);
    let own = &mut out[layout.neighbors * layout.block..];
    own[0] = x / side;
    own[1] = y / side;
    if continuous {
        own[2] = speed_ratio(config, state, agent);
        own[3] = state.direction[agent].sin();
        own[4] = state.direction[agent].cos();
    }
    own[layout.self_len] = state.step_count as f32 / config.episode_length as f32;
}

/// Reward of one agent for the step just resolved.
pub fn compute_reward(config: &TagConfig, is_tagger: bool, tags_credited: i32, tagged_now: bool) -> f32 {
    if is_tagger {
        tags_credited as f32 * config.tag_reward
    } else if tagged_now {
        config.tagged_penalty
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discrete_neighbor_block() {
        let config = TagConfig {
            num_taggers: 1,
            num_runners: 1,
            ..TagConfig::default()
        };
        let layout = ObsLayout::for_config(&config);
        assert_eq!(layout.obs_dim, 4 + 2 + 1);
        let state = EnvState {
            loc_x: &[0.0, 3.0],
            loc_y: &[0.0, 4.0],
            speed: &[],
            direction: &[],
            is_tagger: &[1, 0],
            active: &[1, 1],
            step_count: 50,
        };
        let mut out = vec![9.0; layout.obs_dim];
        write_observation(&config, &layout, &state, 0, [1], &mut out);
        assert!((out[0] - 0.15).abs() < 1e-7);
        assert!((out[1] - 0.20).abs() < 1e-7);
        assert_eq!(&out[2..], &[0.0, 1.0, 0.0, 0.0, 0.1]);
    }

    #[test]
    fn inactive_agent_sees_nothing() {
        let config = TagConfig {
            num_taggers: 1,
            num_runners: 1,
            ..TagConfig::default()
        };
        let layout = ObsLayout::for_config(&config);
        let state = EnvState {
            loc_x: &[1.0, 2.0],
            loc_y: &[1.0, 2.0],
            speed: &[],
            direction: &[],
            is_tagger: &[1, 0],
            active: &[1, 0],
            step_count: 3,
        };
        let mut out = vec![5.0; layout.obs_dim];
        write_observation(&config, &layout, &state, 1, [0], &mut out);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn continuous_layout_width() {
        let config = TagConfig {
            variant: Variant::Continuous,
            obs_mode: ObsMode::Partial,
            k_nearest: 3,
            ..TagConfig::default()
        };
        assert_eq!(ObsLayout::for_config(&config).obs_dim, 3 * 7 + 5 + 1);
    }

    #[test]
    fn rewards() {
        let c = TagConfig::default();
        assert_eq!(compute_reward(&c, true, 2, false), 2.0);
        assert_eq!(compute_reward(&c, false, 0, false), 0.0);
        assert_eq!(compute_reward(&c, false, 0, true), -1.0);
        assert_eq!(compute_reward(&c, true, 0, false), 0.0);
    }
}
