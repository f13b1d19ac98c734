use serde::{Deserialize, Serialize};

use super::TagError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Discrete,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsMode {
    Full,
    Partial,
}

/// All constants of a Tag game. Taggers occupy agent ids `0..num_taggers`,
/// runners the ids after them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TagConfig {
    pub variant: Variant,
    /// Cells per side (discrete).
    pub grid_size: u32,
    /// Length units per side (continuous).
    pub world_length: f32,
    pub num_taggers: usize,
    pub num_runners: usize,
    pub episode_length: u32,
    /// Catch distance in the continuous world; discrete tags need a shared cell.
    pub tag_radius: f32,
    pub obs_mode: ObsMode,
    pub k_nearest: usize,
    pub tag_reward: f32,
    pub tagged_penalty: f32,
    pub max_speed_tagger: f32,
    pub max_speed_runner: f32,
    pub accel_delta: f32,
    pub turn_delta: f32,
    pub seed: u64,
}

impl Default for TagConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Discrete,
            grid_size: 20,
            world_length: 20.0,
            num_taggers: 2,
            num_runners: 10,
            episode_length: 500,
            tag_radius: 1.0,
            obs_mode: ObsMode::Full,
            k_nearest: 5,
            tag_reward: 1.0,
            tagged_penalty: -1.0,
            max_speed_tagger: 1.0,
            max_speed_runner: 1.0,
            accel_delta: 0.1,
            turn_delta: std::f32::consts::PI / 6.0,
            seed: 0,
        }
    }
}

impl TagConfig {
    pub fn num_agents(&self) -> usize {
        self.num_taggers + self.num_runners
    }

    pub fn is_tagger(&self, agent: usize) -> bool {
        agent < self.num_taggers
    }

    pub fn max_speed(&self, is_tagger: bool) -> f32 {
        if is_tagger {
            self.max_speed_tagger
        } else {
            self.max_speed_runner
        }
    }

    /// Side length used to normalize positions.
    pub fn extent(&self) -> f32 {
        match self.variant {
            Variant::Discrete => self.grid_size as f32,
            Variant::Continuous => self.world_length,
        }
    }

    /// Upper coordinate bound (inclusive).
    pub fn max_coord(&self) -> f32 {
        match self.variant {
            Variant::Discrete => (self.grid_size - 1) as f32,
            Variant::Continuous => self.world_length,
        }
    }

    /// Catch distance actually applied: zero (same cell) on the grid.
    pub fn effective_tag_radius(&self) -> f32 {
        match self.variant {
            Variant::Discrete => 0.0,
            Variant::Continuous => self.tag_radius,
        }
    }

    /// Number of action categories and choices per category.
    pub fn action_shape(&self) -> (usize, usize) {
        match self.variant {
            Variant::Discrete => (1, 5),
            Variant::Continuous => (2, 3),
        }
    }

    pub fn validate(&self) -> Result<(), TagError> {
        let bad = |msg: &str| Err(TagError::InvalidConfig(msg.to_string()));
        if self.num_taggers == 0 || self.num_runners == 0 {
            return bad("need at least one tagger and one runner");
        }
        if self.num_agents() > u32::MAX as usize {
            return bad("too many agents");
        }
        if self.obs_mode == ObsMode::Partial
            && (self.k_nearest == 0 || self.k_nearest >= self.num_agents())
        {
            return bad("k_nearest must be in 1..num_agents for partial observations");
        }
        if !(self.tag_reward > 0.0) {
            return bad("tag_reward must be positive");
        }
        if !(self.tagged_penalty < 0.0) {
            return bad("tagged_penalty must be negative");
        }
        if self.episode_length == 0 {
            return bad("episode_length must be positive");
        }
        match self.variant {
            Variant::Discrete if self.grid_size == 0 => return bad("grid_size must be positive"),
            Variant::Continuous if !(self.world_length > 0.0 && self.world_length.is_finite()) => {
                return bad("world_length must be positive and finite")
            }
            _ => {}
        }
        let finite_non_negative = [
            self.tag_radius,
            self.max_speed_tagger,
            self.max_speed_runner,
            self.accel_delta,
            self.turn_delta,
        ];
        if finite_non_negative.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("radius, speeds and deltas must be finite and non-negative");
        }
        Ok(())
    }
}
