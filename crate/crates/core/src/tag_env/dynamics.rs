//! Per-agent motion rules and initial placement.

use std::f32::consts::TAU;

use super::config::{TagConfig, Variant};
use crate::sampler::{uniform, SampleKey};

/// Discrete action table. "Up" is +y.
pub const UP: i32 = 0;
pub const DOWN: i32 = 1;
pub const LEFT: i32 = 2;
pub const RIGHT: i32 = 3;
pub const STAY: i32 = 4;

/// Continuous actions per category: decrease, keep, increase.
pub const DECREASE: i32 = 0;
pub const KEEP: i32 = 1;
pub const INCREASE: i32 = 2;

const PLACEMENT_SALT: u64 = 0x5a17_c0de_7a90_0001;

/// One grid move, clamped to `[0, grid_size - 1]`. Unknown actions stay put.
pub fn move_discrete(action: i32, x: f32, y: f32, grid_size: u32) -> (f32, f32) {
    let (dx, dy) = match action {
        UP => (0.0, 1.0),
        DOWN => (0.0, -1.0),
        LEFT => (-1.0, 0.0),
        RIGHT => (1.0, 0.0),
        _ => (0.0, 0.0),
    };
    let hi = (grid_size - 1) as f32;
    ((x + dx).clamp(0.0, hi), (y + dy).clamp(0.0, hi))
}

/// Kinematic state of one continuous-world agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Motion {
    pub speed: f32,
    pub direction: f32,
    pub x: f32,
    pub y: f32,
}

fn step_delta(action: i32, delta: f32) -> f32 {
    match action {
        DECREASE => -delta,
        INCREASE => delta,
        _ => 0.0,
    }
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_angle(theta: f32) -> f32 {
    let wrapped = theta.rem_euclid(TAU);
    if wrapped >= TAU {
        0.0
    } else {
        wrapped
    }
}

/// Turn, then accelerate, then advance one unit of time; position is clamped
/// to the world box.
pub fn move_continuous(accel: i32, turn: i32, state: Motion, config: &TagConfig, is_tagger: bool) -> Motion {
    let direction = wrap_angle(state.direction + step_delta(turn, config.turn_delta));
    let speed = (state.speed + step_delta(accel, config.accel_delta)).clamp(0.0, config.max_speed(is_tagger));
    let hi = config.world_length;
    Motion {
        speed,
        direction,
        x: (state.x + speed * direction.cos()).clamp(0.0, hi),
        y: (state.y + speed * direction.sin()).clamp(0.0, hi),
    }
}

/// Initial position and heading of `agent` in `env` for a given episode.
pub fn placement(config: &TagConfig, episode: u64, env: usize, agent: usize) -> (f32, f32, f32) {
    let draw = |stream| uniform(&SampleKey::new(config.seed ^ PLACEMENT_SALT, episode, env, agent, stream, 0));
    match config.variant {
        Variant::Discrete => {
            let cell = |u: f64| ((u * config.grid_size as f64) as u32).min(config.grid_size - 1) as f32;
            (cell(draw(0)), cell(draw(1)), 0.0)
        }
        Variant::Continuous => {
            let len = config.world_length as f64;
            (
                (draw(0) * len) as f32,
                (draw(1) * len) as f32,
                wrap_angle((draw(2) * std::f64::consts::TAU) as f32),
            )
        }
    }
}
