//! Stateless, counter-based random numbers and batched categorical sampling.
//!
//! Every uniform is a pure hash of a structured key, so any (env, agent)
//! partition can draw its own numbers without shared generator state and the
//! result never depends on how work is scheduled.

use rayon::prelude::*;
use thiserror::Error;

use crate::data_store::{DataStore, StoreError, SAMPLED_ACTIONS};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("non-finite logit at flat index {0}")]
    NonFiniteLogits(usize),
    #[error("logits hold {actual} values, expected {expected} for shape {shape:?}")]
    ShapeMismatch {
        expected: usize,
        actual: usize,
        shape: LogitShape,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Structured key of one uniform draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct SampleKey {
    pub seed: u64,
    pub step: u64,
    pub env_id: u32,
    pub agent_id: u32,
    pub category: u32,
    pub draw: u32,
}

impl SampleKey {
    pub fn new(seed: u64, step: u64, env_id: usize, agent_id: usize, category: usize, draw: usize) -> Self {
        Self {
            seed,
            step,
            env_id: env_id as u32,
            agent_id: agent_id as u32,
            category: category as u32,
            draw: draw as u32,
        }
    }
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 64 well-mixed bits for `key`.
#[inline]
pub fn hash_key(key: &SampleKey) -> u64 {
    let lanes = [
        key.step,
        (u64::from(key.env_id) << 32) | u64::from(key.agent_id),
        (u64::from(key.category) << 32) | u64::from(key.draw),
    ];
    let mut h = mix64(key.seed ^ GOLDEN);
    for (i, lane) in lanes.into_iter().enumerate() {
        h = mix64(h.wrapping_add(GOLDEN.wrapping_mul(i as u64 + 2)) ^ lane);
    }
    h
}

/// Uniform real in `[0, 1)` with 53 bits of resolution.
#[inline]
pub fn uniform(key: &SampleKey) -> f64 {
    (hash_key(key) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Layout of a logits tensor `[env, agent, category, choice]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogitShape {
    pub num_envs: usize,
    pub num_agents: usize,
    pub categories: usize,
    pub choices: usize,
}

impl LogitShape {
    pub fn len(&self) -> usize {
        self.num_envs * self.num_agents * self.categories * self.choices
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Inverse-CDF draw from the softmax of `logits` at uniform `u`.
///
/// The row is shifted by its maximum before exponentiation. The first index
/// whose running mass strictly exceeds `u · total` is chosen.
pub fn categorical_from_logits(logits: &[f32], u: f64) -> usize {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let total: f64 = logits.iter().map(|&l| (l as f64 - max).exp()).sum();
    let target = u * total;
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &l) in logits.iter().enumerate() {
        let w = (l as f64 - max).exp();
        if w > 0.0 {
            last_positive = i;
        }
        cumulative += w;
        if target < cumulative {
            return i;
        }
    }
    // u·total can round up to total
    last_positive
}

/// Log-softmax of one logit row, accumulated in f64.
pub fn log_softmax(logits: &[f32], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let log_total = logits
        .iter()
        .map(|&l| (l as f64 - max).exp())
        .sum::<f64>()
        .ln();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = l as f64 - max - log_total;
    }
}

/// Samples one action per (env, agent, category) into `out`.
///
/// Work is split per environment; call inside [`crate::step_engine::Engine::install`]
/// to bound the degree of parallelism.
pub fn sample_into(
    logits: &[f32],
    shape: LogitShape,
    seed: u64,
    step: u64,
    out: &mut [i32],
) -> Result<(), SamplerError> {
    if logits.len() != shape.len() {
        return Err(SamplerError::ShapeMismatch {
            expected: shape.len(),
            actual: logits.len(),
            shape,
        });
    }
    let per_env_out = shape.num_agents * shape.categories;
    if out.len() != shape.num_envs * per_env_out {
        return Err(SamplerError::ShapeMismatch {
            expected: shape.num_envs * per_env_out,
            actual: out.len(),
            shape,
        });
    }
    if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
        return Err(SamplerError::NonFiniteLogits(i));
    }
    let per_env_logits = per_env_out * shape.choices;
    out.par_chunks_mut(per_env_out)
        .zip(logits.par_chunks(per_env_logits))
        .enumerate()
        .for_each(|(env, (actions, rows))| {
            for (slot, (action, row)) in actions
                .iter_mut()
                .zip(rows.chunks(shape.choices))
                .enumerate()
            {
                let agent = slot / shape.categories;
                let category = slot % shape.categories;
                let u = uniform(&SampleKey::new(seed, step, env, agent, category, 0));
                *action = categorical_from_logits(row, u) as i32;
            }
        });
    Ok(())
}

/// Samples actions for every (env, agent, category) and writes them in place
/// to the store's `sampled_actions` placeholder.
pub fn sample_actions(
    store: &mut DataStore,
    logits: &[f32],
    choices: usize,
    step: u64,
    seed: u64,
) -> Result<(), SamplerError> {
    let num_envs = store.num_envs();
    let num_agents = store.num_agents();
    let actions = store.array_mut::<i32>(SAMPLED_ACTIONS)?;
    let categories = actions.len() / (num_envs * num_agents);
    let shape = LogitShape {
        num_envs,
        num_agents,
        categories,
        choices,
    };
    sample_into(logits, shape, seed, step, actions)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_value() {
        let key = SampleKey::new(7, 3, 2, 1, 0, 0);
        assert_eq!(uniform(&key).to_bits(), uniform(&key).to_bits());
        assert_ne!(uniform(&key), uniform(&SampleKey { draw: 1, ..key }));
    }

    #[test]
    fn uniform_in_unit_interval() {
        for i in 0..10_000u64 {
            let u = uniform(&SampleKey::new(1, i, 0, 0, 0, 0));
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn dominant_logit_always_wins() {
        let logits = [1000.0f32, 0.0, 0.0, 0.0, 0.0];
        let hits = (0..10_000)
            .filter(|&i| {
                let u = uniform(&SampleKey::new(3, i, 0, 0, 0, 0));
                categorical_from_logits(&logits, u) == 0
            })
            .count();
        assert!(hits as f64 / 10_000.0 > 0.999);
    }

    #[test]
    fn boundary_ties_go_low() {
        // equal mass halves: u exactly at 0.5 belongs to the upper bin
        assert_eq!(categorical_from_logits(&[0.0, 0.0], 0.0), 0);
        assert_eq!(categorical_from_logits(&[0.0, 0.0], 0.5), 1);
        assert_eq!(categorical_from_logits(&[0.0, 0.0], 0.499_999), 0);
        // zero-mass tail is never chosen even at the top of the interval
        assert_eq!(categorical_from_logits(&[0.0, -1e30], 1.0 - f64::EPSILON), 0);
    }

    #[test]
    fn shift_invariance() {
        let a = [0.3f32, -1.2, 2.0];
        let b: Vec<f32> = a.iter().map(|v| v + 50.0).collect();
        for i in 0..2000 {
            let u = uniform(&SampleKey::new(9, i, 0, 0, 0, 0));
            assert_eq!(categorical_from_logits(&a, u), categorical_from_logits(&b, u));
        }
    }

    #[test]
    fn rejects_non_finite() {
        let shape = LogitShape {
            num_envs: 1,
            num_agents: 1,
            categories: 1,
            choices: 2,
        };
        let mut out = [0];
        assert!(matches!(
            sample_into(&[0.0, f32::NAN], shape, 0, 0, &mut out),
            Err(SamplerError::NonFiniteLogits(1))
        ));
        assert!(matches!(
            sample_into(&[0.0], shape, 0, 0, &mut out),
            Err(SamplerError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn log_softmax_normalizes() {
        let mut out = [0.0; 3];
        log_softmax(&[1.0, 2.0, 3.0], &mut out);
        let total: f64 = out.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
