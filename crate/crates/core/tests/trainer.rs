use ndarray::{Array1, Array2};
use proptest::prelude::*;
use warp_core::data_store::{ArraySpec, DataStore, ElementKind, DONE, OBSERVATIONS, REWARDS, SAMPLED_ACTIONS};
use warp_core::policy_model::{PolicyDims, PolicyMap, PolicyParams};
use warp_core::reset_manager::{ResetManager, ResetPolicy};
use warp_core::step_engine::{Engine, EngineConfig, Phase, PhasePlan, Scope};
use warp_core::tag_env::{TagConfig, TagEnv};
use warp_core::trainer::{
    a2c_loss, action_log_prob, compute_returns, ppo_loss, Algorithm, LossBatch, LossCoefs, Trainer, TrainerConfig,
};
use warp_core::vec_env::{EnvSpec, VecEnv};

mod common;

use common::brute_force_returns;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn returns_match_brute_force(
        (width, rewards, terminals, bootstrap) in (1usize..4, 1usize..12).prop_flat_map(|(w, h)| (
            Just(w),
            prop::collection::vec(-2.0f64..2.0, w * h),
            prop::collection::vec(prop::bool::weighted(0.2), w * h),
            prop::collection::vec(-5.0f64..5.0, w),
        )),
        gamma in 0.0f64..0.999,
    ) {
        let horizon = rewards.len() / width;
        let fast = compute_returns(&rewards, &terminals, &bootstrap, gamma, width);
        let slow = brute_force_returns(&rewards, &terminals, &bootstrap, gamma, width);
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        // the recursion holds away from terminals
        for t in 0..horizon - 1 {
            for col in 0..width {
                let i = t * width + col;
                if !terminals[i] {
                    prop_assert!((fast[i] - rewards[i] - gamma * fast[i + width]).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn three_step_terminal_returns() {
    let r = compute_returns(&[1.0, 1.0, 1.0], &[false, false, true], &[0.0], 0.9, 1);
    for (a, b) in r.iter().zip([2.71, 1.9, 1.0]) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn loss_inputs() -> (Array2<f64>, Array1<f64>, Vec<i32>, Vec<f64>, Vec<f64>, Vec<bool>) {
    let rows = 6;
    let logits = Array2::from_shape_fn((rows, 6), |(r, c)| ((r * 6 + c) as f64 * 0.37).sin());
    let values = Array1::from_shape_fn(rows, |r| r as f64 * 0.2);
    let actions = (0..rows * 2).map(|i| (i % 3) as i32).collect();
    let advantages = vec![0.5, -1.0, 2.0, 0.1, -0.3, 1.2];
    let returns = vec![1.0, 0.0, -1.0, 2.0, 0.5, 0.3];
    let active = vec![true, true, false, true, true, true];
    (logits, values, actions, advantages, returns, active)
}

#[test]
fn ppo_with_unbounded_clip_equals_unclipped_surrogate() {
    let (logits, values, actions, advantages, returns, active) = loss_inputs();
    let batch = LossBatch {
        actions: &actions,
        advantages: &advantages,
        returns: &returns,
        active: &active,
        categories: 2,
        choices: 3,
    };
    let coefs = LossCoefs {
        value_coef: 0.5,
        entropy_coef: 0.01,
    };
    // old policy differs from the current one so ratios are not all 1
    let old: Vec<f64> = (0..6)
        .map(|i| action_log_prob(logits.row(i), &actions[i * 2..i * 2 + 2], 3) + 0.3 * (i as f64 - 2.5))
        .collect();
    let ppo = ppo_loss(logits.view(), values.view(), &batch, &old, 1e12, coefs).unwrap();
    let mut surrogate = 0.0;
    let mut n = 0.0;
    for i in (0..6).filter(|&i| active[i]) {
        let ratio = (action_log_prob(logits.row(i), &actions[i * 2..i * 2 + 2], 3) - old[i]).exp();
        surrogate -= ratio * advantages[i];
        n += 1.0;
    }
    assert!((ppo.terms.policy - surrogate / n).abs() < 1e-6);

    // at ratio 1 the surrogate gradient is the policy-gradient one
    let same: Vec<f64> = (0..6)
        .map(|i| action_log_prob(logits.row(i), &actions[i * 2..i * 2 + 2], 3))
        .collect();
    let ppo = ppo_loss(logits.view(), values.view(), &batch, &same, 1e12, coefs).unwrap();
    let a2c = a2c_loss(logits.view(), values.view(), &batch, coefs).unwrap();
    for (a, b) in ppo.d_logits.iter().zip(a2c.d_logits.iter()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn clipped_branch_has_zero_policy_gradient() {
    let logits = Array2::from_shape_fn((1, 5), |(_, c)| c as f64 * 0.1);
    let values = Array1::zeros(1);
    let actions = [2];
    let logp = action_log_prob(logits.row(0), &actions, 5);
    let batch = LossBatch {
        actions: &actions,
        advantages: &[1.5],
        returns: &[0.0],
        active: &[true],
        categories: 1,
        choices: 5,
    };
    let coefs = LossCoefs {
        value_coef: 0.0,
        entropy_coef: 0.0,
    };
    // ratio 2 with a positive advantage sits on the clipped plateau
    let out = ppo_loss(logits.view(), values.view(), &batch, &[logp - 2f64.ln()], 0.2, coefs).unwrap();
    assert!((out.terms.policy + 1.2 * 1.5).abs() < 1e-12);
    assert!(out.d_logits.iter().all(|&g| g == 0.0));
}

#[test]
fn uniform_policy_entropy_is_log_choices_per_category() {
    let logits = Array2::zeros((3, 10));
    let actions = vec![0; 6];
    let batch = LossBatch {
        actions: &actions,
        advantages: &[0.0; 3],
        returns: &[0.0; 3],
        active: &[true; 3],
        categories: 2,
        choices: 5,
    };
    let coefs = LossCoefs {
        value_coef: 1.0,
        entropy_coef: 0.0,
    };
    let out = a2c_loss(logits.view(), Array1::zeros(3).view(), &batch, coefs).unwrap();
    assert!((out.terms.entropy - 2.0 * 5f64.ln()).abs() < 1e-12);
    assert_eq!(out.terms.policy, 0.0);
    assert_eq!(out.terms.value, 0.0);
}

/// One observation feature fixed at 1, two actions, reward 1 every step, never done.
fn constant_reward_env(num_envs: usize, num_agents: usize) -> VecEnv {
    let mut store = DataStore::new(num_envs, num_agents).unwrap();
    store
        .register(
            ArraySpec::per_agent(OBSERVATIONS, ElementKind::Real, num_envs, num_agents, &[1]),
            vec![1.0f32; num_envs * num_agents],
        )
        .unwrap();
    store
        .register_zeros(ArraySpec::per_agent(SAMPLED_ACTIONS, ElementKind::Integer, num_envs, num_agents, &[1]))
        .unwrap();
    store
        .register_zeros(ArraySpec::per_agent(REWARDS, ElementKind::Real, num_envs, num_agents, &[]))
        .unwrap();
    store
        .register_zeros(ArraySpec::per_env(DONE, ElementKind::Boolean, num_envs, &[]))
        .unwrap();
    store.lock().unwrap();
    let rewards = store.id(REWARDS).unwrap();
    let plan = PhasePlan::new(vec![Phase::per_agent("pay", move |_, view, agent| {
        view.get_mut::<f32>(rewards)[agent] = 1.0;
        Ok(())
    })
    .writes(REWARDS, Scope::OwnAgent)]);
    let resetter = ResetManager::new(
        ResetPolicy {
            auto: true,
            zero_on_reset: vec![],
        },
        &store,
        None,
    )
    .unwrap();
    VecEnv {
        store,
        plan,
        resetter,
        spec: EnvSpec {
            num_envs,
            num_agents,
            obs_dim: 1,
            categories: 1,
            choices: 2,
        },
    }
}

#[test]
fn value_head_converges_to_geometric_fixed_point() {
    let config = TrainerConfig {
        gamma: 0.9,
        rollout_horizon: 20,
        learning_rate: 0.02,
        max_grad_norm: 100.0,
        hidden_sizes: vec![8],
        entropy_coef: 0.0,
        ..TrainerConfig::default()
    };
    let map = PolicyMap::new(2, [("only".to_string(), vec![0, 1])]).unwrap();
    let engine = Engine::new(EngineConfig::new(4, 2, 1)).unwrap();
    let mut trainer = Trainer::new(config, constant_reward_env(4, 2), engine, map).unwrap();
    trainer.train(600, |_, _| Ok(())).unwrap();
    let v = trainer.policies()["only"].forward(Array2::ones((1, 1)).view()).unwrap().values[0];
    assert!((v - 10.0).abs() < 0.5, "value {v}");
}

#[test]
fn zero_iterations_change_nothing() {
    let map = PolicyMap::new(2, [("only".to_string(), vec![0, 1])]).unwrap();
    let engine = Engine::new(EngineConfig::new(2, 2, 1)).unwrap();
    let mut trainer = Trainer::new(TrainerConfig::default(), constant_reward_env(2, 2), engine, map).unwrap();
    let before = trainer.policies()["only"].flat();
    let rows = trainer.train(0, |_, _| Ok(())).unwrap();
    assert!(rows.is_empty());
    assert_eq!(trainer.iteration(), 0);
    assert_eq!(trainer.policies()["only"].flat(), before);
}

fn small_tag_run(workers: usize, algorithm: Algorithm) -> Vec<Vec<f64>> {
    let tag = TagConfig {
        num_taggers: 1,
        num_runners: 3,
        episode_length: 15,
        seed: 4,
        ..TagConfig::default()
    };
    let env = TagEnv::build(&tag, 3).unwrap();
    let map = env.policy_map();
    let engine = Engine::new(EngineConfig::new(3, 4, workers)).unwrap();
    let config = TrainerConfig {
        rollout_horizon: 10,
        hidden_sizes: vec![16],
        learning_rate: 1e-2,
        algorithm,
        ppo_epochs: 2,
        seed: 8,
        ..TrainerConfig::default()
    };
    let mut trainer = Trainer::new(config, env.runtime, engine, map).unwrap();
    trainer.train(4, |_, _| Ok(())).unwrap();
    trainer.policies().values().map(PolicyParams::flat).collect()
}

#[test]
fn training_is_bit_identical_across_runs_and_workers() {
    for algorithm in [Algorithm::A2c, Algorithm::Ppo] {
        let a = small_tag_run(1, algorithm);
        let b = small_tag_run(1, algorithm);
        let c = small_tag_run(3, algorithm);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }
}

#[test]
fn resume_rejects_mismatched_checkpoint() {
    let map = PolicyMap::new(2, [("only".to_string(), vec![0, 1])]).unwrap();
    let engine = Engine::new(EngineConfig::new(2, 2, 1)).unwrap();
    let mut trainer = Trainer::new(TrainerConfig::default(), constant_reward_env(2, 2), engine, map).unwrap();
    let wrong = PolicyParams::zeros(PolicyDims {
        obs_dim: 3,
        hidden: vec![4],
        categories: 1,
        choices: 2,
    })
    .unwrap();
    let policies = [("only".to_string(), wrong)].into_iter().collect();
    assert!(trainer.resume(policies, 5).is_err());
}
