//! Data-oriented multi-agent reinforcement learning on CPU cores.
//!
//! Simulation state lives in one [`data_store::DataStore`] indexed
//! `[env, agent, feature..]`. A [`step_engine::Engine`] advances every
//! environment replica through barrier-separated phases, the [`sampler`]
//! draws actions from a counter-based generator so results do not depend on
//! thread count, and the [`trainer`] runs A2C or PPO directly on the store.

pub mod data_store;
pub mod policy_model;
pub mod reset_manager;
pub mod sampler;
pub mod step_engine;
pub mod tag_env;
pub mod vec_env;
pub mod trainer;
pub mod harness;
