//! Reinforcement learning from composite delayed rewards.
//!
//! The crate bundles a small reverse-mode differentiation engine, a
//! transformer reward model that decomposes segment-level composite rewards
//! into weighted per-step rewards, tabular environments with known step
//! rewards, a relabel-then-learn training loop and an experiment harness.

pub mod autodiff;
pub mod composite;
pub mod envs;
pub mod model;
pub mod harness;
pub mod policy;
pub mod trainer;
