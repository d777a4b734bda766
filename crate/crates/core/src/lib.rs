//! Multi-agent exploration laboratory: the Consume/Explore environment,
//! dense actor-critic networks, RND curiosity, counterfactual influence
//! rewards and a PPO actor/learner runtime.

pub mod config;
pub mod env;
pub mod error;
pub mod influence;
pub mod metrics;
pub mod nn;
pub mod ppo;
pub mod report;
pub mod rnd;
pub mod rng;
pub mod runtime;

pub use error::{Error, Result};
