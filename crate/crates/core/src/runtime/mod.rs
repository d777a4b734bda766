//! Actor/learner orchestration with a discrete communication channel.
//!
//! Actors step environments with read-only network snapshots, sample both
//! policies, and measure each peer's counterfactual influence on the spot.
//! The learner turns batches of unrolls into intrinsic and PIMAEX rewards,
//! runs GAE per stream and PPO, trains the RND predictors, and publishes a
//! new snapshot.

mod actor;
pub(crate) mod experiment;
mod learner;

pub use actor::{actor_step, argmax, evaluate_episode, ActorState};
pub use experiment::{
    evaluate_checkpoint, load_checkpoint, read_episode_measures, run_experiment, run_seed, Checkpoint, RunSummary, SeedSummary,
};
pub use learner::{assemble_rewards, learner_step, AssembledRewards, LearnerState, LearnerStats, RndState};

use serde::{Deserialize, Serialize};

use crate::env::Observation;
use crate::influence::InfluenceRecord;
use crate::nn::{AgentNetwork, StreamValues};

/// Concatenated one-hot messages of all agents. `symbols` is `None` for the
/// all-zero message at episode start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointMessage {
    pub symbols: Option<Vec<usize>>,
    pub vector: Vec<f64>,
}

impl JointMessage {
    pub fn zeros(n_agents: usize, alphabet: usize) -> Self {
        Self { symbols: None, vector: vec![0.0; n_agents * alphabet] }
    }

    pub fn from_symbols(symbols: &[usize], alphabet: usize) -> Self {
        let mut vector = vec![0.0; symbols.len() * alphabet];
        for (i, s) in symbols.iter().enumerate() {
            vector[i * alphabet + s] = 1.0;
        }
        Self { symbols: Some(symbols.to_vec()), vector }
    }

    pub fn is_zero(&self) -> bool {
        self.symbols.is_none()
    }
}

/// One environment step of all agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<Observation>,
    /// Joint message received at this step, emitted on the previous one.
    pub message: JointMessage,
    pub env_actions: Vec<usize>,
    pub env_logp: Vec<f64>,
    pub comm_actions: Vec<usize>,
    pub comm_logp: Vec<f64>,
    pub values: Vec<StreamValues>,
    pub env_rewards: Vec<f64>,
    pub next_obs: Vec<Observation>,
    pub done: bool,
    pub influence: InfluenceRecord,
    pub episode_step: u32,
    pub snapshot_version: u64,
}

/// `T + 1` consecutive transitions. The first `T` are trained on; the last
/// supplies bootstrap values and the influence that credits step `T - 1`, and
/// reappears as the first transition of the actor's next unroll.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unroll {
    pub actor: usize,
    pub index: u64,
    pub steps: Vec<Transition>,
}

impl Unroll {
    pub fn trained_len(&self) -> usize {
        self.steps.len() - 1
    }
}

/// Read-only parameters published to actors and the evaluator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: u64,
    pub nets: Vec<AgentNetwork>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_message_has_one_hot_per_block() {
        let m = JointMessage::from_symbols(&[2, 0, 7, 7], 8);
        assert_eq!(m.vector.len(), 32);
        for b in 0..4 {
            assert_eq!(m.vector[b * 8..(b + 1) * 8].iter().sum::<f64>(), 1.0);
        }
        assert_eq!(m.vector[2], 1.0);
        assert_eq!(m.vector[16 + 7], 1.0);
        let z = JointMessage::zeros(4, 8);
        assert!(z.is_zero() && z.vector.iter().all(|v| *v == 0.0));
    }
}
