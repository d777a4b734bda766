//! Lockstep comparison of the engine against the reference model.

use rand::Rng as _;

use super::reference::{ref_observe, ref_reset, ref_step, RefWorld};
use super::{Action, ConsumeExplore, EnvParams};
use crate::error::Result;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub steps: u64,
    pub episodes: u64,
    /// Description of the first divergence, if any.
    pub mismatch: Option<String>,
}

fn same_state(env: &ConsumeExplore, w: &RefWorld) -> bool {
    let s = env.state();
    s.supply.iter().zip(&w.supply).all(|(a, b)| *a as i64 == *b)
        && s.timer.iter().zip(&w.timer).all(|(a, b)| *a as i64 == *b)
        && s.yield_level as i64 == w.level
        && s.explore_counter as i64 == w.counter
        && s.step_index as i64 == w.t
}

/// Drive both models with the same uniformly random actions for `steps` steps.
pub fn compare_with_reference(p: &EnvParams, steps: u64, seed: u64) -> Result<OracleReport> {
    let mut env = ConsumeExplore::new(p.clone())?;
    let mut actions_rng = rng::stream(seed, rng::Stream::Actor, 0, 0);
    let mut episode = 0u64;
    let stream = |e: u64| rng::stream(seed, rng::Stream::Environment, 0, e);
    env.reset_with_rng(stream(0));
    let mut world = ref_reset(p);
    let mut ref_rng = stream(0);
    for step in 0..steps {
        let a: Vec<usize> = (0..p.n_agents).map(|_| actions_rng.random_range(0..3)).collect();
        let acts: Vec<Action> = a.iter().map(|i| Action::from_index(*i).expect("action index")).collect();
        let out = env.step(&acts)?;
        let (rew, done) = ref_step(p, &mut world, &a, &mut ref_rng);
        let fail = |what: &str| {
            Ok(OracleReport {
                steps: step + 1,
                episodes: episode,
                mismatch: Some(format!("step {step} of episode {episode}: {what} differ (actions {a:?})")),
            })
        };
        if out.rewards != rew {
            return fail(&format!("rewards {:?} vs {:?}", out.rewards, rew));
        }
        if out.done != done {
            return fail("done flags");
        }
        if !same_state(&env, &world) {
            return fail(&format!("states {:?} vs {:?}", env.state(), world));
        }
        for (i, o) in env.observations().iter().enumerate() {
            if o.0 != ref_observe(p, &world, i) {
                return fail(&format!("observations of agent {i}"));
            }
        }
        if done {
            episode += 1;
            env.reset_with_rng(stream(episode));
            world = ref_reset(p);
            ref_rng = stream(episode);
        }
    }
    Ok(OracleReport { steps, episodes: episode, mismatch: None })
}

/// A random valid parameter set with small episode and level counts.
pub fn random_params(rng: &mut Rng) -> EnvParams {
    let yield_init = rng.random_range(0..4);
    let supply_max = rng.random_range(0..15);
    EnvParams {
        n_agents: rng.random_range(1..7),
        episode_len: rng.random_range(1..300),
        reward_consume: rng.random_range(-2.0..3.0),
        penalty: if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..2.0) },
        cycle_len: rng.random_range(1..15),
        yield_init,
        yield_max: yield_init + rng.random_range(0..5),
        supply_init: rng.random_range(0..=supply_max),
        supply_max,
        explore_threshold: rng.random_range(0.0..=1.0),
        explores_per_level: rng.random_range(1..40),
        seed: rng.random(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn engine_matches_reference_on_random_params() {
        let mut r = rng::stream(99, rng::Stream::Init, 0, 0);
        for k in 0..5 {
            let p = random_params(&mut r);
            let rep = compare_with_reference(&p, 2000, k).unwrap();
            assert_eq!(rep.mismatch, None, "{p:?}");
        }
    }
}
