//! Naive reference model of the Consume/Explore rules.
//!
//! Written independently of the engine in `env` and kept deliberately
//! literal: signed integers, explicit loops, no shared helpers apart from the
//! parameter struct. Used by `oracle-check` and the equivalence tests. It
//! consumes random numbers in the same order as the engine (one uniform draw
//! per explorer, in agent order, only when success is not guaranteed).
#![allow(clippy::all)]

use rand::Rng as _;

use super::EnvParams;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct RefWorld {
    pub supply: Vec<i64>,
    pub timer: Vec<i64>,
    pub level: i64,
    pub counter: i64,
    pub t: i64,
}

pub fn ref_reset(p: &EnvParams) -> RefWorld {
    let n = p.n_agents;
    RefWorld {
        supply: vec![p.supply_init as i64; n],
        timer: vec![p.cycle_len as i64; n],
        level: p.yield_init as i64,
        counter: 0,
        t: 0,
    }
}

/// `actions[i]`: 0 noop, 1 consume, 2 explore. Returns rewards and done.
pub fn ref_step(p: &EnvParams, w: &mut RefWorld, actions: &[usize], rng: &mut Rng) -> (Vec<f64>, bool) {
    let n = p.n_agents;
    let mut rew = vec![0.0f64; n];

    // consume
    for i in 0..n {
        if actions[i] == 1 && w.supply[i] >= 1 {
            w.supply[i] = w.supply[i] - 1;
            rew[i] = rew[i] + p.reward_consume;
        }
    }

    // explore
    let mut k = 0;
    for i in 0..n {
        if actions[i] == 2 {
            k += 1;
        }
    }
    let frac = (k as f64) / (n as f64);
    let sure = p.explore_threshold <= 1.0 / (n as f64) || frac >= p.explore_threshold;
    for i in 0..n {
        if actions[i] != 2 {
            continue;
        }
        let success;
        if sure {
            success = true;
        } else {
            let chance = frac / p.explore_threshold;
            let u: f64 = rng.random();
            success = u < chance;
        }
        if !success {
            rew[i] = rew[i] - p.penalty;
            continue;
        }
        if w.level < p.yield_max as i64 {
            w.counter = w.counter + 1;
            if w.counter >= p.explores_per_level as i64 {
                w.counter = w.counter - p.explores_per_level as i64;
                w.level = w.level + 1;
            }
        }
    }
    if w.level == p.yield_max as i64 {
        if w.counter != 0 {
            w.counter = 0;
        }
    }

    // produce
    for i in 0..n {
        if w.timer[i] > 0 {
            w.timer[i] = w.timer[i] - 1;
        }
        if w.timer[i] == 0 {
            if w.supply[i] + w.level <= p.supply_max as i64 {
                w.supply[i] = w.supply[i] + w.level;
                w.timer[i] = p.cycle_len as i64;
            }
        }
    }

    w.t = w.t + 1;
    (rew, w.t == p.episode_len as i64)
}

/// Observation of agent `i` built straight from the textual definitions.
pub fn ref_observe(p: &EnvParams, w: &RefWorld, i: usize) -> [f64; 5] {
    let s_max = p.supply_max as f64;
    let mut o = [0.0; 5];
    o[0] = if p.supply_max > 0 { w.supply[i] as f64 / s_max } else { 0.0 };
    o[1] = if w.supply[i] + w.level <= p.supply_max as i64 { 1.0 } else { 0.0 };
    o[2] = w.timer[i] as f64 / p.cycle_len as f64;
    let span = p.yield_max as f64 - p.yield_init as f64;
    o[3] = if span > 0.0 { (w.level as f64 - p.yield_init as f64) / span } else { 0.0 };
    o[4] = w.counter as f64 / p.explores_per_level as f64;
    o
}
