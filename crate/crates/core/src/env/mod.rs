//! The Consume/Explore environment.
//!
//! Each of `N` agents owns a private production line that adds `C` items to
//! its depot every `M` steps. Consuming an item pays `R`. Exploring pays
//! nothing immediately but, after `c_max` successful explores, raises the
//! shared yield level `C`. Explores only succeed reliably when enough agents
//! explore together (threshold `E`).
//!
//! One step resolves, in order: consumes, explores, production, termination.

pub mod oracle;
pub mod reference;

use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::rng::{self, Rng};

pub const OBS_DIM: usize = 5;
pub const NUM_ACTIONS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvParams {
    pub n_agents: usize,
    pub episode_len: u32,
    /// Reward per consumed item.
    pub reward_consume: f64,
    /// Subtracted from the reward of every failed explore.
    pub penalty: f64,
    /// Production cycle length in steps.
    pub cycle_len: u32,
    pub yield_init: u32,
    pub yield_max: u32,
    pub supply_init: u32,
    pub supply_max: u32,
    /// Fraction of agents that must explore together for guaranteed success.
    pub explore_threshold: f64,
    /// Successful explores needed per yield level.
    pub explores_per_level: u32,
    pub seed: u64,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            n_agents: 4,
            episode_len: 5000,
            reward_consume: 1.0,
            penalty: 0.0,
            cycle_len: 10,
            yield_init: 1,
            yield_max: 5,
            supply_init: 0,
            supply_max: 10,
            explore_threshold: 0.5,
            explores_per_level: 2000,
            seed: 0,
        }
    }
}

impl EnvParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(config_err("env.n_agents must be >= 1"));
        }
        if self.episode_len == 0 {
            return Err(config_err("env.episode_len must be >= 1"));
        }
        if self.cycle_len == 0 {
            return Err(config_err("env.cycle_len (M) must be >= 1"));
        }
        if self.explores_per_level == 0 {
            return Err(config_err("env.explores_per_level (c_max) must be >= 1"));
        }
        if self.yield_init > self.yield_max {
            return Err(config_err(format!(
                "env.yield_init (C_init = {}) must be <= env.yield_max (C_max = {})",
                self.yield_init, self.yield_max
            )));
        }
        if self.supply_init > self.supply_max {
            return Err(config_err(format!(
                "env.supply_init (S_init = {}) must be <= env.supply_max (S_max = {})",
                self.supply_init, self.supply_max
            )));
        }
        if !(0.0..=1.0).contains(&self.explore_threshold) {
            return Err(config_err(format!(
                "env.explore_threshold (E = {}) must lie in [0, 1]",
                self.explore_threshold
            )));
        }
        if !self.reward_consume.is_finite() {
            return Err(config_err("env.reward_consume (R) must be finite"));
        }
        if !(self.penalty.is_finite() && self.penalty >= 0.0) {
            return Err(config_err("env.penalty (P) must be finite and >= 0"));
        }
        Ok(())
    }

    /// Probability that each of `k` simultaneous explores succeeds.
    pub fn explore_success_probability(&self, k: usize) -> f64 {
        if k == 0 {
            return 0.0;
        }
        let n = self.n_agents as f64;
        let frac = k as f64 / n;
        let e = self.explore_threshold;
        if e <= 1.0 / n || frac >= e {
            1.0
        } else {
            frac / e
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Noop = 0,
    Consume = 1,
    Explore = 2,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [Action::Noop, Action::Consume, Action::Explore];

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvState {
    pub supply: Vec<u32>,
    /// Steps until the next yield; 0 means production is halted on a full depot.
    pub timer: Vec<u32>,
    pub yield_level: u32,
    pub explore_counter: u32,
    pub step_index: u32,
}

impl EnvState {
    pub fn initial(params: &EnvParams) -> Self {
        Self {
            supply: vec![params.supply_init; params.n_agents],
            timer: vec![params.cycle_len; params.n_agents],
            yield_level: params.yield_init,
            explore_counter: 0,
            step_index: 0,
        }
    }

    pub fn depot_has_space(&self, params: &EnvParams, agent: usize) -> bool {
        self.supply[agent] + self.yield_level <= params.supply_max
    }

    pub fn observation(&self, params: &EnvParams, agent: usize) -> Observation {
        let yield_span = params.yield_max - params.yield_init;
        let yield_norm = if yield_span == 0 {
            0.0
        } else {
            f64::from(self.yield_level - params.yield_init) / f64::from(yield_span)
        };
        let supply_norm = if params.supply_max == 0 {
            0.0
        } else {
            f64::from(self.supply[agent]) / f64::from(params.supply_max)
        };
        Observation([
            supply_norm,
            if self.depot_has_space(params, agent) { 1.0 } else { 0.0 },
            f64::from(self.timer[agent]) / f64::from(params.cycle_len),
            yield_norm,
            f64::from(self.explore_counter) / f64::from(params.explores_per_level),
        ])
    }

    pub fn observations(&self, params: &EnvParams) -> Vec<Observation> {
        (0..params.n_agents).map(|i| self.observation(params, i)).collect()
    }
}

/// Per-agent observation, every component in `[0, 1]`.
///
/// Layout: supply, depot-space flag, time to production, yield level,
/// explore counter. The first three are private, the last two global.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub [f64; OBS_DIM]);

/// Integer state fields recovered from an observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DecodedObservation {
    pub supply: u32,
    pub depot_flag: bool,
    pub timer: u32,
    pub yield_level: u32,
    pub explore_counter: u32,
}

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn decode(&self, params: &EnvParams) -> DecodedObservation {
        let o = &self.0;
        let span = params.yield_max - params.yield_init;
        DecodedObservation {
            supply: (o[0] * f64::from(params.supply_max)).round() as u32,
            depot_flag: o[1] > 0.5,
            timer: (o[2] * f64::from(params.cycle_len)).round() as u32,
            yield_level: params.yield_init + (o[3] * f64::from(span)).round() as u32,
            explore_counter: (o[4] * f64::from(params.explores_per_level)).round() as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub rewards: Vec<f64>,
    /// Outcome of each explore action; `None` for agents that did not explore.
    pub explore_success: Vec<Option<bool>>,
    pub done: bool,
}

/// Apply one joint action to `state` in place.
pub fn transition(
    params: &EnvParams,
    state: &mut EnvState,
    actions: &[Action],
    rng: &mut Rng,
) -> Result<StepOutcome> {
    let n = params.n_agents;
    if actions.len() != n {
        return Err(Error::Shape {
            layer: "env.step joint action".into(),
            expected: n,
            got: actions.len(),
        });
    }
    if state.step_index >= params.episode_len {
        return Err(Error::Usage("step called on a finished episode; reset first".into()));
    }

    let mut rewards = vec![0.0; n];

    for (i, a) in actions.iter().enumerate() {
        if *a == Action::Consume && state.supply[i] > 0 {
            state.supply[i] -= 1;
            rewards[i] += params.reward_consume;
        }
    }

    let explorers = actions.iter().filter(|a| **a == Action::Explore).count();
    let p = params.explore_success_probability(explorers);
    let mut explore_success = vec![None; n];
    for (i, a) in actions.iter().enumerate() {
        if *a != Action::Explore {
            continue;
        }
        let ok = p >= 1.0 || rng.random::<f64>() < p;
        explore_success[i] = Some(ok);
        if ok {
            if state.yield_level < params.yield_max {
                state.explore_counter += 1;
                if state.explore_counter == params.explores_per_level {
                    state.yield_level += 1;
                    state.explore_counter = 0;
                }
            }
        } else {
            rewards[i] -= params.penalty;
        }
    }

    for i in 0..n {
        state.timer[i] = state.timer[i].saturating_sub(1);
        if state.timer[i] == 0 && state.supply[i] + state.yield_level <= params.supply_max {
            state.supply[i] += state.yield_level;
            state.timer[i] = params.cycle_len;
        }
    }

    state.step_index += 1;
    Ok(StepOutcome {
        rewards,
        explore_success,
        done: state.step_index == params.episode_len,
    })
}

/// Stateful wrapper pairing an [`EnvState`] with its episode RNG.
#[derive(Debug, Clone)]
pub struct ConsumeExplore {
    params: EnvParams,
    state: EnvState,
    rng: Rng,
    done: bool,
}

impl ConsumeExplore {
    pub fn new(params: EnvParams) -> Result<Self> {
        params.validate()?;
        let state = EnvState::initial(&params);
        let rng = rng::stream(params.seed, rng::Stream::Environment, 0, 0);
        Ok(Self { params, state, rng, done: false })
    }

    pub fn params(&self) -> &EnvParams {
        &self.params
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Reset with the environment stream for `seed`.
    pub fn reset(&mut self, seed: u64) -> Vec<Observation> {
        self.reset_with_rng(rng::stream(seed, rng::Stream::Environment, 0, 0))
    }

    /// Reset with an externally derived stream, e.g. one per
    /// `(run_seed, actor, episode)`.
    pub fn reset_with_rng(&mut self, rng: Rng) -> Vec<Observation> {
        self.state = EnvState::initial(&self.params);
        self.rng = rng;
        self.done = false;
        self.observations()
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.state.observations(&self.params)
    }

    pub fn step(&mut self, actions: &[Action]) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Usage("step called on a finished episode; reset first".into()));
        }
        let out = transition(&self.params, &mut self.state, actions, &mut self.rng)?;
        self.done = out.done;
        Ok(out)
    }
}

/// Free-function form of [`ConsumeExplore::reset`].
pub fn reset(params: &EnvParams, seed: u64) -> Result<(ConsumeExplore, Vec<Observation>)> {
    let mut env = ConsumeExplore::new(params.clone())?;
    let obs = env.reset(seed);
    Ok((env, obs))
}

/// One line of a trace dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u32,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub state: EnvState,
    pub done: bool,
}

/// Writes one JSON object per step.
pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn record(&mut self, rec: &TraceRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table1() -> EnvParams {
        EnvParams::default()
    }

    #[test]
    fn reset_matches_table_defaults() {
        let (env, obs) = reset(&table1(), 7).unwrap();
        assert!(env.state().supply.iter().all(|&s| s == 0));
        assert_eq!(env.state().yield_level, 1);
        assert_eq!(env.state().explore_counter, 0);
        for o in obs {
            assert_eq!(o.0, [0.0, 1.0, 1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn full_initial_supply() {
        let p = EnvParams { supply_init: 10, ..table1() };
        let (_, obs) = reset(&p, 0).unwrap();
        // 10 + C(=1) does not fit into a depot of 10.
        assert_eq!(obs[0].0[0], 1.0);
        assert_eq!(obs[0].0[1], 0.0);
    }

    #[test]
    fn invalid_params_name_the_bound() {
        let p = EnvParams { yield_init: 6, ..table1() };
        let err = ConsumeExplore::new(p).unwrap_err().to_string();
        assert!(err.contains("yield_init"), "{err}");
        let p = EnvParams { explore_threshold: 1.5, ..table1() };
        assert!(ConsumeExplore::new(p).unwrap_err().to_string().contains("explore_threshold"));
        let p = EnvParams { cycle_len: 0, ..table1() };
        assert!(ConsumeExplore::new(p).unwrap_err().to_string().contains("cycle_len"));
    }

    #[test]
    fn consume_with_supply() {
        let p = table1();
        let mut s = EnvState::initial(&p);
        s.supply[0] = 3;
        let mut r = rng::stream(0, rng::Stream::Environment, 0, 0);
        let out = transition(&p, &mut s, &[Action::Consume, Action::Noop, Action::Noop, Action::Noop], &mut r)
            .unwrap();
        assert_eq!(out.rewards[0], 1.0);
        assert_eq!(s.supply[0], 2);
    }

    #[test]
    fn consume_on_empty_depot_is_noop() {
        let p = table1();
        let mut s = EnvState::initial(&p);
        let mut r = rng::stream(0, rng::Stream::Environment, 0, 0);
        let out = transition(&p, &mut s, &[Action::Consume; 4], &mut r).unwrap();
        assert_eq!(out.rewards, vec![0.0; 4]);
        assert_eq!(s.supply, vec![0; 4]);
    }

    #[test]
    fn two_explorers_always_succeed() {
        let p = table1();
        let mut s = EnvState::initial(&p);
        let mut r = rng::stream(0, rng::Stream::Environment, 0, 0);
        let acts = [Action::Explore, Action::Explore, Action::Noop, Action::Noop];
        for step in 1..=100 {
            transition(&p, &mut s, &acts, &mut r).unwrap();
            assert_eq!(s.explore_counter, 2 * step);
        }
    }

    #[test]
    fn counter_rolls_over_into_yield() {
        let p = table1();
        let mut s = EnvState::initial(&p);
        s.explore_counter = p.explores_per_level - 1;
        let mut r = rng::stream(0, rng::Stream::Environment, 0, 0);
        let acts = [Action::Explore, Action::Explore, Action::Noop, Action::Noop];
        transition(&p, &mut s, &acts, &mut r).unwrap();
        // first success levels up, second carries
        assert_eq!(s.yield_level, 2);
        assert_eq!(s.explore_counter, 1);

        let p1 = EnvParams { explore_threshold: 0.0, ..p };
        let mut s = EnvState::initial(&p1);
        s.explore_counter = p1.explores_per_level - 1;
        let acts1 = [Action::Explore, Action::Noop, Action::Noop, Action::Noop];
        transition(&p1, &mut s, &acts1, &mut r).unwrap();
        assert_eq!((s.yield_level, s.explore_counter), (2, 0));
    }

    #[test]
    fn counter_frozen_at_max_yield() {
        let p = table1();
        let mut s = EnvState::initial(&p);
        s.yield_level = p.yield_max;
        let mut r = rng::stream(0, rng::Stream::Environment, 0, 0);
        transition(&p, &mut s, &[Action::Explore; 4], &mut r).unwrap();
        assert_eq!(s.explore_counter, 0);
        assert_eq!(s.yield_level, p.yield_max);
    }

    #[test]
    fn production_halts_on_full_depot() {
        let p = EnvParams { cycle_len: 2, ..table1() };
        let mut s = EnvState::initial(&p);
        s.supply[0] = 10;
        let mut r = rng::stream(0, rng::Stream::Environment, 0, 0);
        let noop = [Action::Noop; 4];
        transition(&p, &mut s, &noop, &mut r).unwrap();
        assert_eq!(s.timer[0], 1);
        transition(&p, &mut s, &noop, &mut r).unwrap();
        assert_eq!((s.timer[0], s.supply[0]), (0, 10));
        transition(&p, &mut s, &noop, &mut r).unwrap();
        assert_eq!((s.timer[0], s.supply[0]), (0, 10));
        // space frees up -> production resumes on the same step
        transition(&p, &mut s, &[Action::Consume, Action::Noop, Action::Noop, Action::Noop], &mut r)
            .unwrap();
        assert_eq!((s.timer[0], s.supply[0]), (2, 10));
    }

    #[test]
    fn stepping_done_episode_errors() {
        let p = EnvParams { episode_len: 2, ..table1() };
        let (mut env, _) = reset(&p, 0).unwrap();
        assert!(!env.step(&[Action::Noop; 4]).unwrap().done);
        assert!(env.step(&[Action::Noop; 4]).unwrap().done);
        assert!(matches!(env.step(&[Action::Noop; 4]), Err(Error::Usage(_))));
    }

    #[test]
    fn wrong_action_count_is_shape_error() {
        let (mut env, _) = reset(&table1(), 0).unwrap();
        assert!(matches!(env.step(&[Action::Noop; 3]), Err(Error::Shape { .. })));
    }

    #[test]
    fn failed_explore_is_penalized_per_agent() {
        let p = EnvParams { penalty: 0.5, ..table1() };
        let mut s = EnvState::initial(&p);
        let mut r = rng::stream(3, rng::Stream::Environment, 0, 0);
        let acts = [Action::Explore, Action::Noop, Action::Noop, Action::Noop];
        let mut fails = 0;
        for _ in 0..200 {
            let out = transition(&p, &mut s, &acts, &mut r).unwrap();
            match out.explore_success[0] {
                Some(false) => {
                    fails += 1;
                    assert_eq!(out.rewards[0], -0.5);
                }
                Some(true) => assert_eq!(out.rewards[0], 0.0),
                None => unreachable!(),
            }
        }
        assert!(fails > 0);
    }

    #[test]
    fn trace_writer_emits_json_lines() {
        let (mut env, _) = reset(&table1(), 0).unwrap();
        let mut w = TraceWriter::new(Vec::new());
        for _ in 0..3 {
            let acts = vec![Action::Explore; 4];
            let out = env.step(&acts).unwrap();
            w.record(&TraceRecord {
                step: env.state().step_index,
                actions: acts,
                rewards: out.rewards,
                state: env.state().clone(),
                done: out.done,
            })
            .unwrap();
        }
        let text = String::from_utf8(w.into_inner()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let rec: TraceRecord = serde_json::from_str(lines[2]).unwrap();
        assert_eq!(rec.state.explore_counter, 12);
    }
}
