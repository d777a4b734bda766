use rand::Rng as _;

use super::{JointMessage, Snapshot, Transition, Unroll};
use crate::config::RunConfig;
use crate::env::{Action, ConsumeExplore, EnvParams, Observation, TraceRecord, TraceWriter};
use crate::error::Result;
use crate::influence::{influences_on, InfluenceRecord};
use crate::metrics::{CoverageTracker, EpisodeStats, EpisodeTracker};
use crate::nn::{softmax, AgentNetwork};
use crate::rng::{self, Rng};

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn sample(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Everything one actor carries between steps.
#[derive(Debug)]
pub struct ActorState {
    pub id: usize,
    seed: u64,
    env: ConsumeExplore,
    obs: Vec<Observation>,
    message: JointMessage,
    policy_rng: Rng,
    episode: u64,
    alphabet: usize,
    compute_influence: bool,
    carry: Option<Transition>,
    tracker: EpisodeTracker,
    /// Union over every training episode this actor has played.
    pub coverage: CoverageTracker,
    pub finished: Vec<EpisodeStats>,
    pub env_steps: u64,
    pub unrolls: u64,
}

impl ActorState {
    pub fn new(cfg: &RunConfig, seed: u64, id: usize) -> Result<Self> {
        let params = cfg.env.clone();
        let mut env = ConsumeExplore::new(params.clone())?;
        let obs = env.reset_with_rng(rng::stream(seed, rng::Stream::Environment, id as u64, 0));
        let tracker = EpisodeTracker::new(&params, env.state());
        Ok(Self {
            id,
            seed,
            obs,
            message: JointMessage::zeros(params.n_agents, cfg.model.comm_alphabet),
            policy_rng: rng::stream(seed, rng::Stream::Actor, id as u64, 0),
            episode: 0,
            alphabet: cfg.model.comm_alphabet,
            compute_influence: cfg.needs_influence(),
            carry: None,
            coverage: CoverageTracker::new(&params),
            tracker,
            env,
            finished: Vec::new(),
            env_steps: 0,
            unrolls: 0,
        })
    }

    pub fn params(&self) -> &EnvParams {
        self.env.params()
    }

    pub fn take_finished(&mut self) -> Vec<EpisodeStats> {
        std::mem::take(&mut self.finished)
    }

    /// Training coverage including the episode in progress.
    pub fn total_coverage(&self) -> CoverageTracker {
        let mut c = self.coverage.clone();
        c.merge(self.tracker.coverage());
        c
    }

    /// `T + 1` transitions, the first being the last one of the previous unroll.
    pub fn collect_unroll(&mut self, snapshot: &Snapshot, unroll_length: usize) -> Result<Unroll> {
        let mut steps = Vec::with_capacity(unroll_length + 1);
        if let Some(t) = self.carry.take() {
            steps.push(t);
        }
        while steps.len() < unroll_length + 1 {
            steps.push(actor_step(self, snapshot)?);
        }
        self.carry = steps.last().cloned();
        let u = Unroll { actor: self.id, index: self.unrolls, steps };
        self.unrolls += 1;
        Ok(u)
    }
}

/// Act with every agent, measure influences, and step the environment.
pub fn actor_step(state: &mut ActorState, snapshot: &Snapshot) -> Result<Transition> {
    let n = state.params().n_agents;
    let msg = &state.message.vector;
    let mut outs = Vec::with_capacity(n);
    let (mut env_actions, mut env_logp) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut comm_actions, mut comm_logp) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (i, net) in snapshot.nets.iter().enumerate() {
        let out = net.forward(state.obs[i].as_slice(), msg)?;
        let pe = softmax(&out.env_logits);
        let pc = softmax(&out.comm_logits);
        let a = sample(&pe, &mut state.policy_rng);
        let c = sample(&pc, &mut state.policy_rng);
        env_actions.push(a);
        env_logp.push(pe[a].ln());
        comm_actions.push(c);
        comm_logp.push(pc[c].ln());
        outs.push(out);
    }

    let mut influence = InfluenceRecord::default();
    if state.compute_influence {
        if let Some(sent) = &state.message.symbols {
            for k in 0..n {
                let pairs = influences_on(&snapshot.nets[k], &outs[k], msg, sent, k, env_actions[k])?;
                influence.pairs.extend(pairs);
            }
        }
    }

    let actions: Vec<Action> = env_actions.iter().map(|a| Action::from_index(*a).expect("sampled action")).collect();
    let episode_step = state.env.state().step_index;
    let out = state.env.step(&actions)?;
    let next_obs = state.env.observations();
    state.tracker.record(&actions, &out.rewards, state.env.state(), out.done);
    state.env_steps += 1;

    let t = Transition {
        obs: state.obs.clone(),
        message: state.message.clone(),
        env_actions,
        env_logp,
        comm_actions: comm_actions.clone(),
        comm_logp,
        values: outs.iter().map(|o| o.values).collect(),
        env_rewards: out.rewards,
        next_obs: next_obs.clone(),
        done: out.done,
        influence,
        episode_step,
        snapshot_version: snapshot.version,
    };

    if out.done {
        self::finish_episode(state);
    } else {
        state.obs = next_obs;
        state.message = JointMessage::from_symbols(&comm_actions, state.alphabet);
    }
    Ok(t)
}

fn finish_episode(state: &mut ActorState) {
    state.finished.push(state.tracker.finish());
    state.coverage.merge(state.tracker.coverage());
    state.episode += 1;
    let r = rng::stream(state.seed, rng::Stream::Environment, state.id as u64, state.episode);
    state.obs = state.env.reset_with_rng(r);
    state.message = JointMessage::zeros(state.params().n_agents, state.alphabet);
    state.tracker = EpisodeTracker::new(&state.env.params().clone(), state.env.state());
}

/// One greedy episode: argmax over both policies, messages passed as usual.
pub fn evaluate_episode(
    params: &EnvParams,
    nets: &[AgentNetwork],
    env_rng: Rng,
    mut trace: Option<&mut TraceWriter<std::fs::File>>,
) -> Result<(EpisodeStats, CoverageTracker)> {
    let n = params.n_agents;
    let alphabet = nets[0].config().comm_alphabet;
    let mut env = ConsumeExplore::new(params.clone())?;
    let mut obs = env.reset_with_rng(env_rng);
    let mut msg = JointMessage::zeros(n, alphabet);
    let mut tracker = EpisodeTracker::new(params, env.state());
    while !env.is_done() {
        let mut actions = Vec::with_capacity(n);
        let mut comm = Vec::with_capacity(n);
        for (i, net) in nets.iter().enumerate() {
            let out = net.forward(obs[i].as_slice(), &msg.vector)?;
            actions.push(Action::from_index(argmax(&out.env_logits)).expect("action"));
            comm.push(argmax(&out.comm_logits));
        }
        let step = env.state().step_index;
        let out = env.step(&actions)?;
        tracker.record(&actions, &out.rewards, env.state(), out.done);
        if let Some(w) = trace.as_deref_mut() {
            w.record(&TraceRecord {
                step,
                actions: actions.clone(),
                rewards: out.rewards.clone(),
                state: env.state().clone(),
                done: out.done,
            })?;
        }
        obs = env.observations();
        msg = JointMessage::from_symbols(&comm, alphabet);
    }
    Ok((tracker.finish(), tracker.coverage().clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RunConfig {
        let mut c = RunConfig::preset("pimaex-beta").unwrap();
        c.env.episode_len = 20;
        c.env.explores_per_level = 5;
        c
    }

    fn snapshot(c: &RunConfig, seed: u64) -> Snapshot {
        let nets = (0..c.env.n_agents)
            .map(|i| AgentNetwork::new(c.net_config(), seed * 10 + i as u64).unwrap())
            .collect();
        Snapshot { version: 0, nets }
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
    }

    #[test]
    fn influence_counts_and_message_delay() {
        let c = cfg();
        let snap = snapshot(&c, 1);
        let mut a = ActorState::new(&c, 0, 0).unwrap();
        let mut prev: Option<Transition> = None;
        for _ in 0..45 {
            let t = actor_step(&mut a, &snap).unwrap();
            match &prev {
                Some(p) if !p.done => {
                    assert_eq!(t.message, JointMessage::from_symbols(&p.comm_actions, 8));
                    // N = 4: three sources per target
                    assert_eq!(t.influence.pairs.len(), 12);
                    for k in 0..4 {
                        assert_eq!(t.influence.pairs.iter().filter(|p| p.target == k).count(), 3);
                        assert!(t.influence.pairs.iter().all(|p| p.source != p.target));
                    }
                }
                _ => {
                    assert!(t.message.is_zero());
                    assert!(t.influence.is_empty());
                }
            }
            prev = Some(t);
        }
        assert_eq!(a.finished.len(), 2);
    }

    #[test]
    fn unrolls_overlap_by_one() {
        let c = cfg();
        let snap = snapshot(&c, 2);
        let mut a = ActorState::new(&c, 0, 0).unwrap();
        let u1 = a.collect_unroll(&snap, 8).unwrap();
        let u2 = a.collect_unroll(&snap, 8).unwrap();
        assert_eq!(u1.steps.len(), 9);
        assert_eq!(u1.steps[8], u2.steps[0]);
        assert_eq!(a.env_steps, 17);
    }

    #[test]
    fn message_blind_snapshot_has_no_influence() {
        let c = cfg();
        let mut snap = snapshot(&c, 3);
        snap.nets.iter_mut().for_each(|n| n.zero_message_weights());
        let mut a = ActorState::new(&c, 0, 0).unwrap();
        for _ in 0..10 {
            let t = actor_step(&mut a, &snap).unwrap();
            for p in &t.influence.pairs {
                assert!(p.pi_kl.abs() <= 1e-9 && p.pi_pmi.abs() <= 1e-9);
                assert!(p.vi_ext.abs() <= 1e-9 && p.vi_int.abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn stored_influence_recomputes_from_snapshot() {
        let c = cfg();
        let snap = snapshot(&c, 4);
        let mut a = ActorState::new(&c, 0, 0).unwrap();
        for _ in 0..6 {
            let t = actor_step(&mut a, &snap).unwrap();
            let Some(sent) = &t.message.symbols else { continue };
            for k in 0..4 {
                let out = snap.nets[k].forward(t.obs[k].as_slice(), &t.message.vector).unwrap();
                let again = influences_on(&snap.nets[k], &out, &t.message.vector, sent, k, t.env_actions[k]).unwrap();
                let stored: Vec<_> = t.influence.pairs.iter().filter(|p| p.target == k).collect();
                for (x, y) in again.iter().zip(stored) {
                    assert!((x.pi_kl - y.pi_kl).abs() <= 1e-9 && (x.vi_int - y.vi_int).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn greedy_evaluation_is_reproducible() {
        let c = cfg();
        let snap = snapshot(&c, 5);
        let r = || rng::stream(0, rng::Stream::Evaluator, 0, 0);
        let (a, _) = evaluate_episode(&c.env, &snap.nets, r(), None).unwrap();
        let (b, _) = evaluate_episode(&c.env, &snap.nets, r(), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.length, 20);
    }
}
