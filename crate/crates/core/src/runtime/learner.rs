use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{Snapshot, Unroll};
use crate::config::{RewardAlignment, RunConfig};
use crate::env::OBS_DIM;
use crate::error::{Error, Result};
use crate::influence::pimaex_reward;
use crate::nn::{AgentNetwork, VALUE_COMM, VALUE_EXT, VALUE_INT};
use crate::ppo::{gae, minibatch_partition, ppo_update, AgentBatch, AgentLearner, UpdateDiagnostics};
use crate::rnd::{init_obs_stats, IntrinsicRewardNormalizer, ObsNormalizer, RndPair};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RndState {
    pub pairs: Vec<RndPair>,
    pub obs_norm: ObsNormalizer,
    pub int_norm: IntrinsicRewardNormalizer,
}

/// The learner's full mutable state; checkpoints serialize exactly this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub agents: Vec<AgentLearner>,
    pub rnd: Option<RndState>,
    pub rng: Rng,
    pub step: u64,
    pub env_steps: u64,
}

impl LearnerState {
    /// Fresh networks, RND pairs and a warmed-up observation normalizer.
    pub fn init(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let n = cfg.env.n_agents;
        let agents = (0..n)
            .map(|i| {
                let mut r = rng::stream(seed, rng::Stream::Init, i as u64, 0);
                AgentNetwork::with_rng(cfg.net_config(), &mut r).map(|net| AgentLearner::new(net, &cfg.ppo))
            })
            .collect::<Result<Vec<_>>>()?;
        let rnd = if cfg.rnd.enabled {
            let pairs = (0..n)
                .map(|i| {
                    let mut r = rng::stream(seed, rng::Stream::Init, 1000 + i as u64, 0);
                    RndPair::new(&cfg.rnd, OBS_DIM, cfg.ppo.learning_rate, cfg.ppo.adam_epsilon, &mut r)
                })
                .collect();
            let obs_norm = init_obs_stats(&cfg.env, cfg.rnd.warmup_steps, seed)?;
            let streams = cfg.runtime.num_actors * n;
            Some(RndState { pairs, obs_norm, int_norm: IntrinsicRewardNormalizer::new(cfg.rnd.discount, streams) })
        } else {
            None
        };
        Ok(Self { agents, rnd, rng: rng::stream(seed, rng::Stream::Learner, 0, 0), step: 0, env_steps: 0 })
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot { version: self.step, nets: self.agents.iter().map(|a| a.net.clone()).collect() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearnerStats {
    pub step: u64,
    pub env_steps: u64,
    pub update: UpdateDiagnostics,
    pub mean_env_reward: f64,
    pub mean_int_raw: f64,
    pub mean_int_reward: f64,
    pub mean_pimaex: f64,
    pub mean_comm_reward: f64,
    pub mean_pi_kl: f64,
    pub mean_abs_vi_int: f64,
    pub rnd_loss: f64,
    pub rnd_skipped: u64,
    pub max_snapshot_lag: u64,
}

/// Per-unroll, per-step, per-agent reward streams before GAE.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledRewards {
    /// `[unroll][t][agent]` over all `T + 1` steps.
    pub int_raw: Vec<Vec<Vec<f64>>>,
    pub int: Vec<Vec<Vec<f64>>>,
    pub pimaex: Vec<Vec<Vec<f64>>>,
    /// `[unroll][t][agent][stream]` over the `T` trained steps.
    pub streams: Vec<Vec<Vec<[f64; 3]>>>,
}

fn clamp(v: f64, limit: Option<f64>) -> f64 {
    match limit {
        Some(m) => v.clamp(-m, m),
        None => v,
    }
}

/// Intrinsic and PIMAEX rewards, then the three stream rewards.
///
/// Updates the observation and intrinsic-return statistics when RND is on.
/// Transition `t`'s comm reward is the PIMAEX reward of step `t + 1`, where
/// the message sent at `t` is received and its influence recorded.
pub fn assemble_rewards(cfg: &RunConfig, rnd: Option<&mut RndState>, unrolls: &[Unroll]) -> Result<AssembledRewards> {
    let n = cfg.env.n_agents;
    let zeros = |u: &Unroll| vec![vec![0.0; n]; u.steps.len()];
    let mut int_raw: Vec<Vec<Vec<f64>>> = unrolls.iter().map(zeros).collect();
    let mut int: Vec<Vec<Vec<f64>>> = unrolls.iter().map(zeros).collect();

    if let Some(rnd) = rnd {
        let mut trained = Vec::new();
        for u in unrolls {
            for t in &u.steps[..u.trained_len()] {
                for o in &t.next_obs {
                    trained.extend_from_slice(o.as_slice());
                }
            }
        }
        let rows = trained.len() / OBS_DIM;
        rnd.obs_norm.update_batch(Array2::from_shape_vec((rows, OBS_DIM), trained).expect("rows").view());
        for i in 0..n {
            for (ui, u) in unrolls.iter().enumerate() {
                let mut x = Array2::<f64>::zeros((u.steps.len(), OBS_DIM));
                for (t, s) in u.steps.iter().enumerate() {
                    x.row_mut(t).assign(&ndarray::ArrayView1::from(s.next_obs[i].as_slice()));
                }
                let raw = rnd.pairs[i].raw_rewards(rnd.obs_norm.normalize_batch(x.view()).view());
                for (t, r) in raw.into_iter().enumerate() {
                    int_raw[ui][t][i] = r;
                }
            }
        }
        for (ui, u) in unrolls.iter().enumerate() {
            for i in 0..n {
                let series: Vec<f64> = (0..u.trained_len()).map(|t| int_raw[ui][t][i]).collect();
                rnd.int_norm.observe(u.actor * n + i, &series);
            }
        }
        for ui in 0..unrolls.len() {
            for t in 0..int[ui].len() {
                for i in 0..n {
                    int[ui][t][i] = clamp(rnd.int_norm.normalize(int_raw[ui][t][i]), cfg.rnd.max_abs_reward);
                }
            }
        }
    }

    let w = &cfg.influence.weights;
    let mut pimaex: Vec<Vec<Vec<f64>>> = unrolls.iter().map(zeros).collect();
    if !w.is_zero() {
        for (ui, u) in unrolls.iter().enumerate() {
            for t in 0..u.steps.len() {
                let rec = &u.steps[t].influence;
                if rec.is_empty() {
                    continue;
                }
                let src = match cfg.influence.reward_alignment {
                    RewardAlignment::InfluenceStep => t,
                    RewardAlignment::MessageStep if t > 0 => t - 1,
                    RewardAlignment::MessageStep => continue,
                };
                pimaex[ui][t] = pimaex_reward(rec, &u.steps[src].env_rewards, &int[ui][src], n, w);
            }
        }
    }

    let coefs = &cfg.ppo.reward_coefs;
    let streams = unrolls
        .iter()
        .enumerate()
        .map(|(ui, u)| {
            (0..u.trained_len())
                .map(|t| {
                    let step = &u.steps[t];
                    (0..n)
                        .map(|i| {
                            let credited = if step.done { 0.0 } else { pimaex[ui][t + 1][i] };
                            let parts = [step.env_rewards[i], int[ui][t][i], credited];
                            let mut out = [0.0; 3];
                            for s in [VALUE_EXT, VALUE_INT, VALUE_COMM] {
                                let c = coefs.stream(s);
                                let v = c[0] * parts[0] + c[1] * parts[1] + c[2] * parts[2];
                                out[s] = clamp(v, cfg.ppo.max_abs_reward[s]);
                            }
                            out
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(AssembledRewards { int_raw, int, pimaex, streams })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    if n > 0 {
        s / n as f64
    } else {
        0.0
    }
}

/// One learner update from a batch of unrolls.
pub fn learner_step(state: &mut LearnerState, unrolls: &[Unroll], cfg: &RunConfig) -> Result<LearnerStats> {
    if unrolls.is_empty() {
        return Err(Error::Usage("learner_step needs at least one unroll".into()));
    }
    let n = cfg.env.n_agents;
    let d = cfg.net_config().message_dim();
    if let Some(r) = &state.rnd {
        debug_assert!(r.pairs.iter().all(|p| p.target_unchanged()));
    }
    let rewards = assemble_rewards(cfg, state.rnd.as_mut(), unrolls)?;
    let int_active = cfg.rnd.enabled;

    let total_rows: usize = unrolls.iter().map(|u| u.steps.len()).sum();
    let trained_rows: usize = unrolls.iter().map(|u| u.trained_len()).sum();
    let mut batches = Vec::with_capacity(n);
    for i in 0..n {
        let mut obs = Array2::<f64>::zeros((total_rows, OBS_DIM));
        let mut msg = Array2::<f64>::zeros((total_rows, d));
        let mut r = 0;
        for u in unrolls {
            for s in &u.steps {
                obs.row_mut(r).assign(&ndarray::ArrayView1::from(s.obs[i].as_slice()));
                msg.row_mut(r).assign(&ndarray::ArrayView1::from(s.message.vector.as_slice()));
                r += 1;
            }
        }
        let (fwd, _) = state.agents[i].net.forward_batch(obs.view(), msg.view())?;

        let mut keep = Vec::with_capacity(trained_rows);
        let mut advantages = [vec![], vec![], vec![]];
        let mut targets = [vec![], vec![], vec![]];
        let mut base = 0;
        for (ui, u) in unrolls.iter().enumerate() {
            let tl = u.trained_len();
            let dones: Vec<bool> = u.steps[..tl].iter().map(|s| s.done).collect();
            for s in [VALUE_EXT, VALUE_INT, VALUE_COMM] {
                let (gamma, episodic) = match s {
                    VALUE_EXT => (cfg.ppo.discount_ext, true),
                    VALUE_INT => (cfg.rnd.discount, !cfg.rnd.infinite_horizon),
                    _ => (cfg.ppo.discount_comm, true),
                };
                let rw: Vec<f64> = (0..tl).map(|t| rewards.streams[ui][t][i][s]).collect();
                let v: Vec<f64> = (0..tl).map(|t| fwd.values[[base + t, s]]).collect();
                let boot = fwd.values[[base + tl, s]];
                let (a, tg) = gae(&rw, &v, &dones, boot, gamma, cfg.ppo.gae_lambda, episodic)?;
                advantages[s].extend(a);
                targets[s].extend(tg);
            }
            keep.extend(base..base + tl);
            base += u.steps.len();
        }
        let pick = |f: &dyn Fn(&super::Transition) -> f64| -> Vec<f64> {
            unrolls.iter().flat_map(|u| u.steps[..u.trained_len()].iter().map(f)).collect()
        };
        let picku = |f: &dyn Fn(&super::Transition) -> usize| -> Vec<usize> {
            unrolls.iter().flat_map(|u| u.steps[..u.trained_len()].iter().map(f)).collect()
        };
        batches.push(AgentBatch {
            obs: obs.select(Axis(0), &keep),
            msg: msg.select(Axis(0), &keep),
            env_action: picku(&|s| s.env_actions[i]),
            env_logp: pick(&|s| s.env_logp[i]),
            comm_action: picku(&|s| s.comm_actions[i]),
            comm_logp: pick(&|s| s.comm_logp[i]),
            advantages,
            targets,
        });
    }

    let update = ppo_update(&mut state.agents, &batches, &cfg.ppo, int_active, &mut state.rng)?;

    let (mut rnd_loss, mut rnd_skipped, mut rnd_count) = (0.0, 0u64, 0usize);
    if let Some(rnd) = state.rnd.as_mut() {
        for i in 0..n {
            let mut rows = Vec::with_capacity(trained_rows * OBS_DIM);
            for u in unrolls {
                for s in &u.steps[..u.trained_len()] {
                    rows.extend_from_slice(s.next_obs[i].as_slice());
                }
            }
            let x = Array2::from_shape_vec((trained_rows, OBS_DIM), rows).expect("rows");
            let xn = rnd.obs_norm.normalize_batch(x.view());
            for _ in 0..cfg.ppo.num_epochs {
                for idx in minibatch_partition(trained_rows, cfg.ppo.num_minibatches, &mut state.rng) {
                    let mb = xn.select(Axis(0), &idx);
                    let l = rnd.pairs[i].train_predictor(mb.view(), cfg.rnd.predictor_proportion, &mut state.rng);
                    if l.skipped {
                        rnd_skipped += 1;
                    } else {
                        rnd_loss += l.loss;
                        rnd_count += 1;
                    }
                }
            }
        }
    }

    state.step += 1;
    state.env_steps += trained_rows as u64;
    let all_steps = || unrolls.iter().flat_map(|u| u.steps[..u.trained_len()].iter());
    let trained3 = |v: &Vec<Vec<Vec<f64>>>| -> f64 {
        mean(v.iter().zip(unrolls).flat_map(|(x, u)| x[..u.trained_len()].iter().flatten().copied()))
    };
    let pairs = || all_steps().flat_map(|s| s.influence.pairs.iter());
    Ok(LearnerStats {
        step: state.step,
        env_steps: state.env_steps,
        update,
        mean_env_reward: mean(all_steps().flat_map(|s| s.env_rewards.iter().copied())),
        mean_int_raw: trained3(&rewards.int_raw),
        mean_int_reward: trained3(&rewards.int),
        mean_pimaex: trained3(&rewards.pimaex),
        mean_comm_reward: mean(rewards.streams.iter().flatten().flatten().map(|s| s[VALUE_COMM])),
        mean_pi_kl: mean(pairs().map(|p| p.pi_kl)),
        mean_abs_vi_int: mean(pairs().map(|p| p.vi_int.abs())),
        rnd_loss: if rnd_count > 0 { rnd_loss / rnd_count as f64 } else { 0.0 },
        rnd_skipped,
        max_snapshot_lag: all_steps().map(|s| state.step - 1 - s.snapshot_version.min(state.step - 1)).max().unwrap_or(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::influence::{InfluenceRecord, PairInfluence};
    use crate::runtime::{ActorState, JointMessage, Transition};

    fn pair(source: usize, target: usize, pmi: f64, kl: f64) -> PairInfluence {
        PairInfluence {
            source,
            target,
            informed_policy: [1.0 / 3.0; 3],
            marginal_policy: [1.0 / 3.0; 3],
            informed_values: (0.0, 0.0),
            marginal_values: (0.0, 0.0),
            action: 0,
            pi_kl: kl,
            pi_pmi: pmi,
            vi_ext: 0.0,
            vi_int: 0.0,
        }
    }

    fn fixture_step(env_rewards: Vec<f64>, pairs: Vec<PairInfluence>, done: bool) -> Transition {
        Transition {
            obs: vec![crate::env::Observation([0.0; 5]); 2],
            message: JointMessage::zeros(2, 8),
            env_actions: vec![0, 0],
            env_logp: vec![0.0, 0.0],
            comm_actions: vec![0, 0],
            comm_logp: vec![0.0, 0.0],
            values: vec![Default::default(); 2],
            env_rewards,
            next_obs: vec![crate::env::Observation([0.0; 5]); 2],
            done,
            influence: InfluenceRecord { pairs },
            episode_step: 0,
            snapshot_version: 0,
        }
    }

    #[test]
    fn fixture_comm_rewards_follow_equation() {
        let mut cfg = RunConfig::preset("pimaex-beta").unwrap();
        cfg.env.n_agents = 2;
        cfg.rnd.enabled = false;
        cfg.influence.weights.beta_env = 1.0;
        cfg.influence.weights.beta_int = 0.0;
        let u = Unroll {
            actor: 0,
            index: 0,
            steps: vec![
                fixture_step(vec![1.0, 0.0], vec![], false),
                fixture_step(vec![0.0, 2.0], vec![pair(0, 1, 0.5, 0.1), pair(1, 0, -0.25, 0.2)], false),
                fixture_step(vec![3.0, 1.0], vec![pair(0, 1, -1.0, 0.3), pair(1, 0, 0.75, 0.4)], true),
                fixture_step(vec![1.0, 1.0], vec![], false),
            ],
        };
        let r = assemble_rewards(&cfg, None, &[u]).unwrap();
        // t=0 is credited with step 1: r_0 = 0.5 * 2.0, r_1 = -0.25 * 0.0
        assert_eq!(r.streams[0][0][0][VALUE_COMM], 2.752 * 1.0);
        assert_eq!(r.streams[0][0][1][VALUE_COMM], 0.0);
        // t=1 from step 2: r_0 = -1.0 * 1.0, r_1 = 0.75 * 3.0
        assert_eq!(r.streams[0][1][0][VALUE_COMM], -2.752);
        assert_eq!(r.streams[0][1][1][VALUE_COMM], 2.752 * 2.25);
        // t=2 ends the episode, so nothing is credited
        assert_eq!(r.streams[0][2][0][VALUE_COMM], 0.0);
        assert_eq!(r.streams[0][1][1][VALUE_EXT], 2.0);
    }

    #[test]
    fn learner_step_runs_and_counts() {
        let mut cfg = RunConfig::preset("pimaex-beta").unwrap();
        cfg.env.episode_len = 30;
        cfg.env.explores_per_level = 5;
        cfg.rnd.warmup_steps = 200;
        cfg.ppo.unroll_length = 16;
        cfg.ppo.batch_size = 2;
        cfg.runtime.num_actors = 2;
        let mut learner = LearnerState::init(&cfg, 0).unwrap();
        let snap = learner.snapshot();
        let mut actors: Vec<ActorState> = (0..2).map(|i| ActorState::new(&cfg, 0, i).unwrap()).collect();
        let unrolls: Vec<Unroll> = actors.iter_mut().map(|a| a.collect_unroll(&snap, 16).unwrap()).collect();
        let before = learner.agents[0].net.params().clone();
        let stats = learner_step(&mut learner, &unrolls, &cfg).unwrap();
        assert_eq!(stats.env_steps, 32);
        assert_eq!(stats.update.minibatches, 4 * 4 * 4);
        assert!(stats.mean_int_reward > 0.0);
        assert_ne!(&before, learner.agents[0].net.params());
        assert!(learner.rnd.as_ref().unwrap().pairs.iter().all(|p| p.target_unchanged()));
    }
}
