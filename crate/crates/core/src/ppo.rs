//! Clipped-surrogate PPO over two policies and three value streams.
//!
//! Each stream (ext, int, comm) has its own reward mix, discount and GAE.
//! The environment policy follows a weighted sum of stream advantages; the
//! communication policy follows the comm stream.

use ndarray::{s, Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::nn::{clip_grad_norm, log_softmax, softmax_rows, Adam, AgentNetwork, HeadAdjoints, Tape};
use crate::nn::{VALUE_COMM, VALUE_EXT, VALUE_INT};
use crate::rng::Rng;

pub const STREAMS: [&str; 3] = ["ext", "int", "comm"];

/// Stream reward as a weighted sum of `[env, intrinsic, pimaex]` rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardCoefs {
    pub ext: [f64; 3],
    pub int: [f64; 3],
    pub comm: [f64; 3],
}

impl Default for RewardCoefs {
    fn default() -> Self {
        Self { ext: [1.0, 0.0, 0.0], int: [0.0, 1.0, 0.0], comm: [0.0, 0.0, 2.752] }
    }
}

impl RewardCoefs {
    pub fn stream(&self, s: usize) -> &[f64; 3] {
        match s {
            VALUE_EXT => &self.ext,
            VALUE_INT => &self.int,
            _ => &self.comm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub adam_epsilon: f64,
    pub max_grad_norm: f64,
    /// Unrolls per learner step.
    pub batch_size: usize,
    pub unroll_length: usize,
    pub num_minibatches: usize,
    pub num_epochs: usize,
    pub clip_epsilon: f64,
    pub entropy_cost_env: f64,
    pub entropy_cost_comm: f64,
    pub discount_ext: f64,
    pub discount_comm: f64,
    pub gae_lambda: f64,
    pub value_cost: f64,
    /// Scales the comm policy, comm value and comm entropy terms together.
    pub comm_loss_weight: f64,
    /// Weights of the `[ext, int]` advantages in the environment policy loss.
    pub env_advantage_coefs: [f64; 2],
    pub reward_coefs: RewardCoefs,
    pub max_abs_reward: [Option<f64>; 3],
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adam_epsilon: 1e-7,
            max_grad_norm: 0.5,
            batch_size: 16,
            unroll_length: 128,
            num_minibatches: 4,
            num_epochs: 4,
            clip_epsilon: 0.1,
            entropy_cost_env: 1e-3,
            entropy_cost_comm: 7.89e-4,
            discount_ext: 0.999,
            discount_comm: 0.99,
            gae_lambda: 0.95,
            value_cost: 1.0,
            comm_loss_weight: 1.0,
            env_advantage_coefs: [1.0, 0.5],
            reward_coefs: RewardCoefs::default(),
            max_abs_reward: [None; 3],
            normalize_advantages: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.unroll_length == 0 || self.num_minibatches == 0 || self.num_epochs == 0 {
            return Err(config_err("ppo: batch_size, unroll_length, num_minibatches, num_epochs must be >= 1"));
        }
        if self.batch_size * self.unroll_length < self.num_minibatches {
            return Err(config_err("ppo.num_minibatches exceeds the number of rows per batch"));
        }
        if !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) || !(self.clip_epsilon > 0.0) {
            return Err(config_err("ppo: learning_rate, max_grad_norm, clip_epsilon must be > 0"));
        }
        for (name, g) in [("discount_ext", self.discount_ext), ("discount_comm", self.discount_comm), ("gae_lambda", self.gae_lambda)] {
            if !(0.0..=1.0).contains(&g) {
                return Err(config_err(format!("ppo.{name} must lie in [0, 1], got {g}")));
            }
        }
        Ok(())
    }
}

/// Generalized advantage estimation. With `episodic` false, `dones` never
/// cut the bootstrap.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
    episodic: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::Shape { layer: "gae inputs".into(), expected: n, got: values.len().min(dones.len()) });
    }
    let mut adv = vec![0.0; n];
    let mut last = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { bootstrap };
        let nonterm = if episodic && dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_v * nonterm - values[t];
        last = delta + gamma * lambda * nonterm * last;
        adv[t] = last;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

/// Training rows of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentBatch {
    pub obs: Array2<f64>,
    pub msg: Array2<f64>,
    pub env_action: Vec<usize>,
    pub env_logp: Vec<f64>,
    pub comm_action: Vec<usize>,
    pub comm_logp: Vec<f64>,
    pub advantages: [Vec<f64>; 3],
    pub targets: [Vec<f64>; 3],
}

impl AgentBatch {
    pub fn rows(&self) -> usize {
        self.obs.nrows()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub policy_env: f64,
    pub policy_comm: f64,
    pub value_ext: f64,
    pub value_int: f64,
    pub value_comm: f64,
    pub entropy_env: f64,
    pub entropy_comm: f64,
    pub clip_frac_env: f64,
    pub clip_frac_comm: f64,
    pub approx_kl_env: f64,
}

impl LossTerms {
    fn named(&self) -> [(&'static str, f64); 8] {
        [
            ("policy_env", self.policy_env),
            ("policy_comm", self.policy_comm),
            ("value_ext", self.value_ext),
            ("value_int", self.value_int),
            ("value_comm", self.value_comm),
            ("entropy_env", self.entropy_env),
            ("entropy_comm", self.entropy_comm),
            ("total", self.total),
        ]
    }

    fn add_scaled(&mut self, o: &LossTerms, w: f64) {
        self.total += w * o.total;
        self.policy_env += w * o.policy_env;
        self.policy_comm += w * o.policy_comm;
        self.value_ext += w * o.value_ext;
        self.value_int += w * o.value_int;
        self.value_comm += w * o.value_comm;
        self.entropy_env += w * o.entropy_env;
        self.entropy_comm += w * o.entropy_comm;
        self.clip_frac_env += w * o.clip_frac_env;
        self.clip_frac_comm += w * o.clip_frac_comm;
        self.approx_kl_env += w * o.approx_kl_env;
    }
}

/// Clipped surrogate for one policy. Returns the loss (negated objective),
/// the logit adjoints, entropy, clip fraction and mean `logp_old - logp`.
struct PolicyPart {
    loss: f64,
    entropy: f64,
    clip_frac: f64,
    approx_kl: f64,
    dlogits: Array2<f64>,
}

fn policy_part(
    logits: &Array2<f64>,
    actions: &[usize],
    old_logp: &[f64],
    adv: &[f64],
    clip: f64,
    entropy_cost: f64,
    weight: f64,
) -> PolicyPart {
    let n = actions.len() as f64;
    let probs = softmax_rows(logits.view());
    let mut dl = Array2::<f64>::zeros(logits.raw_dim());
    let (mut loss, mut ent, mut clipped, mut kl) = (0.0, 0.0, 0.0, 0.0);
    for (r, row) in logits.rows().into_iter().enumerate() {
        let lp = log_softmax(row.as_slice().expect("row"));
        let a = actions[r];
        let ratio = (lp[a] - old_logp[r]).exp();
        let cr = ratio.clamp(1.0 - clip, 1.0 + clip);
        let (u, c) = (ratio * adv[r], cr * adv[r]);
        loss -= u.min(c) / n;
        kl += (old_logp[r] - lp[a]) / n;
        if (ratio - 1.0).abs() > clip {
            clipped += 1.0 / n;
        }
        // d(-objective)/d logp_a
        let g = if u <= c { -u / n } else { 0.0 };
        let h: f64 = -(0..lp.len()).map(|i| probs[[r, i]] * lp[i]).sum::<f64>();
        ent += h / n;
        for i in 0..lp.len() {
            let p = probs[[r, i]];
            let onehot = if i == a { 1.0 } else { 0.0 };
            // policy term through logp_a, entropy bonus through H
            let d_pg = g * (onehot - p);
            let d_h = -p * (lp[i] + h) / n;
            dl[[r, i]] = weight * (d_pg - entropy_cost * d_h);
        }
    }
    PolicyPart { loss, entropy: ent, clip_frac: clipped, approx_kl: kl, dlogits: dl }
}

/// Loss and output adjoints on rows `idx` of `batch`.
pub fn minibatch_loss(
    net: &AgentNetwork,
    batch: &AgentBatch,
    idx: &[usize],
    cfg: &PpoConfig,
    int_active: bool,
) -> Result<(LossTerms, HeadAdjoints, Tape)> {
    let obs = batch.obs.select(Axis(0), idx);
    let msg = batch.msg.select(Axis(0), idx);
    let (out, tape) = net.forward_batch(obs.view(), msg.view())?;
    let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let picku = |v: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<usize>>();
    let n = idx.len() as f64;

    let [ce, ci] = cfg.env_advantage_coefs;
    let a_ext = pick(&batch.advantages[VALUE_EXT]);
    let a_int = pick(&batch.advantages[VALUE_INT]);
    let mut adv_env: Vec<f64> = a_ext
        .iter()
        .zip(&a_int)
        .map(|(e, i)| ce * e + if int_active { ci * i } else { 0.0 })
        .collect();
    if cfg.normalize_advantages && adv_env.len() > 1 {
        let mean = adv_env.iter().sum::<f64>() / n;
        let std = (adv_env.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        adv_env.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));
    }
    let adv_comm = pick(&batch.advantages[VALUE_COMM]);

    let env = policy_part(
        &out.env_logits,
        &picku(&batch.env_action),
        &pick(&batch.env_logp),
        &adv_env,
        cfg.clip_epsilon,
        cfg.entropy_cost_env,
        1.0,
    );
    let comm = policy_part(
        &out.comm_logits,
        &picku(&batch.comm_action),
        &pick(&batch.comm_logp),
        &adv_comm,
        cfg.clip_epsilon,
        cfg.entropy_cost_comm,
        cfg.comm_loss_weight,
    );

    let mut dvalues = Array2::<f64>::zeros((idx.len(), 3));
    let mut vloss = [0.0; 3];
    for s in [VALUE_EXT, VALUE_INT, VALUE_COMM] {
        if s == VALUE_INT && !int_active {
            continue;
        }
        let w = cfg.value_cost * if s == VALUE_COMM { cfg.comm_loss_weight } else { 1.0 };
        for (r, &i) in idx.iter().enumerate() {
            let d = out.values[[r, s]] - batch.targets[s][i];
            vloss[s] += 0.5 * d * d / n;
            dvalues[[r, s]] = w * d / n;
        }
    }

    let terms = LossTerms {
        total: env.loss - cfg.entropy_cost_env * env.entropy
            + cfg.value_cost * (vloss[VALUE_EXT] + vloss[VALUE_INT])
            + cfg.comm_loss_weight * (comm.loss + cfg.value_cost * vloss[VALUE_COMM] - cfg.entropy_cost_comm * comm.entropy),
        policy_env: env.loss,
        policy_comm: comm.loss,
        value_ext: vloss[VALUE_EXT],
        value_int: vloss[VALUE_INT],
        value_comm: vloss[VALUE_COMM],
        entropy_env: env.entropy,
        entropy_comm: comm.entropy,
        clip_frac_env: env.clip_frac,
        clip_frac_comm: comm.clip_frac,
        approx_kl_env: env.approx_kl,
    };
    Ok((terms, HeadAdjoints { env_logits: env.dlogits, comm_logits: comm.dlogits, values: dvalues }, tape))
}

/// One agent's trainable network and optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentLearner {
    pub net: AgentNetwork,
    pub optimizer: Adam,
}

impl AgentLearner {
    pub fn new(net: AgentNetwork, cfg: &PpoConfig) -> Self {
        let optimizer = Adam::new(net.params().len(), cfg.learning_rate, cfg.adam_epsilon);
        Self { net, optimizer }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub losses: LossTerms,
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
    pub minibatches: usize,
}

fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Minibatch index sets for one epoch: a random permutation cut into
/// `parts` nearly equal chunks.
pub fn minibatch_partition(n: usize, parts: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let perm = shuffled(n, rng);
    (0..parts).map(|p| perm[p * n / parts..(p + 1) * n / parts].to_vec()).collect()
}

/// `num_epochs * num_minibatches` optimizer steps per agent. Rows of all
/// agents share one partition so minibatches stay time-aligned.
pub fn ppo_update(
    agents: &mut [AgentLearner],
    batches: &[AgentBatch],
    cfg: &PpoConfig,
    int_active: bool,
    rng: &mut Rng,
) -> Result<UpdateDiagnostics> {
    if agents.len() != batches.len() {
        return Err(Error::Shape { layer: "ppo agents".into(), expected: agents.len(), got: batches.len() });
    }
    let rows = batches.first().map(|b| b.rows()).unwrap_or(0);
    let mut diag = UpdateDiagnostics::default();
    let count = (cfg.num_epochs * cfg.num_minibatches * agents.len()) as f64;
    for _ in 0..cfg.num_epochs {
        for idx in minibatch_partition(rows, cfg.num_minibatches, rng) {
            for (agent, batch) in agents.iter_mut().zip(batches) {
                let (terms, adj, tape) = minibatch_loss(&agent.net, batch, &idx, cfg, int_active)?;
                if let Some((name, _)) = terms.named().iter().find(|(_, v)| !v.is_finite()) {
                    return Err(Error::NonFinite { term: name.to_string() });
                }
                let mut grad = agent.net.zero_grad();
                agent.net.backward(&tape, &adj, &mut grad)?;
                let norm = clip_grad_norm(grad.as_mut_slice(), cfg.max_grad_norm);
                if !norm.is_finite() {
                    return Err(Error::NonFinite { term: "gradient".into() });
                }
                agent.optimizer.step(agent.net.params_mut().as_mut_slice(), grad.as_slice());
                diag.losses.add_scaled(&terms, 1.0 / count);
                diag.grad_norm += norm / count;
                diag.clipped_grad_norm = diag.clipped_grad_norm.max(norm.min(cfg.max_grad_norm));
                diag.minibatches += 1;
            }
        }
    }
    Ok(diag)
}

/// Mean per-row log-probabilities of `actions` under `logits`.
pub fn log_probs(logits: &Array2<f64>, actions: &[usize]) -> Vec<f64> {
    (0..logits.nrows())
        .map(|r| log_softmax(logits.slice(s![r, ..]).as_slice().expect("row"))[actions[r]])
        .collect()
}
