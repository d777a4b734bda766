//! Counterfactual social influence and the PIMAEX reward.
//!
//! Agent `j` influences peer `k` through its message. Replacing `j`'s slot in
//! the joint message with every other symbol and averaging `k`'s outputs
//! gives `k`'s marginal policy and values; comparing them with the informed
//! outputs yields policy influence (KL or PMI) and value influence.
//!
//! ```text
//! r_j = sum_{k != j} alpha * PI^a_{j->k}
//!                  + beta  * PI^b_{j->k} * (beta_env * r_k^env + beta_int * r_k^int)
//!                  + gamma * (gamma_env * VI^env_{j->k} + gamma_int * VI^int_{j->k})
//! ```

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::env::NUM_ACTIONS;
use crate::error::{config_err, Result};
use crate::nn::{softmax, AgentNetwork, ForwardOutput};

/// Floor applied inside logarithms.
pub const LOG_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PiMeasure {
    Kl,
    Pmi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub beta_env: f64,
    pub beta_int: f64,
    pub gamma_env: f64,
    pub gamma_int: f64,
    pub pi_measure_alpha: PiMeasure,
    pub pi_measure_beta: PiMeasure,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            beta_env: 0.0,
            beta_int: 1.0,
            gamma_env: 0.0,
            gamma_int: 1.0,
            pi_measure_alpha: PiMeasure::Kl,
            pi_measure_beta: PiMeasure::Pmi,
        }
    }
}

impl RewardWeights {
    pub fn is_zero(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.beta_env, self.beta_int, self.gamma_env, self.gamma_int];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(config_err("influence.weights: all weights must be finite"));
        }
        Ok(())
    }
}

/// A policy over environment actions with the extrinsic and intrinsic values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub policy: Vec<f64>,
    pub ext: f64,
    pub int: f64,
}

impl Outcome {
    pub fn from_forward(out: &ForwardOutput) -> Self {
        Self { policy: out.env_policy(), ext: out.values.ext, int: out.values.int }
    }
}

/// Uniform average over the informed outcome and the `M` counterfactuals.
pub fn marginalize(informed: &Outcome, counterfactuals: &[Outcome]) -> Result<Outcome> {
    if counterfactuals.is_empty() {
        return Err(config_err("marginalize: at least one counterfactual is required"));
    }
    let n = (counterfactuals.len() + 1) as f64;
    let mut policy = informed.policy.clone();
    let (mut ext, mut int) = (informed.ext, informed.int);
    for c in counterfactuals {
        policy.iter_mut().zip(&c.policy).for_each(|(a, b)| *a += b);
        ext += c.ext;
        int += c.int;
    }
    policy.iter_mut().for_each(|v| *v /= n);
    Ok(Outcome { policy, ext: ext / n, int: int / n })
}

fn ln_floor(x: f64) -> f64 {
    x.max(LOG_EPS).ln()
}

/// `D_KL[informed || marginal]`, natural log, floored logs, never negative.
pub fn policy_influence_kl(informed: &[f64], marginal: &[f64]) -> f64 {
    let kl: f64 = informed
        .iter()
        .zip(marginal)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (ln_floor(*p) - ln_floor(*q)))
        .sum();
    kl.max(0.0)
}

pub fn policy_influence_pmi(informed: &[f64], marginal: &[f64], action: usize) -> f64 {
    ln_floor(informed[action]) - ln_floor(marginal[action])
}

pub fn value_influence(informed: &Outcome, marginal: &Outcome) -> (f64, f64) {
    (informed.ext - marginal.ext, informed.int - marginal.int)
}

/// Influence of `source`'s message on `target` at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairInfluence {
    pub source: usize,
    pub target: usize,
    pub informed_policy: [f64; NUM_ACTIONS],
    pub marginal_policy: [f64; NUM_ACTIONS],
    pub informed_values: (f64, f64),
    pub marginal_values: (f64, f64),
    pub action: usize,
    pub pi_kl: f64,
    pub pi_pmi: f64,
    pub vi_ext: f64,
    pub vi_int: f64,
}

impl PairInfluence {
    pub fn from_outcomes(source: usize, target: usize, informed: &Outcome, marginal: &Outcome, action: usize) -> Self {
        let (vi_ext, vi_int) = value_influence(informed, marginal);
        let arr = |v: &[f64]| {
            let mut a = [0.0; NUM_ACTIONS];
            a.copy_from_slice(&v[..NUM_ACTIONS]);
            a
        };
        Self {
            source,
            target,
            informed_policy: arr(&informed.policy),
            marginal_policy: arr(&marginal.policy),
            informed_values: (informed.ext, informed.int),
            marginal_values: (marginal.ext, marginal.int),
            action,
            pi_kl: policy_influence_kl(&informed.policy, &marginal.policy),
            pi_pmi: policy_influence_pmi(&informed.policy, &marginal.policy, action),
            vi_ext,
            vi_int,
        }
    }

    pub fn pi(&self, m: PiMeasure) -> f64 {
        match m {
            PiMeasure::Kl => self.pi_kl,
            PiMeasure::Pmi => self.pi_pmi,
        }
    }
}

/// All pairwise influences at one step. Empty when no message was sent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub pairs: Vec<PairInfluence>,
}

impl InfluenceRecord {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Per-agent PIMAEX reward for one step. `env_rewards` and `int_rewards` are
/// the influenced agents' rewards, intrinsic ones already normalized.
pub fn pimaex_reward(
    record: &InfluenceRecord,
    env_rewards: &[f64],
    int_rewards: &[f64],
    n_agents: usize,
    w: &RewardWeights,
) -> Vec<f64> {
    let mut r = vec![0.0; n_agents];
    for p in &record.pairs {
        let k = p.target;
        let rw = w.beta_env * env_rewards[k] + w.beta_int * int_rewards[k];
        let viw = w.gamma_env * p.vi_ext + w.gamma_int * p.vi_int;
        r[p.source] += w.alpha * p.pi(w.pi_measure_alpha) + w.beta * p.pi(w.pi_measure_beta) * rw + w.gamma * viw;
    }
    r
}

/// Joint messages equal to `message` except that `source`'s block carries
/// each symbol other than `sent`, in increasing symbol order.
pub fn counterfactual_messages(message: &[f64], source: usize, sent: usize, alphabet: usize) -> Vec<Vec<f64>> {
    (0..alphabet)
        .filter(|s| *s != sent)
        .map(|s| {
            let mut m = message.to_vec();
            let block = &mut m[source * alphabet..(source + 1) * alphabet];
            block.iter_mut().for_each(|v| *v = 0.0);
            block[s] = 1.0;
            m
        })
        .collect()
}

/// Influence of every other agent on `target`, evaluated in one
/// counterfactual batch of shape `(N-1, |A^comm|-1)` over the cached latent.
///
/// `comm_sent[j]` is the symbol in `j`'s block of `message`.
pub fn influences_on(
    net: &AgentNetwork,
    informed: &ForwardOutput,
    message: &[f64],
    comm_sent: &[usize],
    target: usize,
    action: usize,
) -> Result<Vec<PairInfluence>> {
    let alphabet = net.config().comm_alphabet;
    let sources: Vec<usize> = (0..comm_sent.len()).filter(|j| *j != target).collect();
    let m = alphabet - 1;
    let d = message.len();
    let mut cf = Array3::<f64>::zeros((sources.len(), m, d));
    for (b, &j) in sources.iter().enumerate() {
        for (mi, row) in counterfactual_messages(message, j, comm_sent[j], alphabet).into_iter().enumerate() {
            cf.slice_mut(ndarray::s![b, mi, ..]).assign(&ndarray::ArrayView1::from(&row));
        }
    }
    let rows = sources.len();
    let latent = crate::nn::Latent {
        features: broadcast_rows(&informed.latent.features, rows),
        obs: broadcast_rows(&informed.latent.obs, rows),
    };
    let out = net.forward_counterfactual_batch(&latent, &cf)?;
    let inf = Outcome::from_forward(informed);
    let mut pairs = Vec::with_capacity(rows);
    for (b, &j) in sources.iter().enumerate() {
        let outcomes: Vec<Outcome> = (0..m)
            .map(|mi| {
                let v = out.values(b, mi);
                Outcome {
                    policy: softmax(out.env_logits.slice(ndarray::s![b, mi, ..]).as_slice().expect("row")),
                    ext: v.ext,
                    int: v.int,
                }
            })
            .collect();
        let marginal = marginalize(&inf, &outcomes)?;
        pairs.push(PairInfluence::from_outcomes(j, target, &inf, &marginal, action));
    }
    Ok(pairs)
}

fn broadcast_rows(a: &ndarray::Array2<f64>, rows: usize) -> ndarray::Array2<f64> {
    let row = a.row(0);
    ndarray::Array2::from_shape_fn((rows, a.ncols()), |(_, c)| row[c])
}
