//! Random Network Distillation curiosity.
//!
//! A fixed random target net and a trained predictor map normalized
//! observations to an embedding; the predictor's squared error is the raw
//! intrinsic reward. Observations are normalized with running statistics
//! seeded by a random-action warmup, and rewards are divided by the running
//! standard deviation of a discounted intrinsic return.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::{Action, ConsumeExplore, EnvParams, OBS_DIM};
use crate::error::Result;
use crate::nn::{Activation, Adam, Mlp, ParamVector};
use crate::rng::{self, Rng};

pub const VAR_FLOOR: f64 = 1e-8;
pub const OBS_CLIP: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RndConfig {
    pub enabled: bool,
    pub warmup_steps: u64,
    pub predictor_proportion: f64,
    pub discount: f64,
    pub infinite_horizon: bool,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    /// Optional clamp on the normalized intrinsic reward.
    pub max_abs_reward: Option<f64>,
}

impl Default for RndConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            warmup_steps: 100_000,
            predictor_proportion: 0.25,
            discount: 0.99,
            infinite_horizon: true,
            hidden: vec![64, 64],
            embedding_dim: 16,
            max_abs_reward: None,
        }
    }
}

/// Streaming mean/variance with the parallel merge of Chan et al.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningMeanVar {
    pub mean: f64,
    m2: f64,
    pub count: f64,
}

impl Default for RunningMeanVar {
    fn default() -> Self {
        Self { mean: 0.0, m2: 0.0, count: 0.0 }
    }
}

impl RunningMeanVar {
    pub fn update(&mut self, x: f64) {
        self.count += 1.0;
        let d = x - self.mean;
        self.mean += d / self.count;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &RunningMeanVar) {
        if other.count == 0.0 {
            return;
        }
        if self.count == 0.0 {
            *self = other.clone();
            return;
        }
        let n = self.count + other.count;
        let d = other.mean - self.mean;
        self.mean += d * other.count / n;
        self.m2 += other.m2 + d * d * self.count * other.count / n;
        self.count = n;
    }

    /// Population variance.
    pub fn var(&self) -> f64 {
        if self.count > 0.0 {
            (self.m2 / self.count).max(0.0)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsNormalizer {
    pub stats: Vec<RunningMeanVar>,
}

impl ObsNormalizer {
    pub fn new(dim: usize) -> Self {
        Self { stats: vec![RunningMeanVar::default(); dim] }
    }

    pub fn dim(&self) -> usize {
        self.stats.len()
    }

    pub fn count(&self) -> f64 {
        self.stats.first().map(|s| s.count).unwrap_or(0.0)
    }

    pub fn update(&mut self, obs: &[f64]) {
        for (s, x) in self.stats.iter_mut().zip(obs) {
            s.update(*x);
        }
    }

    pub fn update_batch(&mut self, rows: ArrayView2<f64>) {
        let mut batch = ObsNormalizer::new(self.dim());
        for row in rows.rows() {
            batch.update(row.as_slice().expect("row"));
        }
        self.merge(&batch);
    }

    pub fn merge(&mut self, other: &ObsNormalizer) {
        for (a, b) in self.stats.iter_mut().zip(&other.stats) {
            a.merge(b);
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        self.stats.iter().map(|s| s.mean).collect()
    }

    pub fn var(&self) -> Vec<f64> {
        self.stats.iter().map(|s| s.var()).collect()
    }

    /// `(x - mean) / std`, without the clip.
    pub fn standardize(&self, obs: &[f64]) -> Vec<f64> {
        self.stats.iter().zip(obs).map(|(s, x)| (x - s.mean) / s.var().max(VAR_FLOOR).sqrt()).collect()
    }

    /// Standardized and clipped to `[-OBS_CLIP, OBS_CLIP]`; the predictor input.
    pub fn normalize(&self, obs: &[f64]) -> Vec<f64> {
        self.standardize(obs).into_iter().map(|v| v.clamp(-OBS_CLIP, OBS_CLIP)).collect()
    }

    pub fn normalize_batch(&self, rows: ArrayView2<f64>) -> Array2<f64> {
        let mut out = rows.to_owned();
        for mut row in out.rows_mut() {
            for (v, s) in row.iter_mut().zip(&self.stats) {
                *v = ((*v - s.mean) / s.var().max(VAR_FLOOR).sqrt()).clamp(-OBS_CLIP, OBS_CLIP);
            }
        }
        out
    }
}

/// Divides intrinsic rewards by the running std of the discounted intrinsic
/// return. One accumulator per experience stream, one shared variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicRewardNormalizer {
    pub discount: f64,
    pub returns: Vec<f64>,
    pub stats: RunningMeanVar,
}

impl IntrinsicRewardNormalizer {
    pub fn new(discount: f64, streams: usize) -> Self {
        Self { discount, returns: vec![0.0; streams], stats: RunningMeanVar::default() }
    }

    /// Advance stream `s` through `rewards` and add the running returns to
    /// the variance estimate.
    pub fn observe(&mut self, s: usize, rewards: &[f64]) {
        if s >= self.returns.len() {
            self.returns.resize(s + 1, 0.0);
        }
        let mut batch = RunningMeanVar::default();
        for r in rewards {
            self.returns[s] = self.returns[s] * self.discount + r;
            batch.update(self.returns[s]);
        }
        self.stats.merge(&batch);
    }

    pub fn scale(&self) -> f64 {
        self.stats.var().max(VAR_FLOOR).sqrt()
    }

    pub fn normalize(&self, raw: f64) -> f64 {
        raw / self.scale()
    }
}

fn hash_params(p: &[f64]) -> u64 {
    p.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorLoss {
    pub loss: f64,
    pub included: usize,
    /// True when the Bernoulli mask selected no rows and no step was taken.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RndPair {
    target: Mlp,
    predictor: Mlp,
    optimizer: Adam,
    target_hash: u64,
}

impl RndPair {
    pub fn new(config: &RndConfig, obs_dim: usize, lr: f64, adam_eps: f64, rng: &mut Rng) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend(&config.hidden);
        sizes.push(config.embedding_dim);
        let root2 = std::f64::consts::SQRT_2;
        let target = Mlp::new(&sizes, Activation::Relu, root2, root2, rng);
        let predictor = Mlp::new(&sizes, Activation::Relu, root2, root2, rng);
        let optimizer = Adam::new(predictor.params().len(), lr, adam_eps);
        let target_hash = hash_params(target.params().as_slice());
        Self { target, predictor, optimizer, target_hash }
    }

    pub fn target(&self) -> &Mlp {
        &self.target
    }

    pub fn predictor(&self) -> &Mlp {
        &self.predictor
    }

    pub fn predictor_mut(&mut self) -> &mut Mlp {
        &mut self.predictor
    }

    pub fn target_unchanged(&self) -> bool {
        hash_params(self.target.params().as_slice()) == self.target_hash
    }

    /// Per-row mean squared embedding error; inputs already normalized.
    pub fn raw_rewards(&self, norm_obs: ArrayView2<f64>) -> Vec<f64> {
        let t = self.target.forward(norm_obs);
        let p = self.predictor.forward(norm_obs);
        let d = t.ncols() as f64;
        (&p - &t).rows().into_iter().map(|r| r.iter().map(|e| e * e).sum::<f64>() / d).collect()
    }

    pub fn raw_reward(&self, norm_obs: &[f64]) -> f64 {
        let x = ArrayView2::from_shape((1, norm_obs.len()), norm_obs).expect("row");
        self.raw_rewards(x)[0]
    }

    /// One Adam step on the MSE over a Bernoulli(`proportion`) subset of rows.
    pub fn train_predictor(&mut self, norm_obs: ArrayView2<f64>, proportion: f64, rng: &mut Rng) -> PredictorLoss {
        let keep: Vec<usize> = (0..norm_obs.nrows()).filter(|_| rng.random::<f64>() < proportion).collect();
        if keep.is_empty() {
            return PredictorLoss { loss: 0.0, included: 0, skipped: true };
        }
        let x = norm_obs.select(Axis(0), &keep);
        let target = self.target.forward(x.view());
        let n = keep.len() as f64;
        let d = target.ncols() as f64;
        let mut loss = 0.0;
        let mut grad: ParamVector = self.predictor.params().zeros_like();
        self.predictor.forward_backward(
            x.view(),
            |out| {
                let diff = out - &target;
                loss = diff.iter().map(|e| e * e).sum::<f64>() / (n * d);
                diff.mapv(|e| 2.0 * e / (n * d))
            },
            &mut grad,
        );
        self.optimizer.step(self.predictor.params_mut().as_mut_slice(), grad.as_slice());
        debug_assert!(self.target_unchanged());
        PredictorLoss { loss, included: keep.len(), skipped: false }
    }
}

/// Observation statistics from `warmup_steps` environment steps under
/// uniformly random joint actions. Every agent's observation after each step
/// is added; episodes restart on termination.
pub fn init_obs_stats(params: &EnvParams, warmup_steps: u64, seed: u64) -> Result<ObsNormalizer> {
    let mut norm = ObsNormalizer::new(OBS_DIM);
    let mut policy = rng::stream(seed, rng::Stream::Warmup, 0, 0);
    let mut env = ConsumeExplore::new(params.clone())?;
    let mut episode = 0u64;
    env.reset_with_rng(rng::stream(seed, rng::Stream::Warmup, 1, episode));
    let mut actions = vec![Action::Noop; params.n_agents];
    for _ in 0..warmup_steps.max(1) {
        for a in actions.iter_mut() {
            *a = Action::ALL[policy.random_range(0..Action::ALL.len())];
        }
        let out = env.step(&actions)?;
        for o in env.observations() {
            norm.update(o.as_slice());
        }
        if out.done {
            episode += 1;
            env.reset_with_rng(rng::stream(seed, rng::Stream::Warmup, 1, episode));
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn pair(seed: u64) -> RndPair {
        let mut r = rng::stream(seed, rng::Stream::Init, 7, 0);
        RndPair::new(&RndConfig::default(), OBS_DIM, 1e-4, 1e-7, &mut r)
    }

    #[test]
    fn merge_matches_sequential() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.1).collect();
        let mut all = RunningMeanVar::default();
        xs.iter().for_each(|x| all.update(*x));
        let mut a = RunningMeanVar::default();
        let mut b = RunningMeanVar::default();
        xs[..313].iter().for_each(|x| a.update(*x));
        xs[313..].iter().for_each(|x| b.update(*x));
        a.merge(&b);
        assert!((a.mean - all.mean).abs() < 1e-12);
        assert!((a.var() - all.var()).abs() < 1e-9);
        let mean = xs.iter().sum::<f64>() / 1000.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 1000.0;
        assert!((all.var() - var).abs() < 1e-9);
    }

    #[test]
    fn constant_component_uses_floor() {
        let mut n = ObsNormalizer::new(2);
        for i in 0..10 {
            n.update(&[1.0, i as f64]);
        }
        assert_eq!(n.var()[0], 0.0);
        let z = n.normalize(&[1.0, 4.5]);
        assert_eq!(z[0], 0.0);
        assert!(z[1].abs() < 1e-12);
        let far = n.normalize(&[2.0, 1e6]);
        assert_eq!(far, vec![OBS_CLIP, OBS_CLIP]);
    }

    #[test]
    fn identical_nets_give_zero_reward() {
        let mut p = pair(1);
        let t = p.target().params().clone();
        *p.predictor_mut().params_mut() = t;
        assert_eq!(p.raw_reward(&[0.3, -1.0, 2.0, 0.0, 0.5]), 0.0);
    }

    #[test]
    fn untrained_rewards_nonnegative() {
        let p = pair(2);
        assert!(p.raw_reward(&[0.0; 5]) >= 0.0);
        assert!(p.raw_reward(&[1.0, -1.0, 0.5, 2.0, -3.0]) >= 0.0);
    }

    #[test]
    fn proportion_one_is_full_batch_mse() {
        let mut p = pair(3);
        let mut r = rng::stream(3, rng::Stream::Learner, 0, 0);
        let x = Array::from_shape_fn((16, 5), |(i, j)| ((i * 5 + j) as f64).sin());
        let expected: f64 = p.raw_rewards(x.view()).iter().sum::<f64>() / 16.0;
        let l = p.train_predictor(x.view(), 1.0, &mut r);
        assert_eq!(l.included, 16);
        assert!((l.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_mask_count_within_bounds() {
        let mut p = pair(4);
        let mut r = rng::stream(4, rng::Stream::Learner, 0, 0);
        let x = Array2::<f64>::zeros((2048, 5));
        let l = p.train_predictor(x.view(), 0.25, &mut r);
        let sigma = (2048.0f64 * 0.25 * 0.75).sqrt();
        assert!((l.included as f64 - 512.0).abs() <= 3.0 * sigma, "{}", l.included);
    }

    #[test]
    fn empty_mask_skips_update() {
        let mut p = pair(5);
        let before = p.predictor().params().clone();
        let mut r = rng::stream(5, rng::Stream::Learner, 0, 0);
        let l = p.train_predictor(Array2::<f64>::zeros((3, 5)).view(), 1e-12, &mut r);
        assert!(l.skipped && l.included == 0);
        assert_eq!(&before, p.predictor().params());
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let mut p = pair(6);
        let mut r = rng::stream(6, rng::Stream::Learner, 0, 0);
        let x = Array::from_shape_fn((64, 5), |(i, j)| ((i * 3 + j * 7) as f64).cos());
        let first = p.train_predictor(x.view(), 1.0, &mut r).loss;
        let mut last = first;
        for _ in 0..50 {
            last = p.train_predictor(x.view(), 1.0, &mut r).loss;
        }
        assert!(last < first, "{first} -> {last}");
        assert!(p.target_unchanged());
    }

    #[test]
    fn repeated_observation_reward_non_increasing() {
        let mut p = pair(7);
        let mut r = rng::stream(7, rng::Stream::Learner, 0, 0);
        let obs = [0.4, -1.2, 0.8, 1.5, -0.3];
        let x = ArrayView2::from_shape((1, 5), &obs).unwrap();
        let mut prev = p.raw_reward(&obs);
        for _ in 0..100 {
            p.train_predictor(x, 1.0, &mut r);
            let now = p.raw_reward(&obs);
            assert!(now <= prev + 1e-15, "{prev} -> {now}");
            prev = now;
        }
    }

    #[test]
    fn intrinsic_normalizer_scales_without_shift() {
        let mut n = IntrinsicRewardNormalizer::new(0.99, 2);
        n.observe(0, &[1.0, 2.0, 3.0]);
        n.observe(1, &[0.5, 0.5]);
        let s = n.scale();
        assert!(s > 0.0);
        assert_eq!(n.normalize(0.0), 0.0);
        assert!((n.normalize(2.0) - 2.0 / s).abs() < 1e-15);
        assert!((n.returns[0] - (1.0 * 0.99f64.powi(2) + 2.0 * 0.99 + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn warmup_is_deterministic_and_mergeable() {
        let p = EnvParams { episode_len: 200, explores_per_level: 20, ..EnvParams::default() };
        let a = init_obs_stats(&p, 1000, 3).unwrap();
        let b = init_obs_stats(&p, 1000, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count(), 4000.0);
        for (m, v) in a.mean().iter().zip(a.var()) {
            assert!((0.0..=1.0).contains(m) && v >= 0.0);
        }
    }
}
