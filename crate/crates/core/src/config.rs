//! Experiment configuration, presets and dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::env::{EnvParams, OBS_DIM};
use crate::error::{config_err, Error, Result};
use crate::influence::{PiMeasure, RewardWeights};
use crate::nn::NetConfig;
use crate::ppo::PpoConfig;
use crate::rnd::RndConfig;

pub const PRESETS: [&str; 5] = ["ppo", "ppo-rnd", "pimaex-alpha", "pimaex-beta", "pimaex-gamma"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub comm_alphabet: usize,
    pub trunk_hidden: Vec<usize>,
    pub merge_hidden: usize,
    pub comm_embedding: usize,
    pub separate_int_value: bool,
    pub int_value_hidden: Vec<usize>,
    pub policy_init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let n = NetConfig::default();
        Self {
            comm_alphabet: n.comm_alphabet,
            trunk_hidden: n.trunk_hidden,
            merge_hidden: n.merge_hidden,
            comm_embedding: n.comm_embedding,
            separate_int_value: n.separate_int_value,
            int_value_hidden: n.int_value_hidden,
            policy_init_gain: n.policy_init_gain,
        }
    }
}

/// Which step's reward of the influenced agent enters the beta term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardAlignment {
    /// The step at which the message is received and the influence measured.
    InfluenceStep,
    /// The step at which the message was emitted.
    MessageStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfluenceConfig {
    pub weights: RewardWeights,
    /// Compute and record influence even when all weights are zero.
    pub log_influence: bool,
    pub reward_alignment: RewardAlignment,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        Self { weights: RewardWeights::default(), log_influence: false, reward_alignment: RewardAlignment::InfluenceStep }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    /// Actor threads and a learner thread joined by a bounded queue.
    Async,
    /// Lockstep collection and learning on one thread; bit-reproducible.
    Sync,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeConfig {
    pub num_actors: usize,
    pub seeds: Vec<u64>,
    pub total_env_steps: u64,
    pub eval_episodes: usize,
    pub mode: RunMode,
    pub queue_capacity: usize,
    /// Learner steps between checkpoints; each checkpoint triggers one
    /// greedy evaluator episode.
    pub checkpoint_interval: usize,
    /// Write JSONL traces of the final evaluation episodes.
    pub trace_eval: bool,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            num_actors: 16,
            seeds: vec![0, 1, 2],
            total_env_steps: 10_000_000,
            eval_episodes: 200,
            mode: RunMode::Async,
            queue_capacity: 32,
            checkpoint_interval: 10,
            trace_eval: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub env: EnvParams,
    pub model: ModelConfig,
    pub ppo: PpoConfig,
    pub rnd: RndConfig,
    pub influence: InfluenceConfig,
    pub runtime: RuntimeConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "custom".into(),
            env: EnvParams::default(),
            model: ModelConfig::default(),
            ppo: PpoConfig::default(),
            rnd: RndConfig::default(),
            influence: InfluenceConfig::default(),
            runtime: RuntimeConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = RunConfig { preset: name.to_string(), ..RunConfig::default() };
        let w = &mut c.influence.weights;
        match name {
            "ppo" => c.rnd.enabled = false,
            "ppo-rnd" => {}
            "pimaex-alpha" => {
                w.alpha = 1.0;
                w.pi_measure_alpha = PiMeasure::Kl;
                c.ppo.comm_loss_weight = 0.0758;
            }
            "pimaex-beta" => {
                w.beta = 1.0;
                w.pi_measure_beta = PiMeasure::Pmi;
                w.beta_env = 0.0;
                w.beta_int = 1.0;
                c.ppo.comm_loss_weight = 1.0;
            }
            "pimaex-gamma" => {
                w.gamma = 0.01;
                w.gamma_env = 0.0;
                w.gamma_int = 1.0;
                c.ppo.comm_loss_weight = 0.0758;
            }
            other => {
                return Err(config_err(format!("unknown preset `{other}`; expected one of {}", PRESETS.join(", "))));
            }
        }
        Ok(c)
    }

    /// Reduced scale for a single desktop: shorter episodes, fewer explores
    /// per level, 5e5 steps, 4 actors, seeds 0..3.
    pub fn desk_scale(mut self) -> Self {
        self.env.episode_len = 500;
        self.env.explores_per_level = 50;
        self.runtime.total_env_steps = 500_000;
        self.runtime.num_actors = 4;
        self.runtime.seeds = vec![0, 1, 2];
        self
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            obs_dim: OBS_DIM,
            n_agents: self.env.n_agents,
            comm_alphabet: self.model.comm_alphabet,
            trunk_hidden: self.model.trunk_hidden.clone(),
            merge_hidden: self.model.merge_hidden,
            comm_embedding: self.model.comm_embedding,
            separate_int_value: self.model.separate_int_value,
            int_value_hidden: self.model.int_value_hidden.clone(),
            policy_init_gain: self.model.policy_init_gain,
        }
    }

    /// Whether actors must run the counterfactual passes.
    pub fn needs_influence(&self) -> bool {
        !self.influence.weights.is_zero() || self.influence.log_influence
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.net_config().validate()?;
        self.ppo.validate()?;
        self.influence.weights.validate()?;
        if self.rnd.enabled && !(self.rnd.predictor_proportion > 0.0 && self.rnd.predictor_proportion <= 1.0) {
            return Err(config_err("rnd.predictor_proportion must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.rnd.discount) {
            return Err(config_err("rnd.discount must lie in [0, 1]"));
        }
        if self.runtime.num_actors == 0 || self.runtime.seeds.is_empty() || self.runtime.queue_capacity == 0 {
            return Err(config_err("runtime: num_actors, seeds and queue_capacity must be non-empty"));
        }
        if self.runtime.checkpoint_interval == 0 {
            return Err(config_err("runtime.checkpoint_interval must be >= 1"));
        }
        if !self.rnd.enabled {
            let c = &self.ppo.reward_coefs;
            if c.ext[1] != 0.0 || c.comm[1] != 0.0 {
                return Err(config_err("ppo.reward_coefs mix intrinsic reward while rnd.enabled is false"));
            }
            if self.influence.weights.beta != 0.0 && self.influence.weights.beta_int != 0.0 {
                return Err(config_err("influence.weights.beta_int needs rnd.enabled"));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Every dotted path to a leaf value.
    pub fn valid_keys(&self) -> Vec<String> {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut out = Vec::new();
        leaf_paths(&v, String::new(), &mut out);
        out
    }

    /// Apply `path.to.key=value`. The value is parsed as JSON, falling back
    /// to a bare string.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| config_err(format!("override `{spec}` is not of the form key=value")))?;
        let key = key.trim();
        let parsed: Value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        let mut tree = serde_json::to_value(&*self)?;
        let unknown = || {
            config_err(format!("unknown override key `{key}`; valid keys:\n  {}", self.valid_keys().join("\n  ")))
        };
        let mut node = &mut tree;
        for part in key.split('.') {
            node = match node {
                Value::Object(map) => map.get_mut(part).ok_or_else(unknown)?,
                Value::Array(items) => {
                    let i: usize = part.parse().map_err(|_| unknown())?;
                    items.get_mut(i).ok_or_else(unknown)?
                }
                _ => return Err(unknown()),
            };
        }
        *node = parsed;
        *self = serde_json::from_value(tree).map_err(|e| config_err(format!("override `{spec}`: {e}")))?;
        Ok(())
    }
}

fn leaf_paths(v: &Value, prefix: String, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaf_paths(child, p, out);
            }
        }
        _ => out.push(prefix),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_and_validate() {
        for p in PRESETS {
            let c = RunConfig::preset(p).unwrap();
            c.validate().unwrap();
            assert_eq!(c.preset, p);
        }
        assert!(RunConfig::preset("nope").is_err());
        assert!(!RunConfig::preset("ppo").unwrap().rnd.enabled);
        assert!(RunConfig::preset("ppo-rnd").unwrap().rnd.enabled);
    }

    #[test]
    fn overrides_apply_and_reject_unknown_keys() {
        let mut c = RunConfig::preset("ppo").unwrap();
        c.apply_override("env.episode_len=500").unwrap();
        c.apply_override("runtime.seeds=[4,5]").unwrap();
        c.apply_override("influence.weights.pi_measure_beta=kl").unwrap();
        assert_eq!(c.env.episode_len, 500);
        assert_eq!(c.runtime.seeds, vec![4, 5]);
        assert_eq!(c.influence.weights.pi_measure_beta, PiMeasure::Kl);
        let err = c.apply_override("env.episode_length=5").unwrap_err().to_string();
        assert!(err.contains("env.episode_len") && err.contains("ppo.clip_epsilon"), "{err}");
        assert!(c.apply_override("env.episode_len=\"x\"").is_err());
    }

    #[test]
    fn desk_scale_values() {
        let c = RunConfig::preset("pimaex-beta").unwrap().desk_scale();
        assert_eq!((c.env.episode_len, c.env.explores_per_level), (500, 50));
        assert_eq!((c.runtime.total_env_steps, c.runtime.num_actors), (500_000, 4));
    }

    #[test]
    fn json_roundtrip() {
        let c = RunConfig::preset("pimaex-gamma").unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&s).unwrap(), c);
    }
}
