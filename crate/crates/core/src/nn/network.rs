//! Per-agent actor-critic network.
//!
//! ```text
//! obs ──trunk──► latent ─┐
//!                        ├─► merge ─► h ──► env policy logits
//! joint message ─────────┘            ├──► V_ext, V_int
//!                                     └──► embed ─► comm policy logits, V_comm
//! ```
//!
//! The joint message enters only at the merge layer, so counterfactual
//! messages reuse the cached trunk output.

use ndarray::{concatenate, s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::mlp::Chain;
use super::{softmax, Activation, Dense, ParamVector};
use crate::env::{NUM_ACTIONS, OBS_DIM};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const VALUE_EXT: usize = 0;
pub const VALUE_INT: usize = 1;
pub const VALUE_COMM: usize = 2;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub obs_dim: usize,
    pub n_agents: usize,
    /// Number of discrete messages, `|A^comm|`.
    pub comm_alphabet: usize,
    pub trunk_hidden: Vec<usize>,
    pub merge_hidden: usize,
    pub comm_embedding: usize,
    /// Give the intrinsic value its own network instead of a head on `h`.
    pub separate_int_value: bool,
    pub int_value_hidden: Vec<usize>,
    pub policy_init_gain: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            obs_dim: OBS_DIM,
            n_agents: 4,
            comm_alphabet: 8,
            trunk_hidden: vec![64, 64],
            merge_hidden: 64,
            comm_embedding: 32,
            separate_int_value: false,
            int_value_hidden: vec![64, 64],
            policy_init_gain: 0.01,
        }
    }
}

impl NetConfig {
    pub fn message_dim(&self) -> usize {
        self.n_agents * self.comm_alphabet
    }

    pub fn latent_dim(&self) -> usize {
        self.trunk_hidden.last().copied().unwrap_or(self.obs_dim)
    }

    pub fn param_count(&self) -> usize {
        Layout::build(self).1.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.n_agents == 0 || self.comm_alphabet < 2 {
            return Err(Error::Config(
                "net: obs_dim and n_agents must be >= 1, comm_alphabet >= 2".into(),
            ));
        }
        if self.merge_hidden == 0 || self.comm_embedding == 0 || self.trunk_hidden.contains(&0) {
            return Err(Error::Config("net: layer sizes must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    trunk: Chain,
    merge: Dense,
    env_pi: Dense,
    v_ext: Dense,
    v_int: Option<Dense>,
    int_net: Option<Chain>,
    embed: Dense,
    comm_pi: Dense,
    v_comm: Dense,
}

impl Layout {
    fn build(c: &NetConfig) -> (Layout, ParamVector) {
        let mut p = ParamVector::new();
        let mut sizes = vec![c.obs_dim];
        sizes.extend(&c.trunk_hidden);
        let trunk = Chain::alloc(&mut p, "trunk", &sizes, Activation::Tanh, Activation::Tanh);
        let merge = Dense::alloc(&mut p, "merge", c.latent_dim() + c.message_dim(), c.merge_hidden, Activation::Tanh);
        let env_pi = Dense::alloc(&mut p, "env_pi", c.merge_hidden, NUM_ACTIONS, Activation::Identity);
        let v_ext = Dense::alloc(&mut p, "v_ext", c.merge_hidden, 1, Activation::Identity);
        let (v_int, int_net) = if c.separate_int_value {
            let mut sizes = vec![c.obs_dim + c.message_dim()];
            sizes.extend(&c.int_value_hidden);
            sizes.push(1);
            (None, Some(Chain::alloc(&mut p, "int_net", &sizes, Activation::Tanh, Activation::Identity)))
        } else {
            (Some(Dense::alloc(&mut p, "v_int", c.merge_hidden, 1, Activation::Identity)), None)
        };
        let embed = Dense::alloc(&mut p, "embed", c.merge_hidden, c.comm_embedding, Activation::Tanh);
        let comm_pi = Dense::alloc(&mut p, "comm_pi", c.comm_embedding, c.comm_alphabet, Activation::Identity);
        let v_comm = Dense::alloc(&mut p, "v_comm", c.comm_embedding, 1, Activation::Identity);
        (Layout { trunk, merge, env_pi, v_ext, v_int, int_net, embed, comm_pi, v_comm }, p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StreamValues {
    pub ext: f64,
    pub int: f64,
    pub comm: f64,
}

impl StreamValues {
    pub fn from_row(row: &[f64]) -> Self {
        Self { ext: row[VALUE_EXT], int: row[VALUE_INT], comm: row[VALUE_COMM] }
    }
}

/// Trunk output cached for counterfactual reuse. `obs` is kept because a
/// separate intrinsic-value network reads observations directly.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub features: Array2<f64>,
    pub obs: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBatch {
    pub env_logits: Array2<f64>,
    pub comm_logits: Array2<f64>,
    /// Columns: ext, int, comm.
    pub values: Array2<f64>,
    pub latent: Latent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub env_logits: Vec<f64>,
    pub comm_logits: Vec<f64>,
    pub values: StreamValues,
    pub latent: Latent,
}

impl ForwardOutput {
    pub fn env_policy(&self) -> Vec<f64> {
        softmax(&self.env_logits)
    }

    pub fn comm_policy(&self) -> Vec<f64> {
        softmax(&self.comm_logits)
    }
}

/// Outputs for `B` latents times `M` counterfactual messages.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualOutput {
    pub env_logits: Array3<f64>,
    pub comm_logits: Array3<f64>,
    pub values: Array3<f64>,
}

impl CounterfactualOutput {
    pub fn env_policy(&self, b: usize, m: usize) -> Vec<f64> {
        softmax(self.env_logits.slice(s![b, m, ..]).as_slice().expect("contiguous"))
    }

    pub fn values(&self, b: usize, m: usize) -> StreamValues {
        StreamValues::from_row(self.values.slice(s![b, m, ..]).as_slice().expect("contiguous"))
    }
}

/// Activations recorded by a forward pass, consumed by [`AgentNetwork::backward`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    recorded: bool,
    obs: Array2<f64>,
    trunk_acts: Vec<Array2<f64>>,
    merge_in: Array2<f64>,
    h: Array2<f64>,
    e: Array2<f64>,
    int_in: Array2<f64>,
    int_acts: Vec<Array2<f64>>,
}

impl Tape {
    pub fn is_recorded(&self) -> bool {
        self.recorded
    }

    pub fn rows(&self) -> usize {
        self.obs.nrows()
    }
}

/// Adjoints of a scalar loss with respect to every network output.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadAdjoints {
    pub env_logits: Array2<f64>,
    pub comm_logits: Array2<f64>,
    pub values: Array2<f64>,
}

impl HeadAdjoints {
    pub fn zeros(rows: usize, config: &NetConfig) -> Self {
        Self {
            env_logits: Array2::zeros((rows, NUM_ACTIONS)),
            comm_logits: Array2::zeros((rows, config.comm_alphabet)),
            values: Array2::zeros((rows, 3)),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.env_logits.mapv_inplace(|v| v * s);
        self.comm_logits.mapv_inplace(|v| v * s);
        self.values.mapv_inplace(|v| v * s);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentNetwork {
    config: NetConfig,
    layout: Layout,
    params: ParamVector,
}

#[derive(Serialize, Deserialize)]
struct NetworkCheckpoint {
    version: u32,
    config: NetConfig,
    params: Vec<f64>,
}

impl Serialize for AgentNetwork {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        NetworkCheckpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.params.as_slice().to_vec(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for AgentNetwork {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let ck = NetworkCheckpoint::deserialize(d)?;
        AgentNetwork::from_parts(ck.version, ck.config, ck.params).map_err(serde::de::Error::custom)
    }
}

fn ensure_cols(layer: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::Shape { layer: layer.to_string(), expected, got });
    }
    Ok(())
}

impl AgentNetwork {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, rng::Stream::Init, 0, 0);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng(config: NetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (layout, mut params) = Layout::build(&config);
        let p = params.as_mut_slice();
        let root2 = std::f64::consts::SQRT_2;
        layout.trunk.init(p, root2, root2, rng);
        layout.merge.init_orthogonal(p, root2, rng);
        layout.env_pi.init_orthogonal(p, config.policy_init_gain, rng);
        layout.v_ext.init_orthogonal(p, 1.0, rng);
        if let Some(v) = &layout.v_int {
            v.init_orthogonal(p, 1.0, rng);
        }
        if let Some(c) = &layout.int_net {
            c.init(p, root2, 1.0, rng);
        }
        layout.embed.init_orthogonal(p, root2, rng);
        layout.comm_pi.init_orthogonal(p, config.policy_init_gain, rng);
        layout.v_comm.init_orthogonal(p, 1.0, rng);
        Ok(Self { config, layout, params })
    }

    /// Rebuild from a configuration and flat parameters, rejecting mismatches.
    pub fn from_parts(version: u32, config: NetConfig, params: Vec<f64>) -> Result<Self> {
        if version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible(format!(
                "network checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        config.validate()?;
        let (layout, mut pv) = Layout::build(&config);
        if pv.len() != params.len() {
            return Err(Error::Shape { layer: "checkpoint params".into(), expected: pv.len(), got: params.len() });
        }
        pv.as_mut_slice().copy_from_slice(&params);
        Ok(Self { config, layout, params: pv })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn zero_grad(&self) -> ParamVector {
        self.params.zeros_like()
    }

    /// Names of the parameter segments that belong to each output head.
    pub fn head_segments(&self, head: &str) -> Vec<String> {
        self.params
            .segments()
            .iter()
            .filter(|s| s.name.starts_with(&format!("{head}.")))
            .map(|s| s.name.clone())
            .collect()
    }

    /// Zero the merge-layer weights that read the joint message, making every
    /// output independent of communication.
    pub fn zero_message_weights(&mut self) {
        let l = self.config.latent_dim();
        let d = self.config.message_dim();
        let out = self.layout.merge.output;
        let range = self.layout.merge.param_range();
        let w = &mut self.params.as_mut_slice()[range];
        for row in l..l + d {
            w[row * out..(row + 1) * out].iter_mut().for_each(|v| *v = 0.0);
        }
        if let Some(c) = &self.layout.int_net {
            let first = &c.layers[0];
            let out = first.output;
            let range = first.param_range();
            let w = &mut self.params.as_mut_slice()[range];
            for row in self.config.obs_dim..self.config.obs_dim + d {
                w[row * out..(row + 1) * out].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn check_inputs(&self, obs: &ArrayView2<f64>, msg: &ArrayView2<f64>) -> Result<()> {
        ensure_cols("trunk input (observation)", obs.ncols(), self.config.obs_dim)?;
        ensure_cols("merge input (joint message)", msg.ncols(), self.config.message_dim())?;
        if obs.nrows() != msg.nrows() {
            return Err(Error::Shape { layer: "batch rows".into(), expected: obs.nrows(), got: msg.nrows() });
        }
        Ok(())
    }

    /// Batched forward pass, recording activations for a backward pass.
    pub fn forward_batch(&self, obs: ArrayView2<f64>, msg: ArrayView2<f64>) -> Result<(ForwardBatch, Tape)> {
        self.check_inputs(&obs, &msg)?;
        let p = self.params.as_slice();
        let trunk_acts = self.layout.trunk.forward(p, obs);
        let latent = trunk_acts.last().cloned().unwrap_or_else(|| obs.to_owned());
        let merge_in = concatenate(Axis(1), &[latent.view(), msg]).expect("rows match");
        let h = self.layout.merge.forward(p, merge_in.view());
        let e = self.layout.embed.forward(p, h.view());
        let (int_in, int_acts) = match &self.layout.int_net {
            Some(c) => {
                let x = concatenate(Axis(1), &[obs, msg]).expect("rows match");
                let acts = c.forward(p, x.view());
                (x, acts)
            }
            None => (Array2::zeros((0, 0)), Vec::new()),
        };
        let out = self.heads(p, &h, &e, int_acts.last());
        let tape = Tape { recorded: true, obs: obs.to_owned(), trunk_acts, merge_in, h, e, int_in, int_acts };
        Ok((
            ForwardBatch {
                env_logits: out.0,
                comm_logits: out.1,
                values: out.2,
                latent: Latent { features: latent, obs: obs.to_owned() },
            },
            tape,
        ))
    }

    fn heads(
        &self,
        p: &[f64],
        h: &Array2<f64>,
        e: &Array2<f64>,
        int_out: Option<&Array2<f64>>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let env_logits = self.layout.env_pi.forward(p, h.view());
        let comm_logits = self.layout.comm_pi.forward(p, e.view());
        let v_ext = self.layout.v_ext.forward(p, h.view());
        let v_int = match (&self.layout.v_int, int_out) {
            (Some(d), _) => d.forward(p, h.view()),
            (None, Some(o)) => o.clone(),
            (None, None) => unreachable!("intrinsic value source"),
        };
        let v_comm = self.layout.v_comm.forward(p, e.view());
        let values = concatenate(Axis(1), &[v_ext.view(), v_int.view(), v_comm.view()]).expect("rows");
        (env_logits, comm_logits, values)
    }

    pub fn forward(&self, obs: &[f64], msg: &[f64]) -> Result<ForwardOutput> {
        let o = ArrayView2::from_shape((1, obs.len()), obs).expect("row");
        let m = ArrayView2::from_shape((1, msg.len()), msg).expect("row");
        let (b, _) = self.forward_batch(o, m)?;
        Ok(ForwardOutput {
            env_logits: b.env_logits.row(0).to_vec(),
            comm_logits: b.comm_logits.row(0).to_vec(),
            values: StreamValues::from_row(b.values.row(0).as_slice().expect("row")),
            latent: b.latent,
        })
    }

    /// Heads evaluated for `M` counterfactual messages per cached latent.
    ///
    /// `latent` must come from these parameters; staleness can not be
    /// detected here. The `(B, M)` axes are merged into one batch of `B*M`
    /// rows for a single pass and reshaped on the way out.
    pub fn forward_counterfactual_batch(
        &self,
        latent: &Latent,
        cf_messages: &Array3<f64>,
    ) -> Result<CounterfactualOutput> {
        let (b, m, d) = cf_messages.dim();
        ensure_cols("merge input (counterfactual message)", d, self.config.message_dim())?;
        ensure_cols("counterfactual latent width", latent.features.ncols(), self.config.latent_dim())?;
        if latent.features.nrows() != b {
            return Err(Error::Shape { layer: "counterfactual batch".into(), expected: latent.features.nrows(), got: b });
        }
        let p = self.params.as_slice();
        let l = self.config.latent_dim();
        let mut merge_in = Array2::<f64>::zeros((b * m, l + d));
        let mut int_in = if self.layout.int_net.is_some() {
            Array2::<f64>::zeros((b * m, self.config.obs_dim + d))
        } else {
            Array2::zeros((0, 0))
        };
        for bi in 0..b {
            for mi in 0..m {
                let r = bi * m + mi;
                merge_in.slice_mut(s![r, ..l]).assign(&latent.features.row(bi));
                merge_in.slice_mut(s![r, l..]).assign(&cf_messages.slice(s![bi, mi, ..]));
                if self.layout.int_net.is_some() {
                    let od = self.config.obs_dim;
                    int_in.slice_mut(s![r, ..od]).assign(&latent.obs.row(bi));
                    int_in.slice_mut(s![r, od..]).assign(&cf_messages.slice(s![bi, mi, ..]));
                }
            }
        }
        let h = self.layout.merge.forward(p, merge_in.view());
        let e = self.layout.embed.forward(p, h.view());
        let int_out = self.layout.int_net.as_ref().map(|c| c.forward_output(p, int_in.view()));
        let (env, comm, vals) = self.heads(p, &h, &e, int_out.as_ref());
        let reshape = |a: Array2<f64>| {
            let cols = a.ncols();
            a.as_standard_layout().into_owned().into_shape_with_order((b, m, cols)).expect("merged batch reshape")
        };
        Ok(CounterfactualOutput { env_logits: reshape(env), comm_logits: reshape(comm), values: reshape(vals) })
    }

    /// Reverse pass of a recorded forward; accumulates into `grad`.
    pub fn backward(&self, tape: &Tape, adj: &HeadAdjoints, grad: &mut ParamVector) -> Result<()> {
        if !tape.recorded {
            return Err(Error::Usage("backward called without a recorded forward pass".into()));
        }
        if !grad.same_layout(&self.params) {
            return Err(Error::Shape { layer: "gradient buffer".into(), expected: self.params.len(), got: grad.len() });
        }
        let rows = tape.rows();
        for (name, a) in [("env_logits", &adj.env_logits), ("comm_logits", &adj.comm_logits), ("values", &adj.values)] {
            if a.nrows() != rows {
                return Err(Error::Shape { layer: format!("adjoint {name}"), expected: rows, got: a.nrows() });
            }
        }
        let p = self.params.as_slice();
        let g = grad.as_mut_slice();
        let lay = &self.layout;
        let col = |j: usize| adj.values.slice(s![.., j..j + 1]).to_owned();
        let dummy = |n: usize| Array2::<f64>::zeros((rows, n));

        // comm branch through the embedding
        let mut de = lay.comm_pi.backward(p, g, tape.e.view(), dummy(0).view(), adj.comm_logits.clone(), true).unwrap();
        de += &lay.v_comm.backward(p, g, tape.e.view(), dummy(0).view(), col(VALUE_COMM), true).unwrap();
        let mut dh = lay.embed.backward(p, g, tape.h.view(), tape.e.view(), de, true).unwrap();

        dh += &lay.env_pi.backward(p, g, tape.h.view(), dummy(0).view(), adj.env_logits.clone(), true).unwrap();
        dh += &lay.v_ext.backward(p, g, tape.h.view(), dummy(0).view(), col(VALUE_EXT), true).unwrap();
        if let Some(v) = &lay.v_int {
            dh += &v.backward(p, g, tape.h.view(), dummy(0).view(), col(VALUE_INT), true).unwrap();
        }
        if let Some(c) = &lay.int_net {
            c.backward(p, g, tape.int_in.view(), &tape.int_acts, col(VALUE_INT), false);
        }

        let dmerge = lay.merge.backward(p, g, tape.merge_in.view(), tape.h.view(), dh, true).unwrap();
        if !lay.trunk.layers.is_empty() {
            let l = self.config.latent_dim();
            let dlatent = dmerge.slice(s![.., ..l]).to_owned();
            lay.trunk.backward(p, g, tape.obs.view(), &tape.trunk_acts, dlatent, false);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn small_config(separate: bool) -> NetConfig {
        NetConfig {
            n_agents: 3,
            comm_alphabet: 4,
            trunk_hidden: vec![7, 6],
            merge_hidden: 5,
            comm_embedding: 4,
            separate_int_value: separate,
            int_value_hidden: vec![5],
            ..NetConfig::default()
        }
    }

    fn random_net(config: NetConfig, seed: u64, scale: f64) -> AgentNetwork {
        let mut net = AgentNetwork::new(config, seed).unwrap();
        let mut r = rng::stream(seed, rng::Stream::Init, 9, 0);
        for v in net.params_mut().as_mut_slice() {
            *v = scale * r.sample::<f64, _>(StandardNormal);
        }
        net
    }

    fn random_rows(rows: usize, cols: usize, r: &mut Rng) -> Array2<f64> {
        Array::from_shape_fn((rows, cols), |_| r.random::<f64>())
    }

    #[test]
    fn zero_network_is_uniform_with_zero_values() {
        let mut net = AgentNetwork::new(NetConfig::default(), 0).unwrap();
        net.params_mut().fill(0.0);
        let out = net.forward(&[0.3; 5], &vec![0.0; 32]).unwrap();
        for p in out.env_policy() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        for p in out.comm_policy() {
            assert!((p - 1.0 / 8.0).abs() < 1e-15);
        }
        assert_eq!(out.values, StreamValues::default());
    }

    #[test]
    fn deterministic_initialization_and_forward() {
        let a = AgentNetwork::new(NetConfig::default(), 42).unwrap();
        let b = AgentNetwork::new(NetConfig::default(), 42).unwrap();
        assert_eq!(a.params(), b.params());
        let msg: Vec<f64> = (0..32).map(|i| if i % 8 == 3 { 1.0 } else { 0.0 }).collect();
        let x = a.forward(&[0.1, 1.0, 0.5, 0.25, 0.0], &msg).unwrap();
        let y = b.forward(&[0.1, 1.0, 0.5, 0.25, 0.0], &msg).unwrap();
        assert_eq!(x, y);
        let sum: f64 = x.env_policy().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_names_layer() {
        let net = AgentNetwork::new(NetConfig::default(), 0).unwrap();
        let err = net.forward(&[0.0; 4], &vec![0.0; 32]).unwrap_err();
        assert!(err.to_string().contains("trunk input"), "{err}");
        let err = net.forward(&[0.0; 5], &vec![0.0; 31]).unwrap_err();
        assert!(err.to_string().contains("joint message"), "{err}");
    }

    #[test]
    fn backward_without_forward_is_usage_error() {
        let net = AgentNetwork::new(small_config(false), 0).unwrap();
        let mut g = net.zero_grad();
        let adj = HeadAdjoints::zeros(0, net.config());
        assert!(matches!(net.backward(&Tape::default(), &adj, &mut g), Err(Error::Usage(_))));
    }

    #[test]
    fn message_only_changes_post_merge_outputs() {
        let net = random_net(small_config(false), 3, 0.5);
        let obs = [0.2, 1.0, 0.4, 0.75, 0.1];
        let mut m1 = vec![0.0; 12];
        m1[1] = 1.0;
        let mut m2 = m1.clone();
        m2[1] = 0.0;
        m2[2] = 1.0;
        let a = net.forward(&obs, &m1).unwrap();
        let full = net.forward(&obs, &m2).unwrap();
        assert_eq!(a.latent, full.latent);
        let cf = Array3::from_shape_vec((1, 1, 12), m2.clone()).unwrap();
        let reused = net.forward_counterfactual_batch(&a.latent, &cf).unwrap();
        for k in 0..3 {
            assert!((reused.env_logits[[0, 0, k]] - full.env_logits[k]).abs() <= 1e-15);
        }
        assert_ne!(a.env_logits, full.env_logits);
    }

    #[test]
    fn counterfactual_batch_matches_loop() {
        for separate in [false, true] {
            let net = random_net(small_config(separate), 11, 0.4);
            let mut r = rng::stream(5, rng::Stream::Init, 1, 0);
            for (b, m) in [(1, 1), (2, 3), (8, 7)] {
                let obs = random_rows(b, 5, &mut r);
                let msg = random_rows(b, 12, &mut r);
                let (fb, _) = net.forward_batch(obs.view(), msg.view()).unwrap();
                let cf = Array::from_shape_fn((b, m, 12), |_| r.random::<f64>());
                let out = net.forward_counterfactual_batch(&fb.latent, &cf).unwrap();
                for bi in 0..b {
                    for mi in 0..m {
                        let msg_row: Vec<f64> = cf.slice(s![bi, mi, ..]).to_vec();
                        let naive = net.forward(obs.row(bi).as_slice().unwrap(), &msg_row).unwrap();
                        for k in 0..3 {
                            assert!((out.env_logits[[bi, mi, k]] - naive.env_logits[k]).abs() <= 1e-12);
                        }
                        for k in 0..4 {
                            assert!((out.comm_logits[[bi, mi, k]] - naive.comm_logits[k]).abs() <= 1e-12);
                        }
                        let v = out.values(bi, mi);
                        assert!((v.ext - naive.values.ext).abs() <= 1e-12);
                        assert!((v.int - naive.values.int).abs() <= 1e-12);
                        assert!((v.comm - naive.values.comm).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn counterfactual_degenerate_and_identical_rows() {
        let net = random_net(small_config(false), 2, 0.4);
        let obs = [0.5, 0.0, 0.3, 0.5, 0.5];
        let mut msg = vec![0.0; 12];
        msg[5] = 1.0;
        let f = net.forward(&obs, &msg).unwrap();
        let cf1 = Array3::from_shape_vec((1, 1, 12), msg.clone()).unwrap();
        let one = net.forward_counterfactual_batch(&f.latent, &cf1).unwrap();
        assert_eq!(one.env_logits.slice(s![0, 0, ..]).to_vec(), f.env_logits);
        let rep: Vec<f64> = (0..5).flat_map(|_| msg.clone()).collect();
        let cf5 = Array3::from_shape_vec((1, 5, 12), rep).unwrap();
        let five = net.forward_counterfactual_batch(&f.latent, &cf5).unwrap();
        for m in 1..5 {
            assert_eq!(five.env_logits.slice(s![0, m, ..]), five.env_logits.slice(s![0, 0, ..]));
            assert_eq!(five.values.slice(s![0, m, ..]), five.values.slice(s![0, 0, ..]));
        }
    }

    #[test]
    fn unused_head_has_zero_gradient_and_adjoints_are_linear() {
        let net = random_net(small_config(false), 4, 0.3);
        let mut r = rng::stream(8, rng::Stream::Init, 2, 0);
        let obs = random_rows(4, 5, &mut r);
        let msg = random_rows(4, 12, &mut r);
        let (_, tape) = net.forward_batch(obs.view(), msg.view()).unwrap();
        let mut adj = HeadAdjoints::zeros(4, net.config());
        adj.env_logits = random_rows(4, 3, &mut r);
        let mut g1 = net.zero_grad();
        net.backward(&tape, &adj, &mut g1).unwrap();
        for head in ["comm_pi", "v_comm", "v_ext", "v_int", "embed"] {
            for seg in net.head_segments(head) {
                assert!(g1.slice(&seg).unwrap().iter().all(|v| *v == 0.0), "{seg}");
            }
        }
        let mut adj2 = adj.clone();
        adj2.scale(2.0);
        let mut g2 = net.zero_grad();
        net.backward(&tape, &adj2, &mut g2).unwrap();
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_rejects_mismatch() {
        let net = AgentNetwork::new(NetConfig::default(), 9).unwrap();
        let json = serde_json::to_string(&net).unwrap();
        let back: AgentNetwork = serde_json::from_str(&json).unwrap();
        assert_eq!(back.params().as_slice(), net.params().as_slice());
        assert_eq!(NetConfig::default().param_count(), net.params().len());

        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["config"]["merge_hidden"] = serde_json::json!(63);
        assert!(serde_json::from_value::<AgentNetwork>(v).is_err());
    }

    #[test]
    fn message_blind_network_ignores_message() {
        let mut net = random_net(small_config(true), 6, 0.5);
        net.zero_message_weights();
        let obs = [0.3, 1.0, 0.2, 0.5, 0.9];
        let a = net.forward(&obs, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let b = net.forward(&obs, &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(a.env_logits, b.env_logits);
        assert_eq!(a.values, b.values);
    }
}
