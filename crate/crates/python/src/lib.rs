//! Python bindings for the environment, networks, influence measures, GAE
//! and the training pipeline.

use std::path::PathBuf;

use pimaex_core::config::RunConfig;
use pimaex_core::env::{Action, ConsumeExplore, EnvParams};
use pimaex_core::influence;
use pimaex_core::nn::{AgentNetwork, NetConfig};
use pimaex_core::{ppo, report, runtime, Error};
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Shape { .. } | Error::Incompatible(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::MissingFile(_) => PyFileNotFoundError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

type Obs = Vec<Vec<f64>>;

/// Consume/Explore environment. `params` is a JSON object of environment
/// parameters; omitted fields keep their defaults.
#[pyclass(name = "Env", module = "pimaex")]
struct PyEnv {
    inner: ConsumeExplore,
}

fn merge_json<T: serde::Serialize + serde::de::DeserializeOwned>(base: &T, patch: Option<&str>) -> PyResult<T> {
    let Some(patch) = patch else {
        return serde_json::from_value(serde_json::to_value(base).map_err(json_err)?).map_err(json_err);
    };
    let mut v = serde_json::to_value(base).map_err(json_err)?;
    let p: serde_json::Value = serde_json::from_str(patch).map_err(json_err)?;
    let serde_json::Value::Object(p) = p else {
        return Err(PyValueError::new_err("expected a JSON object"));
    };
    for (k, val) in p {
        match v.get_mut(&k) {
            Some(slot) => *slot = val,
            None => return Err(PyValueError::new_err(format!("unknown field `{k}`"))),
        }
    }
    serde_json::from_value(v).map_err(json_err)
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (params=None))]
    fn new(params: Option<&str>) -> PyResult<Self> {
        let p: EnvParams = merge_json(&EnvParams::default(), params)?;
        Ok(Self { inner: ConsumeExplore::new(p).map_err(py_err)? })
    }

    #[getter]
    fn n_agents(&self) -> usize {
        self.inner.params().n_agents
    }

    fn params_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.params()).map_err(json_err)
    }

    fn state_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.state()).map_err(json_err)
    }

    fn reset(&mut self, seed: u64) -> Obs {
        self.inner.reset(seed).iter().map(|o| o.0.to_vec()).collect()
    }

    /// Actions are 0 noop, 1 consume, 2 explore. Returns `(obs, rewards, done)`.
    fn step(&mut self, actions: Vec<usize>) -> PyResult<(Obs, Vec<f64>, bool)> {
        let acts = actions
            .iter()
            .map(|a| Action::from_index(*a).ok_or_else(|| PyValueError::new_err(format!("invalid action {a}"))))
            .collect::<PyResult<Vec<_>>>()?;
        let out = self.inner.step(&acts).map_err(py_err)?;
        let obs = self.inner.observations().iter().map(|o| o.0.to_vec()).collect();
        Ok((obs, out.rewards, out.done))
    }
}

/// Per-agent actor-critic network with a communication head.
#[pyclass(name = "Network", module = "pimaex")]
struct PyNetwork {
    inner: AgentNetwork,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (seed=0, config=None))]
    fn new(seed: u64, config: Option<&str>) -> PyResult<Self> {
        let cfg: NetConfig = merge_json(&NetConfig::default(), config)?;
        Ok(Self { inner: AgentNetwork::new(cfg, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: serde_json::from_str(text).map_err(json_err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(json_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.params().len()
    }

    #[getter]
    fn message_dim(&self) -> usize {
        self.inner.config().message_dim()
    }

    fn zero_message_weights(&mut self) {
        self.inner.zero_message_weights();
    }

    /// Returns `(env_logits, comm_logits, (v_ext, v_int, v_comm))`.
    fn forward(&self, obs: Vec<f64>, message: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>, (f64, f64, f64))> {
        let o = self.inner.forward(&obs, &message).map_err(py_err)?;
        Ok((o.env_logits, o.comm_logits, (o.values.ext, o.values.int, o.values.comm)))
    }

    /// Influence of every other agent's message on `target`, as a list of
    /// dicts with keys `source`, `pi_kl`, `pi_pmi`, `vi_ext`, `vi_int`.
    fn influences(&self, py: Python<'_>, obs: Vec<f64>, symbols: Vec<usize>, target: usize, action: usize) -> PyResult<Vec<Py<PyAny>>> {
        let alphabet = self.inner.config().comm_alphabet;
        if symbols.len() != self.inner.config().n_agents || symbols.iter().any(|s| *s >= alphabet) {
            return Err(PyValueError::new_err("one symbol in 0..comm_alphabet per agent expected"));
        }
        let mut msg = vec![0.0; symbols.len() * alphabet];
        for (i, s) in symbols.iter().enumerate() {
            msg[i * alphabet + s] = 1.0;
        }
        let out = self.inner.forward(&obs, &msg).map_err(py_err)?;
        let pairs = influence::influences_on(&self.inner, &out, &msg, &symbols, target, action).map_err(py_err)?;
        pairs
            .into_iter()
            .map(|p| {
                let d = pyo3::types::PyDict::new(py);
                d.set_item("source", p.source)?;
                d.set_item("pi_kl", p.pi_kl)?;
                d.set_item("pi_pmi", p.pi_pmi)?;
                d.set_item("vi_ext", p.vi_ext)?;
                d.set_item("vi_int", p.vi_int)?;
                Ok(d.into_any().unbind())
            })
            .collect()
    }
}

#[pyfunction]
fn policy_influence_kl(informed: Vec<f64>, marginal: Vec<f64>) -> f64 {
    influence::policy_influence_kl(&informed, &marginal)
}

#[pyfunction]
fn policy_influence_pmi(informed: Vec<f64>, marginal: Vec<f64>, action: usize) -> PyResult<f64> {
    if action >= informed.len() || action >= marginal.len() {
        return Err(PyValueError::new_err("action out of range"));
    }
    Ok(influence::policy_influence_pmi(&informed, &marginal, action))
}

/// Mean of the informed policy and the counterfactual policies.
#[pyfunction]
fn marginal_policy(informed: Vec<f64>, counterfactuals: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let o = |p: Vec<f64>| influence::Outcome { policy: p, ext: 0.0, int: 0.0 };
    let cfs: Vec<_> = counterfactuals.into_iter().map(o).collect();
    Ok(influence::marginalize(&o(informed), &cfs).map_err(py_err)?.policy)
}

/// Returns `(advantages, value_targets)`.
#[pyfunction]
#[pyo3(signature = (rewards, values, dones, bootstrap, gamma, lam, episodic=true))]
fn gae(
    rewards: Vec<f64>,
    values: Vec<f64>,
    dones: Vec<bool>,
    bootstrap: f64,
    gamma: f64,
    lam: f64,
    episodic: bool,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    ppo::gae(&rewards, &values, &dones, bootstrap, gamma, lam, episodic).map_err(py_err)
}

/// Resolved configuration of a preset as JSON.
#[pyfunction]
#[pyo3(signature = (name, desk_scale=false, overrides=Vec::new()))]
fn preset_config(name: &str, desk_scale: bool, overrides: Vec<String>) -> PyResult<String> {
    let mut c = RunConfig::preset(name).map_err(py_err)?;
    if desk_scale {
        c = c.desk_scale();
    }
    for o in &overrides {
        c.apply_override(o).map_err(py_err)?;
    }
    c.validate().map_err(py_err)?;
    serde_json::to_string_pretty(&c).map_err(json_err)
}

/// Train from a JSON configuration; returns the run summary as JSON.
#[pyfunction]
fn train(py: Python<'_>, config: &str) -> PyResult<String> {
    let cfg: RunConfig = serde_json::from_str(config).map_err(json_err)?;
    let summary = py.detach(|| runtime::run_experiment(&cfg)).map_err(py_err)?;
    serde_json::to_string(&summary).map_err(json_err)
}

/// Greedy evaluation of a checkpoint; returns the aggregated measures as JSON.
#[pyfunction]
fn evaluate(py: Python<'_>, checkpoint: PathBuf, episodes: usize, output: PathBuf) -> PyResult<String> {
    let (_, summary) = py.detach(|| runtime::evaluate_checkpoint(&checkpoint, episodes, &output)).map_err(py_err)?;
    serde_json::to_string(&summary).map_err(json_err)
}

#[pyfunction]
fn make_report(runs: Vec<PathBuf>, output: PathBuf) -> PyResult<Vec<PathBuf>> {
    report::report(&runs, &output).map_err(py_err)
}

#[pymodule]
fn pimaex(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEnv>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(policy_influence_kl, m)?)?;
    m.add_function(wrap_pyfunction!(policy_influence_pmi, m)?)?;
    m.add_function(wrap_pyfunction!(marginal_policy, m)?)?;
    m.add_function(wrap_pyfunction!(gae, m)?)?;
    m.add_function(wrap_pyfunction!(preset_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(make_report, m)?)?;
    m.add("PRESETS", pimaex_core::config::PRESETS.to_vec())?;
    Ok(())
}
