//! Central finite-difference check of [`AgentNetwork::backward`].

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{AgentNetwork, HeadAdjoints, NetConfig};
use crate::error::Result;
use crate::rng::{self, Rng};

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentCheck {
    pub segment: String,
    pub params: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub seed: u64,
    pub segments: Vec<SegmentCheck>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.segments.iter().map(|s| s.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn normal(rng: &mut Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn objective(net: &AgentNetwork, obs: &Array2<f64>, msg: &Array2<f64>, adj: &HeadAdjoints) -> Result<f64> {
    let (out, _) = net.forward_batch(obs.view(), msg.view())?;
    Ok((&out.env_logits * &adj.env_logits).sum()
        + (&out.comm_logits * &adj.comm_logits).sum()
        + (&out.values * &adj.values).sum())
}

/// Random parameters, inputs and head adjoints; every parameter is perturbed
/// by `±h` and compared with the backward pass on `L = sum(adjoint * output)`.
pub fn check_network(cfg: &NetConfig, seed: u64, batch: usize, h: f64) -> Result<GradCheck> {
    let mut r = rng::stream(seed, rng::Stream::Init, 7, 0);
    let mut net = AgentNetwork::with_rng(cfg.clone(), &mut r)?;
    // policy heads start near zero; randomize so their inputs carry gradient
    for v in net.params_mut().as_mut_slice() {
        *v += 0.1 * r.sample::<f64, _>(StandardNormal);
    }
    let obs = normal(&mut r, (batch, cfg.obs_dim));
    let mut msg = Array2::zeros((batch, cfg.message_dim()));
    for b in 0..batch {
        for a in 0..cfg.n_agents {
            msg[[b, a * cfg.comm_alphabet + r.random_range(0..cfg.comm_alphabet)]] = 1.0;
        }
    }
    let mut adj = HeadAdjoints::zeros(batch, cfg);
    adj.env_logits = normal(&mut r, adj.env_logits.dim());
    adj.comm_logits = normal(&mut r, adj.comm_logits.dim());
    adj.values = normal(&mut r, adj.values.dim());

    let (_, tape) = net.forward_batch(obs.view(), msg.view())?;
    let mut grad = net.zero_grad();
    net.backward(&tape, &adj, &mut grad)?;

    let mut segments = Vec::new();
    for seg in net.params().segments().to_vec() {
        let mut check = SegmentCheck { segment: seg.name.clone(), params: seg.len, max_rel_err: 0.0, max_abs_err: 0.0 };
        for i in seg.offset..seg.offset + seg.len {
            let orig = net.params().as_slice()[i];
            net.params_mut().as_mut_slice()[i] = orig + h;
            let up = objective(&net, &obs, &msg, &adj)?;
            net.params_mut().as_mut_slice()[i] = orig - h;
            let down = objective(&net, &obs, &msg, &adj)?;
            net.params_mut().as_mut_slice()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grad.as_slice()[i];
            check.max_rel_err = check.max_rel_err.max(rel_err(an, fd));
            check.max_abs_err = check.max_abs_err.max((an - fd).abs());
        }
        segments.push(check);
    }
    Ok(GradCheck { seed, segments })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_network_passes() {
        let cfg = NetConfig { trunk_hidden: vec![6, 5], merge_hidden: 7, comm_embedding: 4, n_agents: 2, comm_alphabet: 3, ..NetConfig::default() };
        for sep in [false, true] {
            let c = NetConfig { separate_int_value: sep, int_value_hidden: vec![4], ..cfg.clone() };
            let g = check_network(&c, 1, 3, 1e-5).unwrap();
            assert!(g.max_rel_err() < 1e-6, "{g:?}");
        }
    }
}
