//! Deterministic policy `μ_φ(x̃)` and its loss.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::critic::adv_action_grad;
use crate::nn::{stack_rows, time_embed, MlpNet};
use crate::sde::Policy;
use crate::{Error, Result};

/// Policy network paired with the horizon used by its time embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    pub net: MlpNet,
    pub horizon: f64,
}

impl PolicyNet {
    pub fn new(net: MlpNet, horizon: f64) -> Self {
        Self { net, horizon }
    }

    pub fn act(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        act(&self.net, t, x, self.horizon)
    }
}

impl Policy for PolicyNet {
    fn action(&self, t: f64, x: &[f64]) -> Vec<f64> {
        self.act(t, x).expect("policy input matches the environment")
    }
}

pub fn act(policy: &MlpNet, t: f64, x: &[f64], horizon: f64) -> Result<Vec<f64>> {
    policy.forward(&time_embed(t, x, horizon)?)
}

/// `act(...) + σ·z` with `z ~ N(0, I)`.
pub fn explore<R: Rng + ?Sized>(policy: &MlpNet, t: f64, x: &[f64], horizon: f64, sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_explore must be nonnegative, got {sigma}")));
    }
    let mut a = act(policy, t, x, horizon)?;
    if sigma > 0.0 {
        for v in &mut a {
            let z: f64 = rng.sample(StandardNormal);
            *v += sigma * z;
        }
    }
    Ok(a)
}

/// `−(1/B) Σ q̄_ψ(x̃, μ_φ(x̃))·h` and its φ gradient, with ψ held fixed.
pub fn policy_loss(policy: &MlpNet, adv: &MlpNet, states: &[Vec<f64>], h: f64) -> Result<(f64, Vec<f64>)> {
    if states.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let batch = states.len();
    let x = stack_rows(states, policy.input_dim());
    let cache = policy.forward_batch(x.view())?;
    let mu = cache.output();
    let q = crate::critic::advantage_batch(adv, None, x.view(), mu.view())?;
    let loss = -q.iter().sum::<f64>() * h / batch as f64;
    let cot = vec![-h / batch as f64; batch];
    let (_, da) = adv_action_grad(adv, x.view(), mu.view(), &cot)?;
    let grad = policy.backward(&cache, da.view(), false)?.params;
    Ok((loss, grad))
}

/// Mean actions for a batch of embedded states.
pub fn act_batch(policy: &MlpNet, states: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(policy.forward_batch(states.view())?.output().clone())
}
