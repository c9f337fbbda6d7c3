use ndarray::{Array2, ArrayView2};

use super::{add_noise, check_finite, sizes, AgentKind, Learner, Optim, TrainConfig, UpdateCtx, UpdateStats};
use crate::actor::policy_loss;
use crate::critic::{adv_action_grad, advantage_batch};
use crate::nn::{soft_update, stack_rows, MlpNet};
use crate::replay::Window;
use crate::rng::Stream;
use crate::sde::SdeEnv;
use crate::Result;

/// Discrete-time DDPG: `Q(x̃, a)` regressed on `r·h + e^{−βh} Q_tgt(x̃', μ(x̃'))`,
/// or on `r·h + e^{−βh} g(x_K)` when `x̃'` is terminal.
#[derive(Clone, Debug)]
pub struct DiscreteDdpg {
    pub q: MlpNet,
    pub target_q: MlpNet,
    pub policy: MlpNet,
    opt_q: Optim,
    opt_policy: Optim,
    batch: usize,
    tau: f64,
    sigma_explore: f64,
}

impl DiscreteDdpg {
    pub fn new(cfg: &TrainConfig, env: &SdeEnv, rng: &mut Stream) -> Result<Self> {
        let embed = env.state_dim + 2;
        let d = env.action_dim;
        // small final layer so the initial Q is close to zero
        let q = MlpNet::init(&sizes(embed + d, &cfg.hidden, 1), rng, 0.01)?;
        let policy = MlpNet::init(&sizes(embed, &cfg.hidden, d), rng, 0.01)?;
        Ok(Self {
            target_q: q.clone(),
            opt_q: Optim::new(&q, cfg.lr),
            opt_policy: Optim::new(&policy, cfg.actor_lr()),
            q,
            policy,
            batch: cfg.batch,
            tau: cfg.tau,
            sigma_explore: cfg.sigma_explore,
        })
    }

    /// One-step regression targets for `windows` (all of length 1).
    pub fn targets(&self, windows: &[Window], beta: f64) -> Result<Vec<f64>> {
        let h = windows[0].step_size;
        let disc = (-beta * h).exp();
        let next: Vec<Vec<f64>> = windows.iter().map(|w| w.states[1].clone()).collect();
        let next = stack_rows(&next, self.policy.input_dim());
        let mu = self.policy.forward_batch(next.view())?;
        let boot = advantage_batch(&self.target_q, None, next.view(), mu.output().view())?;
        Ok(windows
            .iter()
            .zip(boot)
            .map(|(w, b)| w.reward_rates[0] * h + disc * w.terminal.unwrap_or(b))
            .collect())
    }

    /// `(1/B) Σ (Q(x̃, a) − y)²` and its gradient.
    pub fn critic_loss(&self, windows: &[Window], beta: f64) -> Result<(f64, Vec<f64>)> {
        let y = self.targets(windows, beta)?;
        let batch = windows.len() as f64;
        let x: Vec<Vec<f64>> = windows.iter().map(|w| w.states[0].clone()).collect();
        let a: Vec<Vec<f64>> = windows.iter().map(|w| w.actions[0].clone()).collect();
        let x = stack_rows(&x, self.policy.input_dim());
        let a = stack_rows(&a, self.policy.output_dim());
        let q = advantage_batch(&self.q, None, x.view(), a.view())?;
        let resid: Vec<f64> = q.iter().zip(&y).map(|(q, y)| q - y).collect();
        let loss = resid.iter().map(|r| r * r).sum::<f64>() / batch;
        let cot: Vec<f64> = resid.iter().map(|r| 2.0 * r / batch).collect();
        let (grad, _) = adv_action_grad(&self.q, x.view(), a.view(), &cot)?;
        Ok((loss, grad))
    }
}

impl Learner for DiscreteDdpg {
    fn kind(&self) -> AgentKind {
        AgentKind::Ddpg
    }

    fn eval_policy(&self) -> &MlpNet {
        &self.policy
    }

    fn behavior(&self, states: ArrayView2<'_, f64>, rngs: &mut [&mut Stream]) -> Result<Array2<f64>> {
        let mut a = self.policy.forward_batch(states)?.output().clone();
        add_noise(&mut a, self.sigma_explore, rngs);
        Ok(a)
    }

    fn update(&mut self, ctx: &mut UpdateCtx<'_>) -> Result<UpdateStats> {
        let windows = ctx.buffer.sample_windows(self.batch, 1)?;
        let (loss_m, grad_q) = self.critic_loss(&windows, ctx.beta)?;
        check_finite("critic loss", loss_m, &[&grad_q])?;
        self.opt_q.step(&mut self.q, &grad_q)?;

        let states = ctx.buffer.sample_states(self.batch)?;
        let (loss_policy, grad_policy) = policy_loss(&self.policy, &self.q, &states, 1.0)?;
        check_finite("policy loss", loss_policy, &[&grad_policy])?;
        self.opt_policy.step(&mut self.policy, &grad_policy)?;

        soft_update(&mut self.target_q.params, &self.q.params, self.tau);
        Ok(UpdateStats {
            loss_m,
            loss_c: None,
            loss_policy,
            value_grad_nsr: None,
        })
    }

    fn networks(&self) -> Vec<(&'static str, &MlpNet)> {
        vec![("policy", &self.policy), ("q", &self.q), ("target_q", &self.target_q)]
    }
}
