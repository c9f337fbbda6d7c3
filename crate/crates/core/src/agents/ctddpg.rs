use ndarray::{Array2, ArrayView2};

use super::{add_noise, check_finite, draw_window_len, sizes, AgentKind, Learner, Optim, TrainConfig, UpdateCtx, UpdateStats};
use crate::actor::policy_loss;
use crate::critic::{martingale_loss, terminal_loss, CriticNets};
use crate::nn::{soft_update, MlpNet};
use crate::rng::Stream;
use crate::sde::SdeEnv;
use crate::Result;

/// CT-DDPG; with `single_step` set the window length is pinned to 1 (DAU).
#[derive(Clone, Debug)]
pub struct CtDdpg {
    pub nets: CriticNets,
    pub policy: MlpNet,
    opt_value: Optim,
    opt_adv: Optim,
    opt_policy: Optim,
    window: (usize, usize),
    batch: usize,
    terminal_weight: f64,
    tau: f64,
    sigma_explore: f64,
    single_step: bool,
}

impl CtDdpg {
    pub fn new(cfg: &TrainConfig, env: &SdeEnv, single_step: bool, rng: &mut Stream) -> Result<Self> {
        let embed = env.state_dim + 2;
        let d = env.action_dim;
        let value = MlpNet::init(&sizes(embed, &cfg.hidden, 1), rng, 1.0)?;
        let adv = MlpNet::init(&sizes(embed + d, &cfg.hidden, 1), rng, 1.0)?;
        let policy = MlpNet::init(&sizes(embed, &cfg.hidden, d), rng, 0.01)?;
        let nets = CriticNets::new(value, adv)?;
        Ok(Self {
            opt_value: Optim::new(&nets.value, cfg.lr),
            opt_adv: Optim::new(&nets.adv, cfg.lr),
            opt_policy: Optim::new(&policy, cfg.actor_lr()),
            nets,
            policy,
            window: if single_step { (1, 1) } else { (cfg.l_min, cfg.l_max) },
            batch: cfg.batch,
            terminal_weight: cfg.terminal_weight,
            tau: cfg.tau,
            sigma_explore: cfg.sigma_explore,
            single_step,
        })
    }
}

impl Learner for CtDdpg {
    fn kind(&self) -> AgentKind {
        if self.single_step {
            AgentKind::Dau
        } else {
            AgentKind::CtDdpg
        }
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
        // critic
        let len = draw_window_len(self.window, ctx.buffer, ctx.rng);
        let windows = ctx.buffer.sample_windows(self.batch, len)?;
        let m = martingale_loss(&self.nets, Some(&self.policy), &windows, ctx.beta)?;
        let mut grad_value = m.grad_value;
        let mut loss_c = None;
        if ctx.buffer.num_finished() > 0 {
            let terminals = ctx.buffer.sample_terminals(self.batch)?;
            let (lc, gc) = terminal_loss(&self.nets.value, &terminals)?;
            for (g, c) in grad_value.iter_mut().zip(&gc) {
                *g += self.terminal_weight * c;
            }
            loss_c = Some(lc);
        }
        check_finite("critic loss", m.loss + loss_c.unwrap_or(0.0), &[&grad_value, &m.grad_adv])?;
        self.opt_value.step(&mut self.nets.value, &grad_value)?;
        self.opt_adv.step(&mut self.nets.adv, &m.grad_adv)?;

        // actor
        let states = ctx.buffer.sample_states(self.batch)?;
        let (loss_policy, grad_policy) = policy_loss(&self.policy, &self.nets.adv, &states, ctx.h)?;
        check_finite("policy loss", loss_policy, &[&grad_policy])?;
        self.opt_policy.step(&mut self.policy, &grad_policy)?;

        // target
        soft_update(&mut self.nets.target_value.params, &self.nets.value.params, self.tau);
        Ok(UpdateStats {
            loss_m: m.loss,
            loss_c,
            loss_policy,
            value_grad_nsr: m.value_grad_nsr,
        })
    }

    fn networks(&self) -> Vec<(&'static str, &MlpNet)> {
        vec![
            ("policy", &self.policy),
            ("value", &self.nets.value),
            ("adv", &self.nets.adv),
            ("target_value", &self.nets.target_value),
        ]
    }
}
