use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{check_finite, draw_window_len, sizes, AgentKind, Learner, Optim, QLearningConfig, UpdateCtx, UpdateStats};
use crate::critic::{adv_action_grad, advantage_batch, martingale_loss, terminal_loss, CriticNets};
use crate::nn::{soft_update, stack_rows, MlpNet};
use crate::rng::Stream;
use crate::sde::SdeEnv;
use crate::{Error, Result};

pub const MIN_STD: f64 = 1e-3;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `std = max(softplus(raw), MIN_STD)` and `d std / d raw`.
fn std_of(raw: f64) -> (f64, f64) {
    let s = softplus(raw);
    if s > MIN_STD {
        (s, sigmoid(raw))
    } else {
        (MIN_STD, 0.0)
    }
}

/// `log N(a; mean, diag(std²))` given the standardized draw `z`.
pub fn gaussian_log_density(z: &[f64], std: &[f64]) -> f64 {
    let c = 0.5 * (2.0 * std::f64::consts::PI).ln();
    z.iter().zip(std).map(|(z, s)| -0.5 * z * z - s.ln() - c).sum()
}

/// `(1/B) Σ_b ((1/n) Σ_i [q_{b,i} − γ log π_{b,i}])²` over rows laid out
/// state-major (`n` consecutive rows per state). Returns the per-state means too.
pub fn entropy_penalty(q: &[f64], log_pi: &[f64], n: usize, gamma: f64) -> (f64, Vec<f64>) {
    let means: Vec<f64> = q
        .chunks(n)
        .zip(log_pi.chunks(n))
        .map(|(q, l)| q.iter().zip(l).map(|(q, l)| q - gamma * l).sum::<f64>() / n as f64)
        .collect();
    let pen = means.iter().map(|m| m * m).sum::<f64>() / means.len() as f64;
    (pen, means)
}

/// Continuous-time q-learning with a diagonal Gaussian policy.
#[derive(Clone, Debug)]
pub struct QLearning {
    pub nets: CriticNets,
    pub mean: MlpNet,
    pub std: MlpNet,
    opt_value: Optim,
    opt_q: Optim,
    opt_mean: Optim,
    opt_std: Optim,
    window: (usize, usize),
    batch: usize,
    terminal_weight: f64,
    tau: f64,
    entropy: f64,
    action_samples: usize,
    penalty_weight: f64,
}

/// Gaussian policy outputs for a batch.
struct PolicyEval {
    mean_cache: crate::nn::ForwardCache,
    std_cache: crate::nn::ForwardCache,
    std: Array2<f64>,
    dstd: Array2<f64>,
}

impl QLearning {
    pub fn new(cfg: &QLearningConfig, env: &SdeEnv, rng: &mut Stream) -> Result<Self> {
        if !(cfg.entropy > 0.0) || cfg.action_samples == 0 {
            return Err(Error::Config(format!(
                "q-learning needs entropy > 0 and action_samples >= 1, got {} and {}",
                cfg.entropy, cfg.action_samples
            )));
        }
        let base = &cfg.base;
        let embed = env.state_dim + 2;
        let d = env.action_dim;
        let value = MlpNet::init(&sizes(embed, &base.hidden, 1), rng, 1.0)?;
        let q = MlpNet::init(&sizes(embed + d, &base.hidden, 1), rng, 1.0)?;
        let mean = MlpNet::init(&sizes(embed, &base.hidden, d), rng, 0.01)?;
        let mut std = MlpNet::init(&sizes(embed, &base.hidden, d), rng, 0.01)?;
        // start the policy spread at the exploration scale
        let s0 = base.sigma_explore.max(2.0 * MIN_STD);
        let raw0 = s0.exp_m1().ln();
        let np = std.num_params();
        for b in &mut std.params[np - d..] {
            *b = raw0;
        }
        let nets = CriticNets::new(value, q)?;
        Ok(Self {
            opt_value: Optim::new(&nets.value, base.lr),
            opt_q: Optim::new(&nets.adv, base.lr),
            opt_mean: Optim::new(&mean, base.actor_lr()),
            opt_std: Optim::new(&std, base.actor_lr()),
            nets,
            mean,
            std,
            window: (base.l_min, base.l_max),
            batch: base.batch,
            terminal_weight: base.terminal_weight,
            tau: base.tau,
            entropy: cfg.entropy,
            action_samples: cfg.action_samples,
            penalty_weight: cfg.penalty_weight,
        })
    }

    fn policy_eval(&self, states: ArrayView2<'_, f64>) -> Result<PolicyEval> {
        let mean_cache = self.mean.forward_batch(states)?;
        let std_cache = self.std.forward_batch(states)?;
        let raw = std_cache.output();
        let std = raw.mapv(|r| std_of(r).0);
        let dstd = raw.mapv(|r| std_of(r).1);
        Ok(PolicyEval {
            mean_cache,
            std_cache,
            std,
            dstd,
        })
    }

    /// Policy standard deviations for a batch of embedded states.
    pub fn policy_std(&self, states: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.policy_eval(states)?.std)
    }

    /// `n` actions per state with their standardized draws, state-major.
    fn sample_actions(&self, states: ArrayView2<'_, f64>, n: usize, rng: &mut Stream) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>)> {
        let pe = self.policy_eval(states)?;
        let rows = states.nrows() * n;
        let d = self.mean.output_dim();
        let mut x = Array2::zeros((rows, states.ncols()));
        let mut a = Array2::zeros((rows, d));
        let mut z = Array2::zeros((rows, d));
        let mut s = Array2::zeros((rows, d));
        for b in 0..states.nrows() {
            for i in 0..n {
                let r = b * n + i;
                x.row_mut(r).assign(&states.row(b));
                for j in 0..d {
                    let zz: f64 = rng.sample(StandardNormal);
                    z[(r, j)] = zz;
                    s[(r, j)] = pe.std[(b, j)];
                    a[(r, j)] = pe.mean_cache.output()[(b, j)] + pe.std[(b, j)] * zz;
                }
            }
        }
        Ok((x, a, z, s))
    }

    /// Penalty on the window start states and its gradient with respect to ψ.
    pub fn penalty(&self, states: ArrayView2<'_, f64>, rng: &mut Stream) -> Result<(f64, Vec<f64>)> {
        let n = self.action_samples;
        let (x, a, z, s) = self.sample_actions(states, n, rng)?;
        let q = advantage_batch(&self.nets.adv, None, x.view(), a.view())?;
        let log_pi: Vec<f64> = (0..x.nrows())
            .map(|r| gaussian_log_density(z.row(r).as_slice().unwrap(), s.row(r).as_slice().unwrap()))
            .collect();
        let (pen, means) = entropy_penalty(&q, &log_pi, n, self.entropy);
        let scale = 2.0 / (n * states.nrows()) as f64;
        let cot: Vec<f64> = (0..x.nrows()).map(|r| scale * means[r / n]).collect();
        let (grad, _) = adv_action_grad(&self.nets.adv, x.view(), a.view(), &cot)?;
        Ok((pen, grad))
    }

    /// `−h (1/B) Σ [q(x̃, a) − γ log π(a|x̃)]` with `a = mean + std·z`, and the
    /// pathwise gradients for the mean and std nets.
    pub fn policy_objective(&self, states: ArrayView2<'_, f64>, h: f64, rng: &mut Stream) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let batch = states.nrows();
        let pe = self.policy_eval(states)?;
        let d = self.mean.output_dim();
        let z = Array2::from_shape_fn((batch, d), |_| rng.sample::<f64, _>(StandardNormal));
        let a = pe.mean_cache.output() + &(&pe.std * &z);
        let q = advantage_batch(&self.nets.adv, None, states, a.view())?;
        let mut objective = 0.0;
        for r in 0..batch {
            objective += q[r] - self.entropy * gaussian_log_density(z.row(r).as_slice().unwrap(), pe.std.row(r).as_slice().unwrap());
        }
        let w = -h / batch as f64;
        let loss = w * objective;
        let (_, da) = adv_action_grad(&self.nets.adv, states, a.view(), &vec![1.0; batch])?;
        let cot_mean = da.mapv(|g| w * g);
        let cot_raw = Array2::from_shape_fn((batch, d), |(r, j)| w * (da[(r, j)] * z[(r, j)] + self.entropy / pe.std[(r, j)]) * pe.dstd[(r, j)]);
        let g_mean = self.mean.backward(&pe.mean_cache, cot_mean.view(), false)?.params;
        let g_std = self.std.backward(&pe.std_cache, cot_raw.view(), false)?.params;
        Ok((loss, g_mean, g_std))
    }
}

impl Learner for QLearning {
    fn kind(&self) -> AgentKind {
        AgentKind::QLearn
    }

    fn eval_policy(&self) -> &MlpNet {
        &self.mean
    }

    fn behavior(&self, states: ArrayView2<'_, f64>, rngs: &mut [&mut Stream]) -> Result<Array2<f64>> {
        let pe = self.policy_eval(states)?;
        let mut a = pe.mean_cache.output().clone();
        for ((mut row, s), rng) in a.rows_mut().into_iter().zip(pe.std.rows()).zip(rngs.iter_mut()) {
            for (v, s) in row.iter_mut().zip(s) {
                let z: f64 = rng.sample(StandardNormal);
                *v += s * z;
            }
        }
        Ok(a)
    }

    fn update(&mut self, ctx: &mut UpdateCtx<'_>) -> Result<UpdateStats> {
        let len = draw_window_len(self.window, ctx.buffer, ctx.rng);
        let windows = ctx.buffer.sample_windows(self.batch, len)?;
        let m = martingale_loss(&self.nets, None, &windows, ctx.beta)?;
        let mut grad_value = m.grad_value;
        let mut grad_q = m.grad_adv;
        let mut loss_c = None;
        if ctx.buffer.num_finished() > 0 {
            let terminals = ctx.buffer.sample_terminals(self.batch)?;
            let (lc, gc) = terminal_loss(&self.nets.value, &terminals)?;
            for (g, c) in grad_value.iter_mut().zip(&gc) {
                *g += self.terminal_weight * c;
            }
            loss_c = Some(lc);
        }
        let starts: Vec<Vec<f64>> = windows.iter().map(|w| w.states[0].clone()).collect();
        let starts = stack_rows(&starts, self.mean.input_dim());
        let (pen, gp) = self.penalty(starts.view(), ctx.rng)?;
        for (g, p) in grad_q.iter_mut().zip(&gp) {
            *g += self.penalty_weight * p;
        }
        let loss_m = m.loss + self.penalty_weight * pen;
        check_finite("critic loss", loss_m + loss_c.unwrap_or(0.0), &[&grad_value, &grad_q])?;
        self.opt_value.step(&mut self.nets.value, &grad_value)?;
        self.opt_q.step(&mut self.nets.adv, &grad_q)?;

        let states = ctx.buffer.sample_states(self.batch)?;
        let states = stack_rows(&states, self.mean.input_dim());
        let (loss_policy, g_mean, g_std) = self.policy_objective(states.view(), ctx.h, ctx.rng)?;
        check_finite("policy loss", loss_policy, &[&g_mean, &g_std])?;
        self.opt_mean.step(&mut self.mean, &g_mean)?;
        self.opt_std.step(&mut self.std, &g_std)?;

        soft_update(&mut self.nets.target_value.params, &self.nets.value.params, self.tau);
        Ok(UpdateStats {
            loss_m,
            loss_c,
            loss_policy,
            value_grad_nsr: m.value_grad_nsr,
        })
    }

    fn networks(&self) -> Vec<(&'static str, &MlpNet)> {
        vec![
            ("policy", &self.mean),
            ("policy_std", &self.std),
            ("value", &self.nets.value),
            ("q", &self.nets.adv),
            ("target_value", &self.nets.target_value),
        ]
    }
}
