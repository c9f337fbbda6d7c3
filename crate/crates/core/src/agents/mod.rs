//! Training loops.
//!
//! Every agent runs through [`train`]: the same lockstep collector, replay
//! buffer, update cadence and evaluation. Agents differ only in how they
//! build losses, which lives behind [`Learner`].

mod ctddpg;
mod ddpg;
mod qlearn;

use std::io::Write;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

pub use ctddpg::CtDdpg;
pub use ddpg::DiscreteDdpg;
pub use qlearn::QLearning;

use crate::nn::{time_features, AdamState, MlpNet};
use crate::replay::ReplayBuffer;
use crate::report::fmt_opt;
use crate::rng::{Purpose, SeedTree, Stream};
use crate::sde::{em_step, SdeEnv};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AgentKind {
    CtDdpg,
    Dau,
    Ddpg,
    QLearn,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [Self::CtDdpg, Self::Dau, Self::Ddpg, Self::QLearn];

    pub fn name(self) -> &'static str {
        match self {
            Self::CtDdpg => "ctddpg",
            Self::Dau => "dau",
            Self::Ddpg => "ddpg",
            Self::QLearn => "qlearn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown agent {s:?} (expected ctddpg, dau, ddpg or qlearn)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub h: f64,
    pub beta: f64,
    pub episodes: usize,
    /// Critic, actor and target updates happen once every `update_every`
    /// synchronized environment steps.
    pub update_every: usize,
    pub l_min: usize,
    pub l_max: usize,
    pub sigma_explore: f64,
    pub tau: f64,
    pub lr: f64,
    /// Policy learning rate; `lr` when unset, and 0 freezes the policy.
    pub actor_lr: Option<f64>,
    pub batch: usize,
    pub terminal_weight: f64,
    pub workers: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub buffer_capacity: usize,
    pub eval_every: usize,
    pub eval_rollouts: usize,
    pub record_wall_clock: bool,
}

impl TrainConfig {
    /// Defaults for an environment with horizon `horizon`.
    pub fn defaults(h: f64, beta: f64, hidden_width: usize) -> Self {
        Self {
            h,
            beta,
            episodes: 300,
            update_every: if h < 0.05 - 1e-12 { 5 } else { 1 },
            l_min: 2,
            l_max: 10,
            sigma_explore: 0.1,
            tau: 0.005,
            lr: 3e-4,
            actor_lr: None,
            batch: 256,
            terminal_weight: 0.002,
            workers: 8,
            seed: 0,
            hidden: vec![hidden_width, hidden_width],
            buffer_capacity: 1_000_000,
            eval_every: 10,
            eval_rollouts: 8,
            record_wall_clock: false,
        }
    }

    pub fn actor_lr(&self) -> f64 {
        self.actor_lr.unwrap_or(self.lr)
    }

    pub fn validate(&self, env: &SdeEnv) -> Result<usize> {
        let steps = env.num_steps(self.h)?;
        let bad = |msg: String| Err(Error::Config(msg));
        if (self.beta - env.discount).abs() > 1e-12 {
            return bad(format!("train beta {} differs from env discount {}", self.beta, env.discount));
        }
        if !(1 <= self.l_min && self.l_min <= self.l_max && self.l_max <= steps) {
            return bad(format!("need 1 <= L_min <= L_max <= K, got [{}, {}] with K={steps}", self.l_min, self.l_max));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if self.update_every == 0 || self.batch == 0 || self.workers == 0 || self.eval_every == 0 || self.eval_rollouts == 0 {
            return bad("update_every, batch, workers, eval_every and eval_rollouts must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.actor_lr() >= 0.0) || !(self.sigma_explore >= 0.0) || !(self.terminal_weight >= 0.0) {
            return bad("lr must be positive; actor_lr, sigma_explore and terminal_weight nonnegative".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        Ok(steps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QLearningConfig {
    pub base: TrainConfig,
    pub entropy: f64,
    pub action_samples: usize,
    pub penalty_weight: f64,
}

impl QLearningConfig {
    pub fn from_base(base: TrainConfig) -> Self {
        Self {
            base,
            entropy: 0.1,
            action_samples: 20,
            penalty_weight: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub loss_m: f64,
    pub loss_c: Option<f64>,
    pub loss_policy: f64,
    pub value_grad_nsr: Option<f64>,
}

/// What an update may touch.
pub struct UpdateCtx<'a> {
    pub buffer: &'a mut ReplayBuffer,
    pub rng: &'a mut Stream,
    pub h: f64,
    pub beta: f64,
}

pub trait Learner {
    fn kind(&self) -> AgentKind;

    /// Deterministic policy used for evaluation.
    fn eval_policy(&self) -> &MlpNet;

    /// Collection actions for embedded states, one row per worker. Row `i`
    /// draws its randomness from `rngs[i]`.
    fn behavior(&self, states: ArrayView2<'_, f64>, rngs: &mut [&mut Stream]) -> Result<Array2<f64>>;

    /// One critic update, one actor update and one target update.
    fn update(&mut self, ctx: &mut UpdateCtx<'_>) -> Result<UpdateStats>;

    /// Named networks for checkpoints; the first one is the policy.
    fn networks(&self) -> Vec<(&'static str, &MlpNet)>;
}

/// Builds the learner for `kind` with freshly initialised networks.
pub fn make_learner(kind: AgentKind, cfg: &QLearningConfig, env: &SdeEnv) -> Result<Box<dyn Learner>> {
    let mut init = SeedTree::new(cfg.base.seed).stream(Purpose::Init, 0, 0);
    Ok(match kind {
        AgentKind::CtDdpg => Box::new(CtDdpg::new(&cfg.base, env, false, &mut init)?),
        AgentKind::Dau => Box::new(CtDdpg::new(&cfg.base, env, true, &mut init)?),
        AgentKind::Ddpg => Box::new(DiscreteDdpg::new(&cfg.base, env, &mut init)?),
        AgentKind::QLearn => Box::new(QLearning::new(cfg, env, &mut init)?),
    })
}

pub(crate) fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

/// Adam optimiser bound to one network.
#[derive(Clone, Debug)]
pub(crate) struct Optim {
    state: AdamState,
    lr: f64,
}

impl Optim {
    pub(crate) fn new(net: &MlpNet, lr: f64) -> Self {
        Self {
            state: AdamState::new(net.num_params()),
            lr,
        }
    }

    pub(crate) fn step(&mut self, net: &mut MlpNet, grad: &[f64]) -> Result<()> {
        crate::nn::adam_step(&mut net.params, grad, &mut self.state, self.lr)
    }
}

pub(crate) fn check_finite(what: &'static str, loss: f64, grads: &[&[f64]]) -> Result<()> {
    if loss.is_finite() && grads.iter().all(|g| g.iter().all(|v| v.is_finite())) {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            what,
            episode: 0,
            update: 0,
        })
    }
}

/// Adds `σ z` to every entry, row `i` drawing from `rngs[i]`.
pub(crate) fn add_noise(actions: &mut Array2<f64>, sigma: f64, rngs: &mut [&mut Stream]) {
    if sigma == 0.0 {
        return;
    }
    for (mut row, rng) in actions.rows_mut().into_iter().zip(rngs.iter_mut()) {
        for v in row.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sigma * z;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// Synchronized steps (all workers advance together).
    pub sync_steps: usize,
    pub env_steps: usize,
    pub critic_updates: usize,
    pub actor_updates: usize,
    pub target_updates: usize,
    pub diverged_episodes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub episode: usize,
    pub env_steps: usize,
    pub eval_mean: Option<f64>,
    pub eval_std: Option<f64>,
    pub loss_m: Option<f64>,
    pub loss_c: Option<f64>,
    pub loss_policy: Option<f64>,
    pub nsr_value_grad: Option<f64>,
    pub wall_seconds: Option<f64>,
}

pub const CURVE_HEADER: &str =
    "episode,env_steps,eval_return_mean,eval_return_std,loss_M,loss_C,loss_policy,nsr_value_grad,wall_seconds";

pub fn write_curve_csv<W: Write>(mut w: W, rows: &[CurveRow]) -> Result<()> {
    writeln!(w, "{CURVE_HEADER}")?;
    for r in rows {
        write_curve_row(&mut w, r)?;
    }
    Ok(())
}

pub fn write_curve_row<W: Write>(mut w: W, r: &CurveRow) -> Result<()> {
    writeln!(
        w,
        "{},{},{},{},{},{},{},{},{}",
        r.episode,
        r.env_steps,
        fmt_opt(r.eval_mean),
        fmt_opt(r.eval_std),
        fmt_opt(r.loss_m),
        fmt_opt(r.loss_c),
        fmt_opt(r.loss_policy),
        fmt_opt(r.nsr_value_grad),
        fmt_opt(r.wall_seconds)
    )?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub curve: Vec<CurveRow>,
    pub counters: Counters,
    /// NSR of every update, in order.
    pub update_nsr: Vec<f64>,
}

impl TrainOutput {
    /// First evaluated episode whose return is at least `target − tol·|target|`.
    pub fn episodes_to_reach(&self, target: f64, tol: f64) -> Option<usize> {
        self.curve
            .iter()
            .find(|r| r.eval_mean.is_some_and(|m| m >= target - tol * target.abs()))
            .map(|r| r.episode)
    }

    pub fn final_eval(&self) -> Option<f64> {
        self.curve.iter().rev().find_map(|r| r.eval_mean)
    }
}

/// Called after every evaluation with the 1-based episode count.
pub trait Observer {
    fn on_eval(&mut self, episode: usize, learner: &dyn Learner) -> Result<()>;

    /// Called with every finished curve row, before any evaluation callback.
    fn on_episode(&mut self, _row: &CurveRow) -> Result<()> {
        Ok(())
    }

    /// Checked after every episode; training returns the curve so far when set.
    fn stop_requested(&self) -> bool {
        false
    }
}

impl<F: FnMut(usize, &dyn Learner) -> Result<()>> Observer for F {
    fn on_eval(&mut self, episode: usize, learner: &dyn Learner) -> Result<()> {
        self(episode, learner)
    }
}

pub struct NoObserver;

impl Observer for NoObserver {
    fn on_eval(&mut self, _: usize, _: &dyn Learner) -> Result<()> {
        Ok(())
    }
}

fn embed_rows(out: &mut Array2<f64>, rows: &[usize], states: &[Vec<f64>], t: f64, horizon: f64) {
    let f = time_features(t, horizon);
    let n = states.first().map_or(0, Vec::len);
    for (r, &i) in rows.iter().enumerate() {
        for j in 0..n {
            out[(r, j)] = states[i][j];
        }
        out[(r, n)] = f[0];
        out[(r, n + 1)] = f[1];
    }
}

fn embed(x: &[f64], t: f64, horizon: f64) -> Vec<f64> {
    let f = time_features(t, horizon);
    let mut v = x.to_vec();
    v.extend(f);
    v
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

const EVAL_CHUNK: usize = 2048;

/// Discounted returns of the deterministic policy over `num` rollouts run
/// in lockstep. Draw order per chunk: all initial states, then per step one
/// noise vector per rollout.
pub fn evaluate_returns(env: &SdeEnv, policy: &MlpNet, h: f64, num: usize, rng: &mut Stream) -> Result<Vec<f64>> {
    let steps = env.num_steps(h)?;
    let n = env.state_dim;
    let mut out = Vec::with_capacity(num);
    let mut done = 0;
    while done < num {
        let chunk = (num - done).min(EVAL_CHUNK);
        let mut states: Vec<Vec<f64>> = (0..chunk).map(|_| env.sample_initial(rng)).collect();
        let mut returns = vec![0.0; chunk];
        let rows: Vec<usize> = (0..chunk).collect();
        let mut x = Array2::zeros((chunk, n + 2));
        for k in 0..steps {
            let t = k as f64 * h;
            embed_rows(&mut x, &rows, &states, t, env.horizon);
            let actions = policy.forward_batch(x.view())?;
            let w = (-env.discount * t).exp() * h;
            for i in 0..chunk {
                let mut a = actions.output().row(i).to_vec();
                env.clip_action(&mut a);
                returns[i] += w * env.running_reward(t, &states[i], &a);
                let noise = env.draw_noise(rng);
                states[i] = em_step(env, t, &states[i], &a, h, &noise)?;
            }
        }
        let tail = (-env.discount * env.horizon).exp();
        for i in 0..chunk {
            returns[i] += tail * env.terminal_reward(&states[i]);
        }
        out.extend(returns);
        done += chunk;
    }
    Ok(out)
}

/// Mean and sample standard deviation of [`evaluate_returns`].
pub fn evaluate(env: &SdeEnv, policy: &MlpNet, h: f64, num: usize, rng: &mut Stream) -> Result<(f64, f64)> {
    let r = evaluate_returns(env, policy, h, num, rng)?;
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let std = if r.len() > 1 {
        (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok((mean, std))
}

struct EpisodeAcc {
    loss_m: Vec<f64>,
    loss_c: Vec<f64>,
    loss_policy: Vec<f64>,
    nsr: Vec<f64>,
}

impl EpisodeAcc {
    fn new() -> Self {
        Self {
            loss_m: Vec::new(),
            loss_c: Vec::new(),
            loss_policy: Vec::new(),
            nsr: Vec::new(),
        }
    }

    fn mean(v: &[f64]) -> Option<f64> {
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Shared lockstep training loop.
pub fn train(
    learner: &mut dyn Learner,
    cfg: &TrainConfig,
    env: &SdeEnv,
    observer: &mut dyn Observer,
) -> Result<TrainOutput> {
    let steps = cfg.validate(env)?;
    let seeds = SeedTree::new(cfg.seed);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, seeds.stream(Purpose::Replay, 0, 0));
    let mut update_rng = seeds.stream(Purpose::Update, 0, 0);
    let eval_stream = seeds.stream(Purpose::Eval, 0, 0);
    let n = env.state_dim;
    let h = cfg.h;
    let started = Instant::now();
    let mut counters = Counters::default();
    let mut curve = Vec::with_capacity(cfg.episodes);
    let mut update_nsr = Vec::new();

    for episode in 0..cfg.episodes {
        let mut rngs: Vec<Stream> = (0..cfg.workers)
            .map(|w| seeds.stream(Purpose::Collect, w as u64, episode as u64))
            .collect();
        let mut states: Vec<Vec<f64>> = rngs.iter_mut().map(|r| env.sample_initial(r)).collect();
        let mut ids: Vec<Option<_>> = states
            .iter()
            .map(|x| Some(buffer.begin_episode(h, embed(x, 0.0, env.horizon))))
            .collect();
        let mut acc = EpisodeAcc::new();
        for k in 0..steps {
            let t = k as f64 * h;
            let alive: Vec<usize> = (0..cfg.workers).filter(|&w| ids[w].is_some()).collect();
            if !alive.is_empty() {
                let mut rows = Array2::zeros((alive.len(), n + 2));
                embed_rows(&mut rows, &alive, &states, t, env.horizon);
                let mut alive_rngs: Vec<&mut Stream> = rngs
                    .iter_mut()
                    .enumerate()
                    .filter(|(w, _)| ids[*w].is_some())
                    .map(|(_, r)| r)
                    .collect();
                let actions = learner.behavior(rows.view(), &mut alive_rngs)?;
                for (r, &w) in alive.iter().enumerate() {
                    let mut a = actions.row(r).to_vec();
                    env.clip_action(&mut a);
                    let reward = env.running_reward(t, &states[w], &a);
                    let noise = env.draw_noise(&mut rngs[w]);
                    let id = ids[w].expect("alive");
                    match em_step(env, t, &states[w], &a, h, &noise) {
                        Ok(next) => {
                            buffer.append(id, a, reward, embed(&next, t + h, env.horizon))?;
                            states[w] = next;
                            counters.env_steps += 1;
                        }
                        Err(Error::Diverged { norm, .. }) => {
                            log::warn!("episode {episode} worker {w} diverged at step {k} (|x|={norm})");
                            buffer.discard(id);
                            ids[w] = None;
                            counters.diverged_episodes += 1;
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
            if k + 1 == steps {
                for (w, id) in ids.iter_mut().enumerate() {
                    if let Some(id) = id.take() {
                        buffer.finish(id, env.terminal_reward(&states[w]))?;
                    }
                }
            }
            counters.sync_steps += 1;
            // every worker may have diverged, leaving nothing to learn from
            if counters.sync_steps % cfg.update_every == 0 && buffer.num_transitions() > 0 {
                let mut ctx = UpdateCtx {
                    buffer: &mut buffer,
                    rng: &mut update_rng,
                    h,
                    beta: cfg.beta,
                };
                let stats = learner.update(&mut ctx).map_err(|e| match e {
                    Error::NonFiniteLoss { what, .. } => Error::NonFiniteLoss {
                        what,
                        episode,
                        update: counters.critic_updates,
                    },
                    other => other,
                })?;
                counters.critic_updates += 1;
                counters.actor_updates += 1;
                counters.target_updates += 1;
                acc.loss_m.push(stats.loss_m);
                acc.loss_policy.push(stats.loss_policy);
                if let Some(c) = stats.loss_c {
                    acc.loss_c.push(c);
                }
                if let Some(v) = stats.value_grad_nsr {
                    acc.nsr.push(v);
                    update_nsr.push(v);
                }
            }
        }

        let done = episode + 1;
        let is_eval = done % cfg.eval_every == 0 || done == cfg.episodes;
        let (eval_mean, eval_std) = if is_eval {
            match evaluate(env, learner.eval_policy(), h, cfg.eval_rollouts, &mut eval_stream.clone()) {
                Ok((m, s)) => (Some(m), Some(s)),
                Err(Error::Diverged { .. }) => {
                    log::warn!("evaluation after episode {done} diverged");
                    (Some(f64::NEG_INFINITY), None)
                }
                Err(e) => return Err(e),
            }
        } else {
            (None, None)
        };
        curve.push(CurveRow {
            episode: done,
            env_steps: counters.env_steps,
            eval_mean,
            eval_std,
            loss_m: EpisodeAcc::mean(&acc.loss_m),
            loss_c: EpisodeAcc::mean(&acc.loss_c),
            loss_policy: EpisodeAcc::mean(&acc.loss_policy),
            nsr_value_grad: median(&mut acc.nsr),
            wall_seconds: cfg.record_wall_clock.then(|| started.elapsed().as_secs_f64()),
        });
        observer.on_episode(curve.last().expect("just pushed"))?;
        if is_eval {
            observer.on_eval(done, &*learner)?;
        }
        if observer.stop_requested() {
            log::warn!("stopping after episode {done} on request");
            break;
        }
    }
    Ok(TrainOutput {
        curve,
        counters,
        update_nsr,
    })
}

/// Window length for one update: uniform on `[l_min, l_max]`, clamped to the
/// longest stored episode.
pub(crate) fn draw_window_len(cfg_l: (usize, usize), buffer: &ReplayBuffer, rng: &mut Stream) -> usize {
    let l = if cfg_l.0 == cfg_l.1 { cfg_l.0 } else { rng.random_range(cfg_l.0..=cfg_l.1) };
    l.min(buffer.max_episode_len()).max(1)
}

pub fn train_ct_ddpg(cfg: &TrainConfig, env: &SdeEnv, observer: &mut dyn Observer) -> Result<(TrainOutput, CtDdpg)> {
    let mut init = SeedTree::new(cfg.seed).stream(Purpose::Init, 0, 0);
    let mut agent = CtDdpg::new(cfg, env, false, &mut init)?;
    let out = train(&mut agent, cfg, env, observer)?;
    Ok((out, agent))
}

/// CT-DDPG with `L = 1`.
pub fn train_dau(cfg: &TrainConfig, env: &SdeEnv, observer: &mut dyn Observer) -> Result<(TrainOutput, CtDdpg)> {
    let mut init = SeedTree::new(cfg.seed).stream(Purpose::Init, 0, 0);
    let mut agent = CtDdpg::new(cfg, env, true, &mut init)?;
    let out = train(&mut agent, cfg, env, observer)?;
    Ok((out, agent))
}

pub fn train_ddpg_discrete(cfg: &TrainConfig, env: &SdeEnv, observer: &mut dyn Observer) -> Result<(TrainOutput, DiscreteDdpg)> {
    let mut init = SeedTree::new(cfg.seed).stream(Purpose::Init, 0, 0);
    let mut agent = DiscreteDdpg::new(cfg, env, &mut init)?;
    let out = train(&mut agent, cfg, env, observer)?;
    Ok((out, agent))
}

pub fn train_q_learning(cfg: &QLearningConfig, env: &SdeEnv, observer: &mut dyn Observer) -> Result<(TrainOutput, QLearning)> {
    let mut init = SeedTree::new(cfg.base.seed).stream(Purpose::Init, 0, 0);
    let mut agent = QLearning::new(cfg, env, &mut init)?;
    let out = train(&mut agent, &cfg.base, env, observer)?;
    Ok((out, agent))
}

#[cfg(test)]
mod tests;
