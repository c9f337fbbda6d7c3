//! Controlled diffusions, Euler–Maruyama stepping and episode rollouts.
//!
//! An environment is the tuple of drift `b(t, x, a)`, diffusion `σ(t, x, a)`
//! (an `n × m` matrix), running reward rate `r(t, x, a)`, terminal reward
//! `g(x)`, horizon `T`, discount rate `β` and initial law `ν`. Time is
//! discretised with a uniform step `h` such that `K = T / h` is an integer:
//!
//! ```text
//! x_{k+1} = x_k + b(t_k, x_k, a_k) h + σ(t_k, x_k, a_k) √h ω_k,   ω_k ~ N(0, I_m)
//! ```

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::envs::LqrSpec;
use crate::{Error, Result};

const BINARY_MAGIC: &[u8; 5] = b"CTRL1";

/// Coefficients of a controlled SDE.
///
/// Diffusion matrices are written row-major into `out` (`n * m` entries).
pub trait Dynamics: Send + Sync {
    fn drift(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]);
    fn diffusion(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]);
    fn running_reward(&self, t: f64, x: &[f64], a: &[f64]) -> f64;
    fn terminal_reward(&self, x: &[f64]) -> f64;
    fn sample_initial(&self, rng: &mut dyn RngCore, out: &mut [f64]);
}

/// Per-coordinate action box applied at the environment boundary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipBox {
    pub low: f64,
    pub high: f64,
}

#[derive(Clone)]
pub struct SdeEnv {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub noise_dim: usize,
    pub horizon: f64,
    pub discount: f64,
    pub action_clip: Option<Vec<ClipBox>>,
    dynamics: Arc<dyn Dynamics>,
    lqr: Option<Arc<LqrSpec>>,
}

impl fmt::Debug for SdeEnv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeEnv")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("action_dim", &self.action_dim)
            .field("noise_dim", &self.noise_dim)
            .field("horizon", &self.horizon)
            .field("discount", &self.discount)
            .field("action_clip", &self.action_clip)
            .finish_non_exhaustive()
    }
}

impl SdeEnv {
    pub fn new(
        name: impl Into<String>,
        dims: (usize, usize, usize),
        horizon: f64,
        discount: f64,
        dynamics: Arc<dyn Dynamics>,
    ) -> Result<Self> {
        let (state_dim, action_dim, noise_dim) = dims;
        if state_dim == 0 || action_dim == 0 {
            return Err(Error::InvalidArgument(
                "state and action dimensions must be positive".into(),
            ));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        if !(discount >= 0.0 && discount.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "discount must be nonnegative, got {discount}"
            )));
        }
        Ok(Self {
            name: name.into(),
            state_dim,
            action_dim,
            noise_dim,
            horizon,
            discount,
            action_clip: None,
            dynamics,
            lqr: None,
        })
    }

    pub fn with_action_clip(mut self, clip: Vec<ClipBox>) -> Result<Self> {
        if clip.len() != self.action_dim {
            return Err(Error::Dimension {
                what: "action clip",
                expected: self.action_dim,
                got: clip.len(),
            });
        }
        self.action_clip = Some(clip);
        Ok(self)
    }

    pub(crate) fn with_lqr(mut self, spec: LqrSpec) -> Self {
        self.lqr = Some(Arc::new(spec));
        self
    }

    /// The linear-quadratic description, when the env belongs to that family.
    pub fn lqr(&self) -> Option<&LqrSpec> {
        self.lqr.as_deref()
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }

    /// Number of steps `K = T / h`; rejects step sizes that do not divide `T`.
    pub fn num_steps(&self, h: f64) -> Result<usize> {
        num_steps(self.horizon, h)
    }

    pub fn clip_action(&self, a: &mut [f64]) {
        if let Some(clip) = &self.action_clip {
            for (ai, b) in a.iter_mut().zip(clip) {
                *ai = ai.clamp(b.low, b.high);
            }
        }
    }

    pub fn running_reward(&self, t: f64, x: &[f64], a: &[f64]) -> f64 {
        self.dynamics.running_reward(t, x, a)
    }

    pub fn terminal_reward(&self, x: &[f64]) -> f64 {
        self.dynamics.terminal_reward(x)
    }

    pub fn sample_initial(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let mut x = vec![0.0; self.state_dim];
        self.dynamics.sample_initial(rng, &mut x);
        x
    }

    /// Draws the `m` standard normals of one step.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.noise_dim).map(|_| rng.sample(StandardNormal)).collect()
    }
}

pub fn num_steps(horizon: f64, h: f64) -> Result<usize> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::StepSize { horizon, h });
    }
    let k = (horizon / h).round();
    if k < 1.0 || (k * h - horizon).abs() > 1e-9 * horizon.abs().max(1.0) {
        return Err(Error::StepSize { horizon, h });
    }
    Ok(k as usize)
}

/// One Euler–Maruyama step `x + b h + σ √h ω`. The state is never clipped.
pub fn em_step(env: &SdeEnv, t: f64, x: &[f64], a: &[f64], h: f64, noise: &[f64]) -> Result<Vec<f64>> {
    check_len("state", env.state_dim, x.len())?;
    check_len("action", env.action_dim, a.len())?;
    check_len("noise", env.noise_dim, noise.len())?;
    let n = env.state_dim;
    let m = env.noise_dim;
    let mut drift = vec![0.0; n];
    env.dynamics.drift(t, x, a, &mut drift);
    let mut next: Vec<f64> = x.iter().zip(&drift).map(|(xi, bi)| xi + bi * h).collect();
    if m > 0 {
        let mut sigma = vec![0.0; n * m];
        env.dynamics.diffusion(t, x, a, &mut sigma);
        let sqrt_h = h.sqrt();
        for (i, xi) in next.iter_mut().enumerate() {
            let row = &sigma[i * m..(i + 1) * m];
            let s: f64 = row.iter().zip(noise).map(|(sij, wj)| sij * wj).sum();
            *xi += s * sqrt_h;
        }
    }
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            t,
            norm: norm(x),
            step: None,
        });
    }
    Ok(next)
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { what, expected, got });
    }
    Ok(())
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// A feedback law `(t, x) -> a`.
pub trait Policy {
    fn action(&self, t: f64, x: &[f64]) -> Vec<f64>;
}

impl<F> Policy for F
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    fn action(&self, t: f64, x: &[f64]) -> Vec<f64> {
        self(t, x)
    }
}

/// A discretised episode. Reward rates are stored per unit time, not
/// multiplied by `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub step_size: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub reward_rates: Vec<f64>,
    pub terminal_value: f64,
    pub seed_tag: u64,
}

impl Trajectory {
    pub fn num_steps(&self) -> usize {
        self.actions.len()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    /// `Σ e^{-β k h} r_k h + e^{-β T} g(x_K)`.
    pub fn discounted_return(&self, beta: f64) -> f64 {
        let h = self.step_size;
        let running: f64 = self
            .reward_rates
            .iter()
            .enumerate()
            .map(|(k, r)| (-beta * k as f64 * h).exp() * r * h)
            .sum();
        running + (-beta * self.horizon()).exp() * self.terminal_value
    }

    /// Checks length consistency and uniform spacing of the time grid.
    pub fn validate(&self) -> Result<()> {
        let k = self.actions.len();
        if self.states.len() != k + 1 || self.times.len() != k + 1 || self.reward_rates.len() != k {
            return Err(Error::InvalidArgument(format!(
                "inconsistent trajectory lengths: {} times, {} states, {} actions, {} rewards",
                self.times.len(),
                self.states.len(),
                k,
                self.reward_rates.len()
            )));
        }
        let tol = 1e-9 * self.horizon().abs().max(1.0);
        for (i, t) in self.times.iter().enumerate() {
            if (t - i as f64 * self.step_size).abs() > tol {
                return Err(Error::InvalidArgument(format!(
                    "time grid is not uniform at index {i}"
                )));
            }
        }
        Ok(())
    }

    /// CSV dump: `step,t,x_0..,a_0..,reward_rate`. The final row (step K)
    /// leaves the action columns empty and carries `g(x_K)` in the
    /// `reward_rate` column.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.states.first().map_or(0, Vec::len);
        let d = self.actions.first().map_or(0, Vec::len);
        let mut header = vec!["step".to_string(), "t".to_string()];
        header.extend((0..n).map(|i| format!("x_{i}")));
        header.extend((0..d).map(|i| format!("a_{i}")));
        header.push("reward_rate".into());
        writeln!(w, "{}", header.join(","))?;
        let fmt = crate::report::fmt_f64;
        for k in 0..=self.num_steps() {
            let mut row = vec![k.to_string(), fmt(self.times[k])];
            row.extend(self.states[k].iter().map(|&v| fmt(v)));
            if k < self.num_steps() {
                row.extend(self.actions[k].iter().map(|&v| fmt(v)));
                row.push(fmt(self.reward_rates[k]));
            } else {
                row.extend(std::iter::repeat_n(String::new(), d));
                row.push(fmt(self.terminal_value));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Little-endian binary dump headed by `CTRL1`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.states.first().map_or(0, Vec::len);
        let d = self.actions.first().map_or(0, Vec::len);
        w.write_all(BINARY_MAGIC)?;
        for v in [n as u64, d as u64, self.num_steps() as u64, self.seed_tag] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.step_size.to_le_bytes())?;
        w.write_all(&self.terminal_value.to_le_bytes())?;
        let floats = self
            .times
            .iter()
            .chain(self.states.iter().flatten())
            .chain(self.actions.iter().flatten())
            .chain(self.reward_rates.iter());
        for v in floats {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R, path_hint: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path_hint.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(bad("missing CTRL1 header"));
        }
        let read_u64 = |r: &mut R| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let n = read_u64(&mut r)? as usize;
        let d = read_u64(&mut r)? as usize;
        let k = read_u64(&mut r)? as usize;
        let seed_tag = read_u64(&mut r)?;
        let step_size = f64::from_bits(read_u64(&mut r)?);
        let terminal_value = f64::from_bits(read_u64(&mut r)?);
        let mut read_vec = |len: usize| -> Result<Vec<f64>> {
            (0..len).map(|_| read_u64(&mut r).map(f64::from_bits)).collect()
        };
        let times = read_vec(k + 1)?;
        let flat_states = read_vec((k + 1) * n)?;
        let flat_actions = read_vec(k * d)?;
        let reward_rates = read_vec(k)?;
        let traj = Self {
            step_size,
            times,
            states: flat_states.chunks(n.max(1)).map(<[f64]>::to_vec).collect(),
            actions: flat_actions.chunks(d.max(1)).map(<[f64]>::to_vec).collect(),
            reward_rates,
            terminal_value,
            seed_tag,
        };
        traj.validate().map_err(|e| bad(&e.to_string()))?;
        Ok(traj)
    }
}

/// Rolls out `K = T/h` steps. The action at step `k` is
/// `policy(t_k, x_k) + explore_sigma · z`, clipped by the env; the clipped
/// action is what gets stored.
///
/// Draw order on `rng`: the initial state, then per step `d` exploration
/// normals (only when `explore_sigma > 0`) followed by `m` dynamics normals.
pub fn rollout<P, R>(env: &SdeEnv, policy: &P, h: f64, rng: &mut R, explore_sigma: f64) -> Result<Trajectory>
where
    P: Policy + ?Sized,
    R: RngCore,
{
    rollout_tagged(env, policy, h, rng, explore_sigma, 0)
}

pub fn rollout_tagged<P, R>(
    env: &SdeEnv,
    policy: &P,
    h: f64,
    rng: &mut R,
    explore_sigma: f64,
    seed_tag: u64,
) -> Result<Trajectory>
where
    P: Policy + ?Sized,
    R: RngCore,
{
    if !(explore_sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "explore_sigma must be nonnegative, got {explore_sigma}"
        )));
    }
    let k_steps = env.num_steps(h)?;
    let mut x = env.sample_initial(rng);
    let mut traj = Trajectory {
        step_size: h,
        times: Vec::with_capacity(k_steps + 1),
        states: Vec::with_capacity(k_steps + 1),
        actions: Vec::with_capacity(k_steps),
        reward_rates: Vec::with_capacity(k_steps),
        terminal_value: 0.0,
        seed_tag,
    };
    for k in 0..k_steps {
        let t = k as f64 * h;
        let mut a = policy.action(t, &x);
        check_len("policy output", env.action_dim, a.len())?;
        if explore_sigma > 0.0 {
            for ai in a.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *ai += explore_sigma * z;
            }
        }
        env.clip_action(&mut a);
        let r = env.running_reward(t, &x, &a);
        let noise = env.draw_noise(rng);
        let next = em_step(env, t, &x, &a, h, &noise).map_err(|e| match e {
            Error::Diverged { t, norm, .. } => Error::Diverged { t, norm, step: Some(k) },
            other => other,
        })?;
        traj.times.push(t);
        traj.states.push(std::mem::replace(&mut x, next));
        traj.actions.push(a);
        traj.reward_rates.push(r);
    }
    traj.times.push(k_steps as f64 * h);
    traj.terminal_value = env.terminal_reward(&x);
    traj.states.push(x);
    Ok(traj)
}

/// Monte Carlo estimate of `J` with the discrete-time sum. Returns the mean
/// and `sample_std / √num_rollouts`.
pub fn estimate_return<P, R>(env: &SdeEnv, policy: &P, h: f64, num_rollouts: usize, rng: &mut R) -> Result<(f64, f64)>
where
    P: Policy + ?Sized,
    R: RngCore,
{
    if num_rollouts == 0 {
        return Err(Error::InvalidArgument("num_rollouts must be at least 1".into()));
    }
    let returns = (0..num_rollouts)
        .map(|_| rollout(env, policy, h, rng, 0.0).map(|tr| tr.discounted_return(env.discount)))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_and_std_error(&returns))
}

pub(crate) fn mean_and_std_error(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Closure-backed dynamics for ad-hoc environments.
pub struct FnDynamics {
    state_dim: usize,
    noise_dim: usize,
    drift: Box<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>,
    diffusion: Box<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>,
    running: Box<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>,
    terminal: Box<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    initial: Box<dyn Fn(&mut dyn RngCore, &mut [f64]) + Send + Sync>,
}

impl FnDynamics {
    /// Zero drift, zero diffusion, zero rewards, `x_0 = 0`.
    pub fn zero(state_dim: usize, noise_dim: usize) -> Self {
        Self {
            state_dim,
            noise_dim,
            drift: Box::new(|_, _, _, out| out.fill(0.0)),
            diffusion: Box::new(|_, _, _, out| out.fill(0.0)),
            running: Box::new(|_, _, _| 0.0),
            terminal: Box::new(|_| 0.0),
            initial: Box::new(|_, out| out.fill(0.0)),
        }
    }

    pub fn drift(mut self, f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Box::new(f);
        self
    }

    pub fn diffusion(mut self, f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.diffusion = Box::new(f);
        self
    }

    pub fn running_reward(mut self, f: impl Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.running = Box::new(f);
        self
    }

    pub fn terminal_reward(mut self, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal = Box::new(f);
        self
    }

    pub fn initial(mut self, f: impl Fn(&mut dyn RngCore, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.initial = Box::new(f);
        self
    }

    pub fn into_env(self, name: &str, action_dim: usize, horizon: f64, discount: f64) -> Result<SdeEnv> {
        let dims = (self.state_dim, action_dim, self.noise_dim);
        SdeEnv::new(name, dims, horizon, discount, Arc::new(self))
    }
}

impl Dynamics for FnDynamics {
    fn drift(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, a, out)
    }
    fn diffusion(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, a, out)
    }
    fn running_reward(&self, t: f64, x: &[f64], a: &[f64]) -> f64 {
        (self.running)(t, x, a)
    }
    fn terminal_reward(&self, x: &[f64]) -> f64 {
        (self.terminal)(x)
    }
    fn sample_initial(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        (self.initial)(rng, out)
    }
}
