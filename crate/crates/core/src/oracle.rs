//! Closed-form ground truth for linear-quadratic problems.
//!
//! For a linear policy `a = K x` the value is `V(t, x) = −xᵀP(t)x − c(t)`
//! with
//!
//! ```text
//! Ṗ = βP − (A+BK)ᵀP − P(A+BK) − (Q + KᵀRK),   P(T) = Q_f
//! ċ = βc − tr(σσᵀP),                          c(T) = 0
//! ```
//!
//! and the optimal value solves the Riccati equation
//! `Ṗ = βP − AᵀP − PA + PBR⁻¹BᵀP − Q` with gain `K* = −R⁻¹BᵀP`.
//! Both are integrated backward with classical RK4.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::envs::LqrSpec;
use crate::nn::{time_embed, MlpNet};
use crate::rng::Stream;
use crate::sde::{estimate_return, mean_and_std_error, num_steps, SdeEnv};
use crate::{Error, Result};

#[derive(Clone, Debug)]
enum GainRule {
    /// Gains at grid nodes, interpolated linearly.
    Nodes(Vec<DMatrix<f64>>),
    /// `K(t) = M·P(t)`, used for the Riccati solution with `M = −R⁻¹Bᵀ`.
    FromP(DMatrix<f64>),
}

#[derive(Clone, Debug)]
pub struct LqrValueSolution {
    pub ode_step: f64,
    pub horizon: f64,
    /// `P` at `t_i = i·ode_step`.
    pub p: Vec<DMatrix<f64>>,
    pub c: Vec<f64>,
    gain: GainRule,
}

impl LqrValueSolution {
    fn locate(&self, t: f64) -> (usize, f64) {
        let last = self.p.len() - 1;
        let s = (t / self.ode_step).clamp(0.0, last as f64);
        let i = (s.floor() as usize).min(last.saturating_sub(1));
        (i, s - i as f64)
    }

    pub fn p_at(&self, t: f64) -> DMatrix<f64> {
        let (i, w) = self.locate(t);
        if w == 0.0 || self.p.len() == 1 {
            return self.p[i].clone();
        }
        &self.p[i] * (1.0 - w) + &self.p[i + 1] * w
    }

    pub fn c_at(&self, t: f64) -> f64 {
        let (i, w) = self.locate(t);
        if w == 0.0 || self.c.len() == 1 {
            return self.c[i];
        }
        self.c[i] * (1.0 - w) + self.c[i + 1] * w
    }

    pub fn gain_at(&self, t: f64) -> DMatrix<f64> {
        match &self.gain {
            GainRule::Nodes(k) => {
                let (i, w) = self.locate(t);
                if w == 0.0 || k.len() == 1 {
                    k[i].clone()
                } else {
                    &k[i] * (1.0 - w) + &k[i + 1] * w
                }
            }
            GainRule::FromP(m) => m * self.p_at(t),
        }
    }

    /// `V(t, x) = −xᵀP(t)x − c(t)`.
    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        -(xv.transpose() * self.p_at(t) * &xv)[(0, 0)] - self.c_at(t)
    }

    /// `J = E_{x₀∼N(0, Σ₀)} V(0, x₀) = −tr(P(0)Σ₀) − c(0)`.
    pub fn expected_initial_value(&self, init_cov: &DMatrix<f64>) -> f64 {
        -(&self.p[0] * init_cov).trace() - self.c[0]
    }
}

fn backward_rk4<F>(spec: &LqrSpec, ode_step: f64, rhs: F) -> Result<(Vec<DMatrix<f64>>, Vec<f64>)>
where
    F: Fn(f64, &DMatrix<f64>, f64) -> (DMatrix<f64>, f64),
{
    spec.validate()?;
    let steps = num_steps(spec.horizon, ode_step)?;
    let mut p = vec![DMatrix::zeros(0, 0); steps + 1];
    let mut c = vec![0.0; steps + 1];
    p[steps] = spec.qf.clone();
    let s = ode_step;
    for i in (0..steps).rev() {
        let t = (i + 1) as f64 * s;
        let (p0, c0) = (&p[i + 1], c[i + 1]);
        let (k1p, k1c) = rhs(t, p0, c0);
        let (k2p, k2c) = rhs(t - s / 2.0, &(p0 - &k1p * (s / 2.0)), c0 - k1c * s / 2.0);
        let (k3p, k3c) = rhs(t - s / 2.0, &(p0 - &k2p * (s / 2.0)), c0 - k2c * s / 2.0);
        let (k4p, k4c) = rhs(t - s, &(p0 - &k3p * s), c0 - k3c * s);
        let mut next = p0 - (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (s / 6.0);
        next = (&next + next.transpose()) * 0.5;
        let next_c = c0 - (k1c + 2.0 * k2c + 2.0 * k3c + k4c) * s / 6.0;
        if !next.iter().all(|v| v.is_finite()) || !next_c.is_finite() {
            return Err(Error::OdeBlowUp { t: i as f64 * s });
        }
        p[i] = next;
        c[i] = next_c;
    }
    Ok((p, c))
}

/// Value of the constant linear policy `a = K x`.
pub fn lqr_policy_value(spec: &LqrSpec, gain: &DMatrix<f64>, ode_step: f64) -> Result<LqrValueSolution> {
    lqr_policy_value_with(spec, |_| gain.clone(), ode_step)
}

/// Value of a time-varying linear policy `a = K(t) x`.
pub fn lqr_policy_value_with<G>(spec: &LqrSpec, gain: G, ode_step: f64) -> Result<LqrValueSolution>
where
    G: Fn(f64) -> DMatrix<f64>,
{
    let (n, d) = (spec.state_dim(), spec.action_dim());
    let probe = gain(0.0);
    if probe.shape() != (d, n) {
        return Err(Error::Dimension {
            what: "policy gain",
            expected: d * n,
            got: probe.len(),
        });
    }
    let cov = spec.noise_cov();
    let rhs = |t: f64, p: &DMatrix<f64>, c: f64| {
        let k = gain(t);
        let closed = &spec.a + &spec.b * &k;
        let pdot = p * spec.beta - closed.transpose() * p - p * &closed - (&spec.q + k.transpose() * &spec.r * &k);
        let cdot = spec.beta * c - (&cov * p).trace();
        (pdot, cdot)
    };
    let (p, c) = backward_rk4(spec, ode_step, rhs)?;
    let nodes = (0..p.len()).map(|i| gain(i as f64 * ode_step)).collect();
    Ok(LqrValueSolution {
        ode_step,
        horizon: spec.horizon,
        p,
        c,
        gain: GainRule::Nodes(nodes),
    })
}

/// Riccati solution; its `gain_at` is `K*(t)` and its value is optimal.
pub fn lqr_optimal_gain(spec: &LqrSpec, ode_step: f64) -> Result<LqrValueSolution> {
    spec.validate()?;
    let r_inv = spec
        .r
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("R"))?
        .inverse();
    let bt = spec.b.transpose();
    let s_mat = &spec.b * &r_inv * &bt;
    let cov = spec.noise_cov();
    let rhs = |_t: f64, p: &DMatrix<f64>, c: f64| {
        let pdot = p * spec.beta - spec.a.transpose() * p - p * &spec.a + p * &s_mat * p - &spec.q;
        (pdot, spec.beta * c - (&cov * p).trace())
    };
    let (p, c) = backward_rk4(spec, ode_step, rhs)?;
    Ok(LqrValueSolution {
        ode_step,
        horizon: spec.horizon,
        p,
        c,
        gain: GainRule::FromP(-(&r_inv * &bt)),
    })
}

/// `A(t,x,a) = −2(a − Kx)ᵀBᵀP(t)x − aᵀRa + (Kx)ᵀR(Kx)`.
pub fn lqr_advantage_rate(sol: &LqrValueSolution, spec: &LqrSpec, t: f64, x: &[f64], a: &[f64]) -> f64 {
    let xv = DVector::from_column_slice(x);
    let av = DVector::from_column_slice(a);
    let kx = sol.gain_at(t) * &xv;
    let px = sol.p_at(t) * &xv;
    let diff = &av - &kx;
    -2.0 * (diff.transpose() * spec.b.transpose() * px)[(0, 0)] - (av.transpose() * &spec.r * &av)[(0, 0)]
        + (kx.transpose() * &spec.r * &kx)[(0, 0)]
}

/// `∂_a A = −2BᵀP(t)x − 2Ra`.
pub fn lqr_advantage_action_grad(sol: &LqrValueSolution, spec: &LqrSpec, t: f64, x: &[f64], a: &[f64]) -> Vec<f64> {
    let xv = DVector::from_column_slice(x);
    let av = DVector::from_column_slice(a);
    let g = -(spec.b.transpose() * sol.p_at(t) * xv) * 2.0 - &spec.r * av * 2.0;
    g.iter().copied().collect()
}

/// A differentiable policy family `μ(t, x; φ)`.
#[derive(Clone, Debug)]
pub enum ParamPolicy {
    /// `a = K x`, `φ = vec(K)` row-major (`d × n`).
    Linear { state_dim: usize, action_dim: usize },
    /// `a = net(x̃)` on the time-embedded state.
    Mlp { sizes: Vec<usize>, horizon: f64 },
}

impl ParamPolicy {
    pub fn num_params(&self) -> usize {
        match self {
            Self::Linear { state_dim, action_dim } => state_dim * action_dim,
            Self::Mlp { sizes, .. } => crate::nn::param_count(sizes),
        }
    }

    pub fn action(&self, params: &[f64], t: f64, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Linear { state_dim, action_dim } => {
                check_params(params.len(), state_dim * action_dim)?;
                Ok((0..*action_dim)
                    .map(|i| (0..*state_dim).map(|j| params[i * state_dim + j] * x[j]).sum())
                    .collect())
            }
            Self::Mlp { sizes, horizon } => {
                let net = MlpNet::from_params(sizes, params.to_vec())?;
                net.forward(&time_embed(t, x, *horizon)?)
            }
        }
    }

    /// `∂_φ μᵀ · cot`.
    pub fn vjp(&self, params: &[f64], t: f64, x: &[f64], cot: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Linear { state_dim, action_dim } => {
                check_params(params.len(), state_dim * action_dim)?;
                let mut g = vec![0.0; params.len()];
                for i in 0..*action_dim {
                    for j in 0..*state_dim {
                        g[i * state_dim + j] = cot[i] * x[j];
                    }
                }
                Ok(g)
            }
            Self::Mlp { sizes, horizon } => {
                let net = MlpNet::from_params(sizes, params.to_vec())?;
                Ok(net.grads(&time_embed(t, x, *horizon)?, cot)?.0)
            }
        }
    }

    /// Gain matrix for linear policies.
    pub fn gain(&self, params: &[f64]) -> Option<DMatrix<f64>> {
        match self {
            Self::Linear { state_dim, action_dim } => Some(DMatrix::from_row_slice(*action_dim, *state_dim, params)),
            Self::Mlp { .. } => None,
        }
    }
}

fn check_params(got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::Dimension {
            what: "policy parameters",
            expected,
            got,
        });
    }
    Ok(())
}

/// Central differences `(Ĵ(φ+εu) − Ĵ(φ−εu)) / 2ε` per direction, with every
/// estimate driven by a clone of `common_noise`.
pub fn finite_diff_policy_gradient(
    env: &SdeEnv,
    policy: &ParamPolicy,
    params: &[f64],
    directions: &[Vec<f64>],
    eps: f64,
    num_rollouts: usize,
    h: f64,
    common_noise: &Stream,
) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let estimate = |phi: &[f64]| -> Result<f64> {
        let mut rng = common_noise.clone();
        let pol = |t: f64, x: &[f64]| policy.action(phi, t, x).expect("parameter count checked");
        Ok(estimate_return(env, &pol, h, num_rollouts, &mut rng)?.0)
    };
    policy.action(params, 0.0, &vec![0.0; env.state_dim])?;
    directions
        .iter()
        .map(|u| {
            check_params(u.len(), params.len())?;
            let plus: Vec<f64> = params.iter().zip(u).map(|(p, d)| p + eps * d).collect();
            let minus: Vec<f64> = params.iter().zip(u).map(|(p, d)| p - eps * d).collect();
            Ok((estimate(&plus)? - estimate(&minus)?) / (2.0 * eps))
        })
        .collect()
}

/// Full gradient from finite differences along the coordinate axes.
pub fn finite_diff_gradient(
    env: &SdeEnv,
    policy: &ParamPolicy,
    params: &[f64],
    eps: f64,
    num_rollouts: usize,
    h: f64,
    common_noise: &Stream,
) -> Result<Vec<f64>> {
    let dirs: Vec<Vec<f64>> = (0..params.len())
        .map(|i| {
            let mut e = vec![0.0; params.len()];
            e[i] = 1.0;
            e
        })
        .collect();
    finite_diff_policy_gradient(env, policy, params, &dirs, eps, num_rollouts, h, common_noise)
}

/// Undiscounted per-step terms `∂_φμ(x̃_k)ᵀ ∂_aA(t_k, x_k, μ) h` of one
/// rollout of the deterministic policy.
pub fn dpg_step_terms<R: RngCore>(
    env: &SdeEnv,
    sol: &LqrValueSolution,
    policy: &ParamPolicy,
    params: &[f64],
    h: f64,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let spec = env
        .lqr()
        .ok_or_else(|| Error::InvalidArgument("DPG oracle needs an LQR environment".into()))?;
    let steps = env.num_steps(h)?;
    let mut x = env.sample_initial(rng);
    let mut terms = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = k as f64 * h;
        let a = policy.action(params, t, &x)?;
        let da = lqr_advantage_action_grad(sol, spec, t, &x, &a);
        terms.push(policy.vjp(params, t, &x, &da)?.into_iter().map(|v| v * h).collect());
        let noise = env.draw_noise(rng);
        x = crate::sde::em_step(env, t, &x, &a, h, &noise)?;
    }
    Ok(terms)
}

/// Per-rollout samples of `Σ_k e^{−βkh} ∂_φμ(x̃_k)ᵀ ∂_aA(t_k, x_k, μ) h`.
pub fn dpg_samples<R: RngCore>(
    env: &SdeEnv,
    sol: &LqrValueSolution,
    policy: &ParamPolicy,
    params: &[f64],
    num_rollouts: usize,
    h: f64,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    (0..num_rollouts)
        .map(|_| {
            let terms = dpg_step_terms(env, sol, policy, params, h, rng)?;
            let mut g = vec![0.0; params.len()];
            for (k, term) in terms.iter().enumerate() {
                let w = (-env.discount * k as f64 * h).exp();
                for (gi, v) in g.iter_mut().zip(term) {
                    *gi += w * v;
                }
            }
            Ok(g)
        })
        .collect()
}

/// Monte Carlo DPG formula; returns the mean gradient and per-coordinate
/// standard errors.
pub fn dpg_estimate<R: RngCore>(
    env: &SdeEnv,
    sol: &LqrValueSolution,
    policy: &ParamPolicy,
    params: &[f64],
    num_rollouts: usize,
    h: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let samples = dpg_samples(env, sol, policy, params, num_rollouts, h, rng)?;
    Ok(column_stats(&samples))
}

fn column_stats(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = samples.first().map_or(0, Vec::len);
    (0..dim)
        .map(|j| {
            let col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
            mean_and_std_error(&col)
        })
        .unzip()
}

pub struct MartingaleResidual {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
}

impl MartingaleResidual {
    pub fn z_scores(&self) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std_error)
            .map(|(m, s)| if *s > 0.0 { m / s } else if *m == 0.0 { 0.0 } else { f64::INFINITY })
            .collect()
    }
}

/// Per-test-function mean of
/// `Σ_k ζ(t_k,x_k,a_k)·(e^{−β(k+1)h}V̂_{k+1} − e^{−βkh}V̂_k + e^{−βkh}[r_k − q̂_k]h)`
/// over trajectories of the behavior policy.
#[allow(clippy::too_many_arguments)]
pub fn martingale_residual<V, Q, B, Z, R>(
    value: V,
    adv: Q,
    env: &SdeEnv,
    behavior: B,
    test_fns: Z,
    h: f64,
    num_trajectories: usize,
    rng: &mut R,
) -> Result<MartingaleResidual>
where
    V: Fn(f64, &[f64]) -> f64,
    Q: Fn(f64, &[f64], &[f64]) -> f64,
    B: Fn(f64, &[f64], &mut R) -> Vec<f64>,
    Z: Fn(f64, &[f64], &[f64]) -> Vec<f64>,
    R: RngCore,
{
    let steps = env.num_steps(h)?;
    let beta = env.discount;
    let mut samples = Vec::with_capacity(num_trajectories);
    for _ in 0..num_trajectories {
        let mut x = env.sample_initial(rng);
        let mut acc: Vec<f64> = Vec::new();
        let mut v_now = value(0.0, &x);
        for k in 0..steps {
            let t = k as f64 * h;
            let mut a = behavior(t, &x, rng);
            env.clip_action(&mut a);
            let r = env.running_reward(t, &x, &a);
            let zeta = test_fns(t, &x, &a);
            let noise = env.draw_noise(rng);
            let next = crate::sde::em_step(env, t, &x, &a, h, &noise)?;
            let t_next = (k + 1) as f64 * h;
            let v_next = value(t_next, &next);
            let disc = (-beta * t).exp();
            let dm = (-beta * t_next).exp() * v_next - disc * v_now + disc * (r - adv(t, &x, &a)) * h;
            if acc.is_empty() {
                acc = vec![0.0; zeta.len()];
            }
            for (s, z) in acc.iter_mut().zip(&zeta) {
                *s += z * dm;
            }
            x = next;
            v_now = v_next;
        }
        samples.push(acc);
    }
    let (mean, std_error) = column_stats(&samples);
    Ok(MartingaleResidual { mean, std_error })
}

/// `{1, x_i, x_i x_j (i ≤ j), a_j}` followed by `extra`.
pub fn default_test_functions(x: &[f64], a: &[f64], extra: f64) -> Vec<f64> {
    let mut out = vec![1.0];
    out.extend_from_slice(x);
    for i in 0..x.len() {
        for j in i..x.len() {
            out.push(x[i] * x[j]);
        }
    }
    out.extend_from_slice(a);
    out.push(extra);
    out
}

/// Behavior policy `K(t)x + σz` for residual tests.
pub fn noisy_linear_behavior<'a, R: Rng>(sol: &'a LqrValueSolution, sigma: f64) -> impl Fn(f64, &[f64], &mut R) -> Vec<f64> + 'a {
    move |t, x, rng| {
        let kx = sol.gain_at(t) * DVector::from_column_slice(x);
        kx.iter()
            .map(|v| {
                let z: f64 = rng.sample(StandardNormal);
                v + sigma * z
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{double_integrator_spec, make_lqr, ou_1d_spec};
    use crate::rng::{Purpose, SeedTree};

    fn scalar_spec(a: f64, b: f64, q: f64, r: f64, qf: f64, sigma: f64, horizon: f64, beta: f64) -> LqrSpec {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        LqrSpec {
            a: m(a),
            b: m(b),
            q: m(q),
            r: m(r),
            qf: m(qf),
            noise: m(sigma),
            horizon,
            beta,
            init_cov: m(1.0),
        }
    }

    #[test]
    fn pure_running_cost_is_linear_in_time_to_go() {
        let spec = scalar_spec(0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 2.0, 0.0);
        // the gain still pays its control cost: P = (1 + K²)(T − t)
        for k in [0.0, 0.7] {
            let sol = lqr_policy_value(&spec, &DMatrix::from_element(1, 1, k), 0.01).unwrap();
            for i in [0, 50, 123, 200] {
                let t = i as f64 * 0.01;
                assert!((sol.p[i][(0, 0)] - (1.0 + k * k) * (2.0 - t)).abs() < 1e-12);
                assert!(sol.c[i].abs() < 1e-14);
            }
            assert!((sol.value(0.5, &[2.0]) + (1.0 + k * k) * 4.0 * 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_offset_closed_form() {
        let sigma: f64 = 0.6;
        let spec = scalar_spec(0.0, 0.0, 1.0, 1.0, 0.0, sigma, 2.0, 0.0);
        let sol = lqr_policy_value(&spec, &DMatrix::zeros(1, 1), 0.01).unwrap();
        for i in [0, 77, 200] {
            let t = i as f64 * 0.01;
            let expected = sigma * sigma * (2.0 - t).powi(2) / 2.0;
            assert!((sol.c[i] - expected).abs() < 1e-12);
        }
        assert_eq!(sol.p.last().unwrap(), &spec.qf);
    }

    #[test]
    fn ou_closed_form_with_discount() {
        let (theta, sigma, horizon, beta) = (1.0, 1.0, 1.0, 0.8);
        let spec = ou_1d_spec(theta, sigma, horizon, beta).unwrap();
        let sol = lqr_policy_value(&spec, &DMatrix::zeros(1, 1), 1e-3).unwrap();
        let k = beta + 2.0 * theta;
        let p = |t: f64| 1.0 / k + (1.0 - 1.0 / k) * (-k * (horizon - t)).exp();
        // c(0) = ∫₀ᵀ e^{−βs} σ² P(s) ds in closed form
        let c0 = sigma * sigma
            * ((1.0 - (-beta * horizon).exp()) / (beta * k)
                + (1.0 - 1.0 / k) * (-k * horizon).exp() * ((k - beta) * horizon).exp_m1() / (k - beta));
        assert!((sol.p[0][(0, 0)] - p(0.0)).abs() < 1e-12);
        assert!((sol.c[0] - c0).abs() < 1e-11);
    }

    #[test]
    fn zero_cost_riccati_is_zero() {
        let mut spec = double_integrator_spec(0.3, 1.0, 1.0, 0.5);
        spec.q = DMatrix::zeros(2, 2);
        spec.qf = DMatrix::zeros(2, 2);
        let sol = lqr_optimal_gain(&spec, 0.01).unwrap();
        assert!(sol.p.iter().all(|p| p.abs().max() == 0.0));
        assert!(sol.gain_at(0.3).abs().max() == 0.0);
    }

    #[test]
    fn optimal_gain_is_stationary_and_dominant() {
        let spec = double_integrator_spec(0.3, 0.5, 1.0, 0.8);
        let opt = lqr_optimal_gain(&spec, 0.001).unwrap();
        let mut rng = SeedTree::new(4).stream(Purpose::Oracle, 0, 0);
        for _ in 0..20 {
            let t: f64 = rng.random_range(0.0..1.0);
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let kx = opt.gain_at(t) * DVector::from_column_slice(&x);
            let g = lqr_advantage_action_grad(&opt, &spec, t, &x, kx.as_slice());
            assert!(g[0].abs() < 1e-12);
            assert!(lqr_advantage_rate(&opt, &spec, t, &x, kx.as_slice()).abs() < 1e-12);
            let other = [kx[0] + 0.3];
            assert!(lqr_advantage_rate(&opt, &spec, t, &x, &other) < 0.0);
        }
        let j_star = opt.expected_initial_value(&spec.init_cov);
        for _ in 0..10 {
            let k = DMatrix::from_row_slice(1, 2, &[rng.random_range(-3.0..0.5), rng.random_range(-3.0..0.5)]);
            let sol = lqr_policy_value(&spec, &k, 0.001).unwrap();
            assert!(sol.expected_initial_value(&spec.init_cov) <= j_star + 1e-9);
        }
        // the Riccati value equals the Lyapunov value of its own gain
        let own = lqr_policy_value_with(&spec, |t| opt.gain_at(t), 0.001).unwrap();
        assert!((own.expected_initial_value(&spec.init_cov) - j_star).abs() < 1e-6);
    }

    #[test]
    fn unstable_gain_blows_up() {
        let spec = scalar_spec(0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 10.0, 0.0);
        let err = lqr_policy_value(&spec, &DMatrix::from_element(1, 1, 100.0), 0.1).unwrap_err();
        assert!(matches!(err, Error::OdeBlowUp { .. }));
        assert!(lqr_policy_value(&spec, &DMatrix::zeros(1, 1), 0.3).is_err());
    }

    #[test]
    fn finite_differences_vanish_when_policy_is_irrelevant() {
        let mut spec = ou_1d_spec(1.0, 0.5, 1.0, 0.0).unwrap();
        spec.b = DMatrix::zeros(1, 1);
        spec.r = DMatrix::from_element(1, 1, 1e-9);
        let env = make_lqr(spec).unwrap();
        let pol = ParamPolicy::Linear { state_dim: 1, action_dim: 1 };
        let noise = SeedTree::new(1).stream(Purpose::Oracle, 0, 0);
        let g = finite_diff_gradient(&env, &pol, &[0.0], 1e-3, 50, 0.1, &noise).unwrap();
        // only the 1e-9 control cost remains, and it is even in K at K = 0
        assert!(g[0].abs() < 1e-9);
    }

    #[test]
    fn dpg_matches_finite_differences_on_scalar_lqr() {
        let spec = ou_1d_spec(1.0, 0.5, 1.0, 0.8).unwrap();
        let env = make_lqr(spec.clone()).unwrap();
        let pol = ParamPolicy::Linear { state_dim: 1, action_dim: 1 };
        let params = [-0.5];
        let h = 0.01;
        let sol = lqr_policy_value(&spec, &pol.gain(&params).unwrap(), h / 10.0).unwrap();
        let mut rng = SeedTree::new(2).stream(Purpose::Oracle, 0, 0);
        let (dpg, _) = dpg_estimate(&env, &sol, &pol, &params, 4000, h, &mut rng).unwrap();
        let noise = SeedTree::new(2).stream(Purpose::Oracle, 1, 0);
        let fd = finite_diff_gradient(&env, &pol, &params, 1e-3, 4000, h, &noise).unwrap();
        assert!((dpg[0] - fd[0]).abs() < 0.05 * fd[0].abs(), "dpg {dpg:?} fd {fd:?}");
    }

    #[test]
    fn discount_reweights_dpg_samples() {
        let spec = ou_1d_spec(1.0, 0.5, 1.0, 0.0).unwrap();
        let pol = ParamPolicy::Linear { state_dim: 1, action_dim: 1 };
        let sol = lqr_policy_value(&spec, &DMatrix::from_element(1, 1, -0.5), 0.01).unwrap();
        let undiscounted = make_lqr(spec.clone()).unwrap();
        let discounted = make_lqr(LqrSpec { beta: 0.8, ..spec }).unwrap();
        let rng = SeedTree::new(3).stream(Purpose::Oracle, 0, 0);
        let h = 0.1;
        let terms0 = dpg_step_terms(&undiscounted, &sol, &pol, &[-0.5], h, &mut rng.clone()).unwrap();
        let terms1 = dpg_step_terms(&discounted, &sol, &pol, &[-0.5], h, &mut rng.clone()).unwrap();
        assert_eq!(terms0, terms1);
        let s0 = dpg_samples(&undiscounted, &sol, &pol, &[-0.5], 1, h, &mut rng.clone()).unwrap();
        let s1 = dpg_samples(&discounted, &sol, &pol, &[-0.5], 1, h, &mut rng.clone()).unwrap();
        let plain: f64 = terms0.iter().map(|t| t[0]).sum();
        let weighted: f64 = terms0.iter().enumerate().map(|(k, t)| (-0.8 * k as f64 * h).exp() * t[0]).sum();
        assert!((s0[0][0] - plain).abs() < 1e-14);
        assert!((s1[0][0] - weighted).abs() < 1e-14);
    }

    #[test]
    fn zero_test_function_gives_zero_residual() {
        let spec = ou_1d_spec(1.0, 0.5, 1.0, 0.8).unwrap();
        let env = make_lqr(spec.clone()).unwrap();
        let sol = lqr_policy_value(&spec, &DMatrix::zeros(1, 1), 0.01).unwrap();
        let mut rng = SeedTree::new(5).stream(Purpose::Oracle, 0, 0);
        let res = martingale_residual(
            |t, x| sol.value(t, x),
            |t, x, a| lqr_advantage_rate(&sol, &spec, t, x, a),
            &env,
            noisy_linear_behavior(&sol, 0.3),
            |_, _, _| vec![0.0],
            0.1,
            20,
            &mut rng,
        )
        .unwrap();
        assert_eq!(res.mean, vec![0.0]);
        assert_eq!(res.z_scores(), vec![0.0]);
    }
}
