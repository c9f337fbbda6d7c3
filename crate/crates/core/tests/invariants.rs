use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

use ctrl_core::critic::{adv_action_grad, reparam_q, CriticNets};
use ctrl_core::actor::policy_loss;
use ctrl_core::envs::{double_integrator_spec, make_lqr, make_ou_1d, ou_1d_spec};
use ctrl_core::nn::{stack_rows, time_embed, MlpNet};
use ctrl_core::oracle::{lqr_advantage_rate, lqr_policy_value, ParamPolicy};
use ctrl_core::rng::{Purpose, SeedTree};
use ctrl_core::sde::{em_step, estimate_return, FnDynamics};

fn random_nets(seed: u64, n: usize, d: usize, width: usize) -> (CriticNets, MlpNet) {
    let mut rng = SeedTree::new(seed).stream(Purpose::Init, 0, 0);
    let value = MlpNet::init(&[n + 2, width, 1], &mut rng, 1.0).unwrap();
    let adv = MlpNet::init(&[n + 2 + d, width, width, 1], &mut rng, 1.0).unwrap();
    let policy = MlpNet::init(&[n + 2, width, d], &mut rng, 1.0).unwrap();
    (CriticNets::new(value, adv).unwrap(), policy)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reparameterized_q_vanishes_on_policy(seed in 0u64..10_000, t in 0.0f64..1.0, x0 in -3.0f64..3.0, x1 in -3.0f64..3.0) {
        let (nets, policy) = random_nets(seed, 2, 1, 8);
        let xt = time_embed(t, &[x0, x1], 1.0).unwrap();
        let mu = policy.forward(&xt).unwrap();
        prop_assert!(reparam_q(&nets, &policy, &xt, &mu).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn em_increment_covariance_is_sigma_sigma_t_h(s0 in -2.0f64..2.0, s1 in -2.0f64..2.0, s2 in -2.0f64..2.0, h in 1e-4f64..0.5) {
        // with state-independent diffusion x' − x'(ω=0) = σ√h ω, so Cov(x') = σσᵀh
        let mut spec = double_integrator_spec(0.0, 1.0, 1.0, 0.0);
        spec.noise = DMatrix::from_row_slice(2, 2, &[s0, 0.0, s1, s2]);
        let env = make_lqr(spec.clone()).unwrap();
        let x = [0.3, -0.7];
        let a = [0.2];
        let base = em_step(&env, 0.0, &x, &a, h, &[0.0, 0.0]).unwrap();
        let cols: Vec<Vec<f64>> = [[1.0, 0.0], [0.0, 1.0]]
            .iter()
            .map(|w| em_step(&env, 0.0, &x, &a, h, w).unwrap().iter().zip(&base).map(|(p, b)| p - b).collect())
            .collect();
        let cov = spec.noise_cov() * h;
        for i in 0..2 {
            for j in 0..2 {
                let emp = cols[0][i] * cols[0][j] + cols[1][i] * cols[1][j];
                prop_assert!((emp - cov[(i, j)]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn lyapunov_value_satisfies_bellman_pde(k in -3.0f64..0.5, t in 0.05f64..0.95, x in -2.0f64..2.0) {
        // finite difference in t plus analytic x-derivatives, at the policy's own action
        let spec = ou_1d_spec(1.0, 0.5, 1.0, 0.8).unwrap();
        let ode_step = 1e-3;
        let sol = lqr_policy_value(&spec, &DMatrix::from_element(1, 1, k), ode_step).unwrap();
        let v = |t: f64| sol.value(t, &[x]);
        let dv_dt = (v(t + ode_step) - v(t - ode_step)) / (2.0 * ode_step);
        let p = sol.p_at(t)[(0, 0)];
        let a = k * x;
        let residual = dv_dt + (-x + a) * (-2.0 * p * x) + 0.5 * 0.25 * (-2.0 * p) - 0.8 * v(t) - x * x - 0.1 * a * a;
        prop_assert!(residual.abs() <= 50.0 * ode_step * (1.0 + x * x), "residual {residual}");
    }

    #[test]
    fn policy_loss_gradient_is_the_batch_dpg_direction(seed in 0u64..10_000, h in 0.001f64..0.1) {
        let (nets, policy) = random_nets(seed, 1, 1, 6);
        let mut rng = SeedTree::new(seed).stream(Purpose::Replay, 0, 0);
        let raw: Vec<(f64, f64)> = (0..5).map(|_| (rng.random_range(0.0..1.0), rng.random_range(-2.0..2.0))).collect();
        let states: Vec<Vec<f64>> = raw.iter().map(|&(t, x)| time_embed(t, &[x], 1.0).unwrap()).collect();
        let (_, grad) = policy_loss(&policy, &nets.adv, &states, h).unwrap();
        let x = stack_rows(&states, 3);
        let mu = policy.forward_batch(x.view()).unwrap().output().clone();
        let (_, da) = adv_action_grad(&nets.adv, x.view(), mu.view(), &[1.0; 5]).unwrap();
        let family = ParamPolicy::Mlp { sizes: policy.layer_sizes().to_vec(), horizon: 1.0 };
        let mut expected = vec![0.0; policy.num_params()];
        for (i, &(t, x)) in raw.iter().enumerate() {
            let g = family.vjp(&policy.params, t, &[x], &[da[(i, 0)]]).unwrap();
            for (e, v) in expected.iter_mut().zip(g) {
                *e -= h / 5.0 * v;
            }
        }
        for (a, b) in grad.iter().zip(&expected) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn monte_carlo_return_matches_the_oracle() {
    let spec = ou_1d_spec(1.0, 0.5, 1.0, 0.8).unwrap();
    let env = make_lqr(spec.clone()).unwrap();
    let k = -1.0;
    let h = 0.002;
    let sol = lqr_policy_value(&spec, &DMatrix::from_element(1, 1, k), h / 10.0).unwrap();
    let oracle = sol.expected_initial_value(&spec.init_cov);
    let mut rng = SeedTree::new(11).stream(Purpose::Eval, 0, 0);
    let (mean, se) = estimate_return(&env, &|_: f64, x: &[f64]| vec![k * x[0]], h, 10_000, &mut rng).unwrap();
    assert!((mean - oracle).abs() <= 3.0 * se, "mean {mean} ± {se}, oracle {oracle}");
}

#[test]
fn halving_the_step_halves_the_deterministic_error() {
    // dx = −x dt, x₀ = 1, r = −x², β = 0.5: J = −(1 − e^{−2.5T})/2.5 − e^{−2.5T}
    let horizon = 1.0;
    let env = FnDynamics::zero(1, 1)
        .drift(|_, x, _, out| out[0] = -x[0])
        .running_reward(|_, x, _| -x[0] * x[0])
        .terminal_reward(|x| -x[0] * x[0])
        .initial(|_, out| out[0] = 1.0)
        .into_env("decay", 1, horizon, 0.5)
        .unwrap();
    let exact = -(1.0 - (-2.5f64 * horizon).exp()) / 2.5 - (-2.5f64 * horizon).exp();
    let errs: Vec<f64> = [0.1, 0.05, 0.025, 0.0125]
        .iter()
        .map(|&h| {
            let mut rng = SeedTree::new(0).stream(Purpose::Eval, 0, 0);
            let (j, _) = estimate_return(&env, &|_: f64, _: &[f64]| vec![0.0], h, 1, &mut rng).unwrap();
            (j - exact).abs()
        })
        .collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.5..=2.5).contains(&ratio), "errors {errs:?}");
    }
}

#[test]
fn stock_ou_env_is_named_and_linear_quadratic() {
    let env = make_ou_1d(1.0, 0.5, 1.0, 0.8).unwrap();
    assert_eq!(env.name, "ou1d");
    let spec = env.lqr().unwrap().clone();
    let sol = lqr_policy_value(&spec, &DMatrix::from_element(1, 1, -1.0), 1e-3).unwrap();
    assert!(lqr_advantage_rate(&sol, &spec, 0.3, &[0.8], &[-0.8]).abs() < 1e-12);
}

#[test]
fn dpg_vanishes_at_the_optimal_gain() {
    // terminal weight at the stationary Riccati root keeps P, and so K*, constant in time
    let mut spec = ou_1d_spec(1.0, 0.5, 1.0, 0.8).unwrap();
    let (r, q, rate): (f64, f64, f64) = (0.1, 1.0, 0.8 + 2.0);
    let p_inf = r * (-rate + (rate * rate + 4.0 * q / r).sqrt()) / 2.0;
    spec.qf = DMatrix::from_element(1, 1, p_inf);
    let env = make_lqr(spec.clone()).unwrap();
    let opt = ctrl_core::oracle::lqr_optimal_gain(&spec, 1e-3).unwrap();
    let k_star = -p_inf / r;
    assert!((opt.gain_at(0.0)[(0, 0)] - k_star).abs() < 1e-9 && (opt.gain_at(0.7)[(0, 0)] - k_star).abs() < 1e-9);
    let pol = ParamPolicy::Linear { state_dim: 1, action_dim: 1 };
    let grad_at = |k: f64| {
        let sol = lqr_policy_value(&spec, &DMatrix::from_element(1, 1, k), 1e-3).unwrap();
        let mut rng = SeedTree::new(8).stream(Purpose::Oracle, 0, 0);
        ctrl_core::oracle::dpg_estimate(&env, &sol, &pol, &[k], 2000, 0.01, &mut rng).unwrap().0[0]
    };
    let at_opt = grad_at(k_star);
    let perturbed = grad_at(k_star + 0.5);
    assert!(at_opt.abs() <= 0.05 * perturbed.abs(), "at K* {at_opt}, perturbed {perturbed}");
}
