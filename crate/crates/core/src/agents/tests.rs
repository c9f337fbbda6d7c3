use super::*;
use crate::envs::make_ou_1d;
use crate::sde::FnDynamics;

fn small(h: f64, beta: f64) -> TrainConfig {
    let mut cfg = TrainConfig::defaults(h, beta, 8);
    cfg.batch = 16;
    cfg.workers = 2;
    cfg.episodes = 2;
    cfg.eval_every = 1;
    cfg.eval_rollouts = 4;
    cfg.seed = 3;
    cfg
}

fn ou() -> SdeEnv {
    make_ou_1d(1.0, 0.5, 1.0, 0.8).unwrap()
}

fn params(l: &dyn Learner) -> Vec<Vec<f64>> {
    l.networks().iter().map(|(_, n)| n.params.clone()).collect()
}

fn curve_bytes(out: &TrainOutput) -> Vec<u8> {
    let mut buf = Vec::new();
    write_curve_csv(&mut buf, &out.curve).unwrap();
    buf
}

#[test]
fn zero_episodes_leave_networks_at_init() {
    let env = ou();
    for kind in AgentKind::ALL {
        let mut cfg = QLearningConfig::from_base(small(0.05, 0.8));
        cfg.base.episodes = 0;
        let mut learner = make_learner(kind, &cfg, &env).unwrap();
        let before = params(&*learner);
        let out = train(&mut *learner, &cfg.base, &env, &mut NoObserver).unwrap();
        assert!(out.curve.is_empty());
        assert_eq!(out.counters, Counters::default());
        assert_eq!(params(&*learner), before);
    }
}

#[test]
fn update_count_is_floor_of_steps_over_m() {
    let env = ou();
    for kind in AgentKind::ALL {
        let mut cfg = QLearningConfig::from_base(small(0.05, 0.8));
        cfg.base.update_every = 3;
        let mut learner = make_learner(kind, &cfg, &env).unwrap();
        let out = train(&mut *learner, &cfg.base, &env, &mut NoObserver).unwrap();
        let c = &out.counters;
        assert_eq!(c.sync_steps, 40, "{kind:?}");
        assert_eq!(c.env_steps, 80);
        assert_eq!(c.critic_updates, 13);
        assert_eq!(c.actor_updates, 13);
        assert_eq!(c.target_updates, 13);
        assert_eq!(out.curve.len(), 2);
        assert!(out.curve.iter().all(|r| r.eval_mean.is_some_and(f64::is_finite)));
    }
}

#[test]
fn parse_names_round_trip() {
    for kind in AgentKind::ALL {
        assert_eq!(AgentKind::parse(kind.name()).unwrap(), kind);
    }
    assert!(AgentKind::parse("sac").is_err());
}

#[test]
fn config_validation() {
    let env = ou();
    let mut cfg = small(0.05, 0.8);
    assert_eq!(cfg.validate(&env).unwrap(), 20);
    cfg.l_max = 21;
    assert!(matches!(cfg.validate(&env), Err(Error::Config(_))));
    let mut cfg = small(0.05, 0.8);
    cfg.tau = 0.0;
    assert!(cfg.validate(&env).is_err());
    let cfg = small(0.03, 0.8);
    assert!(cfg.validate(&env).is_err());
    assert_eq!(TrainConfig::defaults(0.01, 0.8, 64).update_every, 5);
    assert_eq!(TrainConfig::defaults(0.05, 0.8, 64).update_every, 1);
}

#[test]
fn target_drift_is_geometric() {
    let mut rng = SeedTree::new(9).stream(Purpose::Init, 0, 0);
    let online = MlpNet::init(&[3, 8, 1], &mut rng, 1.0).unwrap();
    let mut target = MlpNet::init(&[3, 8, 1], &mut rng, 1.0).unwrap();
    let tau = 0.005;
    let dist = |t: &MlpNet| t.params.iter().zip(&online.params).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let mut prev = dist(&target);
    for _ in 0..500 {
        crate::nn::soft_update(&mut target.params, &online.params, tau);
        let d = dist(&target);
        assert!(d <= prev);
        assert!((d / prev - (1.0 - tau)).abs() < 1e-9);
        prev = d;
    }
}

#[test]
fn single_worker_runs_are_byte_identical() {
    let env = ou();
    for kind in AgentKind::ALL {
        let mut cfg = QLearningConfig::from_base(small(0.05, 0.8));
        cfg.base.workers = 1;
        cfg.base.episodes = 3;
        let run = || {
            let mut l = make_learner(kind, &cfg, &env).unwrap();
            let out = train(&mut *l, &cfg.base, &env, &mut NoObserver).unwrap();
            (curve_bytes(&out), params(&*l))
        };
        assert_eq!(run(), run(), "{kind:?}");
    }
}

#[test]
fn different_seeds_differ() {
    let env = ou();
    let cfg = small(0.05, 0.8);
    let (a, _) = train_ct_ddpg(&cfg, &env, &mut NoObserver).unwrap();
    let mut other = cfg.clone();
    other.seed += 1;
    let (b, _) = train_ct_ddpg(&other, &env, &mut NoObserver).unwrap();
    assert_ne!(curve_bytes(&a), curve_bytes(&b));
}

#[test]
fn dau_matches_ct_ddpg_with_unit_window() {
    let env = ou();
    let mut cfg = small(0.05, 0.8);
    let (dau_out, dau) = train_dau(&cfg, &env, &mut NoObserver).unwrap();
    assert_eq!(dau.kind(), AgentKind::Dau);
    cfg.l_min = 1;
    cfg.l_max = 1;
    let (ct_out, ct) = train_ct_ddpg(&cfg, &env, &mut NoObserver).unwrap();
    assert_eq!(curve_bytes(&dau_out), curve_bytes(&ct_out));
    assert_eq!(params(&dau), params(&ct));
}

#[test]
fn dau_first_critic_batch_is_the_unit_window_batch() {
    // Same replay stream, same buffer contents: the DAU batch is exactly what
    // sample_windows(B, 1) returns.
    let env = ou();
    let cfg = small(0.05, 0.8);
    let seeds = SeedTree::new(cfg.seed);
    let mut a = ReplayBuffer::new(100, seeds.stream(Purpose::Replay, 0, 0));
    let mut b = ReplayBuffer::new(100, seeds.stream(Purpose::Replay, 0, 0));
    let mut rng = seeds.stream(Purpose::Collect, 0, 0);
    let traj = crate::sde::rollout(&env, &|_: f64, _: &[f64]| vec![0.0], cfg.h, &mut rng, 0.0).unwrap();
    a.push_episode(&traj).unwrap();
    b.push_episode(&traj).unwrap();
    let mut urng = seeds.stream(Purpose::Update, 0, 0);
    let len = draw_window_len((1, 1), &a, &mut urng);
    assert_eq!(len, 1);
    assert_eq!(a.sample_windows(cfg.batch, len).unwrap(), b.sample_windows(cfg.batch, 1).unwrap());
}

#[test]
fn ddpg_q_goes_to_zero_without_rewards() {
    let env = FnDynamics::zero(1, 1)
        .drift(|_, x, a, out| out[0] = a[0] - x[0])
        .diffusion(|_, _, _, out| out[0] = 0.3)
        .initial(|rng, out| out[0] = rng.sample::<f64, _>(StandardNormal))
        .into_env("zero", 1, 1.0, 0.8)
        .unwrap();
    let mut cfg = small(0.05, 0.8);
    cfg.hidden = vec![16, 16];
    cfg.episodes = 10;
    cfg.eval_every = 10;
    let (out, agent) = train_ddpg_discrete(&cfg, &env, &mut NoObserver).unwrap();
    assert_eq!(out.counters.critic_updates, 200);
    assert_eq!(out.final_eval(), Some(0.0));
    let mut rng = SeedTree::new(1).stream(Purpose::Analysis, 0, 0);
    for _ in 0..50 {
        let t: f64 = rng.random_range(0.0..1.0);
        let x: f64 = rng.random_range(-2.0..2.0);
        let a: f64 = rng.random_range(-1.0..1.0);
        let mut input = embed(&[x], t, 1.0);
        input.push(a);
        let q = agent.q.value(&input).unwrap();
        assert!(q.abs() <= 0.05, "Q({t}, {x}, {a}) = {q}");
    }
}

#[test]
fn ddpg_terminal_target_uses_terminal_reward() {
    let env = ou();
    let cfg = small(0.05, 0.8);
    let mut init = SeedTree::new(0).stream(Purpose::Init, 0, 0);
    let agent = DiscreteDdpg::new(&cfg, &env, &mut init).unwrap();
    let w = crate::replay::Window {
        start: 19,
        len: 1,
        states: vec![embed(&[0.5], 0.95, 1.0), embed(&[0.4], 1.0, 1.0)],
        actions: vec![vec![0.1]],
        reward_rates: vec![-2.0],
        step_size: 0.05,
        terminal: Some(-0.16),
    };
    let y = agent.targets(&[w.clone()], 0.8).unwrap();
    assert!((y[0] - (-2.0 * 0.05 + (-0.04f64).exp() * -0.16)).abs() < 1e-15);

    let inner = crate::replay::Window { terminal: None, ..w };
    let y = agent.targets(&[inner.clone()], 0.8).unwrap();
    let mut q_in = inner.states[1].clone();
    q_in.extend(agent.policy.forward(&inner.states[1]).unwrap());
    let boot = agent.target_q.value(&q_in).unwrap();
    assert!((y[0] - (-0.1 + (-0.04f64).exp() * boot)).abs() < 1e-14);
}

#[test]
fn ddpg_critic_gradient_matches_finite_differences() {
    let env = ou();
    let cfg = small(0.05, 0.8);
    let mut init = SeedTree::new(5).stream(Purpose::Init, 0, 0);
    let agent = DiscreteDdpg::new(&cfg, &env, &mut init).unwrap();
    let windows: Vec<_> = (0..4)
        .map(|i| crate::replay::Window {
            start: i,
            len: 1,
            states: vec![embed(&[0.3 * i as f64], 0.05 * i as f64, 1.0), embed(&[0.2], 0.05 * (i + 1) as f64, 1.0)],
            actions: vec![vec![0.2 - 0.1 * i as f64]],
            reward_rates: vec![0.5],
            step_size: 0.05,
            terminal: None,
        })
        .collect();
    let (_, grad) = agent.critic_loss(&windows, 0.8).unwrap();
    let eps = 1e-6;
    for i in (0..agent.q.num_params()).step_by(7) {
        let mut p = agent.clone();
        p.q.params[i] += eps;
        let up = p.critic_loss(&windows, 0.8).unwrap().0;
        p.q.params[i] -= 2.0 * eps;
        let down = p.critic_loss(&windows, 0.8).unwrap().0;
        let fd = (up - down) / (2.0 * eps);
        assert!((fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grad[i]);
    }
}

#[test]
fn penalty_cancels_exactly() {
    let log_pi = [-0.3, -1.2, 0.4, -2.0, -0.7, 0.1];
    let gamma = 0.1;
    let q: Vec<f64> = log_pi.iter().map(|l| gamma * l).collect();
    let (pen, means) = qlearn::entropy_penalty(&q, &log_pi, 3, gamma);
    assert_eq!(pen, 0.0);
    assert_eq!(means, vec![0.0, 0.0]);
    let (pen, _) = qlearn::entropy_penalty(&[1.0, 2.0, 3.0, 0.0], &[0.0; 4], 2, gamma);
    assert!((pen - (1.5f64.powi(2) + 1.5f64.powi(2)) / 2.0).abs() < 1e-15);
}

#[test]
fn penalty_at_init_is_finite_and_nonnegative() {
    let env = ou();
    let cfg = QLearningConfig::from_base(small(0.05, 0.8));
    assert_eq!((cfg.entropy, cfg.action_samples), (0.1, 20));
    let mut init = SeedTree::new(2).stream(Purpose::Init, 0, 0);
    let agent = QLearning::new(&cfg, &env, &mut init).unwrap();
    let states = crate::nn::stack_rows(&(0..8).map(|i| embed(&[0.1 * i as f64], 0.1 * i as f64, 1.0)).collect::<Vec<_>>(), 3);
    let mut rng = SeedTree::new(2).stream(Purpose::Update, 0, 0);
    let (pen, grad) = agent.penalty(states.view(), &mut rng).unwrap();
    assert!(pen.is_finite() && pen >= 0.0);
    assert!(grad.iter().all(|g| g.is_finite()));
    let std = agent.policy_std(states.view()).unwrap();
    assert!(std.iter().all(|s| *s >= qlearn::MIN_STD && (s - 0.1).abs() < 0.02));
}

#[test]
fn q_learning_rejects_bad_entropy() {
    let mut cfg = QLearningConfig::from_base(small(0.05, 0.8));
    cfg.entropy = 0.0;
    let mut init = SeedTree::new(2).stream(Purpose::Init, 0, 0);
    assert!(matches!(QLearning::new(&cfg, &ou(), &mut init), Err(Error::Config(_))));
}

#[test]
fn q_learning_policy_gradient_matches_finite_differences() {
    let env = ou();
    let mut cfg = QLearningConfig::from_base(small(0.05, 0.8));
    cfg.base.sigma_explore = 0.5;
    let mut init = SeedTree::new(4).stream(Purpose::Init, 0, 0);
    let agent = QLearning::new(&cfg, &env, &mut init).unwrap();
    let states = crate::nn::stack_rows(&(0..6).map(|i| embed(&[0.3 * i as f64 - 0.5], 0.15 * i as f64, 1.0)).collect::<Vec<_>>(), 3);
    let rng0 = SeedTree::new(4).stream(Purpose::Update, 0, 0);
    let (_, g_mean, g_std) = agent.policy_objective(states.view(), 0.05, &mut rng0.clone()).unwrap();
    let eps = 1e-6;
    let obj = |a: &QLearning| a.policy_objective(states.view(), 0.05, &mut rng0.clone()).unwrap().0;
    for i in (0..agent.mean.num_params()).step_by(5) {
        let mut p = agent.clone();
        p.mean.params[i] += eps;
        let up = obj(&p);
        p.mean.params[i] -= 2.0 * eps;
        let fd = (up - obj(&p)) / (2.0 * eps);
        assert!((fd - g_mean[i]).abs() < 1e-7 * (1.0 + fd.abs()), "mean {i}: {fd} vs {}", g_mean[i]);
    }
    for i in (0..agent.std.num_params()).step_by(5) {
        let mut p = agent.clone();
        p.std.params[i] += eps;
        let up = obj(&p);
        p.std.params[i] -= 2.0 * eps;
        let fd = (up - obj(&p)) / (2.0 * eps);
        assert!((fd - g_std[i]).abs() < 1e-7 * (1.0 + fd.abs()), "std {i}: {fd} vs {}", g_std[i]);
    }
}

#[test]
fn evaluation_is_deterministic_and_matches_rollout_returns() {
    let env = ou();
    let net = MlpNet::zeros(&[3, 4, 1]).unwrap();
    let rng = SeedTree::new(1).stream(Purpose::Eval, 0, 0);
    let a = evaluate_returns(&env, &net, 0.05, 5, &mut rng.clone()).unwrap();
    let b = evaluate_returns(&env, &net, 0.05, 5, &mut rng.clone()).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|r| *r <= 0.0));
    let (m, s) = evaluate(&env, &net, 0.05, 5, &mut rng.clone()).unwrap();
    assert!((m - a.iter().sum::<f64>() / 5.0).abs() < 1e-15);
    assert!(s > 0.0);
}

#[test]
fn diverging_worker_is_discarded_and_counted() {
    // Workers starting above zero blow up on their first step.
    let env = FnDynamics::zero(1, 1)
        .drift(|_, x, _, out| out[0] = if x[0] > 0.0 { f64::INFINITY } else { -x[0] })
        .initial(|rng, out| out[0] = rng.sample::<f64, _>(StandardNormal))
        .running_reward(|_, x, a| -x[0] * x[0] - a[0] * a[0])
        .into_env("blowup", 1, 1.0, 0.0)
        .unwrap();
    let mut cfg = small(0.1, 0.0);
    cfg.workers = 8;
    cfg.episodes = 2;
    cfg.eval_every = 100;
    cfg.l_min = 1;
    cfg.l_max = 2;
    let (out, _) = train_ct_ddpg(&cfg, &env, &mut NoObserver).unwrap();
    let c = &out.counters;
    assert!(c.diverged_episodes > 0 && c.diverged_episodes < 16);
    assert_eq!(c.env_steps, 10 * (16 - c.diverged_episodes));
    assert_eq!(out.final_eval(), Some(f64::NEG_INFINITY));
}

#[test]
fn observer_sees_every_evaluation() {
    let env = ou();
    let mut cfg = small(0.05, 0.8);
    cfg.episodes = 5;
    cfg.eval_every = 2;
    let mut seen = Vec::new();
    let mut obs = |ep: usize, l: &dyn Learner| {
        assert_eq!(l.networks()[0].0, "policy");
        seen.push(ep);
        Ok(())
    };
    let (out, _) = train_ct_ddpg(&cfg, &env, &mut obs).unwrap();
    assert_eq!(seen, vec![2, 4, 5]);
    let evaluated: Vec<usize> = out.curve.iter().filter(|r| r.eval_mean.is_some()).map(|r| r.episode).collect();
    assert_eq!(evaluated, seen);
}
