//! Value and advantage-rate critics.
//!
//! `q_ψ(x̃, a) = q̄_ψ(x̃, a) − q̄_ψ(x̃, μ_φ(x̃))` so the advantage vanishes at the
//! policy's own action. Losses return exact gradients for θ and ψ; the
//! policy and the target value network are treated as constants.

use ndarray::{s, Array2, ArrayView2};

use crate::nn::{concat_cols, stack_rows, ForwardCache, MlpNet};
use crate::replay::Window;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CriticNets {
    pub value: MlpNet,
    pub adv: MlpNet,
    pub target_value: MlpNet,
}

impl CriticNets {
    pub fn new(value: MlpNet, adv: MlpNet) -> Result<Self> {
        if adv.input_dim() <= value.input_dim() || value.output_dim() != 1 || adv.output_dim() != 1 {
            return Err(Error::InvalidArgument("critic networks have incompatible shapes".into()));
        }
        Ok(Self {
            target_value: value.clone(),
            value,
            adv,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.value.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.adv.input_dim() - self.value.input_dim()
    }
}

fn row(v: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, v.len()), v).expect("row vector")
}

fn concat(x: &[f64], a: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(x.len() + a.len());
    v.extend_from_slice(x);
    v.extend_from_slice(a);
    v
}

pub fn reparam_q(nets: &CriticNets, policy: &MlpNet, x: &[f64], a: &[f64]) -> Result<f64> {
    let mu = policy.forward(x)?;
    Ok(nets.adv.value(&concat(x, a))? - nets.adv.value(&concat(x, &mu))?)
}

/// Advantage rate used inside the losses: reparameterized when a policy is
/// given, raw `q̄` otherwise.
pub fn advantage(nets: &CriticNets, policy: Option<&MlpNet>, x: &[f64], a: &[f64]) -> Result<f64> {
    match policy {
        Some(p) => reparam_q(nets, p, x, a),
        None => nets.adv.value(&concat(x, a)),
    }
}

/// Forward of `q` over a batch, keeping what is needed for the ψ gradient.
struct AdvBatch {
    q: Vec<f64>,
    cache: ForwardCache,
    reparam: bool,
}

impl AdvBatch {
    fn new(adv: &MlpNet, policy: Option<&MlpNet>, states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<Self> {
        let rows = states.nrows();
        let with_actions = concat_cols(states, actions);
        let inputs = match policy {
            Some(p) => {
                let mu = p.forward_batch(states)?;
                let with_mu = concat_cols(states, mu.output().view());
                ndarray::concatenate(ndarray::Axis(0), &[with_actions.view(), with_mu.view()]).expect("same width")
            }
            None => with_actions,
        };
        let cache = adv.forward_batch(inputs.view())?;
        let out = cache.output();
        let q = (0..rows)
            .map(|i| match policy {
                Some(_) => out[(i, 0)] - out[(rows + i, 0)],
                None => out[(i, 0)],
            })
            .collect();
        Ok(Self {
            q,
            cache,
            reparam: policy.is_some(),
        })
    }

    /// ψ gradient of `Σ_i cot_i · q_i`.
    fn grad(&self, adv: &MlpNet, cot: &[f64]) -> Result<Vec<f64>> {
        let rows = cot.len();
        let mut full = Array2::zeros((self.cache.batch_size(), 1));
        for (i, c) in cot.iter().enumerate() {
            full[(i, 0)] = *c;
            if self.reparam {
                full[(rows + i, 0)] = -*c;
            }
        }
        Ok(adv.backward(&self.cache, full.view(), false)?.params)
    }
}

#[derive(Clone, Debug)]
pub struct MartingaleLoss {
    pub loss: f64,
    pub grad_value: Vec<f64>,
    pub grad_adv: Vec<f64>,
    /// Noise-to-signal ratio of the per-window θ gradients; `None` when the
    /// batch has one window or the mean gradient vanishes.
    pub value_grad_nsr: Option<f64>,
}

/// `(1/B) Σ_i (V_θ(x̃_k) − Σ_l e^{−βlh}[r − q]h − e^{−βLh} V_tgt(x̃_{k+L}))²`.
pub fn martingale_loss(nets: &CriticNets, policy: Option<&MlpNet>, windows: &[Window], beta: f64) -> Result<MartingaleLoss> {
    let batch = windows.len();
    if batch == 0 {
        return Err(Error::EmptyBuffer);
    }
    let len = windows[0].len;
    let h = windows[0].step_size;
    if windows.iter().any(|w| w.len != len || w.step_size != h) {
        return Err(Error::InvalidArgument("windows must share L and h".into()));
    }
    let embed = nets.embed_dim();
    let act = nets.action_dim();

    let starts: Vec<Vec<f64>> = windows.iter().map(|w| w.states[0].clone()).collect();
    let ends: Vec<Vec<f64>> = windows.iter().map(|w| w.states[len].clone()).collect();
    let starts = stack_rows(&starts, embed);
    let ends = stack_rows(&ends, embed);
    let mut mid_states = Array2::zeros((batch * len, embed));
    let mut mid_actions = Array2::zeros((batch * len, act));
    for (i, w) in windows.iter().enumerate() {
        for l in 0..len {
            mid_states.row_mut(i * len + l).assign(&ndarray::ArrayView1::from(&w.states[l][..]));
            mid_actions.row_mut(i * len + l).assign(&ndarray::ArrayView1::from(&w.actions[l][..]));
        }
    }

    let v_cache = nets.value.forward_batch(starts.view())?;
    let v_target = nets.target_value.forward_batch(ends.view())?;
    let q = AdvBatch::new(&nets.adv, policy, mid_states.view(), mid_actions.view())?;

    let weights: Vec<f64> = (0..len).map(|l| (-beta * l as f64 * h).exp() * h).collect();
    let tail = (-beta * len as f64 * h).exp();
    let mut resid = vec![0.0; batch];
    for (i, w) in windows.iter().enumerate() {
        let mut increment = 0.0;
        for l in 0..len {
            increment += weights[l] * (w.reward_rates[l] - q.q[i * len + l]);
        }
        resid[i] = v_cache.output()[(i, 0)] - increment - tail * v_target.output()[(i, 0)];
    }
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / batch as f64;

    let bf = batch as f64;
    let v_cot = Array2::from_shape_fn((batch, 1), |(i, _)| 2.0 * resid[i] / bf);
    let vg = nets.value.backward(&v_cache, v_cot.view(), true)?;
    let mut q_cot = vec![0.0; batch * len];
    for i in 0..batch {
        for l in 0..len {
            q_cot[i * len + l] = 2.0 * resid[i] / bf * weights[l];
        }
    }
    let grad_adv = q.grad(&nets.adv, &q_cot)?;

    let sq_norms = vg.sample_sq_norms.as_deref().expect("requested");
    let value_grad_nsr = noise_to_signal(&vg.params, sq_norms, batch);
    Ok(MartingaleLoss {
        loss,
        grad_value: vg.params,
        grad_adv,
        value_grad_nsr,
    })
}

/// NSR from the batch mean `(1/B)Σ g_i` and `‖g_i/B‖²` per sample.
fn noise_to_signal(mean_grad: &[f64], scaled_sq_norms: &[f64], batch: usize) -> Option<f64> {
    if batch < 2 {
        return None;
    }
    let bf = batch as f64;
    let mean_sq = bf * scaled_sq_norms.iter().sum::<f64>();
    let signal: f64 = mean_grad.iter().map(|g| g * g).sum();
    if signal <= 0.0 {
        return None;
    }
    let var_trace = bf / (bf - 1.0) * (mean_sq - signal);
    Some(var_trace.max(0.0) / signal)
}

/// `(1/B) Σ (V_θ(x̃_K) − g)²` and its θ gradient.
pub fn terminal_loss(value: &MlpNet, terminals: &[(Vec<f64>, f64)]) -> Result<(f64, Vec<f64>)> {
    if terminals.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let batch = terminals.len() as f64;
    let states: Vec<Vec<f64>> = terminals.iter().map(|(x, _)| x.clone()).collect();
    let inputs = stack_rows(&states, value.input_dim());
    let cache = value.forward_batch(inputs.view())?;
    let resid: Vec<f64> = terminals
        .iter()
        .enumerate()
        .map(|(i, (_, g))| cache.output()[(i, 0)] - g)
        .collect();
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / batch;
    let cot = Array2::from_shape_fn((terminals.len(), 1), |(i, _)| 2.0 * resid[i] / batch);
    Ok((loss, value.backward(&cache, cot.view(), false)?.params))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward_rate: f64,
    pub next_state: Vec<f64>,
    pub step_size: f64,
}

/// One-step semi-gradients with the `1/h` factor. The bootstrap uses the
/// current θ and contributes no gradient.
pub fn one_step_semi_gradient(
    nets: &CriticNets,
    policy: Option<&MlpNet>,
    tr: &Transition,
    beta: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = tr.step_size;
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {h}")));
    }
    let v_now = nets.value.value(&tr.state)?;
    let v_next = nets.value.value(&tr.next_state)?;
    let embed = nets.embed_dim();
    let q = AdvBatch::new(
        &nets.adv,
        policy,
        row(&tr.state[..embed]),
        row(&tr.action),
    )?;
    let resid = v_now - (tr.reward_rate - q.q[0]) * h - (-beta * h).exp() * v_next;
    let (g_theta, _) = nets.value.grads(&tr.state, &[resid / h])?;
    let g_psi = q.grad(&nets.adv, &[resid / h])?;
    Ok((g_theta, g_psi))
}

/// `∂_θV_θ(x̃_k)·(V_θ(x̃_k) − Σ_l e^{−βlh}[r − q]h − e^{−βLh}V_θ(x̃_{k+L}))`,
/// without the `1/h` factor and with a hard target.
pub fn multi_step_semi_gradient(nets: &CriticNets, policy: Option<&MlpNet>, window: &Window, beta: f64) -> Result<Vec<f64>> {
    let resid = window_residual(nets, policy, window, beta, &nets.value)?;
    Ok(nets.value.grads(&window.states[0], &[resid])?.0)
}

/// TD residual of a window with `bootstrap` evaluated at the last state.
pub fn window_residual(
    nets: &CriticNets,
    policy: Option<&MlpNet>,
    window: &Window,
    beta: f64,
    bootstrap: &MlpNet,
) -> Result<f64> {
    let len = window.len;
    let h = window.step_size;
    let states = stack_rows(&window.states[..len], nets.embed_dim());
    let actions = stack_rows(&window.actions, nets.action_dim());
    let q = AdvBatch::new(&nets.adv, policy, states.view(), actions.view())?;
    let increment: f64 = (0..len)
        .map(|l| (-beta * l as f64 * h).exp() * h * (window.reward_rates[l] - q.q[l]))
        .sum();
    Ok(nets.value.value(&window.states[0])? - increment - (-beta * len as f64 * h).exp() * bootstrap.value(&window.states[len])?)
}

/// Batch of advantage values, reparameterized when `policy` is given.
pub fn advantage_batch(
    adv: &MlpNet,
    policy: Option<&MlpNet>,
    states: ArrayView2<'_, f64>,
    actions: ArrayView2<'_, f64>,
) -> Result<Vec<f64>> {
    Ok(AdvBatch::new(adv, policy, states, actions)?.q)
}

/// Gradient of `Σ_i cot_i · q̄(x̃_i, a_i)` with respect to the actions.
pub fn adv_action_grad(adv: &MlpNet, states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>, cot: &[f64]) -> Result<(Vec<f64>, Array2<f64>)> {
    let inputs = concat_cols(states, actions);
    let cache = adv.forward_batch(inputs.view())?;
    let c = Array2::from_shape_vec((cot.len(), 1), cot.to_vec()).expect("column");
    let g = adv.backward(&cache, c.view(), false)?;
    let embed = states.ncols();
    Ok((g.params, g.input.slice(s![.., embed..]).to_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, SeedTree};
    use rand::Rng;

    fn nets(seed: u64, embed: usize, act: usize, width: usize) -> (CriticNets, MlpNet) {
        let mut rng = SeedTree::new(seed).stream(Purpose::Init, 0, 0);
        let value = MlpNet::init(&[embed, width, width, 1], &mut rng, 1.0).unwrap();
        let adv = MlpNet::init(&[embed + act, width, width, 1], &mut rng, 1.0).unwrap();
        let policy = MlpNet::init(&[embed, width, act], &mut rng, 1.0).unwrap();
        let mut c = CriticNets::new(value, adv).unwrap();
        c.target_value = MlpNet::init(&[embed, width, width, 1], &mut rng, 1.0).unwrap();
        (c, policy)
    }

    fn random_windows(seed: u64, batch: usize, len: usize, embed: usize, act: usize) -> Vec<Window> {
        let mut rng = SeedTree::new(seed).stream(Purpose::Replay, 0, 0);
        (0..batch)
            .map(|_| Window {
                start: 0,
                len,
                states: (0..=len).map(|_| (0..embed).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
                actions: (0..len).map(|_| (0..act).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
                reward_rates: (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
                step_size: 0.1,
                terminal: None,
            })
            .collect()
    }

    fn fd(params: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let eps = 1e-6;
        (0..params.len())
            .map(|i| {
                let mut p = params.to_vec();
                p[i] += eps;
                let up = f(&p);
                p[i] -= 2.0 * eps;
                (up - f(&p)) / (2.0 * eps)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        d / b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12)
    }

    #[test]
    fn reparam_vanishes_at_policy_action() {
        let (c, p) = nets(1, 3, 2, 8);
        let x = [0.3, 0.8, -0.2];
        let mu = p.forward(&x).unwrap();
        assert_eq!(reparam_q(&c, &p, &x, &mu).unwrap(), 0.0);
        let a = [0.4, -1.0];
        let direct = c.adv.value(&concat(&x, &a)).unwrap() - c.adv.value(&concat(&x, &mu)).unwrap();
        assert!((reparam_q(&c, &p, &x, &a).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn constant_adv_gives_zero_q() {
        let (mut c, p) = nets(2, 3, 1, 4);
        c.adv = MlpNet::zeros(&[4, 4, 1]).unwrap();
        let n = c.adv.num_params();
        c.adv.params[n - 1] = 5.0;
        assert_eq!(reparam_q(&c, &p, &[0.1, 0.2, 0.3], &[7.0]).unwrap(), 0.0);
    }

    #[test]
    fn martingale_loss_hand_case() {
        // V(x̃_0)=2, V_tgt(x̃_1)=1, q=0, r=1, h=0.1, β=0
        let value = MlpNet::from_params(&[1, 1], vec![0.0, 2.0]).unwrap();
        let adv = MlpNet::zeros(&[2, 1]).unwrap();
        let mut c = CriticNets::new(value, adv).unwrap();
        c.target_value = MlpNet::from_params(&[1, 1], vec![0.0, 1.0]).unwrap();
        let w = Window {
            start: 0,
            len: 1,
            states: vec![vec![0.0], vec![0.0]],
            actions: vec![vec![0.0]],
            reward_rates: vec![1.0],
            step_size: 0.1,
            terminal: None,
        };
        let out = martingale_loss(&c, None, &[w], 0.0).unwrap();
        assert!((out.loss - 0.81).abs() < 1e-14);
    }

    #[test]
    fn martingale_loss_zero_case() {
        let c = CriticNets::new(MlpNet::zeros(&[3, 4, 1]).unwrap(), MlpNet::zeros(&[4, 4, 1]).unwrap()).unwrap();
        let mut ws = random_windows(1, 4, 3, 3, 1);
        for w in &mut ws {
            w.reward_rates.iter_mut().for_each(|r| *r = 0.0);
        }
        let p = MlpNet::zeros(&[3, 1]).unwrap();
        assert_eq!(martingale_loss(&c, Some(&p), &ws, 0.5).unwrap().loss, 0.0);
    }

    #[test]
    fn martingale_gradients_match_finite_differences() {
        for (seed, reparam) in [(3, true), (4, false)] {
            let (c, p) = nets(seed, 3, 2, 5);
            let ws = random_windows(seed, 6, 3, 3, 2);
            let pol = reparam.then_some(&p);
            let out = martingale_loss(&c, pol, &ws, 0.7).unwrap();
            let fd_value = fd(&c.value.params, |v| {
                let mut c2 = c.clone();
                c2.value.params = v.to_vec();
                martingale_loss(&c2, pol, &ws, 0.7).unwrap().loss
            });
            let fd_adv = fd(&c.adv.params, |v| {
                let mut c2 = c.clone();
                c2.adv.params = v.to_vec();
                martingale_loss(&c2, pol, &ws, 0.7).unwrap().loss
            });
            assert!(rel_err(&out.grad_value, &fd_value) < 1e-3);
            assert!(rel_err(&out.grad_adv, &fd_adv) < 1e-3);
        }
    }

    #[test]
    fn target_and_policy_receive_no_gradient_path() {
        let (c, p) = nets(5, 3, 1, 6);
        let ws = random_windows(5, 4, 2, 3, 1);
        let base = martingale_loss(&c, Some(&p), &ws, 0.2).unwrap();
        let mut c2 = c.clone();
        c2.target_value.params.iter_mut().for_each(|v| *v *= 1.01);
        let moved = martingale_loss(&c2, Some(&p), &ws, 0.2).unwrap();
        assert_ne!(base.loss, moved.loss);
        assert_eq!(base.grad_value.len(), c.value.num_params());
        assert_eq!(base.grad_adv.len(), c.adv.num_params());
    }

    #[test]
    fn nsr_matches_explicit_per_sample_gradients() {
        let (c, p) = nets(6, 3, 1, 5);
        let ws = random_windows(6, 8, 2, 3, 1);
        let out = martingale_loss(&c, Some(&p), &ws, 0.3).unwrap();
        let per: Vec<Vec<f64>> = ws
            .iter()
            .map(|w| martingale_loss(&c, Some(&p), std::slice::from_ref(w), 0.3).unwrap().grad_value)
            .collect();
        let dim = per[0].len();
        let mean: Vec<f64> = (0..dim).map(|j| per.iter().map(|g| g[j]).sum::<f64>() / 8.0).collect();
        let var: f64 = (0..dim)
            .map(|j| per.iter().map(|g| (g[j] - mean[j]).powi(2)).sum::<f64>() / 7.0)
            .sum();
        let expected = var / mean.iter().map(|m| m * m).sum::<f64>();
        assert!(rel_err(&out.grad_value, &mean) < 1e-12);
        assert!((out.value_grad_nsr.unwrap() - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn terminal_loss_cases() {
        let value = MlpNet::from_params(&[1, 1], vec![1.0, 0.0]).unwrap();
        let (l, _) = terminal_loss(&value, &[(vec![2.0], 2.0)]).unwrap();
        assert_eq!(l, 0.0);
        let (l, _) = terminal_loss(&value, &[(vec![1.0], 0.0), (vec![1.0], 2.0)]).unwrap();
        assert_eq!(l, 1.0);
        let (c, _) = nets(7, 3, 1, 6);
        let terms: Vec<(Vec<f64>, f64)> = (0..5).map(|i| (vec![0.1 * i as f64, 1.0, 0.0], i as f64 - 2.0)).collect();
        let (_, g) = terminal_loss(&c.value, &terms).unwrap();
        let fd_g = fd(&c.value.params, |v| {
            let net = MlpNet::from_params(c.value.layer_sizes(), v.to_vec()).unwrap();
            terminal_loss(&net, &terms).unwrap().0
        });
        assert!(rel_err(&g, &fd_g) < 1e-4);
    }

    #[test]
    fn one_step_semi_gradient_linear_hand_case() {
        // V(x̃) = θ·x̃ with θ = (2, 0), q̄ ≡ 0
        let value = MlpNet::from_params(&[2, 1], vec![2.0, 0.0, 0.0]).unwrap();
        let c = CriticNets::new(value, MlpNet::zeros(&[3, 1]).unwrap()).unwrap();
        let tr = Transition {
            state: vec![1.0, 0.5],
            action: vec![0.3],
            reward_rate: 1.0,
            next_state: vec![0.8, 0.5],
            step_size: 0.1,
        };
        let (gt, gp) = one_step_semi_gradient(&c, None, &tr, 0.0).unwrap();
        let resid = 2.0 - 0.1 - 1.6;
        let expected = [resid / 0.1 * 1.0, resid / 0.1 * 0.5, resid / 0.1];
        for (a, b) in gt.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        // q̄ is linear in (x̃, a) with zero params, so ∂ψ q̄ = (x̃, a, 1)
        let expected_psi = [1.0, 0.5, 0.3, 1.0].map(|v| v * resid / 0.1);
        for (a, b) in gp.iter().zip(expected_psi) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_step_zero_residual_and_h_scaling() {
        let value = MlpNet::from_params(&[2, 1], vec![0.0, 0.0, 3.0]).unwrap();
        let c = CriticNets::new(value, MlpNet::zeros(&[3, 1]).unwrap()).unwrap();
        let tr = Transition {
            state: vec![1.0, 0.0],
            action: vec![0.0],
            reward_rate: 0.0,
            next_state: vec![1.0, 0.0],
            step_size: 0.1,
        };
        let (gt, gp) = one_step_semi_gradient(&c, None, &tr, 0.0).unwrap();
        assert!(gt.iter().chain(&gp).all(|v| *v == 0.0));
        // with β > 0 the residual is 3(1 − e^{−βh}); g scales as that over h
        let beta = 0.5;
        let g_at = |h: f64| {
            let t = Transition { step_size: h, ..tr.clone() };
            one_step_semi_gradient(&c, None, &t, beta).unwrap().0[2]
        };
        let ratio = g_at(0.05) / g_at(0.1);
        let expected = ((1.0 - (-beta * 0.05f64).exp()) / 0.05) / ((1.0 - (-beta * 0.1f64).exp()) / 0.1);
        assert!((ratio - expected).abs() < 1e-12);
    }

    #[test]
    fn multi_step_l1_is_h_times_one_step() {
        let (c, p) = nets(8, 3, 1, 6);
        let w = &random_windows(8, 1, 1, 3, 1)[0];
        let tr = Transition {
            state: w.states[0].clone(),
            action: w.actions[0].clone(),
            reward_rate: w.reward_rates[0],
            next_state: w.states[1].clone(),
            step_size: w.step_size,
        };
        let (g1, _) = one_step_semi_gradient(&c, Some(&p), &tr, 0.4).unwrap();
        let gl = multi_step_semi_gradient(&c, Some(&p), w, 0.4).unwrap();
        for (a, b) in gl.iter().zip(&g1) {
            assert!((a - w.step_size * b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn semi_gradient_ignores_bootstrap_gradient_path() {
        // Changing only the bootstrap state changes g through the residual,
        // with the gradient direction fixed at ∂θV(x̃_k).
        let (c, p) = nets(9, 3, 1, 6);
        let mut w = random_windows(9, 1, 3, 3, 1).remove(0);
        let g1 = multi_step_semi_gradient(&c, Some(&p), &w, 0.1).unwrap();
        w.states[3][0] += 0.5;
        let g2 = multi_step_semi_gradient(&c, Some(&p), &w, 0.1).unwrap();
        let ratio: Vec<f64> = g1.iter().zip(&g2).filter(|(a, _)| a.abs() > 1e-9).map(|(a, b)| b / a).collect();
        assert!(ratio.windows(2).all(|r| (r[0] - r[1]).abs() < 1e-9));
    }
}
