//! Gradient statistics and step-size sweeps for TD semi-gradients.

use std::io::Write;

use ndarray::Array2;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::critic::{multi_step_semi_gradient, one_step_semi_gradient, CriticNets, Transition};
use crate::nn::{time_features, MlpNet};
use crate::replay::Window;
use crate::report::fmt_f64;
use crate::sde::{em_step, SdeEnv};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradStats {
    pub mean: Vec<f64>,
    pub var_trace: f64,
    /// `var_trace / ‖mean‖²`; `+∞` when the mean vanishes.
    pub nsr: f64,
    pub mean_vanishes: bool,
    pub num_samples: usize,
    pub std_error_of_var: f64,
}

impl GradStats {
    pub fn mean_norm(&self) -> f64 {
        self.mean.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

const PILOT: usize = 1000;

/// Streaming accumulator. Moments are taken about a pilot mean computed
/// from the first samples, which keeps the single pass numerically stable.
#[derive(Clone, Debug, Default)]
pub struct GradAccumulator {
    pilot: Vec<Vec<f64>>,
    shift: Vec<f64>,
    sum: Vec<f64>,
    sum_sq: f64,
    sum_quad: f64,
    count: usize,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, sample: Vec<f64>) {
        if self.shift.is_empty() {
            self.pilot.push(sample);
            if self.pilot.len() == PILOT {
                self.flush_pilot();
            }
            return;
        }
        self.absorb(&sample);
    }

    fn flush_pilot(&mut self) {
        let n = self.pilot.len() as f64;
        let dim = self.pilot[0].len();
        self.shift = (0..dim).map(|j| self.pilot.iter().map(|s| s[j]).sum::<f64>() / n).collect();
        self.sum = vec![0.0; dim];
        for s in std::mem::take(&mut self.pilot) {
            self.absorb(&s);
        }
    }

    fn absorb(&mut self, sample: &[f64]) {
        assert_eq!(sample.len(), self.shift.len(), "gradient samples must share a dimension");
        let mut sq = 0.0;
        for ((acc, s), c) in self.sum.iter_mut().zip(sample).zip(&self.shift) {
            let d = s - c;
            *acc += d;
            sq += d * d;
        }
        self.sum_sq += sq;
        self.sum_quad += sq * sq;
        self.count += 1;
    }

    pub fn finish(mut self) -> Result<GradStats> {
        if self.shift.is_empty() && !self.pilot.is_empty() {
            self.flush_pilot();
        }
        let m = self.count;
        if m < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 samples, got {m}")));
        }
        let mf = m as f64;
        let centered: Vec<f64> = self.sum.iter().map(|s| s / mf).collect();
        let offset_sq: f64 = centered.iter().map(|v| v * v).sum();
        let var_trace = ((self.sum_sq - mf * offset_sq) / (mf - 1.0)).max(0.0);
        let mean: Vec<f64> = centered.iter().zip(&self.shift).map(|(d, c)| d + c).collect();
        let mean_sq: f64 = mean.iter().map(|v| v * v).sum();
        let mean_vanishes = mean_sq.sqrt() < 1e-12;
        let nsr = if mean_vanishes {
            if var_trace == 0.0 { 0.0 } else { f64::INFINITY }
        } else {
            var_trace / mean_sq
        };
        // ‖g − shift‖² stands in for ‖g − mean‖², which is accurate once the
        // pilot mean is close to the full mean.
        let d_mean = self.sum_sq / mf;
        let d_var = (self.sum_quad / mf - d_mean * d_mean).max(0.0);
        Ok(GradStats {
            mean,
            var_trace,
            nsr,
            mean_vanishes,
            num_samples: m,
            std_error_of_var: (d_var / mf).sqrt(),
        })
    }
}

pub fn grad_stats<R, F>(mut sampler: F, num_samples: usize, rng: &mut R) -> Result<GradStats>
where
    R: RngCore,
    F: FnMut(&mut R) -> Vec<f64>,
{
    if num_samples < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {num_samples}")));
    }
    let mut acc = GradAccumulator::new();
    for _ in 0..num_samples {
        acc.push(sampler(rng));
    }
    acc.finish()
}

/// Inverse-CDF draw from the exponential law with rate `β` truncated to
/// `[0, T]`; uniform when `β = 0`.
pub fn t_trunc_exp_sample<R: Rng + ?Sized>(beta: f64, horizon: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    if beta * horizon < 1e-12 {
        return u * horizon;
    }
    let t = -(-u * (-beta * horizon).exp_m1()).ln_1p() / beta;
    t.clamp(0.0, horizon)
}

/// Frozen networks and behavior used by the sweeps.
pub struct SweepSetup<'a> {
    pub env: &'a SdeEnv,
    pub nets: &'a CriticNets,
    pub policy: &'a MlpNet,
    /// Behavior actions are `μ_φ(x̃) + σ z`.
    pub explore_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub h: f64,
    pub len: usize,
    pub e_norm: f64,
    pub var_trace: f64,
    pub h_times_var: f64,
    pub nsr: f64,
    pub num_samples: usize,
    pub std_error_var: f64,
}

const CHUNK: usize = 4096;

/// Rolls the behavior policy in lockstep and cuts one window of length
/// `len` per requested start step.
fn collect_windows<R: Rng>(setup: &SweepSetup<'_>, h: f64, starts: &[usize], len: usize, rng: &mut R) -> Result<Vec<Window>> {
    let env = setup.env;
    let horizon = env.horizon;
    let n = env.state_dim;
    let count = starts.len();
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(starts[i]));
    let mut states: Vec<Vec<f64>> = order.iter().map(|_| env.sample_initial(rng)).collect();
    let mut windows: Vec<Window> = order
        .iter()
        .map(|&i| Window {
            start: starts[i],
            len,
            states: Vec::with_capacity(len + 1),
            actions: Vec::with_capacity(len),
            reward_rates: Vec::with_capacity(len),
            step_size: h,
            terminal: None,
        })
        .collect();
    let last = starts[order[0]] + len;
    let mut active = count;
    let mut embed = Array2::zeros((count, n + 2));
    for k in 0..=last {
        while active > 0 && starts[order[active - 1]] + len < k {
            active -= 1;
        }
        if active == 0 {
            break;
        }
        let t = k as f64 * h;
        let feats = time_features(t, horizon);
        for (r, x) in states[..active].iter().enumerate() {
            for j in 0..n {
                embed[(r, j)] = x[j];
            }
            embed[(r, n)] = feats[0];
            embed[(r, n + 1)] = feats[1];
        }
        if k == last {
            for r in 0..active {
                windows[r].states.push(embed.row(r).to_vec());
            }
            break;
        }
        let mean = setup.policy.forward_batch(embed.slice(ndarray::s![..active, ..]))?;
        for r in 0..active {
            let mut a = mean.output().row(r).to_vec();
            if setup.explore_sigma > 0.0 {
                for v in &mut a {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += setup.explore_sigma * z;
                }
            }
            env.clip_action(&mut a);
            let noise = env.draw_noise(rng);
            let next = em_step(env, t, &states[r], &a, h, &noise)?;
            let start = windows[r].start;
            if k >= start && k <= start + len {
                windows[r].states.push(embed.row(r).to_vec());
                if k < start + len {
                    windows[r].reward_rates.push(env.running_reward(t, &states[r], &a));
                    windows[r].actions.push(a);
                }
            }
            states[r] = next;
        }
    }
    let mut out = vec![None; count];
    for (slot, w) in order.into_iter().zip(windows) {
        out[slot] = Some(w);
    }
    Ok(out.into_iter().map(|w| w.expect("every slot filled")).collect())
}

/// Start steps `k = ⌊t/h⌋` with `t ~ TruncExp(β; T − Lh)`.
fn draw_starts<R: Rng>(beta: f64, horizon: f64, h: f64, len: usize, count: usize, rng: &mut R) -> Vec<usize> {
    let max_start = ((horizon / h).round() as usize).saturating_sub(len);
    let span = (horizon - len as f64 * h).max(0.0);
    (0..count)
        .map(|_| {
            let t = t_trunc_exp_sample(beta, span, rng);
            ((t / h + 1e-9).floor() as usize).min(max_start)
        })
        .collect()
}

fn sweep_at<R, F>(setup: &SweepSetup<'_>, h: f64, len: usize, num_samples: usize, rng: &mut R, mut grad: F) -> Result<SweepRow>
where
    R: Rng,
    F: FnMut(&Window) -> Result<Vec<f64>>,
{
    let steps = setup.env.num_steps(h)?;
    if len == 0 || len > steps {
        return Err(Error::InvalidArgument(format!("window length {len} does not fit {steps} steps")));
    }
    let mut acc = GradAccumulator::new();
    let mut remaining = num_samples;
    while remaining > 0 {
        let chunk = remaining.min(CHUNK);
        let starts = draw_starts(setup.env.discount, setup.env.horizon, h, len, chunk, rng);
        for w in collect_windows(setup, h, &starts, len, rng)? {
            acc.push(grad(&w)?);
        }
        remaining -= chunk;
    }
    let stats = acc.finish()?;
    Ok(SweepRow {
        h,
        len,
        e_norm: stats.mean_norm(),
        var_trace: stats.var_trace,
        h_times_var: h * stats.var_trace,
        nsr: stats.nsr,
        num_samples: stats.num_samples,
        std_error_var: stats.std_error_of_var,
    })
}

fn sort_rows(mut rows: Vec<SweepRow>) -> Vec<SweepRow> {
    rows.sort_by(|a, b| b.h.total_cmp(&a.h));
    rows
}

/// θ-component of the one-step semi-gradient (with `1/h`) per step size.
pub fn one_step_variance_sweep<R: Rng>(setup: &SweepSetup<'_>, h_list: &[f64], num_samples: usize, rng: &mut R) -> Result<Vec<SweepRow>> {
    let beta = setup.env.discount;
    let rows = h_list
        .iter()
        .map(|&h| {
            sweep_at(setup, h, 1, num_samples, rng, |w| {
                let tr = Transition {
                    state: w.states[0].clone(),
                    action: w.actions[0].clone(),
                    reward_rate: w.reward_rates[0],
                    next_state: w.states[1].clone(),
                    step_size: w.step_size,
                };
                Ok(one_step_semi_gradient(setup.nets, Some(setup.policy), &tr, beta)?.0)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sort_rows(rows))
}

/// `L = δ/h`, which must be an integer for every `h`.
pub fn window_length(delta: f64, h: f64) -> Result<usize> {
    let ratio = delta / h;
    let len = ratio.round();
    if len < 1.0 || (len - ratio).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "delta={delta} is not an integer multiple of h={h} ({ratio} steps)"
        )));
    }
    Ok(len as usize)
}

/// L-step semi-gradient (no `1/h`) with `Lh = δ` held fixed.
pub fn multi_step_variance_sweep<R: Rng>(
    setup: &SweepSetup<'_>,
    delta: f64,
    h_list: &[f64],
    num_samples: usize,
    rng: &mut R,
) -> Result<Vec<SweepRow>> {
    let lens = h_list.iter().map(|&h| window_length(delta, h)).collect::<Result<Vec<_>>>()?;
    let beta = setup.env.discount;
    let rows = h_list
        .iter()
        .zip(lens)
        .map(|(&h, len)| {
            sweep_at(setup, h, len, num_samples, rng, |w| {
                multi_step_semi_gradient(setup.nets, Some(setup.policy), w, beta)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sort_rows(rows))
}

/// Least-squares slope of `log var_trace` against `log h`, leaving out the
/// largest step size.
pub fn fit_log_slope(rows: &[SweepRow]) -> Option<f64> {
    let mut rows: Vec<&SweepRow> = rows.iter().collect();
    rows.sort_by(|a, b| b.h.total_cmp(&a.h));
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .skip(1)
        .filter(|r| r.var_trace > 0.0)
        .map(|r| (r.h.ln(), r.var_trace.ln()))
        .collect();
    least_squares_slope(&pts)
}

pub fn least_squares_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub const SWEEP_HEADER: &str = "h,L,Lh,E_norm,var_trace,h_var,nsr,M,std_error_var";

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            fmt_f64(r.h),
            r.len,
            fmt_f64(r.len as f64 * r.h),
            fmt_f64(r.e_norm),
            fmt_f64(r.var_trace),
            fmt_f64(r.h_times_var),
            fmt_f64(r.nsr),
            r.num_samples,
            fmt_f64(r.std_error_var)
        )?;
    }
    Ok(())
}
