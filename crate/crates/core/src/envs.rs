//! Stock environments.
//!
//! All stock environments use additive, state-independent noise, so the
//! linear-quadratic members have closed-form oracles (see [`crate::oracle`]).
//! Rewards follow the maximisation convention
//! `r(t, x, a) = -xᵀQx - aᵀRa`, `g(x) = -xᵀQ_f x`.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::sde::{ClipBox, Dynamics, SdeEnv};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LqrSpec {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qf: DMatrix<f64>,
    /// Constant diffusion `σ` (`n × m`); the covariance rate is `σσᵀ`.
    pub noise: DMatrix<f64>,
    pub horizon: f64,
    pub beta: f64,
    /// `ν = N(0, init_cov)`.
    pub init_cov: DMatrix<f64>,
}

impl LqrSpec {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn noise_dim(&self) -> usize {
        self.noise.ncols()
    }

    /// `σσᵀ`.
    pub fn noise_cov(&self) -> DMatrix<f64> {
        &self.noise * self.noise.transpose()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        let d = self.b.ncols();
        let dims: [(&'static str, usize, usize); 9] = [
            ("A columns", n, self.a.ncols()),
            ("B rows", n, self.b.nrows()),
            ("Q rows", n, self.q.nrows()),
            ("Q columns", n, self.q.ncols()),
            ("R rows", d, self.r.nrows()),
            ("R columns", d, self.r.ncols()),
            ("Qf rows", n, self.qf.nrows()),
            ("noise rows", n, self.noise.nrows()),
            ("init_cov rows", n, self.init_cov.nrows()),
        ];
        for (what, expected, got) in dims {
            if expected != got {
                return Err(Error::Dimension { what, expected, got });
            }
        }
        if self.qf.ncols() != n || self.init_cov.ncols() != n {
            return Err(Error::Dimension {
                what: "Qf/init_cov columns",
                expected: n,
                got: self.qf.ncols().min(self.init_cov.ncols()),
            });
        }
        if n == 0 || d == 0 {
            return Err(Error::InvalidArgument("LQR dimensions must be positive".into()));
        }
        if !(self.horizon > 0.0) || !(self.beta >= 0.0) {
            return Err(Error::InvalidArgument(
                "LQR needs a positive horizon and nonnegative discount".into(),
            ));
        }
        if min_sym_eigen(&self.r, "R")? <= 1e-10 {
            return Err(Error::NotPositiveDefinite("R"));
        }
        for (m, name) in [(&self.q, "Q"), (&self.qf, "Qf"), (&self.init_cov, "init_cov")] {
            if min_sym_eigen(m, name)? < -1e-12 {
                return Err(Error::NotPositiveSemidefinite(name));
            }
        }
        Ok(())
    }
}

fn min_sym_eigen(m: &DMatrix<f64>, name: &'static str) -> Result<f64> {
    if (m - m.transpose()).abs().max() > 1e-12 * (1.0 + m.abs().max()) {
        return Err(Error::InvalidArgument(format!("{name} must be symmetric")));
    }
    Ok(m.clone().symmetric_eigen().eigenvalues.min())
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let roots = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Row-major copies of the LQR matrices for the stepping hot path.
struct LqrDynamics {
    n: usize,
    d: usize,
    m: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    q: Vec<f64>,
    r: Vec<f64>,
    qf: Vec<f64>,
    noise: Vec<f64>,
    init_sqrt: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn quad(m: &[f64], v: &[f64]) -> f64 {
    let k = v.len();
    let mut s = 0.0;
    for i in 0..k {
        for j in 0..k {
            s += v[i] * m[i * k + j] * v[j];
        }
    }
    s
}

impl Dynamics for LqrDynamics {
    fn drift(&self, _t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let ax: f64 = (0..self.n).map(|j| self.a[i * self.n + j] * x[j]).sum();
            let ba: f64 = (0..self.d).map(|j| self.b[i * self.d + j] * a[j]).sum();
            out[i] = ax + ba;
        }
    }

    fn diffusion(&self, _t: f64, _x: &[f64], _a: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.noise);
    }

    fn running_reward(&self, _t: f64, x: &[f64], a: &[f64]) -> f64 {
        -quad(&self.q, x) - quad(&self.r, a)
    }

    fn terminal_reward(&self, x: &[f64]) -> f64 {
        -quad(&self.qf, x)
    }

    fn sample_initial(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        let z: Vec<f64> = (0..self.n).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..self.n {
            out[i] = (0..self.n).map(|j| self.init_sqrt[i * self.n + j] * z[j]).sum();
        }
    }
}

/// Environment with drift `Ax + Ba`, diffusion `σ`, quadratic rewards and no
/// action clipping.
pub fn make_lqr(spec: LqrSpec) -> Result<SdeEnv> {
    spec.validate()?;
    let dynamics = LqrDynamics {
        n: spec.state_dim(),
        d: spec.action_dim(),
        m: spec.noise_dim(),
        a: row_major(&spec.a),
        b: row_major(&spec.b),
        q: row_major(&spec.q),
        r: row_major(&spec.r),
        qf: row_major(&spec.qf),
        noise: row_major(&spec.noise),
        init_sqrt: row_major(&psd_sqrt(&spec.init_cov)),
    };
    let dims = (dynamics.n, dynamics.d, dynamics.m);
    let env = SdeEnv::new("lqr", dims, spec.horizon, spec.beta, Arc::new(dynamics))?;
    Ok(env.with_lqr(spec))
}

/// `dx = (-θx + a) dt + σ dW`, `r = -x² - 0.1a²`, `g = -x²`, `x_0 ~ N(0, 1)`.
pub fn ou_1d_spec(theta: f64, sigma: f64, horizon: f64, beta: f64) -> Result<LqrSpec> {
    if !(theta >= 0.0) || !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "OU needs theta >= 0 and sigma >= 0, got theta={theta}, sigma={sigma}"
        )));
    }
    let s = |v: f64| DMatrix::from_element(1, 1, v);
    Ok(LqrSpec {
        a: s(-theta),
        b: s(1.0),
        q: s(1.0),
        r: s(0.1),
        qf: s(1.0),
        noise: s(sigma),
        horizon,
        beta,
        init_cov: s(1.0),
    })
}

pub fn make_ou_1d(theta: f64, sigma: f64, horizon: f64, beta: f64) -> Result<SdeEnv> {
    let mut env = make_lqr(ou_1d_spec(theta, sigma, horizon, beta)?)?;
    env.name = "ou1d".into();
    Ok(env)
}

/// Stock 2-D linear-quadratic problem: a double integrator with isotropic
/// noise, `Q = I`, `Q_f = I`, `R = control_cost`, `x_0 ~ N(0, I)`.
pub fn double_integrator_spec(noise: f64, control_cost: f64, horizon: f64, beta: f64) -> LqrSpec {
    LqrSpec {
        a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        q: DMatrix::identity(2, 2),
        r: DMatrix::from_element(1, 1, control_cost),
        qf: DMatrix::identity(2, 2),
        noise: DMatrix::identity(2, 2) * noise,
        horizon,
        beta,
        init_cov: DMatrix::identity(2, 2),
    }
}

/// Maps an angle to `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut w = theta.rem_euclid(two_pi);
    if w > PI {
        w -= two_pi;
    }
    if w <= -PI {
        w += two_pi;
    }
    w
}

pub const PENDULUM_GRAVITY: f64 = 10.0;
pub const PENDULUM_MAX_TORQUE: f64 = 2.0;

struct PendulumDynamics {
    noise_sigma: f64,
}

fn pendulum_state_cost(x: &[f64]) -> f64 {
    wrap_angle(x[0]).powi(2) + 0.1 * x[1] * x[1]
}

impl Dynamics for PendulumDynamics {
    fn drift(&self, _t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = -PENDULUM_GRAVITY * x[0].sin() + a[0];
    }

    fn diffusion(&self, _t: f64, _x: &[f64], _a: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = self.noise_sigma;
    }

    fn running_reward(&self, _t: f64, x: &[f64], a: &[f64]) -> f64 {
        -(pendulum_state_cost(x) + 0.001 * a[0] * a[0])
    }

    fn terminal_reward(&self, x: &[f64]) -> f64 {
        -pendulum_state_cost(x)
    }

    fn sample_initial(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        out[0] = rng.random_range(-PI..PI);
        out[1] = rng.random_range(-1.0..1.0);
    }
}

/// State `(angle, ω)`; `dθ = ω dt`, `dω = (-10 sin θ + a) dt + σ dW`;
/// torque clipped to `[-2, 2]`; `x_0` uniform over angle and `ω ∈ [-1, 1]`.
pub fn make_pendulum(noise_sigma: f64, horizon: f64, beta: f64) -> Result<SdeEnv> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "pendulum noise must be nonnegative, got {noise_sigma}"
        )));
    }
    SdeEnv::new("pendulum", (2, 1, 1), horizon, beta, Arc::new(PendulumDynamics { noise_sigma }))?
        .with_action_clip(vec![ClipBox {
            low: -PENDULUM_MAX_TORQUE,
            high: PENDULUM_MAX_TORQUE,
        }])
}
