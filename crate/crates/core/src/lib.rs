//! Continuous-time reinforcement learning with deterministic policies.
//!
//! The crate is organised bottom-up:
//!
//! - [`sde`]: environment abstraction, Euler–Maruyama stepping, rollouts.
//! - [`envs`]: stock environments (linear-quadratic family, 1-D OU, pendulum).
//! - [`nn`]: small MLPs with exact reverse-mode gradients, Adam, target blending.
//! - [`replay`]: episode-preserving replay with L-step window sampling.
//! - [`critic`]: reparameterised advantage rate, martingale loss, semi-gradients.
//! - [`actor`]: deterministic policy, policy loss, exploration.
//! - [`agents`]: training loops for CT-DDPG and the baselines.
//! - [`oracle`]: analytic LQR ground truth (Lyapunov/Riccati ODEs, DPG, residuals).
//! - [`analysis`]: gradient statistics and step-size sweeps.
//! - [`config`]: flat key=value configuration and run manifests.

pub mod actor;
pub mod agents;
pub mod analysis;
pub mod config;
pub mod critic;
pub mod envs;
mod error;
pub mod nn;
pub mod oracle;
pub mod replay;
pub mod report;
pub mod rng;
pub mod sde;

pub use error::{Error, Result};
