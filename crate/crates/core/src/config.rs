//! Flat `key=value` configuration.
//!
//! ```text
//! # comments run to the end of the line
//! env.name = ou1d
//! train.h = 0.05
//! train.agent = ctddpg
//! ```
//!
//! Keys carry a section prefix (`env.`, `train.`, `net.`, `qlearn.`,
//! `sweep.`, `oracle.`, `grad.`). Later entries override earlier ones, so a
//! file followed by command-line overrides is just one longer list.
//! [`resolve`] turns the list into a [`RunConfig`] with every default filled
//! in, and [`RunConfig::dump`] writes it back out in a form that resolves to
//! the same value.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::agents::{AgentKind, QLearningConfig, TrainConfig};
use crate::envs::{double_integrator_spec, make_lqr, make_pendulum, ou_1d_spec, LqrSpec};
use crate::rng::{Purpose, SeedTree};
use crate::sde::{num_steps, SdeEnv};
use crate::{Error, Result};

/// Every accepted key, in dump order.
pub const KEYS: &[&str] = &[
    "env.name",
    "env.theta",
    "env.sigma",
    "env.control_cost",
    "env.horizon",
    "env.beta",
    "train.agent",
    "train.h",
    "train.episodes",
    "train.update_every",
    "train.l_min",
    "train.l_max",
    "train.sigma_explore",
    "train.tau",
    "train.lr",
    "train.actor_lr",
    "train.batch",
    "train.terminal_weight",
    "train.workers",
    "train.seed",
    "train.buffer_capacity",
    "train.eval_every",
    "train.eval_rollouts",
    "train.record_wall_clock",
    "net.width",
    "net.depth",
    "qlearn.entropy",
    "qlearn.action_samples",
    "qlearn.penalty_weight",
    "sweep.mode",
    "sweep.h_list",
    "sweep.delta",
    "sweep.samples",
    "sweep.warmup_episodes",
    "sweep.warmup_actor_lr",
    "oracle.h",
    "oracle.ode_step",
    "oracle.rollouts",
    "oracle.behavior_sigma",
    "oracle.perturb",
    "oracle.corrupt_p",
    "grad.h",
    "grad.probes",
    "grad.rollouts",
    "grad.eps",
    "grad.corrupt_advantage",
];

fn valid_keys() -> String {
    KEYS.join(", ")
}

/// Maps a key to its canonical form. Full keys pass through; a bare name
/// (`h`, `seed`) resolves to `train.<name>` if that exists, otherwise to the
/// only key with that name. `env` is short for `env.name`.
pub fn canonical_key(key: &str) -> Result<&'static str> {
    let key = key.trim();
    if let Some(k) = KEYS.iter().find(|k| **k == key) {
        return Ok(k);
    }
    if key == "env" {
        return Ok("env.name");
    }
    if !key.contains('.') {
        let candidates: Vec<&'static str> = KEYS
            .iter()
            .copied()
            .filter(|k| k.split_once('.').is_some_and(|(_, name)| name == key))
            .collect();
        if let Some(k) = candidates.iter().find(|k| k.starts_with("train.")) {
            return Ok(k);
        }
        if let [k] = candidates[..] {
            return Ok(k);
        }
        if candidates.len() > 1 {
            return Err(Error::Config(format!("ambiguous key {key:?}: one of {}", candidates.join(", "))));
        }
    }
    Err(Error::Config(format!("unknown key {key:?}; valid keys: {}", valid_keys())))
}

/// One `key=value` assignment with its origin for error messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: &'static str,
    pub value: String,
    pub origin: String,
}

/// Parses config text. `origin` names the source (a path, or "override").
pub fn parse_entries(text: &str, origin: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key=value, got {line:?}", no + 1)))?;
        let key = canonical_key(key).map_err(|e| Error::Config(format!("{origin}:{}: {}", no + 1, strip(e))))?;
        out.push(Entry {
            key,
            value: value.trim().to_string(),
            origin: format!("{origin}:{}", no + 1),
        });
    }
    Ok(out)
}

/// Reads and parses a config file; the error names the path.
pub fn read_entries(path: &Path) -> Result<Vec<Entry>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
    parse_entries(&text, &path.display().to_string())
}

/// Parses one `key=value` override.
pub fn parse_override(arg: &str) -> Result<Entry> {
    let (key, value) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {arg:?} is not key=value")))?;
    Ok(Entry {
        key: canonical_key(key)?,
        value: value.trim().to_string(),
        origin: "override".into(),
    })
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvName {
    Ou1d,
    /// The stock 2-D linear-quadratic problem (double integrator).
    Lqr,
    Pendulum,
}

impl EnvName {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ou1d => "ou1d",
            Self::Lqr => "lqr",
            Self::Pendulum => "pendulum",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ou1d" => Ok(Self::Ou1d),
            "lqr" | "lqr2d" | "double_integrator" => Ok(Self::Lqr),
            "pendulum" => Ok(Self::Pendulum),
            _ => Err(Error::Config(format!("unknown env {s:?} (expected ou1d, lqr or pendulum)"))),
        }
    }

    fn uses(self, key: &str) -> bool {
        match key {
            "env.theta" => self == Self::Ou1d,
            "env.control_cost" => self == Self::Lqr,
            _ => true,
        }
    }

    fn default_width(self) -> usize {
        match self {
            Self::Lqr => 400,
            Self::Ou1d | Self::Pendulum => 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSettings {
    pub name: EnvName,
    /// OU mean reversion.
    pub theta: f64,
    /// Diffusion scale.
    pub sigma: f64,
    pub control_cost: f64,
    pub horizon: f64,
    pub beta: f64,
}

impl EnvSettings {
    pub fn lqr_spec(&self) -> Result<Option<LqrSpec>> {
        Ok(match self.name {
            EnvName::Ou1d => Some(ou_1d_spec(self.theta, self.sigma, self.horizon, self.beta)?),
            EnvName::Lqr => Some(double_integrator_spec(self.sigma, self.control_cost, self.horizon, self.beta)),
            EnvName::Pendulum => None,
        })
    }

    pub fn build(&self) -> Result<SdeEnv> {
        match self.lqr_spec()? {
            Some(spec) => make_lqr(spec),
            None => make_pendulum(self.sigma, self.horizon, self.beta),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepMode {
    OneStep,
    MultiStep,
}

impl SweepMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::OneStep => "one_step",
            Self::MultiStep => "multi_step",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "one_step" => Ok(Self::OneStep),
            "multi_step" => Ok(Self::MultiStep),
            _ => Err(Error::Config(format!("unknown sweep mode {s:?} (expected one_step or multi_step)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSettings {
    pub mode: SweepMode,
    pub h_list: Vec<f64>,
    /// `L·h` for the multi-step sweep.
    pub delta: f64,
    pub samples: usize,
    /// Length of the training run that produces the frozen networks.
    pub warmup_episodes: usize,
    /// Policy learning rate during the warm-up; 0 trains the critic only.
    pub warmup_actor_lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSettings {
    pub h: f64,
    pub ode_step: f64,
    pub rollouts: usize,
    /// Exploration noise of the behavior policy in the martingale controls.
    pub behavior_sigma: f64,
    /// Coefficient of the `x²` perturbation in the negative control.
    pub perturb: f64,
    /// Debug: scales the oracle `P` by `1 + corrupt_p`.
    pub corrupt_p: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradSettings {
    pub h: f64,
    pub probes: usize,
    pub rollouts: usize,
    /// Relative step: `ε = eps·(‖φ‖ + 1)`.
    pub eps: f64,
    /// Debug: scales the `P` used by the DPG estimate by `1 + corrupt_advantage`.
    pub corrupt_advantage: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub agent: AgentKind,
    pub env: EnvSettings,
    pub train: QLearningConfig,
    pub sweep: SweepSettings,
    pub oracle: OracleSettings,
    pub grad: GradSettings,
}

struct Lookup {
    values: BTreeMap<&'static str, (String, String)>,
}

impl Lookup {
    fn raw(&self, key: &str) -> Option<&(String, String)> {
        self.values.get(key)
    }

    fn parse<T>(&self, key: &str, default: T, what: &str, f: impl Fn(&str) -> Option<T>) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some((v, origin)) => f(v).ok_or_else(|| Error::Config(format!("{origin}: {key} expects {what}, got {v:?}"))),
        }
    }

    fn f64(&self, key: &str, default: f64) -> Result<f64> {
        self.parse(key, default, "a finite number", |v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
    }

    fn usize(&self, key: &str, default: usize) -> Result<usize> {
        self.parse(key, default, "a nonnegative integer", |v| v.parse().ok())
    }

    fn u64(&self, key: &str, default: u64) -> Result<u64> {
        self.parse(key, default, "a nonnegative integer", |v| v.parse().ok())
    }

    fn bool(&self, key: &str, default: bool) -> Result<bool> {
        self.parse(key, default, "true or false", |v| v.parse().ok())
    }

    /// `auto` or absent gives `None`.
    fn opt_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.raw(key) {
            Some((v, _)) if v != "auto" => self.f64(key, 0.0).map(Some),
            _ => Ok(None),
        }
    }

    fn opt_usize(&self, key: &str) -> Result<Option<usize>> {
        match self.raw(key) {
            Some((v, _)) if v != "auto" => self.usize(key, 0).map(Some),
            _ => Ok(None),
        }
    }

    fn list(&self, key: &str, default: Vec<f64>) -> Result<Vec<f64>> {
        self.parse(key, default, "a comma-separated list of numbers", |v| {
            v.split(',')
                .map(|s| s.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect::<Option<Vec<_>>>()
                .filter(|l| !l.is_empty())
        })
    }
}

fn check_divides(what: &str, horizon: f64, h: f64) -> Result<usize> {
    num_steps(horizon, h).map_err(|_| {
        Error::Config(format!(
            "{what}={h} does not divide the horizon T={horizon} into an integer number of steps ({} steps)",
            horizon / h
        ))
    })
}

/// Applies defaults to `entries` (later entries win) and validates the result.
pub fn resolve(entries: &[Entry]) -> Result<RunConfig> {
    let mut values = BTreeMap::new();
    for e in entries {
        values.insert(e.key, (e.value.clone(), e.origin.clone()));
    }
    let get = Lookup { values };

    let name = EnvName::parse(get.raw("env.name").map_or("ou1d", |(v, _)| v.as_str()))?;
    for (key, (_, origin)) in &get.values {
        if !name.uses(key) {
            return Err(Error::Config(format!("{origin}: {key} does not apply to env {}", name.name())));
        }
    }
    let (sigma, horizon) = match name {
        EnvName::Ou1d => (0.5, 1.0),
        EnvName::Lqr => (0.3, 1.0),
        EnvName::Pendulum => (0.1, 10.0),
    };
    let env = EnvSettings {
        name,
        theta: get.f64("env.theta", 1.0)?,
        sigma: get.f64("env.sigma", sigma)?,
        control_cost: get.f64("env.control_cost", 1.0)?,
        horizon: get.f64("env.horizon", horizon)?,
        beta: get.f64("env.beta", 0.8)?,
    };
    if !(env.horizon > 0.0) {
        return Err(Error::Config(format!("env.horizon must be positive, got {}", env.horizon)));
    }

    let agent = AgentKind::parse(get.raw("train.agent").map_or("ctddpg", |(v, _)| v.as_str()))?;
    let h = get.f64("train.h", 0.05)?;
    check_divides("train.h", env.horizon, h)?;
    let width = get.usize("net.width", name.default_width())?;
    let depth = get.usize("net.depth", 2)?;
    let mut base = TrainConfig::defaults(h, env.beta, width);
    base.hidden = vec![width; depth];
    base.episodes = get.usize("train.episodes", base.episodes)?;
    base.update_every = get.opt_usize("train.update_every")?.unwrap_or(base.update_every);
    base.l_min = get.usize("train.l_min", base.l_min)?;
    base.l_max = get.usize("train.l_max", base.l_max)?;
    base.sigma_explore = get.f64("train.sigma_explore", base.sigma_explore)?;
    base.tau = get.f64("train.tau", base.tau)?;
    base.lr = get.f64("train.lr", if name == EnvName::Pendulum { 3e-3 } else { base.lr })?;
    base.actor_lr = Some(get.opt_f64("train.actor_lr")?.unwrap_or(base.lr));
    base.batch = get.usize("train.batch", base.batch)?;
    base.terminal_weight = get.f64("train.terminal_weight", base.terminal_weight)?;
    base.workers = get.usize("train.workers", base.workers)?;
    base.seed = get.u64("train.seed", base.seed)?;
    base.buffer_capacity = get.usize("train.buffer_capacity", base.buffer_capacity)?;
    base.eval_every = get.usize("train.eval_every", base.eval_every)?;
    base.eval_rollouts = get.usize("train.eval_rollouts", base.eval_rollouts)?;
    base.record_wall_clock = get.bool("train.record_wall_clock", base.record_wall_clock)?;
    let mut train = QLearningConfig::from_base(base);
    train.entropy = get.f64("qlearn.entropy", train.entropy)?;
    train.action_samples = get.usize("qlearn.action_samples", train.action_samples)?;
    train.penalty_weight = get.f64("qlearn.penalty_weight", train.penalty_weight)?;
    if !(train.entropy > 0.0) || train.action_samples == 0 {
        return Err(Error::Config("qlearn.entropy must be positive and qlearn.action_samples at least 1".into()));
    }

    let mode = SweepMode::parse(get.raw("sweep.mode").map_or("one_step", |(v, _)| v.as_str()))?;
    let default_list = match mode {
        SweepMode::OneStep => vec![0.1, 0.05, 0.02, 0.01, 0.005],
        SweepMode::MultiStep => vec![0.05, 0.025, 0.01, 0.005],
    };
    let sweep = SweepSettings {
        mode,
        h_list: get.list("sweep.h_list", default_list)?,
        delta: get.f64("sweep.delta", 0.5)?,
        samples: get.usize("sweep.samples", 100_000)?,
        warmup_episodes: get.usize("sweep.warmup_episodes", 50)?,
        warmup_actor_lr: get.f64("sweep.warmup_actor_lr", 0.0)?,
    };
    for &sh in &sweep.h_list {
        check_divides("sweep.h_list entry", env.horizon, sh)?;
        if mode == SweepMode::MultiStep {
            crate::analysis::window_length(sweep.delta, sh).map_err(|e| Error::Config(strip(e)))?;
        }
    }
    if sweep.samples < 2 {
        return Err(Error::Config("sweep.samples must be at least 2".into()));
    }

    let oracle_h = get.f64("oracle.h", 0.01)?;
    check_divides("oracle.h", env.horizon, oracle_h)?;
    let oracle = OracleSettings {
        h: oracle_h,
        ode_step: get.f64("oracle.ode_step", oracle_h / 10.0)?,
        rollouts: get.usize("oracle.rollouts", 10_000)?,
        behavior_sigma: get.f64("oracle.behavior_sigma", 0.3)?,
        perturb: get.f64("oracle.perturb", 0.1)?,
        corrupt_p: get.f64("oracle.corrupt_p", 0.0)?,
    };
    check_divides("oracle.ode_step", env.horizon, oracle.ode_step)?;
    if oracle.rollouts < 2 {
        return Err(Error::Config("oracle.rollouts must be at least 2".into()));
    }

    let grad_h = get.f64("grad.h", 0.01)?;
    check_divides("grad.h", env.horizon, grad_h)?;
    let grad = GradSettings {
        h: grad_h,
        probes: get.usize("grad.probes", 5)?,
        rollouts: get.usize("grad.rollouts", 10_000)?,
        eps: get.f64("grad.eps", 1e-3)?,
        corrupt_advantage: get.f64("grad.corrupt_advantage", 0.0)?,
    };
    if !(grad.eps > 0.0) || grad.rollouts < 2 {
        return Err(Error::Config("grad.eps must be positive and grad.rollouts at least 2".into()));
    }

    let cfg = RunConfig {
        agent,
        env,
        train,
        sweep,
        oracle,
        grad,
    };
    let built = cfg.env.build().map_err(|e| Error::Config(format!("env: {}", strip(e))))?;
    cfg.train.base.validate(&built)?;
    Ok(cfg)
}

fn list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every applicable key with its resolved value, one `key=value` per line.
    pub fn dump(&self) -> String {
        let t = &self.train.base;
        let width = t.hidden.first().copied().unwrap_or(0);
        let value = |key: &str| -> String {
            match key {
                "env.name" => self.env.name.name().into(),
                "env.theta" => self.env.theta.to_string(),
                "env.sigma" => self.env.sigma.to_string(),
                "env.control_cost" => self.env.control_cost.to_string(),
                "env.horizon" => self.env.horizon.to_string(),
                "env.beta" => self.env.beta.to_string(),
                "train.agent" => self.agent.name().into(),
                "train.h" => t.h.to_string(),
                "train.episodes" => t.episodes.to_string(),
                "train.update_every" => t.update_every.to_string(),
                "train.l_min" => t.l_min.to_string(),
                "train.l_max" => t.l_max.to_string(),
                "train.sigma_explore" => t.sigma_explore.to_string(),
                "train.tau" => t.tau.to_string(),
                "train.lr" => t.lr.to_string(),
                "train.actor_lr" => t.actor_lr().to_string(),
                "train.batch" => t.batch.to_string(),
                "train.terminal_weight" => t.terminal_weight.to_string(),
                "train.workers" => t.workers.to_string(),
                "train.seed" => t.seed.to_string(),
                "train.buffer_capacity" => t.buffer_capacity.to_string(),
                "train.eval_every" => t.eval_every.to_string(),
                "train.eval_rollouts" => t.eval_rollouts.to_string(),
                "train.record_wall_clock" => t.record_wall_clock.to_string(),
                "net.width" => width.to_string(),
                "net.depth" => t.hidden.len().to_string(),
                "qlearn.entropy" => self.train.entropy.to_string(),
                "qlearn.action_samples" => self.train.action_samples.to_string(),
                "qlearn.penalty_weight" => self.train.penalty_weight.to_string(),
                "sweep.mode" => self.sweep.mode.name().into(),
                "sweep.h_list" => list(&self.sweep.h_list),
                "sweep.delta" => self.sweep.delta.to_string(),
                "sweep.samples" => self.sweep.samples.to_string(),
                "sweep.warmup_episodes" => self.sweep.warmup_episodes.to_string(),
                "sweep.warmup_actor_lr" => self.sweep.warmup_actor_lr.to_string(),
                "oracle.h" => self.oracle.h.to_string(),
                "oracle.ode_step" => self.oracle.ode_step.to_string(),
                "oracle.rollouts" => self.oracle.rollouts.to_string(),
                "oracle.behavior_sigma" => self.oracle.behavior_sigma.to_string(),
                "oracle.perturb" => self.oracle.perturb.to_string(),
                "oracle.corrupt_p" => self.oracle.corrupt_p.to_string(),
                "grad.h" => self.grad.h.to_string(),
                "grad.probes" => self.grad.probes.to_string(),
                "grad.rollouts" => self.grad.rollouts.to_string(),
                "grad.eps" => self.grad.eps.to_string(),
                "grad.corrupt_advantage" => self.grad.corrupt_advantage.to_string(),
                _ => unreachable!("key table and dump disagree on {key}"),
            }
        };
        let mut out = String::new();
        for key in KEYS.iter().filter(|k| self.env.name.uses(k)) {
            let _ = writeln!(out, "{key}={}", value(key));
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of the dump.
    pub fn run_id(&self) -> String {
        let digest = Sha256::digest(self.dump().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Build identifier baked in at compile time; `CTRL_BUILD_ID` overrides the
/// package version.
pub fn build_id() -> String {
    option_env!("CTRL_BUILD_ID")
        .map(str::to_string)
        .unwrap_or_else(|| format!("ctrl-core-{}", env!("CARGO_PKG_VERSION")))
}

/// Self-description written next to every output file.
#[derive(Clone, Debug)]
pub struct RunManifest {
    pub command: String,
    pub run_id: String,
    pub build: String,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub status: String,
    pub root_seed: u64,
    /// Collection stream key for episode 0 of each worker.
    pub worker_seeds: Vec<u64>,
    /// Output files relative to the run directory.
    pub outputs: Vec<String>,
    pub resolved: String,
}

impl RunManifest {
    pub fn start(command: &str, cfg: &RunConfig) -> Self {
        let seeds = SeedTree::new(cfg.train.base.seed);
        Self {
            command: command.into(),
            run_id: cfg.run_id(),
            build: build_id(),
            started_unix: unix_now(),
            finished_unix: None,
            status: "running".into(),
            root_seed: seeds.root(),
            worker_seeds: (0..cfg.train.base.workers as u64)
                .map(|w| seeds.key(Purpose::Collect, w, 0))
                .collect(),
            outputs: Vec::new(),
            resolved: cfg.dump(),
        }
    }

    pub fn finish(&mut self, status: &str) {
        self.status = status.into();
        self.finished_unix = Some(unix_now());
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command={}", self.command);
        let _ = writeln!(out, "run_id={}", self.run_id);
        let _ = writeln!(out, "build={}", self.build);
        let _ = writeln!(out, "started_unix={:.3}", self.started_unix);
        if let Some(t) = self.finished_unix {
            let _ = writeln!(out, "finished_unix={t:.3}");
        }
        let _ = writeln!(out, "status={}", self.status);
        let _ = writeln!(out, "root_seed={}", self.root_seed);
        for (w, s) in self.worker_seeds.iter().enumerate() {
            let _ = writeln!(out, "worker.{w}.seed={s:016x}");
        }
        for o in &self.outputs {
            let _ = writeln!(out, "output={o}");
        }
        let _ = writeln!(out, "# resolved config");
        out.push_str(&self.resolved);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }

    /// Entries of the resolved-config block in a rendered manifest.
    pub fn resolved_entries(text: &str, origin: &str) -> Result<Vec<Entry>> {
        let block = text
            .split_once("# resolved config\n")
            .map(|(_, b)| b)
            .ok_or_else(|| Error::Config(format!("{origin}: no resolved config block")))?;
        parse_entries(block, origin)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> Result<RunConfig> {
        resolve(&parse_entries(text, "test")?)
    }

    #[test]
    fn empty_config_gives_defaults() {
        let c = cfg("").unwrap();
        assert_eq!(c.agent, AgentKind::CtDdpg);
        assert_eq!(c.env.name, EnvName::Ou1d);
        assert_eq!(c.env.sigma, 0.5);
        let t = &c.train.base;
        assert_eq!((t.h, t.beta, t.lr, t.batch, t.tau, t.workers), (0.05, 0.8, 3e-4, 256, 0.005, 8));
        assert_eq!((t.l_min, t.l_max, t.update_every), (2, 10, 1));
        assert_eq!(t.hidden, vec![64, 64]);
        assert_eq!(c.oracle.ode_step, 1e-3);
    }

    #[test]
    fn env_dependent_defaults() {
        let c = cfg("env.name=pendulum").unwrap();
        assert_eq!(c.train.base.lr, 3e-3);
        assert_eq!(c.train.base.hidden, vec![64, 64]);
        let c = cfg("env.name = lqr\ntrain.h = 0.01").unwrap();
        assert_eq!(c.train.base.hidden, vec![400, 400]);
        assert_eq!(c.train.base.update_every, 5);
    }

    #[test]
    fn comments_and_later_entries_win() {
        let c = cfg("# header\ntrain.seed = 3 # trailing\n\ntrain.seed=4\n").unwrap();
        assert_eq!(c.train.base.seed, 4);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let msg = cfg("train.learning_rate = 1").unwrap_err().to_string();
        assert!(msg.contains("train.learning_rate") && msg.contains("train.lr") && msg.contains("env.name"), "{msg}");
        assert!(msg.contains("test:1"));
    }

    #[test]
    fn non_integral_step_count_is_rejected() {
        let msg = cfg("train.h=0.03").unwrap_err().to_string();
        assert!(msg.contains("train.h=0.03"), "{msg}");
        assert!(cfg("train.h=0.025").is_ok());
    }

    #[test]
    fn multi_step_delta_must_fit() {
        let err = cfg("sweep.mode=multi_step\nsweep.delta=0.3\nsweep.h_list=0.04").unwrap_err();
        assert!(err.to_string().contains("7.5"), "{err}");
    }

    #[test]
    fn inapplicable_env_key_is_rejected() {
        assert!(cfg("env.name=lqr\nenv.theta=2").is_err());
        assert!(cfg("env.name=pendulum\nenv.control_cost=2").is_err());
    }

    #[test]
    fn bare_names_prefer_train_section() {
        assert_eq!(canonical_key("h").unwrap(), "train.h");
        assert_eq!(canonical_key("seed").unwrap(), "train.seed");
        assert_eq!(canonical_key("env").unwrap(), "env.name");
        assert_eq!(canonical_key("delta").unwrap(), "sweep.delta");
        assert!(canonical_key("rollouts").is_err());
        assert!(canonical_key("nope").is_err());
    }

    #[test]
    fn dump_resolves_to_itself() {
        for text in ["", "env.name=lqr\ntrain.agent=qlearn\ntrain.h=0.01", "env.name=pendulum\nsweep.mode=multi_step"] {
            let c = cfg(text).unwrap();
            let again = cfg(&c.dump()).unwrap();
            assert_eq!(c, again);
            assert_eq!(c.dump(), again.dump());
            assert_eq!(c.run_id(), again.run_id());
        }
    }

    #[test]
    fn dump_makes_every_default_explicit() {
        let c = cfg("").unwrap();
        let dump = c.dump();
        for key in KEYS.iter().filter(|k| **k != "env.control_cost") {
            assert!(dump.contains(&format!("{key}=")), "{key} missing");
        }
        assert!(!dump.contains("env.control_cost"));
    }

    #[test]
    fn run_id_tracks_config() {
        let a = cfg("").unwrap().run_id();
        let b = cfg("train.seed=1").unwrap().run_id();
        assert_eq!(a.len(), 16);
        assert_ne!(a, b);
    }

    #[test]
    fn manifest_round_trips_resolved_block() {
        let c = cfg("train.seed=9\ntrain.workers=2").unwrap();
        let mut m = RunManifest::start("train", &c);
        m.outputs.push("curve.csv".into());
        m.finish("completed");
        let text = m.render();
        assert!(text.contains("worker.1.seed=") && !text.contains("worker.2.seed="));
        let back = resolve(&RunManifest::resolved_entries(&text, "manifest").unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_values_name_the_key() {
        let msg = cfg("train.batch=-1").unwrap_err().to_string();
        assert!(msg.contains("train.batch"), "{msg}");
        assert!(cfg("train.agent=sac").is_err());
        assert!(cfg("train.tau=0").is_err());
    }
}
