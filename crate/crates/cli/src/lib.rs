//! Experiment orchestration behind the `ctrl` binary.
//!
//! Every command resolves a [`RunConfig`] from an optional config file plus
//! overrides, writes its outputs into one run directory together with
//! `manifest.txt` and `resolved.cfg`, and reports an [`Outcome`] that maps to
//! the process exit code.

pub mod battery;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use ctrl_core::agents::{train_ct_ddpg, write_curve_row, AgentKind, CurveRow, Learner, Observer, CURVE_HEADER};
use ctrl_core::analysis::{fit_log_slope, multi_step_variance_sweep, one_step_variance_sweep, write_sweep_csv, SweepRow, SweepSetup};
use ctrl_core::config::{parse_override, read_entries, resolve, Entry, RunConfig, RunManifest, SweepMode};
use ctrl_core::critic::CriticNets;
use ctrl_core::nn::MlpNet;
use ctrl_core::report::fmt_f64;
use ctrl_core::rng::{Purpose, SeedTree};
use ctrl_core::sde::SdeEnv;
use ctrl_core::{Error, Result};

/// Set by the Ctrl-C handler; training stops after the current episode.
pub static STOP: AtomicBool = AtomicBool::new(false);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Diverged,
    AcceptanceFailed,
}

pub const EXIT_PASS: u8 = 0;
pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_ACCEPTANCE: u8 = 4;

pub fn exit_code(result: &Result<Outcome>) -> u8 {
    match result {
        Ok(Outcome::Pass) => EXIT_PASS,
        Ok(Outcome::Diverged) => EXIT_DIVERGED,
        Ok(Outcome::AcceptanceFailed) => EXIT_ACCEPTANCE,
        Err(Error::Config(_) | Error::StepSize { .. }) => EXIT_CONFIG,
        Err(Error::NonFiniteLoss { .. } | Error::Diverged { .. }) => EXIT_DIVERGED,
        Err(_) => EXIT_RUNTIME,
    }
}

/// Where the configuration comes from and where outputs go.
#[derive(Clone, Debug, Default)]
pub struct Invocation {
    pub config: Option<PathBuf>,
    /// `key=value` overrides in application order.
    pub overrides: Vec<String>,
    /// Run directory; defaults to `$CTRL_OUT_DIR/<command>-<run_id>`.
    pub out: Option<PathBuf>,
}

impl Invocation {
    pub fn entries(&self) -> Result<Vec<Entry>> {
        let mut entries = match &self.config {
            Some(path) => read_entries(path)?,
            None => Vec::new(),
        };
        for o in &self.overrides {
            entries.push(parse_override(o)?);
        }
        Ok(entries)
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        resolve(&self.entries()?)
    }

    fn run_dir(&self, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
        let dir = match &self.out {
            Some(d) => d.clone(),
            None => {
                let root = std::env::var_os("CTRL_OUT_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
                root.join(format!("{command}-{}", cfg.run_id()))
            }
        };
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

/// Splits free-form arguments into overrides and the `--config`/`--out`
/// paths. Accepts `key=value`, `--key=value` and `--key value`; dashes in
/// flag names become underscores.
pub fn split_args(args: &[String]) -> Result<(Vec<String>, Option<PathBuf>, Option<PathBuf>)> {
    let mut overrides = Vec::new();
    let (mut config, mut out) = (None, None);
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let (key, value) = if let Some(flag) = arg.strip_prefix("--") {
            match flag.split_once('=') {
                Some((k, v)) => (k.replace('-', "_"), v.to_string()),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::Config(format!("flag --{flag} needs a value")))?;
                    (flag.replace('-', "_"), v.clone())
                }
            }
        } else {
            let (k, v) = arg
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("argument {arg:?} is not key=value")))?;
            (k.to_string(), v.to_string())
        };
        match key.as_str() {
            "config" => config = Some(PathBuf::from(value)),
            "out" => out = Some(PathBuf::from(value)),
            _ => overrides.push(format!("{key}={value}")),
        }
    }
    Ok((overrides, config, out))
}

fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write(&mut w)?;
    w.flush()?;
    Ok(())
}

struct RunFiles {
    dir: PathBuf,
    manifest: RunManifest,
}

impl RunFiles {
    fn start(inv: &Invocation, command: &str, cfg: &RunConfig) -> Result<Self> {
        let dir = inv.run_dir(command, cfg)?;
        let manifest = RunManifest::start(command, cfg);
        std::fs::write(dir.join("resolved.cfg"), cfg.dump())?;
        manifest.write(&dir.join("manifest.txt"))?;
        Ok(Self { dir, manifest })
    }

    fn output(&mut self, name: &str) -> PathBuf {
        if !self.manifest.outputs.iter().any(|o| o == name) {
            self.manifest.outputs.push(name.into());
        }
        self.dir.join(name)
    }

    fn finish(mut self, status: &str) -> Result<()> {
        self.manifest.finish(status);
        self.manifest.write(&self.dir.join("manifest.txt"))
    }
}

/// Streams the curve to disk and writes checkpoints at every evaluation.
struct TrainObserver {
    curve: BufWriter<File>,
    checkpoints: PathBuf,
    stop: Option<&'static AtomicBool>,
}

impl Observer for TrainObserver {
    fn on_episode(&mut self, row: &CurveRow) -> Result<()> {
        write_curve_row(&mut self.curve, row)
    }

    fn on_eval(&mut self, episode: usize, learner: &dyn Learner) -> Result<()> {
        self.curve.flush()?;
        let dir = self.checkpoints.join(episode.to_string());
        std::fs::create_dir_all(&dir)?;
        for (name, net) in learner.networks() {
            net.save(&dir.join(format!("{name}.ctnn")))?;
        }
        Ok(())
    }

    fn stop_requested(&self) -> bool {
        self.stop.is_some_and(|s| s.load(Ordering::SeqCst))
    }
}

/// Trains the configured agent. Writes `curve.csv` (one row per episode),
/// `checkpoints/<episode>/<net>.ctnn` at every evaluation, `resolved.cfg` and
/// `manifest.txt`.
pub fn cmd_train(inv: &Invocation, stop: Option<&'static AtomicBool>) -> Result<Outcome> {
    let cfg = inv.resolve()?;
    let env = cfg.env.build()?;
    let mut files = RunFiles::start(inv, "train", &cfg)?;
    let curve_path = files.output("curve.csv");
    let mut curve = BufWriter::new(File::create(&curve_path)?);
    writeln!(curve, "{CURVE_HEADER}")?;
    files.manifest.outputs.push("checkpoints".into());
    let mut observer = TrainObserver {
        curve,
        checkpoints: files.dir.join("checkpoints"),
        stop,
    };
    let result = run_agent(&cfg, &env, &mut observer);
    observer.curve.flush()?;
    let stopped = observer.stop_requested();
    match result {
        Ok(out) => {
            let last = out.final_eval();
            let diverged = last.is_some_and(|v| !v.is_finite());
            println!(
                "agent={} env={} episodes={} env_steps={} diverged_episodes={} final_eval={}",
                cfg.agent.name(),
                cfg.env.name.name(),
                out.curve.len(),
                out.counters.env_steps,
                out.counters.diverged_episodes,
                last.map_or("none".into(), fmt_f64)
            );
            println!("run_dir={}", files.dir.display());
            let status = if diverged {
                "diverged"
            } else if stopped {
                "interrupted"
            } else {
                "completed"
            };
            files.finish(status)?;
            Ok(if diverged { Outcome::Diverged } else { Outcome::Pass })
        }
        Err(e) => {
            eprintln!("training failed: {e}");
            let status = if matches!(e, Error::NonFiniteLoss { .. }) { "diverged" } else { "failed" };
            files.finish(status)?;
            Err(e)
        }
    }
}

fn run_agent(cfg: &RunConfig, env: &SdeEnv, observer: &mut dyn Observer) -> Result<ctrl_core::agents::TrainOutput> {
    let base = &cfg.train.base;
    Ok(match cfg.agent {
        AgentKind::CtDdpg => train_ct_ddpg(base, env, observer)?.0,
        AgentKind::Dau => ctrl_core::agents::train_dau(base, env, observer)?.0,
        AgentKind::Ddpg => ctrl_core::agents::train_ddpg_discrete(base, env, observer)?.0,
        AgentKind::QLearn => ctrl_core::agents::train_q_learning(&cfg.train, env, observer)?.0,
    })
}

fn require_lqr(env: &SdeEnv) -> Result<()> {
    if env.lqr().is_none() {
        return Err(Error::Config(format!(
            "env {} has no closed-form oracle; use ou1d or lqr",
            env.name
        )));
    }
    Ok(())
}

/// Runs the oracle battery and writes `oracle_report.csv`.
pub fn cmd_oracle_check(inv: &Invocation) -> Result<Outcome> {
    let cfg = inv.resolve()?;
    let env = cfg.env.build()?;
    require_lqr(&env)?;
    let mut files = RunFiles::start(inv, "oracle-check", &cfg)?;
    let checks = battery::oracle_battery(&env, &cfg.oracle, cfg.train.base.seed)?;
    write_file(&files.output("oracle_report.csv"), |w| battery::write_report(w, &checks))?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.quantity.as_str()).collect();
    println!(
        "oracle checks: {} of {} passed{}",
        checks.len() - failed.len(),
        checks.len(),
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
    );
    files.finish(if failed.is_empty() { "pass" } else { "fail" })?;
    Ok(if failed.is_empty() { Outcome::Pass } else { Outcome::AcceptanceFailed })
}

/// DPG formula against finite differences; writes `grad_check.csv`.
pub fn cmd_grad_check(inv: &Invocation) -> Result<Outcome> {
    let cfg = inv.resolve()?;
    let env = cfg.env.build()?;
    require_lqr(&env)?;
    let mut files = RunFiles::start(inv, "grad-check", &cfg)?;
    let probes = battery::grad_check(&env, &cfg.grad, cfg.train.base.seed)?;
    write_file(&files.output("grad_check.csv"), |w| battery::write_grad_report(w, &probes))?;
    for (i, p) in probes.iter().enumerate() {
        println!(
            "probe {i}: cosine={} rel_err={}{} {}",
            fmt_f64(p.cosine),
            fmt_f64(p.rel_err),
            if p.both_zero { " (both below absolute threshold)" } else { "" },
            if p.pass { "PASS" } else { "FAIL" }
        );
    }
    let ok = probes.iter().all(|p| p.pass);
    files.finish(if ok { "pass" } else { "fail" })?;
    Ok(if ok { Outcome::Pass } else { Outcome::AcceptanceFailed })
}

/// Pass/fail of a sweep against its bands.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSummary {
    pub mode: SweepMode,
    /// Fitted `log var_trace` vs `log h` slope (largest `h` left out).
    pub slope: Option<f64>,
    /// `max/min` of `E_norm` over the rows.
    pub e_norm_ratio: f64,
    /// Largest `max(v/v₀, v₀/v)` with `v₀` the variance at the largest `h`.
    pub var_ratio: f64,
    pub pass: bool,
}

pub const ONE_STEP_SLOPE_BAND: (f64, f64) = (-1.3, -0.7);
pub const E_NORM_MAX_RATIO: f64 = 2.0;
pub const MULTI_STEP_MAX_VAR_RATIO: f64 = 3.0;

pub fn summarize_sweep(mode: SweepMode, rows: &[SweepRow]) -> SweepSummary {
    let norms: Vec<f64> = rows.iter().map(|r| r.e_norm).collect();
    let e_norm_ratio = norms.iter().copied().fold(0.0, f64::max) / norms.iter().copied().fold(f64::INFINITY, f64::min);
    let v0 = rows
        .iter()
        .max_by(|a, b| a.h.total_cmp(&b.h))
        .map_or(f64::NAN, |r| r.var_trace);
    let var_ratio = rows.iter().map(|r| (r.var_trace / v0).max(v0 / r.var_trace)).fold(1.0, f64::max);
    let slope = fit_log_slope(rows);
    let norms_ok = e_norm_ratio <= E_NORM_MAX_RATIO;
    let pass = match mode {
        SweepMode::OneStep => {
            norms_ok && slope.is_some_and(|s| (ONE_STEP_SLOPE_BAND.0..=ONE_STEP_SLOPE_BAND.1).contains(&s))
        }
        SweepMode::MultiStep => norms_ok && var_ratio <= MULTI_STEP_MAX_VAR_RATIO,
    };
    SweepSummary {
        mode,
        slope,
        e_norm_ratio,
        var_ratio,
        pass,
    }
}

/// Frozen networks for the sweeps: a short CT-DDPG run on the configured env,
/// by default with the policy held at its initialisation.
pub fn warm_up_nets(cfg: &RunConfig, env: &SdeEnv) -> Result<(CriticNets, MlpNet)> {
    let mut base = cfg.train.base.clone();
    base.episodes = cfg.sweep.warmup_episodes;
    base.actor_lr = Some(cfg.sweep.warmup_actor_lr);
    base.eval_every = base.episodes.max(1);
    let (_, agent) = train_ct_ddpg(&base, env, &mut ctrl_core::agents::NoObserver)?;
    Ok((agent.nets, agent.policy))
}

pub fn run_sweep(cfg: &RunConfig, env: &SdeEnv, nets: &CriticNets, policy: &MlpNet) -> Result<Vec<SweepRow>> {
    let setup = SweepSetup {
        env,
        nets,
        policy,
        explore_sigma: cfg.train.base.sigma_explore,
    };
    let mut rng = SeedTree::new(cfg.train.base.seed).stream(Purpose::Analysis, 0, 0);
    match cfg.sweep.mode {
        SweepMode::OneStep => one_step_variance_sweep(&setup, &cfg.sweep.h_list, cfg.sweep.samples, &mut rng),
        SweepMode::MultiStep => {
            multi_step_variance_sweep(&setup, cfg.sweep.delta, &cfg.sweep.h_list, cfg.sweep.samples, &mut rng)
        }
    }
}

/// Variance sweep on warmed-up frozen networks; writes `sweep.csv` and prints
/// the summary line.
pub fn cmd_variance_sweep(inv: &Invocation) -> Result<Outcome> {
    let cfg = inv.resolve()?;
    let env = cfg.env.build()?;
    let mut files = RunFiles::start(inv, "variance-sweep", &cfg)?;
    let (nets, policy) = warm_up_nets(&cfg, &env)?;
    let rows = run_sweep(&cfg, &env, &nets, &policy)?;
    write_file(&files.output("sweep.csv"), |w| write_sweep_csv(w, &rows))?;
    let s = summarize_sweep(cfg.sweep.mode, &rows);
    println!(
        "summary mode={} slope={} e_norm_ratio={} var_ratio={} {}",
        s.mode.name(),
        s.slope.map_or("none".into(), fmt_f64),
        fmt_f64(s.e_norm_ratio),
        fmt_f64(s.var_ratio),
        if s.pass { "PASS" } else { "FAIL" }
    );
    files.finish(if s.pass { "pass" } else { "fail" })?;
    Ok(if s.pass { Outcome::Pass } else { Outcome::AcceptanceFailed })
}
