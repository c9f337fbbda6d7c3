use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctrl_cli::{cmd_grad_check, cmd_oracle_check, cmd_train, cmd_variance_sweep, exit_code, split_args, Invocation, STOP};
use ctrl_core::{Error, Result};

/// Continuous-time deterministic policy gradient experiments.
///
/// Configuration is read from `--config` (flat key=value) and then patched by
/// the named flags and by any number of trailing `key=value`, `--key=value`
/// or `--key value` overrides. Bare names resolve to `train.<name>` first,
/// so `--h 0.01` sets `train.h`.
#[derive(Parser)]
#[command(name = "ctrl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent (ctddpg, dau, ddpg or qlearn).
    Train(Common),
    /// Run the analytic oracle battery on an LQR environment.
    OracleCheck(Common),
    /// Measure semi-gradient variance across step sizes.
    VarianceSweep {
        /// one_step or multi_step.
        #[arg(long)]
        mode: Option<String>,
        /// Comma-separated step sizes.
        #[arg(long)]
        h_list: Option<String>,
        /// Window duration L·h for multi_step.
        #[arg(long)]
        delta: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare the DPG formula with finite differences on random linear gains.
    GradCheck(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    agent: Option<String>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (default: $CTRL_OUT_DIR/<command>-<run_id>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// key=value overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    rest: Vec<String>,
}

impl Common {
    fn invocation(self, extra: Vec<String>) -> Result<Invocation> {
        let mut overrides = Vec::new();
        let named = [
            ("train.agent", self.agent),
            ("env.name", self.env),
            ("train.seed", self.seed.map(|s| s.to_string())),
            ("train.workers", self.workers.map(|w| w.to_string())),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                overrides.push(format!("{key}={v}"));
            }
        }
        overrides.extend(extra);
        let (rest, config, out) = split_args(&self.rest)?;
        overrides.extend(rest);
        Ok(Invocation {
            config: config.or(self.config),
            overrides,
            out: out.or(self.out),
        })
    }
}

fn run(cli: Cli) -> Result<ctrl_cli::Outcome> {
    match cli.command {
        Command::Train(c) => cmd_train(&c.invocation(Vec::new())?, Some(&STOP)),
        Command::OracleCheck(c) => cmd_oracle_check(&c.invocation(Vec::new())?),
        Command::GradCheck(c) => cmd_grad_check(&c.invocation(Vec::new())?),
        Command::VarianceSweep {
            mode,
            h_list,
            delta,
            common,
        } => {
            let mut extra = Vec::new();
            if let Some(m) = mode {
                extra.push(format!("sweep.mode={m}"));
            }
            if let Some(l) = h_list {
                extra.push(format!("sweep.h_list={l}"));
            }
            if let Some(d) = delta {
                extra.push(format!("sweep.delta={d}"));
            }
            cmd_variance_sweep(&common.invocation(extra)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = ctrlc::set_handler(|| STOP.store(true, std::sync::atomic::Ordering::SeqCst)) {
        log::warn!("no Ctrl-C handler: {e}");
    }
    let result = run(cli);
    if let Err(e) = &result {
        match e {
            Error::Config(m) => eprintln!("config error: {m}"),
            other => eprintln!("error: {other}"),
        }
    }
    ExitCode::from(exit_code(&result))
}
