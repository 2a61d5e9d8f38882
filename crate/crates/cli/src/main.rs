//! `fiberlab` command-line entry point.
//!
//! Exit statuses: 0 success, 1 usage or configuration error, 2 numerical
//! abort or failed check, 3 prompt pool exhausted.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fiberlab::checks::{self, Tolerances, CHECKS};
use fiberlab::curriculum::{profile_pass_rates, write_profiles};
use fiberlab::gating::gate_trajectory;
use fiberlab::objectives::Method;
use fiberlab::trainer::{self, with_workers, OutputPaths, RunConfig, Trainer};

const SECTIONS: [&str; 4] = ["method", "gating", "curriculum", "env"];

#[derive(Parser, Debug)]
#[command(
    name = "fiberlab",
    version,
    about = "Desk-scale lab for two-scale importance-ratio gating",
    after_help = "Any config key can be overridden with --<section>.<key>=<value>, \
                  e.g. --gating.epsilon=0.02 (sections: method, gating, curriculum, env)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one method and write telemetry, checkpoint and resolved config.
    Run(RunArgs),
    /// Train several methods under matched settings and join their telemetry.
    Compare(CompareArgs),
    /// Run the numerical property suite.
    Check(CheckArgs),
    /// Profile prompt pass rates under the initial policy.
    Profile(ProfileArgs),
    /// Gate one trajectory of log-ratios and print the decomposition.
    Gate(GateArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Output directory, created if absent.
    #[arg(long, env = "FIBERLAB_OUT", default_value = "fiberlab-out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Bound on worker threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Config override, `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    method: Option<Method>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// One config per method, or a single shared config with --methods.
    #[arg(long, short, required = true)]
    config: Vec<PathBuf>,
    /// Methods to run from a single shared config.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<Method>,
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Print property names without running them.
    #[arg(long)]
    list: bool,
    /// Tolerance override, `name=value`; `fd` sets both FD tolerances.
    #[arg(long = "tol", value_name = "NAME=VALUE")]
    tol: Vec<String>,
    /// Run only these properties.
    #[arg(long)]
    only: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    #[arg(long, short)]
    config: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct GateArgs {
    /// Comma-separated log-ratios of one trajectory.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    log_ratios: Vec<f64>,
    /// Optional config supplying the `[gating]` section.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

/// Splits `--section.key=value` flags off the argument list.
fn split_overrides(args: impl IntoIterator<Item = OsString>) -> (Vec<OsString>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let dynamic = arg.to_str().and_then(|s| {
            let body = s.strip_prefix("--")?;
            let (key, _) = body.split_once('=')?;
            let section = key.split('.').next()?;
            (key.contains('.') && SECTIONS.contains(&section)).then(|| body.to_string())
        });
        match dynamic {
            Some(o) => overrides.push(o),
            None => rest.push(arg),
        }
    }
    (rest, overrides)
}

fn load_config(path: &Path, overrides: &[String], flags: &[String]) -> Result<RunConfig> {
    let all: Vec<String> = overrides.iter().chain(flags).cloned().collect();
    RunConfig::load(path, &all).with_context(|| format!("loading {}", path.display()))
}

fn common_flags(common: &Common) -> Vec<String> {
    let mut flags = common.set.clone();
    if let Some(s) = common.seed {
        flags.push(format!("method.seed={s}"));
    }
    if let Some(w) = common.workers {
        flags.push(format!("method.workers={w}"));
    }
    flags
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_run(args: RunArgs, overrides: &[String]) -> Result<()> {
    let mut flags = common_flags(&args.common);
    if let Some(s) = args.steps {
        flags.push(format!("method.steps={s}"));
    }
    if let Some(m) = args.method {
        flags.push(format!("method.name=\"{m}\""));
    }
    let config = load_config(&args.config, overrides, &flags)?;
    let out = &args.common.out;
    create_dir(out)?;
    config.write_resolved(&out.join("config.resolved.toml"))?;
    let report = trainer::run_experiment(&config, &OutputPaths::in_dir(out))?;
    match (report.records.first(), report.records.last()) {
        (Some(first), Some(last)) => println!(
            "{}: {} steps, reward {:.3} -> {:.3}, entropy {:.3} -> {:.3}, val {:.3}",
            config.method.name,
            report.records.len(),
            first.mean_reward,
            last.mean_reward,
            first.entropy,
            last.entropy,
            last.val_accuracy
        ),
        _ => println!("{}: 0 steps", config.method.name),
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_compare(args: CompareArgs, overrides: &[String]) -> Result<()> {
    let mut flags = common_flags(&args.common);
    if let Some(s) = args.steps {
        flags.push(format!("method.steps={s}"));
    }
    let mut configs = Vec::new();
    for path in &args.config {
        configs.push(load_config(path, overrides, &flags)?);
    }
    if !args.methods.is_empty() {
        if configs.len() != 1 {
            return Err(fiberlab::Error::Config {
                key: "methods".into(),
                message: "--methods needs exactly one shared --config".into(),
            }
            .into());
        }
        let base = configs.pop().expect("one config");
        configs = args
            .methods
            .iter()
            .map(|&m| {
                let mut c = base.clone();
                c.method.name = m;
                c
            })
            .collect();
    }
    trainer::check_matched(&configs)?;
    let out = &args.common.out;
    create_dir(out)?;
    for c in &configs {
        c.write_resolved(&out.join(format!("{}.resolved.toml", c.method.name)))?;
    }
    let reports = trainer::compare(&configs, out)?;
    for (method, r) in &reports {
        if let (Some(first), Some(last)) = (r.records.first(), r.records.last()) {
            println!(
                "{method}: reward {:.3} -> {:.3}, entropy {:.3} -> {:.3}",
                first.mean_reward, last.mean_reward, first.entropy, last.entropy
            );
        }
    }
    println!("wrote {}", out.join("comparison.csv").display());
    Ok(())
}

fn cmd_check(args: CheckArgs) -> Result<ExitCode> {
    if args.list {
        for c in CHECKS {
            println!("{:<24} {}", c.name, c.summary);
        }
        return Ok(ExitCode::SUCCESS);
    }
    let tol = Tolerances::default().with_overrides(&args.tol)?;
    let outcomes = with_workers(args.workers.unwrap_or(0), || checks::run_checks(&args.only, &tol, args.seed))??;
    print!("{}", checks::render_table(&outcomes));
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).collect();
    if failed.is_empty() {
        println!("all {} properties passed", outcomes.len());
        return Ok(ExitCode::SUCCESS);
    }
    for o in &failed {
        eprintln!("failed: {} (observed {:.3e}, tolerance {:.3e})", o.name, o.observed, o.tolerance);
    }
    Ok(ExitCode::from(2))
}

fn cmd_profile(args: ProfileArgs, overrides: &[String]) -> Result<()> {
    let config = load_config(&args.config, overrides, &common_flags(&args.common))?;
    let out = &args.common.out;
    create_dir(out)?;
    let profiles = with_workers(config.method.workers, || -> fiberlab::Result<_> {
        let mut c = config.clone();
        c.curriculum.enabled = false;
        let trainer = Trainer::new(c)?;
        profile_pass_rates(
            trainer.policy(),
            trainer.tasks(),
            config.curriculum.profiling_rollouts,
            config.method.seed,
        )
    })??;
    let path = out.join("profiles.csv");
    write_profiles(&profiles, &path)?;
    println!("{:>7} {:>6} {:>6} valid", "task", "domain", "p");
    for p in &profiles {
        println!("{:>7} {:>6} {:>6.3} {}", p.task_id, p.domain_id, p.pass_rate, p.valid);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_gate(args: GateArgs, overrides: &[String]) -> Result<()> {
    let all: Vec<String> = overrides.iter().chain(&args.set).cloned().collect();
    let config = match &args.config {
        Some(p) => load_config(p, &all, &[])?,
        None => RunConfig::from_toml("", &all)?,
    };
    let gating = config.gating.to_config()?;
    for w in gating.warnings() {
        eprintln!("warning: {w}");
    }
    let g = gate_trajectory(&args.log_ratios, &gating)?;
    println!(
        "log s+ = {:.6}  log s- = {:.6}  base weight = {:.6}  regime = ({}, {})",
        g.aggregates.log_s_plus,
        g.aggregates.log_s_minus,
        g.base_weight,
        g.regime.global.label(),
        g.regime.local.label()
    );
    println!("{:>4} {:>10} {:>5} {:>10} {:>10} {:>10} {:>7}", "i", "log r", "sign", "u", "residual", "G", "clipped");
    for i in 0..g.len() {
        println!(
            "{:>4} {:>10.6} {:>5} {:>10.6} {:>10.6} {:>10.6} {:>7}",
            i,
            g.log_ratios[i],
            if g.labels[i].value() > 0.0 { "+" } else { "-" },
            g.deviations[i],
            g.residuals[i],
            g.gated[i],
            g.clipped[i]
        );
    }
    Ok(())
}

fn dispatch(cli: Cli, overrides: &[String]) -> Result<ExitCode> {
    match cli.command {
        Command::Run(a) => cmd_run(a, overrides).map(|_| ExitCode::SUCCESS),
        Command::Compare(a) => cmd_compare(a, overrides).map(|_| ExitCode::SUCCESS),
        Command::Check(a) => {
            if !overrides.is_empty() {
                eprintln!("warning: config overrides are ignored by `check`");
            }
            cmd_check(a)
        }
        Command::Profile(a) => cmd_profile(a, overrides).map(|_| ExitCode::SUCCESS),
        Command::Gate(a) => cmd_gate(a, overrides).map(|_| ExitCode::SUCCESS),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<fiberlab::Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args_os());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::from(e.use_stderr()));
        }
    };
    match dispatch(cli, &overrides) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
