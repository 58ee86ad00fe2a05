//! `linmix verify|bench|distill|shard-demo`.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{CliError, CliResult, Output};
use config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "linmix", version, about = "Linear-complexity token mixers: checks, benchmarks, toy distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every property suite; nonzero exit on any failure.
    Verify(Common),
    /// Time the mixers across token counts.
    Bench(Common),
    /// Train a toy teacher (unless one is already in --out) and distill a student.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Student variant: linfusion, unnormalized, gated or ssm.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Sharded evaluation: payload sizes and equality with the unsharded block.
    ShardDemo(Common),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default `runs/<command>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; `bench` defaults to 1, the others to all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn resolve(defaults: &[(&str, String)], common: &Common, extra: &[(&str, Option<String>)]) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::with_defaults(defaults);
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &common.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = common.seed {
        cfg.set("seed", s.to_string())?;
    }
    for (k, v) in extra {
        if let Some(v) = v {
            cfg.set(k, v.clone())?;
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let (name, common, extra) = match &cli.command {
        Command::Verify(c) => ("verify", c, vec![]),
        Command::Bench(c) => ("bench", c, vec![]),
        Command::Distill { common, variant } => ("distill", common, vec![("variant", variant.clone())]),
        Command::ShardDemo(c) => ("shard-demo", c, vec![]),
    };
    let defaults = match name {
        "verify" => commands::verify_defaults(),
        "bench" => commands::bench_defaults(),
        "distill" => commands::distill_defaults(),
        _ => commands::shard_defaults(),
    };
    let cfg = resolve(&defaults, common, &extra)?;
    let threads = common.threads.unwrap_or(if name == "bench" { 1 } else { 0 });
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Failed(format!("thread pool: {e}")))?;
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(name));
    let out = Output::create(&dir, &cfg)?;
    match name {
        "verify" => commands::cmd_verify(&cfg, &out),
        "bench" => commands::cmd_bench(&cfg, &out),
        "distill" => commands::cmd_distill(&cfg, &out),
        _ => commands::cmd_shard_demo(&cfg, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("linmix: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
