//! `frs` — desk-scale detection experiments.
//!
//! Commands: selftest, synth, split, stats, train, eval, ablate.
//! Flags: --config PATH, --seed N, --out DIR, --set section.key=value
//! (repeatable), plus per-command --manifest/--checkpoint/--seeds.
//! Exit codes: 0 success, 1 validation error, 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use frs_core::error::Error;

use commands::CommonArgs;
use config::RunConfig;

const USAGE: &str = "usage: frs <command> [flags]

commands:
  selftest                      run all gradient checks and oracle comparisons
  synth    --out DIR            generate a synthetic dataset (data.count scenes)
  split    --manifest P --out DIR   split a manifest 8:1:1
  stats    --manifest P [--out DIR] per-class and size-bucket statistics
  train    --out DIR            train per configuration manifests
  eval     --checkpoint P --manifest P --out DIR   score a checkpoint
  ablate   --out DIR [--seeds 1,2,...]  four-variant comparison table

flags:
  --config PATH       line-oriented `section.key = value` configuration
  --seed N            shorthand for --set train.seed=N
  --out DIR           output directory (echoes the effective config)
  --set KEY=VALUE     override one configuration key (repeatable)
  --manifest PATH     dataset manifest (split/stats/eval)
  --checkpoint PATH   checkpoint file (eval)
  --seeds A,B,C       seed list (ablate)";

fn parse_args(mut argv: std::env::Args) -> Result<(String, CommonArgs), Error> {
    argv.next(); // program name
    let command = argv
        .next()
        .ok_or_else(|| Error::Config(format!("missing command\n{USAGE}")))?;

    let mut config_path: Option<PathBuf> = None;
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut out_dir = None;
    let mut manifest = None;
    let mut checkpoint = None;
    let mut seeds = Vec::new();

    let next_value = |argv: &mut std::env::Args, flag: &str| {
        argv.next()
            .ok_or_else(|| Error::Config(format!("flag {flag} needs a value")))
    };

    while let Some(arg) = argv.next() {
        match arg.as_str() {
            "--config" => config_path = Some(PathBuf::from(next_value(&mut argv, "--config")?)),
            "--out" => out_dir = Some(PathBuf::from(next_value(&mut argv, "--out")?)),
            "--manifest" => manifest = Some(PathBuf::from(next_value(&mut argv, "--manifest")?)),
            "--checkpoint" => {
                checkpoint = Some(PathBuf::from(next_value(&mut argv, "--checkpoint")?))
            }
            "--seed" => {
                overrides.push(("train.seed".into(), next_value(&mut argv, "--seed")?));
            }
            "--seeds" => {
                let raw = next_value(&mut argv, "--seeds")?;
                for part in raw.split(',') {
                    seeds.push(part.trim().parse::<u64>().map_err(|_| {
                        Error::Config(format!("--seeds: `{part}` is not an integer"))
                    })?);
                }
            }
            "--set" => {
                let raw = next_value(&mut argv, "--set")?;
                let (k, v) = raw
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{raw}`")))?;
                overrides.push((k.trim().to_string(), v.trim().to_string()));
            }
            other => return Err(Error::Config(format!("unknown flag `{other}`\n{USAGE}"))),
        }
    }

    let mut config = match config_path {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::defaults(),
    };
    for (k, v) in overrides {
        config.set(&k, &v)?;
    }

    Ok((
        command,
        CommonArgs {
            config,
            out_dir,
            manifest,
            checkpoint,
            seeds,
        },
    ))
}

/// Validation failures exit 1; failures during the run itself exit 2.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::LabelParse { .. } | Error::InvalidShape { .. } => 1,
        Error::InvalidArgument { op, .. } if *op != "selftest" => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let (command, args) = match parse_args(std::env::args()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };

    let result = match command.as_str() {
        "selftest" => commands::cmd_selftest(),
        "synth" => commands::cmd_synth(&args),
        "split" => commands::cmd_split(&args),
        "stats" => commands::cmd_stats(&args),
        "train" => commands::cmd_train(&args),
        "eval" => commands::cmd_eval(&args),
        "ablate" => commands::cmd_ablate(&args),
        other => {
            eprintln!("error: unknown command `{other}`\n{USAGE}");
            return ExitCode::from(1);
        }
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
