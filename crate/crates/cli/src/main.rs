mod args;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;

use args::{Cli, Command};

fn run(cli: Cli) -> Result<()> {
    let root_flag = cli.output_root.clone();
    // Root for commands without a run config.
    let root = root_flag.clone().unwrap_or_else(|| PathBuf::from("runs"));
    match cli.command {
        Command::Ingest { path, out } => {
            commands::ingest(&path, &commands::out_dir(out.as_deref(), &root, "ingest"))
        }
        Command::Synth(args) => {
            let out = commands::out_dir(args.out.as_deref(), &root, "synth");
            commands::synth(&args, &out)
        }
        Command::TrainGen { config, out } => {
            let cfg = config.resolve(root_flag.as_deref())?;
            let out = commands::out_dir(out.as_deref(), &cfg.output_dir, "train-gen");
            commands::train_gen(&cfg, &out)
        }
        Command::Balance {
            config,
            generators,
            out,
        } => {
            let cfg = config.resolve(root_flag.as_deref())?;
            let gens = generators.unwrap_or_else(|| cfg.output_dir.join("train-gen"));
            let out = commands::out_dir(out.as_deref(), &cfg.output_dir, "balance");
            commands::balance(&cfg, &gens, &out)
        }
        Command::TrainClf {
            config,
            train_dir,
            validation_dir,
            out,
        } => {
            let cfg = config.resolve(root_flag.as_deref())?;
            let train = train_dir.unwrap_or_else(|| cfg.output_dir.join("balance").join("train"));
            let out = commands::out_dir(out.as_deref(), &cfg.output_dir, "train-clf");
            commands::train_clf(&cfg, &train, validation_dir.as_deref(), &out)
        }
        Command::Eval {
            config,
            checkpoint,
            test_dir,
            out,
        } => {
            let cfg = config.resolve(root_flag.as_deref())?;
            let ckpt = checkpoint
                .unwrap_or_else(|| cfg.output_dir.join("train-clf").join("classifier.ckpt"));
            let test = test_dir.unwrap_or_else(|| cfg.output_dir.join("balance").join("test"));
            let out = commands::out_dir(out.as_deref(), &cfg.output_dir, "eval");
            commands::eval(&cfg, &ckpt, &test, &out)
        }
        Command::Experiment { config, out } => {
            let cfg = config.resolve(root_flag.as_deref())?;
            let out = commands::out_dir(out.as_deref(), &cfg.output_dir, "experiment");
            commands::experiment(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
