//! `stpc`: generate data, train, evaluate, and run the ablation and
//! diagnostic procedures.
//!
//! Every setting is a `key = value` entry. Values come from the built-in
//! defaults, then `--config <file>`, then one long flag per key
//! (`data_dir` is `--data-dir`, and so on). The resolved set is written
//! to `<out_dir>/config.txt`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{all_keys, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<stpc::Error> for CliError {
    fn from(e: stpc::Error) -> Self {
        match e {
            stpc::Error::InvalidConfig { .. } => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

const SUBCOMMANDS: [(&str, &str); 7] = [
    ("gen", "Write a synthetic labelled dataset to out_dir"),
    ("train", "Train on data_dir, writing model.stpc and train_log.txt to out_dir"),
    ("eval", "Score a checkpoint on data_dir, writing metrics and predictions"),
    ("ablate", "Train every aggregation variant for each seed; ablation.csv"),
    ("sweep-atoms", "Train with each dictionary size in atom_grid; sweep.csv"),
    ("inspect-coeffs", "Dump the K x M encoding coefficients of one point; coeffs.csv"),
    ("gradcheck", "Finite-difference check of every parameter block; gradcheck.txt"),
];

fn cli() -> Command {
    let mut cmd = Command::new("stpc")
        .about("Spatial transformer point convolution for point-cloud segmentation")
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("key = value file applied before the flags"),
        );
    for key in all_keys() {
        let long: &'static str = Box::leak(key.replace('_', "-").into_boxed_str());
        let mut arg = Arg::new(key).long(long).global(true).value_name("VALUE").action(ArgAction::Set);
        if long != key {
            arg = arg.alias(key);
        }
        cmd = cmd.arg(arg);
    }
    for (name, about) in SUBCOMMANDS {
        cmd = cmd.subcommand(Command::new(name).about(about));
    }
    cmd
}

fn resolve(matches: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = matches.get_one::<String>("config") {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{path}: {e}")))?;
        cfg.apply_text(&text, path)?;
    }
    for key in all_keys() {
        if let Some(v) = matches.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.network.validate()?;
    Ok(cfg)
}

fn run() -> Result<(), CliError> {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cfg = resolve(sub)?;
    match name {
        "gen" => commands::gen(&cfg),
        "train" => commands::train(&cfg),
        "eval" => commands::eval(&cfg),
        "ablate" => commands::ablate(&cfg),
        "sweep-atoms" => commands::sweep_atoms(&cfg),
        "inspect-coeffs" => commands::inspect_coeffs(&cfg),
        "gradcheck" => commands::gradcheck(&cfg),
        _ => unreachable!(),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stpc: {e}");
            ExitCode::from(match e {
                CliError::Config(_) => 2,
                CliError::Runtime(_) => 1,
            })
        }
    }
}
