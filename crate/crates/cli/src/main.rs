//! `ads3d <synth|preprocess|train|eval|stats> [--config FILE] [--print-config] [key=value ...]`

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use ads3d::kv;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ads3d", version, about = "Visual-imagery EEG pipeline: synthesis, preprocessing, training, evaluation, statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic epoch file
    Synth(RunArgs),
    /// Notch, bandpass, downsample and epoch a raw epoch file
    Preprocess(RunArgs),
    /// Cross-validate the network and write per-fold checkpoints
    Train(RunArgs),
    /// Score a checkpoint on an epoch file
    Eval(RunArgs),
    /// Band-power contrasts, ANOVA and topography exports
    Stats(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// key = value configuration file
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Print the resolved configuration to stdout and exit
    #[arg(long)]
    print_config: bool,
    /// Configuration overrides
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

const COMMANDS: [&str; 5] = ["synth", "preprocess", "train", "eval", "stats"];

fn run(name: &str, args: &RunArgs) -> ads3d::Result<()> {
    let spec = config::spec(name);
    let env_seed = std::env::var(config::SEED_ENV).ok();
    let map = config::resolve(&spec, args.config.as_deref(), env_seed, &args.overrides)?;
    if args.print_config {
        print!("{}", kv::render(&map));
        return Ok(());
    }
    match name {
        "synth" => commands::synth(&map),
        "preprocess" => commands::preprocess(&map),
        "train" => commands::train(&map),
        "eval" => commands::eval(&map),
        _ => commands::stats(&map),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let mut cmd = Cli::command();
    for name in COMMANDS {
        let help = config::spec(name).help();
        cmd = cmd.mut_subcommand(name, |c| c.after_help(help));
    }
    let parsed = cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("error: usage: {first}");
            return ExitCode::FAILURE;
        }
    };
    let (name, args) = match &cli.command {
        Command::Synth(a) => ("synth", a),
        Command::Preprocess(a) => ("preprocess", a),
        Command::Train(a) => ("train", a),
        Command::Eval(a) => ("eval", a),
        Command::Stats(a) => ("stats", a),
    };
    match run(name, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.code(), e.detail().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
