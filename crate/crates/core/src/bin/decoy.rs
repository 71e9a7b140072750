//! `decoy <command> [--config <path>] [--set key=value ...] [--out <dir>]`
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error. Failures
//! print one line to standard error: `error code=<n> kind=<kind> message=<json string>`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use decoy_core::harness::{execute, Command, RunConfig};
use decoy_core::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Train,
    Protect,
    Inpaint,
    Attribute,
    Evaluate,
    Sweep,
    RenderDelta,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Train => Command::Train,
            Cmd::Protect => Command::Protect,
            Cmd::Inpaint => Command::Inpaint,
            Cmd::Attribute => Command::Attribute,
            Cmd::Evaluate => Command::Evaluate,
            Cmd::Sweep => Command::Sweep,
            Cmd::RenderDelta => Command::RenderDelta,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "decoy", version, about = "Toy inpainting sandbox and cross-attention decoy protection")]
struct Args {
    #[arg(value_enum)]
    command: Cmd,
    /// JSON config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dot-path override, e.g. `attack.epsilon=8/255`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output root; defaults to $DECOY_OUT_ROOT, then `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Shorthand for `--set attack.objective=<value>`.
    #[arg(long)]
    objective: Option<String>,
}

fn fail(code: u8, kind: &str, msg: &str) -> ExitCode {
    let msg = serde_json::to_string(msg).unwrap_or_else(|_| "\"?\"".into());
    eprintln!("error code={code} kind={kind} message={msg}");
    ExitCode::from(code)
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) | Error::Json(_) => "config",
        Error::Text(_) => "text",
        Error::Tensor(_) => "tensor",
        Error::Shape(_) => "shape",
        Error::Format(_) => "format",
        Error::Checkpoint(_) => "checkpoint",
        Error::NonFiniteLoss { .. } => "non_finite_loss",
        Error::Diverged { .. } => "diverged",
        Error::Io(_) => "io",
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            return fail(2, "usage", line);
        }
    };
    let mut overrides = args.set.clone();
    if let Some(o) = &args.objective {
        overrides.push(format!("attack.objective={o}"));
    }
    let (cfg, echo) = match RunConfig::load(args.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => return fail(2, kind(&e), &e.to_string()),
    };
    let root = args
        .out
        .or_else(|| std::env::var_os("DECOY_OUT_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    match execute(args.command.into(), &cfg, &echo, &root) {
        Ok(out) => {
            println!("{}", out.dir.display());
            for line in out.report {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) if e.is_config() => fail(2, kind(&e), &e.to_string()),
        Err(e) => fail(3, kind(&e), &e.to_string()),
    }
}
