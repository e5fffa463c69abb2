use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use snl_cli::{
    build_config, cmd_bench, cmd_dump_attention, cmd_equiv, cmd_gradcheck, cmd_train, parse_overrides, Outcome,
    EXIT_USAGE,
};
use snl_core::config::KEYS;

/// Sparse non-local attention: gradient checks, dense equivalence,
/// benchmarks, toy training and attention dumps.
#[derive(Parser)]
#[command(name = "snl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Flat key = value configuration file, applied before overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value` or `--key=value`, for any config key.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of both blocks' gradients.
    Gradcheck(Common),
    /// Sparse block on a full-coverage grid against the dense block.
    Equiv(Common),
    /// Time both attention cores; writes block,N,K,C,median_ms,multiplies.
    Bench(Common),
    /// Train the toy network on the beacon task.
    Train(Common),
    /// Sample coordinates and affinities of the sparse block for one input.
    DumpAttention(Common),
}

fn key_help() -> String {
    let mut text = String::from("Config keys (default):\n");
    for (key, default, doc) in KEYS {
        text.push_str(&format!("  {key:<14} {:<14} {doc}\n", format!("[{default}]")));
    }
    text
}

fn run(command: Command) -> Outcome {
    let common = match &command {
        Command::Gradcheck(c) | Command::Equiv(c) | Command::Bench(c) | Command::Train(c) | Command::DumpAttention(c) => c,
    };
    let (extra_config, pairs) = parse_overrides(&common.overrides)?;
    let config = extra_config.or_else(|| common.config.clone());
    let cfg = build_config(config.as_deref(), &pairs)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut err = io::stderr();
    match command {
        Command::Gradcheck(_) => cmd_gradcheck(&cfg, &mut out),
        Command::Equiv(_) => cmd_equiv(&cfg, &mut out),
        Command::Bench(_) => cmd_bench(&cfg, &mut out, &mut err),
        Command::Train(_) => cmd_train(&cfg, &mut out, &mut err),
        Command::DumpAttention(_) => cmd_dump_attention(&cfg, &mut out),
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().after_long_help(key_help()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let code = match run(cli.command) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(io::stderr(), "error: {}", f.message);
            f.code
        }
    };
    let _ = io::stdout().flush();
    ExitCode::from(u8::try_from(code).unwrap_or(EXIT_USAGE as u8))
}
