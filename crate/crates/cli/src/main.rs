use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mutatt_cli::{cmd_dump_attn, cmd_eval, cmd_synth, cmd_train, cmd_verify, Outcome, Overrides, RunConfig};

/// Referring expression comprehension with mutual visual-textual guidance.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML config with flat dotted keys; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Per-module guidance, e.g. subj=mutual,loc=mutual,rel=none.
    #[arg(long, global = true, value_name = "MODULE=MODE[,...]")]
    ablation: Option<String>,
    /// gt or det.
    #[arg(long, global = true)]
    protocol: Option<String>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint to continue training from.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    iterations: Option<u64>,
    /// Checkpoint read by eval and dump-attn.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Expression id for dump-attn.
    #[arg(long, global = true)]
    expression: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic dataset under --out.
    Synth,
    /// Train on --data, checkpointing under --out.
    Train,
    /// Evaluate a checkpoint under --protocol.
    Eval,
    /// Run the gradient, normalization, oracle and determinism checks.
    Verify,
    /// Dump word and visual attention for one expression.
    DumpAttn,
}

const EXIT_ERROR: u8 = 1;
const EXIT_CHECKS_FAILED: u8 = 2;
const EXIT_NON_FINITE: u8 = 3;

fn name(c: Command) -> &'static str {
    match c {
        Command::Synth => "synth",
        Command::Train => "train",
        Command::Eval => "eval",
        Command::Verify => "verify",
        Command::DumpAttn => "dump-attn",
    }
}

fn run(command: Command, config: &RunConfig) -> anyhow::Result<Outcome> {
    match command {
        Command::Synth => cmd_synth(config),
        Command::Train => cmd_train(config),
        Command::Eval => cmd_eval(config),
        Command::Verify => cmd_verify(config).map(|(o, _)| o),
        Command::DumpAttn => cmd_dump_attn(config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MUTATT_LOG", "info")).init();
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        ablation: cli.ablation,
        protocol: cli.protocol,
        out: cli.out,
        resume: cli.resume,
        data: cli.data,
        iterations: cli.iterations,
        checkpoint: cli.checkpoint,
        expression: cli.expression,
    };
    let cmd = name(cli.command);
    let result = RunConfig::resolve(cli.config.as_deref(), &overrides).and_then(|config| {
        println!("# resolved configuration");
        print!("{}", config.to_flat_toml()?);
        run(cli.command, &config)
    });
    match result {
        Ok(outcome) => {
            println!("{}", outcome.result_line());
            if outcome.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_CHECKS_FAILED)
            }
        }
        Err(e) => {
            log::error!("{e:#}");
            let code = match e.downcast_ref::<mutatt_core::Error>() {
                Some(mutatt_core::Error::NonFinite(_)) => EXIT_NON_FINITE,
                _ => EXIT_ERROR,
            };
            let message = format!("{e:#}").replace('"', "'");
            println!("RESULT cmd={cmd} status=error exit={code} message=\"{message}\"");
            ExitCode::from(code)
        }
    }
}
