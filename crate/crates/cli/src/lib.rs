//! Command-line driver for the matching model: configuration resolution and
//! the subcommands behind the `mutatt` binary.

pub mod commands;
pub mod config;

pub use commands::{cmd_dump_attn, cmd_eval, cmd_synth, cmd_train, cmd_verify, Outcome};
pub use config::{Overrides, RunConfig};
