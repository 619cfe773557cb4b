//! Command-line front end for `mlfilter`: one subcommand per algorithm plus the
//! two reference experiments. Every run writes a `manifest.json` that `replay`
//! can regenerate bit-for-bit.

pub mod args;
pub mod commands;
pub mod experiment;
pub mod io;

pub use args::{Cli, Command, Format};
pub use commands::{execute, replay, resolve, run, Manifest, RunSpec, Task};
pub use experiment::{run_experiment, run_linear_experiment, run_nonlinear_experiment, Artifacts};
