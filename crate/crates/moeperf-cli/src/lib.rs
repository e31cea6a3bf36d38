//! Library surface of the `moeperf` command-line tool: fixtures, report
//! rendering, communication planning, the verification suite, and the
//! subcommand implementations. The binary in `main.rs` is a thin argument
//! parser over these.

pub mod commands;
pub mod fixtures;
pub mod plan;
pub mod report;
pub mod verify;
