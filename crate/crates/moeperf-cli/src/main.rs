//! moeperf: analytical performance models and simulators for fine-grained
//! MoE inference.
//!
//! Exit codes: 0 success, 1 validation error, 2 property-suite failure.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use moeperf_cli::commands::{
    cmd_aggregate, cmd_comm_plan, cmd_model_info, cmd_prune, cmd_roofline, cmd_schedule,
    cmd_simulate, Ctx, Curve, PruneArgs, SimulateArgs,
};
use moeperf_cli::report::Format;
use moeperf_cli::verify::run_verify;
use moeperf_core::config::{load_hardware_preset, load_model_preset};
use moeperf_core::schedule::IndexSpace;
use moeperf_core::serving::DEFAULT_OVERHEAD_PER_STEP;
use moeperf_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "moeperf",
    version,
    about = "Roofline models, routing/serving simulators, and expert skipping/pruning planners for fine-grained MoE inference"
)]
struct Cli {
    /// Model preset (v2-lite, v3) or config file path.
    #[arg(long, global = true, default_value = "v2-lite")]
    model: String,

    /// Hardware preset (a800, h200) or config file path.
    #[arg(long, global = true, default_value = "a800")]
    hw: String,

    /// Write output to a file instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed for all randomized operations.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit arithmetic-intensity and latency curves over a token range.
    Roofline {
        /// Token range "lo:hi" or "lo:hi:step".
        #[arg(long, default_value = "1:4096")]
        l_range: String,
        /// Which curve to emit.
        #[arg(long, value_enum, default_value_t = Curve::Ffn)]
        curve: Curve,
        /// Dense FFN intermediate size (defaults to the model's d_s).
        #[arg(long)]
        d_i: Option<u64>,
        /// Active experts for the MoE curve (defaults to the model's n_a).
        #[arg(long)]
        n_a: Option<u32>,
        /// Retained experts for the MoE curve (defaults to the model's n_e).
        #[arg(long)]
        n_e_eff: Option<u32>,
    },
    /// Build a per-layer active-expert schedule from a four-tuple.
    Schedule {
        /// Tuple "b,h,e,p".
        #[arg(long)]
        tuple: String,
        /// Whether p indexes MoE layers or global layers.
        #[arg(long, default_value = "moe")]
        index_space: String,
    },
    /// Build a retained-expert mask and report memory savings.
    Prune {
        /// One of random, odd, even, first_half, last_half, activate_count, soft_count.
        #[arg(long)]
        strategy: String,
        /// Experts retained per layer.
        #[arg(long)]
        keep: u32,
        /// Routing stats JSON (required for the count strategies).
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Simulate serving throughput across concurrency levels.
    Simulate {
        /// Comma-separated concurrency list (ignored with --compare).
        #[arg(long)]
        concurrency: Option<String>,
        #[arg(long, default_value_t = 1024)]
        input: u64,
        #[arg(long, default_value_t = 1024)]
        output: u64,
        /// Skip schedule tuple "b,h,e,p".
        #[arg(long)]
        tuple: Option<String>,
        /// Uniform active-expert override.
        #[arg(long)]
        na: Option<u32>,
        #[arg(long, default_value = "moe")]
        index_space: String,
        /// Prune mask JSON produced by `prune`.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Build a mask inline (with --keep).
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        keep: Option<u32>,
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Fixed per-step overhead seconds.
        #[arg(long, default_value_t = DEFAULT_OVERHEAD_PER_STEP)]
        overhead: f64,
        /// KV bytes per token of context per layer.
        #[arg(long, default_value_t = 0.0)]
        attention_coeff: f64,
        /// Compare against a bundled fixture (table6, table7, table9, table10_12, table13).
        #[arg(long)]
        compare: Option<String>,
        /// Fixture column for the comparison (default: first data column).
        #[arg(long)]
        compare_column: Option<String>,
    },
    /// Run the toy-executor and routing property suites.
    Verify {
        /// Check an existing weight dump instead of a generated one.
        #[arg(long)]
        dump_file: Option<PathBuf>,
    },
    /// Plan TP vs EP communication across intra/inter-node links.
    CommPlan {
        #[arg(long)]
        n_d: u32,
        #[arg(long, default_value_t = 1024)]
        tokens: u64,
        #[arg(long)]
        groups_touched: Option<u32>,
    },
    /// Average benchmark score rows against the pure-guessing floor of 36.
    Aggregate {
        /// Comma-separated accuracies; repeat for multiple rows.
        #[arg(long)]
        scores: Vec<String>,
        /// File with one comma-separated score row per line.
        #[arg(long)]
        scores_file: Option<PathBuf>,
    },
    /// Print the resolved model architecture and reduction-bound check.
    ModelInfo,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let ctx = Ctx {
        model: load_model_preset(&cli.model)?,
        hw: load_hardware_preset(&cli.hw)?,
        seed: cli.seed,
        format: cli.format,
    };

    let text = match &cli.command {
        Command::Roofline {
            l_range,
            curve,
            d_i,
            n_a,
            n_e_eff,
        } => cmd_roofline(&ctx, l_range, *curve, *d_i, *n_a, *n_e_eff)?,
        Command::Schedule { tuple, index_space } => {
            cmd_schedule(&ctx, tuple, IndexSpace::from_str(index_space)?)?
        }
        Command::Prune {
            strategy,
            keep,
            stats,
        } => {
            let (mask, summary) = cmd_prune(
                &ctx,
                &PruneArgs {
                    strategy: strategy.clone(),
                    keep: *keep,
                    stats_file: stats.clone(),
                },
            )?;
            // the mask is the artifact; the summary goes wherever is left
            match &cli.out {
                Some(path) => {
                    std::fs::write(path, mask.to_json_string())?;
                    print!("{summary}");
                    return Ok(ExitCode::SUCCESS);
                }
                None => {
                    println!("{}", mask.to_json_string());
                    eprint!("{summary}");
                    return Ok(ExitCode::SUCCESS);
                }
            }
        }
        Command::Simulate {
            concurrency,
            input,
            output,
            tuple,
            na,
            index_space,
            mask,
            strategy,
            keep,
            stats,
            overhead,
            attention_coeff,
            compare,
            compare_column,
        } => cmd_simulate(
            &ctx,
            &SimulateArgs {
                concurrency: concurrency.clone(),
                input_tokens: *input,
                output_tokens: *output,
                tuple: tuple.clone(),
                uniform_n_a: *na,
                index_space: IndexSpace::from_str(index_space)?,
                mask_file: mask.clone(),
                strategy: strategy.clone(),
                keep: *keep,
                stats_file: stats.clone(),
                overhead: *overhead,
                attention_coeff: *attention_coeff,
                compare: compare.clone(),
                compare_column: compare_column.clone(),
            },
        )?,
        Command::Verify { dump_file } => {
            let outcome = run_verify(cli.seed, dump_file.clone());
            for line in &outcome.lines {
                println!("{line}");
            }
            println!(
                "verify: {} passed, {} failed (seed {})",
                outcome.passed, outcome.failed, cli.seed
            );
            return Ok(if outcome.failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            });
        }
        Command::CommPlan {
            n_d,
            tokens,
            groups_touched,
        } => cmd_comm_plan(&ctx, *n_d, *tokens, *groups_touched)?,
        Command::Aggregate {
            scores,
            scores_file,
        } => {
            let mut rows: Vec<Vec<f64>> = Vec::new();
            for row_text in scores {
                rows.push(parse_score_row(row_text)?);
            }
            if let Some(path) = scores_file {
                let text = std::fs::read_to_string(path)?;
                for line in text.lines() {
                    let line = line.trim();
                    if line.is_empty() || line.starts_with('#') {
                        continue;
                    }
                    rows.push(parse_score_row(line)?);
                }
            }
            cmd_aggregate(&ctx, &rows)?
        }
        Command::ModelInfo => cmd_model_info(&ctx)?,
    };

    match &cli.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_score_row(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad score '{s}'")))
        })
        .collect()
}
