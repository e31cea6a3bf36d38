//! Subcommand implementations. Each builds a [`Report`] so CSV/JSON
//! emission stays uniform and deterministic.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use moeperf_core::config::{check_reduction, HardwareProfile, ModelConfig};
use moeperf_core::pruning::{build_mask, mask_memory_savings, PruneMask, PruneStrategy};
use moeperf_core::roofline::{
    arithmetic_intensity_limit, ffn_estimate, knee_length, moe_layer_estimate, RooflineQuery,
};
use moeperf_core::routing::RoutingStats;
use moeperf_core::schedule::{
    build_schedule, resolve_index_space, uniform_schedule, IndexSpace, SkipSchedule, SkipTuple,
};
use moeperf_core::serving::{simulate_throughput, ServingConfig};
use moeperf_core::{Error, Result};

use crate::fixtures::{spearman, FixtureId, FixtureTable};
use crate::plan::comm_plan;
use crate::report::{Cell, Format, Report};

pub struct Ctx {
    pub model: ModelConfig,
    pub hw: HardwareProfile,
    pub seed: u64,
    pub format: Format,
}

/// Parse an inclusive range "lo:hi" with optional ":step".
fn parse_l_range(text: &str) -> Result<Vec<u64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let parse = |s: &str| -> Result<u64> {
        s.parse()
            .map_err(|_| Error::Parse(format!("bad range component '{s}'")))
    };
    let (lo, hi, step) = match parts.as_slice() {
        [lo, hi] => (parse(lo)?, parse(hi)?, 1),
        [lo, hi, step] => (parse(lo)?, parse(hi)?, parse(step)?),
        _ => {
            return Err(Error::Parse(format!(
                "range must be 'lo:hi' or 'lo:hi:step', got '{text}'"
            )))
        }
    };
    if lo == 0 || hi < lo || step == 0 {
        return Err(Error::InvalidArgument(format!(
            "empty or invalid range '{text}'"
        )));
    }
    Ok((lo..=hi).step_by(step as usize).collect())
}

fn parse_u64_list(text: &str) -> Result<Vec<u64>> {
    let vals: Result<Vec<u64>> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad count '{s}'")))
        })
        .collect();
    let vals = vals?;
    if vals.is_empty() || vals.contains(&0) {
        return Err(Error::InvalidArgument(format!("invalid count list '{text}'")));
    }
    Ok(vals)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Curve {
    Ffn,
    Moe,
    Both,
}

pub fn cmd_roofline(
    ctx: &Ctx,
    l_range: &str,
    curve: Curve,
    d_i: Option<u64>,
    n_a: Option<u32>,
    n_e_eff: Option<u32>,
) -> Result<String> {
    let ls = parse_l_range(l_range)?;
    let model = &ctx.model;
    let d_i = d_i.unwrap_or(model.d_s);
    let n_a = n_a.unwrap_or(model.n_a);
    let n_e_eff = n_e_eff.unwrap_or(model.n_e);
    let columns = vec![
        "L",
        "io_bytes",
        "flops",
        "ai",
        "time_s",
        "time_per_token_us",
        "bound",
    ];

    let ffn_section = |report: &mut Report| -> Result<()> {
        report.comment("curve: ffn");
        report.comment(format!("d = {}, d_i = {d_i}", model.d));
        match knee_length(model.d, d_i, model.bytes_per_element, &ctx.hw)? {
            Some(knee) => report.comment(format!("knee_length = {knee}")),
            None => report.comment("knee_length = unbounded"),
        }
        report.comment(format!(
            "ai_limit = {:.6}",
            arithmetic_intensity_limit(model.d, d_i)
        ));
        for &l in &ls {
            let q = RooflineQuery::new(model.d, d_i, l)?;
            let est = ffn_estimate(q, model.bytes_per_element, &ctx.hw)?;
            report.row(vec![
                Cell::U64(l),
                Cell::F64(est.io_bytes, 0),
                Cell::F64(est.flops, 0),
                Cell::F64(est.ai_elements, 6),
                Cell::F64(est.time_s, 9),
                Cell::F64(est.time_s / l as f64 * 1e6, 6),
                Cell::Str(est.bound.to_string()),
            ]);
        }
        Ok(())
    };
    let moe_section = |report: &mut Report| -> Result<()> {
        report.comment("curve: moe");
        report.comment(format!(
            "d = {}, d_s = {}, d_e = {}, n_a_eff = {n_a}, n_e_eff = {n_e_eff}",
            model.d, model.d_s, model.d_e
        ));
        for &l in &ls {
            let est = moe_layer_estimate(model, l, n_a, n_e_eff, &ctx.hw)?;
            report.row(vec![
                Cell::U64(l),
                Cell::F64(est.estimate.io_bytes, 0),
                Cell::F64(est.estimate.flops, 0),
                Cell::F64(est.estimate.ai_elements, 6),
                Cell::F64(est.estimate.time_s, 9),
                Cell::F64(est.estimate.time_s / l as f64 * 1e6, 6),
                Cell::Str(est.estimate.bound.to_string()),
            ]);
        }
        Ok(())
    };

    match curve {
        Curve::Ffn => {
            let mut report = Report::new(columns);
            ffn_section(&mut report)?;
            Ok(report.render(ctx.format))
        }
        Curve::Moe => {
            let mut report = Report::new(columns);
            moe_section(&mut report)?;
            Ok(report.render(ctx.format))
        }
        Curve::Both => {
            let mut ffn = Report::new(columns.clone());
            ffn_section(&mut ffn)?;
            let mut moe = Report::new(columns);
            moe_section(&mut moe)?;
            match ctx.format {
                Format::Csv => {
                    // one version header, two column sections
                    let moe_text = moe.render(Format::Csv);
                    let moe_body = moe_text.splitn(2, '\n').nth(1).unwrap_or("").to_string();
                    Ok(format!("{}{}", ffn.render(Format::Csv), moe_body))
                }
                Format::Json => {
                    let a = ffn.render(Format::Json);
                    let b = moe.render(Format::Json);
                    Ok(format!("[{},{}]\n", a.trim_end(), b.trim_end()))
                }
            }
        }
    }
}

/// Resolve the schedule for `schedule`/`simulate`: an explicit tuple (in
/// either index space) or a uniform count.
fn schedule_from_args(
    model: &ModelConfig,
    tuple: Option<&str>,
    uniform_n_a: Option<u32>,
    index_space: IndexSpace,
) -> Result<(Option<SkipSchedule>, Option<String>)> {
    match (tuple, uniform_n_a) {
        (Some(_), Some(_)) => Err(Error::InvalidArgument(
            "--tuple and --na are mutually exclusive".into(),
        )),
        (None, None) => Ok((None, None)),
        (None, Some(n_a)) => {
            if n_a == 0 || n_a > model.n_e {
                return Err(Error::InvalidArgument(format!(
                    "--na {n_a} outside [1, {}]",
                    model.n_e
                )));
            }
            Ok((Some(uniform_schedule(n_a, model.n_moe_layers())), None))
        }
        (Some(text), None) => {
            let raw = SkipTuple::parse(text)?;
            let resolved = resolve_index_space(raw, index_space, model)?;
            resolved.validate(model.n_moe_layers(), Some(model.n_e))?;
            let warning = resolved
                .anchor_conflict(model.n_moe_layers())
                .map(|anchor| format!("warning: p = {} collides with the {anchor} anchor; h governs that layer", resolved.p));
            let schedule = build_schedule(resolved, model.n_moe_layers())?;
            schedule.validate_against(model.n_e)?;
            Ok((Some(schedule), warning))
        }
    }
}

pub fn cmd_schedule(ctx: &Ctx, tuple: &str, index_space: IndexSpace) -> Result<String> {
    let model = &ctx.model;
    let (schedule, warning) = schedule_from_args(model, Some(tuple), None, index_space)?;
    let schedule = schedule.expect("tuple given");
    let mut report = Report::new(vec!["layer_index", "n_a"]);
    report.comment(format!("model = {}", model.name));
    report.comment(format!("tuple = {tuple}"));
    if let Some(w) = warning {
        report.comment(w);
    }
    report.comment(format!("average_active = {:.4}", schedule.average_active()));
    report.comment(format!("shape_class = {}", schedule.shape_class()));
    // fraction of baseline FFN compute the schedule retains
    let baseline_width = model.d_s as f64 + f64::from(model.n_a) * model.d_e as f64;
    let scheduled_width: f64 = schedule
        .n_a_per_layer
        .iter()
        .map(|&n| model.d_s as f64 + f64::from(n) * model.d_e as f64)
        .sum::<f64>()
        / schedule.n_a_per_layer.len() as f64;
    report.comment(format!(
        "ffn_compute_fraction = {:.4}",
        scheduled_width / baseline_width
    ));
    for (i, &n_a) in schedule.n_a_per_layer.iter().enumerate() {
        report.row(vec![Cell::U64(i as u64 + 1), Cell::U64(u64::from(n_a))]);
    }
    Ok(report.render(ctx.format))
}

pub struct PruneArgs {
    pub strategy: String,
    pub keep: u32,
    pub stats_file: Option<PathBuf>,
}

/// Returns the mask JSON plus a summary report.
pub fn cmd_prune(ctx: &Ctx, args: &PruneArgs) -> Result<(PruneMask, String)> {
    let model = &ctx.model;
    let strategy = PruneStrategy::from_str(&args.strategy)?;
    let stats = match &args.stats_file {
        Some(path) => Some(load_stats(path)?),
        None => None,
    };
    let mask = build_mask(
        strategy,
        args.keep,
        model.n_e,
        model.n_a,
        model.n_moe_layers(),
        Some(ctx.seed),
        stats.as_ref(),
    )?;
    let savings = mask_memory_savings(&mask, model);
    let mut report = Report::new(vec![
        "strategy",
        "keep",
        "n_e",
        "n_layers",
        "memory_savings_bytes",
    ]);
    report.row(vec![
        Cell::Str(strategy.to_string()),
        Cell::U64(u64::from(mask.keep)),
        Cell::U64(u64::from(mask.n_e)),
        Cell::U64(u64::from(mask.n_layers())),
        Cell::U64(savings),
    ]);
    Ok((mask, report.render(ctx.format)))
}

fn load_stats(path: &Path) -> Result<RoutingStats> {
    let text = std::fs::read_to_string(path)?;
    RoutingStats::from_json_str(&text)
}

pub struct SimulateArgs {
    pub concurrency: Option<String>,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub tuple: Option<String>,
    pub uniform_n_a: Option<u32>,
    pub index_space: IndexSpace,
    pub mask_file: Option<PathBuf>,
    pub strategy: Option<String>,
    pub keep: Option<u32>,
    pub stats_file: Option<PathBuf>,
    pub overhead: f64,
    pub attention_coeff: f64,
    pub compare: Option<String>,
    pub compare_column: Option<String>,
}

pub fn cmd_simulate(ctx: &Ctx, args: &SimulateArgs) -> Result<String> {
    let model = &ctx.model;

    let (schedule, warning) = schedule_from_args(
        model,
        args.tuple.as_deref(),
        args.uniform_n_a,
        args.index_space,
    )?;
    let mask = resolve_mask(ctx, args)?;

    // comparison mode takes its concurrency axis from the fixture
    let (concurrencies, fixture, compare_column) = match &args.compare {
        Some(fixture_name) => {
            let id = FixtureId::from_str(fixture_name)?;
            let table = FixtureTable::load(id);
            let c_idx = table.column_index("concurrency")?;
            let column = match &args.compare_column {
                Some(c) => c.clone(),
                None => table.columns[c_idx + 1].clone(),
            };
            table.column_index(&column)?;
            let cs: Vec<u64> = table
                .rows
                .iter()
                .filter(|r| !table.is_anomalous_row(r))
                .map(|r| r[c_idx] as u64)
                .collect();
            (cs, Some(table), Some(column))
        }
        None => {
            let text = args.concurrency.as_deref().ok_or_else(|| {
                Error::InvalidArgument("--concurrency is required unless --compare is given".into())
            })?;
            (parse_u64_list(text)?, None, None)
        }
    };

    let base_config = ServingConfig::new(1, args.input_tokens, args.output_tokens)
        .with_overhead(args.overhead)
        .with_attention_coeff(args.attention_coeff);
    let mut variant_config = base_config.clone();
    if let Some(s) = &schedule {
        variant_config = variant_config.with_schedule(s.clone());
    }
    if let Some(m) = &mask {
        variant_config = variant_config.with_mask(m.clone());
    }

    let mut report = Report::new(vec![
        "concurrency",
        "input_tokens",
        "output_tokens",
        "avg_n_a",
        "n_e_eff",
        "tokens_per_second",
        "speedup_vs_base",
        "bound_fraction_compute",
    ]);
    report.comment(format!("model = {}, hw = {}", model.name, ctx.hw.name));
    if let Some(w) = warning {
        report.comment(w);
    }

    let mut modeled = Vec::with_capacity(concurrencies.len());
    for &c in &concurrencies {
        let variant = simulate_throughput(model, &ctx.hw, &variant_config.clone().with_concurrency(c))?;
        let speedup = if schedule.is_some() || mask.is_some() {
            let base = simulate_throughput(model, &ctx.hw, &base_config.clone().with_concurrency(c))?;
            variant.tokens_per_second / base.tokens_per_second
        } else {
            1.0
        };
        modeled.push(variant.tokens_per_second);
        report.row(vec![
            Cell::U64(c),
            Cell::U64(args.input_tokens),
            Cell::U64(args.output_tokens),
            Cell::F64(variant.avg_active_experts, 4),
            Cell::U64(u64::from(variant.effective_experts)),
            Cell::F64(variant.tokens_per_second, 3),
            Cell::F64(speedup, 4),
            Cell::F64(variant.bound_fraction_compute, 4),
        ]);
    }

    if let (Some(table), Some(column)) = (fixture, compare_column) {
        let idx = table.column_index(&column)?;
        let reference: Vec<f64> = table
            .rows
            .iter()
            .filter(|r| !table.is_anomalous_row(r))
            .map(|r| r[idx])
            .collect();
        let rho = spearman(&modeled, &reference)?;
        report.comment(format!("compare_fixture = {}", table.source));
        report.comment(format!("compare_column = {column}"));
        if !table.anomalous_concurrency.is_empty() {
            let list: Vec<String> = table
                .anomalous_concurrency
                .iter()
                .map(u64::to_string)
                .collect();
            report.comment(format!("excluded_anomalous_concurrency = {}", list.join(",")));
        }
        report.comment(format!("spearman = {rho:.4}"));
    }

    Ok(report.render(ctx.format))
}

fn resolve_mask(ctx: &Ctx, args: &SimulateArgs) -> Result<Option<PruneMask>> {
    match (&args.mask_file, &args.strategy) {
        (Some(_), Some(_)) => Err(Error::InvalidArgument(
            "--mask and --strategy are mutually exclusive".into(),
        )),
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)?;
            Ok(Some(PruneMask::from_json_str(&text)?))
        }
        (None, Some(strategy)) => {
            let keep = args.keep.ok_or_else(|| {
                Error::InvalidArgument("--strategy requires --keep".into())
            })?;
            let stats = match &args.stats_file {
                Some(p) => Some(load_stats(p)?),
                None => None,
            };
            let mask = build_mask(
                PruneStrategy::from_str(strategy)?,
                keep,
                ctx.model.n_e,
                ctx.model.n_a,
                ctx.model.n_moe_layers(),
                Some(ctx.seed),
                stats.as_ref(),
            )?;
            Ok(Some(mask))
        }
        (None, None) => {
            if args.keep.is_some() {
                return Err(Error::InvalidArgument("--keep requires --strategy".into()));
            }
            Ok(None)
        }
    }
}

pub fn cmd_comm_plan(
    ctx: &Ctx,
    n_d: u32,
    tokens: u64,
    groups_touched: Option<u32>,
) -> Result<String> {
    let plan = comm_plan(&ctx.model, &ctx.hw, n_d, tokens, groups_touched)?;
    let mut report = Report::new(vec![
        "n_d",
        "scheme",
        "placement",
        "volume_bytes",
        "time_s",
        "ratio_vs_tp_intra",
    ]);
    report.comment(format!(
        "model = {}, hw = {}, tokens = {}, groups_touched = {}",
        ctx.model.name, ctx.hw.name, plan.tokens, plan.groups_touched
    ));
    for row in &plan.rows {
        report.row(vec![
            Cell::U64(u64::from(plan.n_d)),
            Cell::Str(row.scheme.to_string()),
            Cell::Str(row.placement.to_string()),
            Cell::U64(row.volume_bytes),
            Cell::F64(row.time_s, 9),
            Cell::F64(row.ratio_vs_tp_intra, 6),
        ]);
    }
    Ok(report.render(ctx.format))
}

/// Mean and baseline-36 delta per score row. The published benchmarks'
/// pure-guessing floor averages 36, so `mean - 36` reads as "capability
/// above chance".
pub fn cmd_aggregate(ctx: &Ctx, score_rows: &[Vec<f64>]) -> Result<String> {
    if score_rows.is_empty() {
        return Err(Error::InvalidArgument("no score rows given".into()));
    }
    let mut report = Report::new(vec!["row", "n_tasks", "mean", "mean_minus_36"]);
    for (i, row) in score_rows.iter().enumerate() {
        if row.is_empty() {
            return Err(Error::InvalidArgument(format!("score row {i} is empty")));
        }
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        report.row(vec![
            Cell::U64(i as u64),
            Cell::U64(row.len() as u64),
            Cell::F64(mean, 4),
            Cell::F64(mean - 36.0, 4),
        ]);
    }
    Ok(report.render(ctx.format))
}

/// Architecture summary behind `moeperf model-info`, including the
/// reduction-bound check against the published value.
pub fn cmd_model_info(ctx: &Ctx) -> Result<String> {
    let model = &ctx.model;
    let check = check_reduction(model);
    let mut report = Report::new(vec!["field", "value"]);
    let d_a = model.activated_intermediate(None)?;
    let rows: Vec<(&'static str, String)> = vec![
        ("name", model.name.clone()),
        ("d", model.d.to_string()),
        ("d_e", model.d_e.to_string()),
        ("d_s", model.d_s.to_string()),
        ("d_a", d_a.to_string()),
        ("n_e", model.n_e.to_string()),
        ("n_a", model.n_a.to_string()),
        ("n_layers_total", model.n_layers_total.to_string()),
        ("n_layers_dense", model.n_layers_dense.to_string()),
        ("router_kind", model.router_kind.to_string()),
        ("compute_reduction_upper_bound", format!("{:.4}", check.computed)),
        (
            "compute_reduction_pct",
            format!("{:.1}%", check.computed * 100.0),
        ),
        (
            "reported_reduction_pct",
            match check.reported_pct {
                Some(p) => format!("{p:.1}%"),
                None => "n/a".to_string(),
            },
        ),
        (
            "reduction_discrepancy",
            if check.discrepant { "yes" } else { "no" }.to_string(),
        ),
    ];
    for (field, value) in rows {
        report.row(vec![Cell::Str(field.to_string()), Cell::Str(value)]);
    }
    Ok(report.render(ctx.format))
}
