//! End-to-end tests of the `moeperf` binary: exit codes, output
//! determinism, and the documented behavior of each subcommand.

use std::path::PathBuf;
use std::process::{Command, Output};

use moeperf_core::config::RouterKind;
use moeperf_core::routing::RouterConfig;
use moeperf_core::toy::{dump_layer, Activation, ToyMoeLayer};

fn moeperf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moeperf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn data_rows(text: &str) -> Vec<String> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .skip(1) // column header
        .map(str::to_string)
        .collect()
}

#[test]
fn roofline_row_count_knee_and_bound_flip_agree() {
    let out = moeperf(&["roofline", "--l-range", "1:256"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 256);

    let knee: u64 = text
        .lines()
        .find_map(|l| l.strip_prefix("# knee_length = "))
        .expect("knee comment")
        .parse()
        .unwrap();
    assert_eq!(knee, 172);
    // the bound column flips exactly at the knee
    let first_compute: u64 = rows
        .iter()
        .find(|r| r.ends_with(",compute"))
        .expect("compute-bound row")
        .split(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(first_compute, knee);
}

#[test]
fn roofline_rejects_bad_ranges() {
    assert_eq!(moeperf(&["roofline", "--l-range", "8:2"]).status.code(), Some(1));
    assert_eq!(moeperf(&["roofline", "--l-range", ""]).status.code(), Some(1));
    assert_eq!(moeperf(&["roofline", "--l-range", "0:5"]).status.code(), Some(1));
}

#[test]
fn roofline_moe_curve_runs() {
    let out = moeperf(&["roofline", "--l-range", "1:32", "--curve", "moe"]);
    assert!(out.status.success());
    assert_eq!(data_rows(&stdout(&out)).len(), 32);
    let both = moeperf(&["roofline", "--l-range", "1:8", "--curve", "both"]);
    assert!(both.status.success());
    let text = stdout(&both);
    assert!(text.contains("# curve: ffn"));
    assert!(text.contains("# curve: moe"));
}

#[test]
fn schedule_constant_and_peak_tuples() {
    let out = moeperf(&["schedule", "--tuple", "2,2,2,6"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("# shape_class = constant"));
    assert!(text.contains("# average_active = 2.0000"));
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 26);
    assert!(rows.iter().all(|r| r.ends_with(",2")));

    let peak = moeperf(&["schedule", "--tuple", "2,6,2,11"]);
    assert!(stdout(&peak).contains("# shape_class = peak"));
}

#[test]
fn schedule_v3_global_index_space() {
    let out = moeperf(&["--model", "v3", "schedule", "--tuple", "2,5,8,10", "--index-space", "global"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = data_rows(&stdout(&out));
    assert_eq!(rows.len(), 58);
    assert_eq!(rows[6], "7,5"); // global layer 10 is MoE layer 7
    assert_eq!(rows[57], "58,8");

    // p inside the dense prefix is rejected
    let bad = moeperf(&["--model", "v3", "schedule", "--tuple", "2,5,8,2", "--index-space", "global"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn schedule_p1_conflict_warns_and_h_governs() {
    let out = moeperf(&["schedule", "--tuple", "2,4,4,1"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("warning"), "{text}");
    assert!(data_rows(&text).iter().all(|r| r.ends_with(",4")));
}

#[test]
fn prune_even_mask_is_golden_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let path_a = dir.path().join("a.json");
    let path_b = dir.path().join("b.json");
    let a = moeperf(&["prune", "--strategy", "even", "--keep", "32", "--out", path_a.to_str().unwrap()]);
    assert!(a.status.success());
    assert!(stdout(&a).contains("memory_savings_bytes"));
    let b = moeperf(&["prune", "--strategy", "even", "--keep", "32", "--out", path_b.to_str().unwrap()]);
    assert!(b.status.success());
    let file_a = std::fs::read(&path_a).unwrap();
    let file_b = std::fs::read(&path_b).unwrap();
    assert_eq!(file_a, file_b);
    let text = String::from_utf8(file_a).unwrap();
    assert!(text.contains("\"strategy\": \"even\""));
    assert!(text.contains("\"keep\": 32"));
    // summary value: (64-32)·3·1408·2048·2·26
    assert!(stdout(&a).contains("14394851328"));
}

#[test]
fn prune_requires_stats_for_count_strategies_and_seed_reproduces() {
    let out = moeperf(&["prune", "--strategy", "soft_count", "--keep", "32"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("stats"));

    let r1 = moeperf(&["--seed", "7", "prune", "--strategy", "random", "--keep", "16"]);
    let r2 = moeperf(&["--seed", "7", "prune", "--strategy", "random", "--keep", "16"]);
    assert!(r1.status.success());
    assert_eq!(stdout(&r1), stdout(&r2));
    let r3 = moeperf(&["--seed", "8", "prune", "--strategy", "random", "--keep", "16"]);
    assert_ne!(stdout(&r1), stdout(&r3));
}

#[test]
fn prune_count_strategy_reads_a_stats_file() {
    use moeperf_core::routing::RoutingStats;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stats.json");
    // expert importance decreasing with the index
    let mut stats = RoutingStats::new(26, 64);
    for layer in &mut stats.layers {
        for e in 0..64usize {
            layer.soft[e] = 64.0 - e as f64;
            layer.hard[e] = 64 - e as u64;
        }
        layer.tokens_seen = 100;
    }
    std::fs::write(&path, stats.to_json_string()).unwrap();

    let mask_path = dir.path().join("mask.json");
    let out = moeperf(&[
        "prune",
        "--strategy",
        "soft_count",
        "--keep",
        "8",
        "--stats",
        path.to_str().unwrap(),
        "--out",
        mask_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mask = std::fs::read_to_string(&mask_path).unwrap();
    // the top 8 by soft mass are experts 0..7 in every layer
    assert!(mask.contains("[\n      0,\n      1,\n      2,\n      3,\n      4,\n      5,\n      6,\n      7\n    ]"));
    assert!(mask.contains("\"stats_digest\""));

    // the mask feeds back into simulate
    let sim = moeperf(&[
        "simulate",
        "--concurrency",
        "4",
        "--input",
        "16",
        "--output",
        "4",
        "--mask",
        mask_path.to_str().unwrap(),
    ]);
    assert!(sim.status.success(), "{}", stderr(&sim));
    let rows = data_rows(&stdout(&sim));
    let cells: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(cells[4], "8"); // n_e_eff
    let speedup: f64 = cells[6].parse().unwrap();
    assert!(speedup > 1.0);
}

#[test]
fn simulate_single_concurrency_single_row() {
    let out = moeperf(&["simulate", "--concurrency", "4", "--input", "64", "--output", "16"]);
    assert!(out.status.success());
    let rows = data_rows(&stdout(&out));
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("4,64,16,6.0000,64,"));
    // no schedule or mask: speedup column is exactly 1
    let cells: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(cells[6], "1.0000");
}

#[test]
fn simulate_compare_against_table9_reports_high_rank_correlation() {
    let out = moeperf(&["simulate", "--compare", "table9", "--compare-column", "na_6"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("# compare_fixture = table9"));
    assert!(text.contains("# excluded_anomalous_concurrency = 192"));
    let rho: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("# spearman = "))
        .expect("spearman comment")
        .parse()
        .unwrap();
    assert!(rho >= 0.9, "spearman {rho}");
    assert_eq!(data_rows(&text).len(), 13); // 14 published rows minus the anomaly
}

#[test]
fn simulate_missing_fixture_errors() {
    let out = moeperf(&["simulate", "--compare", "table99"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("table99"));
}

#[test]
fn simulate_with_schedule_reports_speedup() {
    let out = moeperf(&[
        "simulate",
        "--concurrency",
        "4",
        "--input",
        "128",
        "--output",
        "32",
        "--na",
        "2",
    ]);
    assert!(out.status.success());
    let rows = data_rows(&stdout(&out));
    let cells: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(cells[3], "2.0000"); // avg_n_a
    let speedup: f64 = cells[6].parse().unwrap();
    assert!(speedup > 1.0);
}

#[test]
fn simulate_byte_identical_across_runs() {
    let args = ["simulate", "--concurrency", "2,8,32", "--input", "256", "--output", "64", "--na", "3"];
    let a = moeperf(&args);
    let b = moeperf(&args);
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn comm_plan_five_schemes() {
    let out = moeperf(&["comm-plan", "--n-d", "8", "--tokens", "1024"]);
    assert!(out.status.success());
    let rows = data_rows(&stdout(&out));
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("8,tp,intra_node,"));
    assert!(rows[4].starts_with("8,group_limited_ep,inter_node,"));
    // ratio column of the TP-intra row is exactly 1
    assert!(rows[0].ends_with("1.000000"));

    let bad = moeperf(&["comm-plan", "--n-d", "1"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn aggregate_rows_and_errors() {
    let out = moeperf(&[
        "aggregate",
        "--scores",
        "52.9,80.6,83.1,35.8,73.3,71.4",
        "--scores",
        "36,36,36,36,36,36",
    ]);
    assert!(out.status.success());
    let rows = data_rows(&stdout(&out));
    assert_eq!(rows.len(), 2);
    assert!(rows[1].ends_with(",36.0000,0.0000"));

    assert_eq!(moeperf(&["aggregate", "--scores", "1,banana"]).status.code(), Some(1));
    assert_eq!(moeperf(&["aggregate"]).status.code(), Some(1));
}

#[test]
fn verify_passes_and_seed_variation_still_passes() {
    let out = moeperf(&["verify"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("PASS glu-naive-oracle"));
    assert!(text.contains("0 failed"));

    let seeded = moeperf(&["--seed", "20260810", "verify"]);
    assert_eq!(seeded.status.code(), Some(0), "{}", stdout(&seeded));
}

#[test]
fn verify_corrupted_dump_names_the_failing_property() {
    let dir = tempfile::tempdir().unwrap();
    let path: PathBuf = dir.path().join("weights.bin");
    let cfg = RouterConfig::default_for(RouterKind::Softmax, 8, 2);
    let layer = ToyMoeLayer::seeded(8, 16, Some(32), cfg, Activation::Silu, 5).unwrap();
    dump_layer(&layer, &path).unwrap();

    // pristine dump passes
    let ok = moeperf(&["verify", "--dump-file", path.to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0));

    // flip one byte in the middle
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x20;
    std::fs::write(&path, &bytes).unwrap();

    let out = moeperf(&["verify", "--dump-file", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).contains("FAIL weight-dump-roundtrip"));
}

#[test]
fn json_format_is_valid_json() {
    let out = moeperf(&["--format", "json", "simulate", "--concurrency", "4", "--input", "8", "--output", "8"]);
    assert!(out.status.success());
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(doc["rows"][0]["concurrency"], 4);
    assert!(doc["rows"][0]["tokens_per_second"].as_f64().unwrap() > 0.0);
}

#[test]
fn model_info_shows_reduction_discrepancy_flag() {
    let v2 = moeperf(&["model-info"]);
    assert!(v2.status.success());
    let text = stdout(&v2);
    assert!(text.contains("reduction_discrepancy,yes"));
    assert!(text.contains("compute_reduction_pct,43.6%"));

    let v3 = moeperf(&["--model", "v3", "model-info"]);
    let text = stdout(&v3);
    assert!(text.contains("reduction_discrepancy,no"));
    assert!(text.contains("compute_reduction_pct,47.1%"));
}

#[test]
fn custom_model_config_file_loads_and_bad_files_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("custom.toml");
    let good = "\
name = \"custom-tiny\"
d = 64
d_e = 32
d_s = 128
n_e = 16
n_a = 4
n_layers_total = 4
n_layers_dense = 1
router_kind = \"softmax\"
normalize_selected = true
bytes_per_element = 2
";
    std::fs::write(&path, good).unwrap();
    let out = moeperf(&["--model", path.to_str().unwrap(), "model-info"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("custom-tiny"));

    // invariant violation names the field
    std::fs::write(&path, good.replace("n_a = 4", "n_a = 0")).unwrap();
    let bad = moeperf(&["--model", path.to_str().unwrap(), "model-info"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("n_a"));

    // unknown keys are rejected
    std::fs::write(&path, format!("{good}surprise = 1\n")).unwrap();
    let unknown = moeperf(&["--model", path.to_str().unwrap(), "model-info"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(stderr(&unknown).contains("surprise"));
}

#[test]
fn unknown_presets_error_with_exit_one() {
    assert_eq!(moeperf(&["--model", "v9", "model-info"]).status.code(), Some(1));
    assert_eq!(moeperf(&["--hw", "abacus", "model-info"]).status.code(), Some(1));
}

#[test]
fn out_flag_writes_the_report_to_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rows.csv");
    let out = moeperf(&["--out", path.to_str().unwrap(), "schedule", "--tuple", "6,6,6,16"]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# moeperf v"));
    assert_eq!(data_rows(&text).len(), 26);
}
