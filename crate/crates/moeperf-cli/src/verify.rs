//! The `verify` subcommand: a self-contained property suite over the toy
//! executor and the routing stack. Each property prints one PASS/FAIL line;
//! any failure makes the command exit with code 2.
//!
//! Oracles here are deliberately independent re-implementations (brute-force
//! top-k, f64 triple-loop GLU, closed-form expectations) rather than calls
//! back into the code paths they check.

use std::path::PathBuf;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use moeperf_core::config::{GroupConfig, RouterKind};
use moeperf_core::pruning::{build_mask, route_restricted, PruneStrategy};
use moeperf_core::routing::{
    expected_distinct_experts, route, simulate_batch_routing, RouterConfig,
};
use moeperf_core::schedule::{build_schedule, SkipTuple};
use moeperf_core::serving::{simulate_throughput, ServingConfig};
use moeperf_core::toy::{
    glu_forward, layer_from_bytes, layer_to_bytes, moe_forward_detailed, split_glu_into_experts,
    Activation, GluWeights, HiddenState, MoeForwardOptions, ToyMoeLayer,
};
use moeperf_core::config::{load_hardware_preset, load_model_preset};

pub struct VerifyOutcome {
    pub passed: usize,
    pub failed: usize,
    pub lines: Vec<String>,
}

type PropResult = std::result::Result<(), String>;

pub fn run_verify(seed: u64, dump_file: Option<PathBuf>) -> VerifyOutcome {
    let dump = dump_file.clone();
    let properties: Vec<(&'static str, Box<dyn Fn() -> PropResult>)> = vec![
        ("glu-naive-oracle", Box::new(move || glu_naive_oracle(seed))),
        ("partition-equivalence", Box::new(move || partition_equivalence(seed))),
        ("routing-brute-force", Box::new(move || routing_brute_force(seed))),
        ("routing-invariances", Box::new(move || routing_invariances(seed))),
        ("group-constraint", Box::new(move || group_constraint(seed))),
        ("distinct-experts-closed-form", Box::new(move || distinct_closed_form(seed))),
        ("schedule-anchors", Box::new(|| schedule_anchors())),
        ("prune-determinism-and-ranking", Box::new(move || prune_properties(seed))),
        ("moe-prefix-skipping", Box::new(move || moe_prefix(seed))),
        ("weight-dump-roundtrip", Box::new(move || dump_roundtrip(seed, dump.clone()))),
        ("serving-conservation", Box::new(|| serving_conservation())),
    ];

    let mut outcome = VerifyOutcome {
        passed: 0,
        failed: 0,
        lines: Vec::new(),
    };
    for (name, prop) in properties {
        match prop() {
            Ok(()) => {
                outcome.passed += 1;
                outcome.lines.push(format!("PASS {name}"));
            }
            Err(msg) => {
                outcome.failed += 1;
                outcome.lines.push(format!("FAIL {name}: {msg}"));
            }
        }
    }
    outcome
}

fn check(cond: bool, msg: impl Into<String>) -> PropResult {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn naive_glu(w: &GluWeights, h: &[f32]) -> Vec<f32> {
    let d = w.d();
    let d_i = w.d_i();
    let mut out = vec![0.0f64; d];
    for j in 0..d_i {
        let mut up = 0.0f64;
        let mut gate = 0.0f64;
        for c in 0..d {
            up += f64::from(w.w_up.row(j)[c]) * f64::from(h[c]);
            gate += f64::from(w.w_gate.row(j)[c]) * f64::from(h[c]);
        }
        let act = match w.activation {
            Activation::Silu => up / (1.0 + (-up).exp()),
            Activation::Identity => up,
        };
        let inner = act * gate;
        for r in 0..d {
            out[r] += f64::from(w.w_down.row(r)[j]) * inner;
        }
    }
    out.iter().map(|&v| v as f32).collect()
}

fn vec_rel_err(got: &[f32], want: &[f32]) -> f64 {
    let scale = want
        .iter()
        .map(|&w| f64::from(w.abs()))
        .fold(0.0, f64::max)
        .max(1e-12);
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (f64::from(g) - f64::from(w)).abs() / scale)
        .fold(0.0, f64::max)
}

fn glu_naive_oracle(seed: u64) -> PropResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x01);
    for case in 0..25 {
        let w = GluWeights::seeded(8, 16, Activation::Silu, &mut rng);
        let h = HiddenState::seeded(8, 1, &mut rng);
        let got = glu_forward(&w, &h).map_err(|e| e.to_string())?;
        let want = naive_glu(&w, h.token(0));
        let err = vec_rel_err(got.data(), &want);
        check(err <= 1e-6, format!("case {case}: rel err {err}"))?;
    }
    Ok(())
}

fn partition_equivalence(seed: u64) -> PropResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x02);
    for case in 0..25 {
        let w = GluWeights::seeded(16, 64, Activation::Silu, &mut rng);
        let h = HiddenState::seeded(16, 1, &mut rng);
        let whole = glu_forward(&w, &h).map_err(|e| e.to_string())?;
        for parts in [2usize, 8, 64] {
            let split = split_glu_into_experts(&w, parts).map_err(|e| e.to_string())?;
            let mut acc = vec![0.0f32; 16];
            for part in &split {
                let out = glu_forward(part, &h).map_err(|e| e.to_string())?;
                for (a, v) in acc.iter_mut().zip(out.data()) {
                    *a += v;
                }
            }
            let err = vec_rel_err(&acc, whole.data());
            check(err <= 1e-5, format!("case {case} parts {parts}: rel err {err}"))?;
        }
    }
    Ok(())
}

/// Brute-force reference: filter to the allowed set, pick top-k by
/// (logit, -index), weight by an explicit softmax/logistic.
fn oracle_topk(logits: &[f64], allowed: &[u32], n_a: usize) -> Vec<u32> {
    let mut pool: Vec<u32> = allowed.to_vec();
    pool.sort_by(|&a, &b| {
        logits[b as usize]
            .partial_cmp(&logits[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    pool.truncate(n_a);
    pool
}

fn oracle_weights(logits: &[f64], selected: &[u32], kind: RouterKind, normalize: bool) -> Vec<f64> {
    match kind {
        RouterKind::Softmax => {
            if normalize {
                let max = selected
                    .iter()
                    .map(|&i| logits[i as usize])
                    .fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = selected.iter().map(|&i| (logits[i as usize] - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                exps.iter().map(|e| e / sum).collect()
            } else {
                // not exercised by the oracle comparison; route() computes the
                // elementwise reading over post-filter survivors
                Vec::new()
            }
        }
        RouterKind::Sigmoid => {
            let raw: Vec<f64> = selected
                .iter()
                .map(|&i| 1.0 / (1.0 + (-logits[i as usize]).exp()))
                .collect();
            if normalize {
                let sum: f64 = raw.iter().sum();
                raw.iter().map(|w| w / sum).collect()
            } else {
                raw
            }
        }
    }
}

fn routing_brute_force(seed: u64) -> PropResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x03);
    let n_e = 64u32;
    let n_a = 6u32;
    for case in 0..300 {
        let logits: Vec<f64> = (0..n_e).map(|_| rng.gen_range(-4.0..4.0)).collect();
        for kind in [RouterKind::Softmax, RouterKind::Sigmoid] {
            let cfg = RouterConfig::default_for(kind, n_e, n_a);
            let d = route(&logits, &cfg).map_err(|e| e.to_string())?;
            let all: Vec<u32> = (0..n_e).collect();
            let want_idx = oracle_topk(&logits, &all, n_a as usize);
            check(d.selected == want_idx, format!("case {case} {kind:?}: indices"))?;
            let want_w = oracle_weights(&logits, &want_idx, kind, true);
            for (a, b) in d.weights.iter().zip(&want_w) {
                check((a - b).abs() <= 1e-6, format!("case {case} {kind:?}: weights"))?;
            }

            // restricted to a random retained set of 32
            let mut pool: Vec<u32> = (0..n_e).collect();
            for i in (1..pool.len()).rev() {
                let j = rng.gen_range(0..=i);
                pool.swap(i, j);
            }
            let mut retained: Vec<u32> = pool[..32].to_vec();
            retained.sort_unstable();
            let dr = route_restricted(&logits, &cfg, &retained).map_err(|e| e.to_string())?;
            let want_r = oracle_topk(&logits, &retained, n_a as usize);
            check(dr.selected == want_r, format!("case {case} {kind:?}: restricted indices"))?;
            let want_rw = oracle_weights(&logits, &want_r, kind, true);
            for (a, b) in dr.weights.iter().zip(&want_rw) {
                check(
                    (a - b).abs() <= 1e-6,
                    format!("case {case} {kind:?}: restricted weights"),
                )?;
            }
        }
    }
    Ok(())
}

fn routing_invariances(seed: u64) -> PropResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x04);
    let cfg = RouterConfig::default_for(RouterKind::Softmax, 16, 4);
    for case in 0..100 {
        let logits: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let base = route(&logits, &cfg).map_err(|e| e.to_string())?;

        // positive scaling preserves the selected set
        let scaled: Vec<f64> = logits.iter().map(|v| v * 3.5).collect();
        let s = route(&scaled, &cfg).map_err(|e| e.to_string())?;
        let mut a = base.selected.clone();
        let mut b = s.selected.clone();
        a.sort_unstable();
        b.sort_unstable();
        check(a == b, format!("case {case}: scale changed selection"))?;

        // shifting preserves selection and weights
        let shifted: Vec<f64> = logits.iter().map(|v| v + 7.0).collect();
        let sh = route(&shifted, &cfg).map_err(|e| e.to_string())?;
        check(sh.selected == base.selected, format!("case {case}: shift changed selection"))?;
        for (x, y) in sh.weights.iter().zip(&base.weights) {
            check((x - y).abs() <= 1e-9, format!("case {case}: shift changed weights"))?;
        }

        // permutation equivariance (distinct logits)
        let perm: Vec<u32> = {
            let mut p: Vec<u32> = (0..16).collect();
            for i in (1..p.len()).rev() {
                let j = rng.gen_range(0..=i);
                p.swap(i, j);
            }
            p
        };
        let mut permuted = vec![0.0; 16];
        for (orig, &dest) in perm.iter().enumerate() {
            permuted[dest as usize] = logits[orig];
        }
        let dp = route(&permuted, &cfg).map_err(|e| e.to_string())?;
        let mapped: Vec<u32> = base.selected.iter().map(|&i| perm[i as usize]).collect();
        check(dp.selected == mapped, format!("case {case}: permutation broke selection"))?;
    }
    Ok(())
}

fn group_constraint(seed: u64) -> PropResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05);
    // v3-style grouping at desk scale: 64 experts, 8 groups, top 2 groups
    let cfg = RouterConfig {
        group_config: Some(GroupConfig {
            n_group: 8,
            topk_group: 2,
        }),
        ..RouterConfig::default_for(RouterKind::Sigmoid, 64, 8)
    };
    for case in 0..100 {
        let logits: Vec<f64> = (0..64).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let d = route(&logits, &cfg).map_err(|e| e.to_string())?;
        let mut groups: Vec<u32> = d.selected.iter().map(|&i| i / 8).collect();
        groups.sort_unstable();
        groups.dedup();
        check(
            groups.len() <= 2,
            format!("case {case}: decision touches {} groups", groups.len()),
        )?;
    }
    Ok(())
}

fn distinct_closed_form(seed: u64) -> PropResult {
    let cfg = RouterConfig::default_for(RouterKind::Softmax, 64, 6);
    for t in [1u64, 8, 32] {
        let expected = expected_distinct_experts(64, 6, t).map_err(|e| e.to_string())?;
        let trials = 4000u64;
        let mut samples = Vec::with_capacity(trials as usize);
        for trial in 0..trials {
            let (distinct, _) = simulate_batch_routing(&cfg, t, None, seed ^ (trial + 1))
                .map_err(|e| e.to_string())?;
            samples.push(f64::from(distinct));
        }
        let mean: f64 = samples.iter().sum::<f64>() / trials as f64;
        let var =
            samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (trials - 1) as f64;
        let sigma_mean = (var / trials as f64).sqrt().max(1e-9);
        let diff = (mean - expected).abs();
        check(
            diff <= 3.0 * sigma_mean,
            format!("T={t}: |{mean} - {expected}| > 3σ ({})", 3.0 * sigma_mean),
        )?;
    }
    Ok(())
}

fn schedule_anchors() -> PropResult {
    for b in [2u32, 4, 6] {
        for h in [2u32, 4, 6] {
            for e in [2u32, 4, 6] {
                for p in [1u32, 6, 11, 16, 21, 26] {
                    let t = SkipTuple::new(b, h, e, p);
                    let s = build_schedule(t, 26).map_err(|err| format!("{t}: {err}"))?;
                    check(s.n_a_per_layer[(p - 1) as usize] == h, format!("{t}: h anchor"))?;
                    if p != 1 {
                        check(s.n_a_per_layer[0] == b, format!("{t}: b anchor"))?;
                    }
                    if p != 26 {
                        check(s.n_a_per_layer[25] == e, format!("{t}: e anchor"))?;
                    }
                    if b == h && h == e {
                        check(s.average_active() == f64::from(b), format!("{t}: constant mean"))?;
                    }
                }
            }
        }
    }
    Ok(())
}

fn prune_properties(seed: u64) -> PropResult {
    let a = build_mask(PruneStrategy::Random, 16, 64, 6, 8, Some(seed), None)
        .map_err(|e| e.to_string())?;
    let b = build_mask(PruneStrategy::Random, 16, 64, 6, 8, Some(seed), None)
        .map_err(|e| e.to_string())?;
    check(a == b, "random mask not deterministic")?;

    let even = build_mask(PruneStrategy::Even, 32, 64, 6, 4, None, None).map_err(|e| e.to_string())?;
    let expected: Vec<u32> = (0..64).filter(|i| i % 2 == 0).collect();
    check(
        even.layers.iter().all(|l| *l == expected),
        "even mask not the even indices",
    )?;

    // ranking oracle on synthetic stats with a known order
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x06);
    let mut order: Vec<u32> = (0..64).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut stats = moeperf_core::routing::RoutingStats::new(2, 64);
    for layer in &mut stats.layers {
        for (rank, &expert) in order.iter().enumerate() {
            layer.soft[expert as usize] = 1000.0 - rank as f64;
            layer.hard[expert as usize] = 1000 - rank as u64;
        }
        layer.tokens_seen = 1000;
    }
    let want: Vec<u32> = {
        let mut top: Vec<u32> = order[..24].to_vec();
        top.sort_unstable();
        top
    };
    for strategy in [PruneStrategy::SoftCount, PruneStrategy::ActivateCount] {
        let m = build_mask(strategy, 24, 64, 6, 2, None, Some(&stats)).map_err(|e| e.to_string())?;
        check(
            m.layers.iter().all(|l| *l == want),
            format!("{strategy} ranking disagrees with oracle"),
        )?;
    }
    Ok(())
}

fn moe_prefix(seed: u64) -> PropResult {
    let cfg = RouterConfig::default_for(RouterKind::Softmax, 16, 6);
    let layer = ToyMoeLayer::seeded(8, 16, Some(32), cfg, Activation::Silu, seed ^ 0x07)
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x08);
    let h = HiddenState::seeded(8, 16, &mut rng);
    let (_, full) =
        moe_forward_detailed(&layer, &h, MoeForwardOptions::default()).map_err(|e| e.to_string())?;
    let (_, skipped) = moe_forward_detailed(
        &layer,
        &h,
        MoeForwardOptions {
            n_a_override: Some(2),
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    for (token, (f, s)) in full.iter().zip(&skipped).enumerate() {
        check(
            f.selected[..2] == s.selected[..],
            format!("token {token}: skipped selection is not the top-k prefix"),
        )?;
    }
    Ok(())
}

fn dump_roundtrip(seed: u64, dump_file: Option<PathBuf>) -> PropResult {
    if let Some(path) = dump_file {
        // verify an existing dump instead of a generated one
        let bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let layer = layer_from_bytes(&bytes).map_err(|e| e.to_string())?;
        check(
            layer_to_bytes(&layer) == bytes,
            "dump re-serialization differs",
        )?;
        return Ok(());
    }
    let cfg = RouterConfig::default_for(RouterKind::Sigmoid, 8, 2);
    let layer =
        ToyMoeLayer::seeded(8, 16, Some(32), cfg, Activation::Silu, seed ^ 0x09).map_err(|e| e.to_string())?;
    let bytes = layer_to_bytes(&layer);
    let back = layer_from_bytes(&bytes).map_err(|e| e.to_string())?;
    check(back == layer, "round-tripped layer differs")?;
    let mut corrupted = bytes.clone();
    corrupted[bytes.len() / 2] ^= 0x10;
    check(
        layer_from_bytes(&corrupted).is_err(),
        "corruption was not detected",
    )
}

fn serving_conservation() -> PropResult {
    let model = load_model_preset("v2-lite").map_err(|e| e.to_string())?;
    let hw = load_hardware_preset("a800").map_err(|e| e.to_string())?;
    let sc = ServingConfig::new(8, 64, 16);
    let r = simulate_throughput(&model, &hw, &sc).map_err(|e| e.to_string())?;
    check(r.total_tokens == 8 * 80, "token count not conserved")?;
    let mask = build_mask(PruneStrategy::FirstHalf, 64, 64, 6, 26, None, None)
        .map_err(|e| e.to_string())?;
    let masked = simulate_throughput(&model, &hw, &sc.clone().with_mask(mask))
        .map_err(|e| e.to_string())?;
    check(
        masked.tokens_per_second == r.tokens_per_second,
        "identity mask changed throughput",
    )
}
