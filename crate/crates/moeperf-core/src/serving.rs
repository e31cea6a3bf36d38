//! Lockstep continuous-batching throughput model.
//!
//! All `C` requests advance together: one prefill pass over `C·input`
//! tokens, then `output` decode steps of `C` tokens each. Every step sums
//! per-layer roofline costs (dense layers as plain FFN with the shared
//! expert's width, MoE layers via the distinct-expert load model), an
//! optional KV-traffic term, and a fixed per-step overhead standing in for
//! attention kernels and scheduling.
//!
//! Absolute tokens/s are not calibrated to any measured system; curve
//! shapes and ratios are the modeled quantities.

use crate::config::{HardwareProfile, ModelConfig};
use crate::error::{Error, Result};
use crate::pruning::PruneMask;
use crate::roofline::{ffn_flops, ffn_io, latency, moe_layer_estimate_with_distinct, Bound, RooflineQuery};
use crate::routing::expected_distinct_experts;
use crate::schedule::SkipSchedule;

/// Per-step overhead (seconds) used when none is given: a fixed stand-in
/// for attention and scheduler time, calibrated so modeled speedup curves
/// reproduce the observed low/high-concurrency shape.
pub const DEFAULT_OVERHEAD_PER_STEP: f64 = 0.025;

#[derive(Debug, Clone)]
pub struct ServingConfig {
    pub concurrency: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub schedule: Option<SkipSchedule>,
    pub mask: Option<PruneMask>,
    /// Fixed seconds added to the prefill pass and to every decode step.
    pub overhead_per_step: f64,
    /// KV-cache bytes moved per token of context per layer; 0 disables the
    /// attention traffic term.
    pub attention_coeff: f64,
}

impl ServingConfig {
    pub fn new(concurrency: u64, input_tokens: u64, output_tokens: u64) -> Self {
        ServingConfig {
            concurrency,
            input_tokens,
            output_tokens,
            schedule: None,
            mask: None,
            overhead_per_step: DEFAULT_OVERHEAD_PER_STEP,
            attention_coeff: 0.0,
        }
    }

    pub fn with_schedule(mut self, schedule: SkipSchedule) -> Self {
        self.schedule = Some(schedule);
        self
    }

    pub fn with_mask(mut self, mask: PruneMask) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn with_overhead(mut self, seconds: f64) -> Self {
        self.overhead_per_step = seconds;
        self
    }

    pub fn with_attention_coeff(mut self, bytes_per_token_per_layer: f64) -> Self {
        self.attention_coeff = bytes_per_token_per_layer;
        self
    }

    pub fn with_concurrency(mut self, concurrency: u64) -> Self {
        self.concurrency = concurrency;
        self
    }

    fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.concurrency == 0 || self.input_tokens == 0 || self.output_tokens == 0 {
            return Err(Error::InvalidConfig(
                "concurrency, input_tokens, output_tokens must be >= 1".into(),
            ));
        }
        if !(self.overhead_per_step >= 0.0) || !(self.attention_coeff >= 0.0) {
            return Err(Error::InvalidConfig(
                "overhead_per_step and attention_coeff must be >= 0".into(),
            ));
        }
        if let Some(s) = &self.schedule {
            if s.n_layers() != model.n_moe_layers() {
                return Err(Error::InvalidConfig(format!(
                    "schedule covers {} layers, model has {} MoE layers",
                    s.n_layers(),
                    model.n_moe_layers()
                )));
            }
            s.validate_against(model.n_e)?;
        }
        if let Some(m) = &self.mask {
            if m.n_e != model.n_e {
                return Err(Error::InvalidConfig(format!(
                    "mask built for n_e = {}, model has {}",
                    m.n_e, model.n_e
                )));
            }
            if m.n_layers() != model.n_moe_layers() {
                return Err(Error::InvalidConfig(format!(
                    "mask covers {} layers, model has {} MoE layers",
                    m.n_layers(),
                    model.n_moe_layers()
                )));
            }
        }
        // every layer must be routable within the retained experts
        let n_e_eff = self.mask.as_ref().map_or(model.n_e, |m| m.keep);
        let max_n_a = self
            .schedule
            .as_ref()
            .map_or(model.n_a, |s| *s.n_a_per_layer.iter().max().unwrap());
        if max_n_a > n_e_eff {
            return Err(Error::InvalidConfig(format!(
                "schedule activates up to {max_n_a} experts but only {n_e_eff} are retained"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseTimes {
    pub prefill_s: f64,
    pub decode_s: f64,
    /// Overhead seconds included in the totals above.
    pub overhead_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputReport {
    pub concurrency: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub total_tokens: u64,
    pub tokens_per_second: f64,
    pub phases: PhaseTimes,
    /// Decode (step, layer) evaluations classified compute-bound.
    pub decode_compute_bound_evals: u64,
    pub decode_total_evals: u64,
    pub bound_fraction_compute: f64,
    pub avg_active_experts: f64,
    pub effective_experts: u32,
}

/// Per-layer active counts resolved against the model.
fn resolve_schedule(model: &ModelConfig, sc: &ServingConfig) -> Vec<u32> {
    match &sc.schedule {
        Some(s) => s.n_a_per_layer.clone(),
        None => vec![model.n_a; model.n_moe_layers() as usize],
    }
}

/// Cost of one forward pass over `tokens` parallel tokens. Returns total
/// seconds plus per-layer bound classifications.
fn pass_cost(
    model: &ModelConfig,
    hw: &HardwareProfile,
    tokens: u64,
    n_a_per_layer: &[u32],
    n_e_eff: u32,
    kv_bytes_per_layer: f64,
) -> Result<(f64, Vec<Bound>)> {
    let kv_elements = kv_bytes_per_layer / f64::from(model.bytes_per_element);
    let mut total = 0.0;
    let mut bounds = Vec::with_capacity(model.n_layers_total as usize);
    let dense_query = RooflineQuery::new(model.d, model.d_s, tokens)?;
    let dense_io = ffn_io(dense_query) as f64 + kv_elements;
    let dense_flops = ffn_flops(dense_query) as f64;
    for _ in 0..model.n_layers_dense {
        let est = latency(dense_io, model.bytes_per_element, dense_flops, hw)?;
        total += est.time_s;
        bounds.push(est.bound);
    }
    for &n_a in n_a_per_layer {
        let distinct = expected_distinct_experts(n_e_eff, n_a, tokens)?;
        let est = moe_layer_estimate_with_distinct(model, tokens, n_a, n_e_eff, distinct, hw)?;
        let with_kv = latency(
            est.estimate.io_elements + kv_elements,
            model.bytes_per_element,
            est.estimate.flops,
            hw,
        )?;
        total += with_kv.time_s;
        bounds.push(with_kv.bound);
    }
    Ok((total, bounds))
}

pub fn simulate_throughput(
    model: &ModelConfig,
    hw: &HardwareProfile,
    sc: &ServingConfig,
) -> Result<ThroughputReport> {
    model.validate()?;
    hw.validate()?;
    sc.validate(model)?;

    let n_a_per_layer = resolve_schedule(model, sc);
    let n_e_eff = sc.mask.as_ref().map_or(model.n_e, |m| m.keep);
    let c = sc.concurrency;

    // prefill: all input tokens of all requests in one pass
    let prefill_tokens = c * sc.input_tokens;
    let prefill_kv = sc.attention_coeff * (c * sc.input_tokens) as f64;
    let (prefill_s, _) = pass_cost(model, hw, prefill_tokens, &n_a_per_layer, n_e_eff, prefill_kv)?;

    // decode: one token per request per step, context growing each step
    let mut decode_s = 0.0;
    let mut compute_evals: u64 = 0;
    let mut total_evals: u64 = 0;
    for step in 0..sc.output_tokens {
        let context = sc.input_tokens + step + 1;
        let kv = sc.attention_coeff * (context * c) as f64;
        let (step_s, bounds) = pass_cost(model, hw, c, &n_a_per_layer, n_e_eff, kv)?;
        decode_s += step_s;
        total_evals += bounds.len() as u64;
        compute_evals += bounds.iter().filter(|b| **b == Bound::Compute).count() as u64;
    }

    let steps = 1 + sc.output_tokens;
    let overhead_s = sc.overhead_per_step * steps as f64;
    let total_s = prefill_s + decode_s + overhead_s;
    let total_tokens = c * (sc.input_tokens + sc.output_tokens);
    let avg_active_experts = n_a_per_layer.iter().map(|&v| f64::from(v)).sum::<f64>()
        / n_a_per_layer.len() as f64;

    Ok(ThroughputReport {
        concurrency: c,
        input_tokens: sc.input_tokens,
        output_tokens: sc.output_tokens,
        total_tokens,
        tokens_per_second: total_tokens as f64 / total_s,
        phases: PhaseTimes {
            prefill_s: prefill_s + sc.overhead_per_step,
            decode_s: decode_s + sc.overhead_per_step * sc.output_tokens as f64,
            overhead_s,
            total_s,
        },
        decode_compute_bound_evals: compute_evals,
        decode_total_evals: total_evals,
        bound_fraction_compute: compute_evals as f64 / total_evals as f64,
        avg_active_experts,
        effective_experts: n_e_eff,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupRow {
    pub concurrency: u64,
    pub variant: String,
    pub report: ThroughputReport,
    pub speedup_vs_base: f64,
}

/// Sweep concurrency for a base config and variants differing only in
/// schedule/mask; speedups are variant throughput over base throughput at
/// the same concurrency.
pub fn speedup_curve(
    model: &ModelConfig,
    hw: &HardwareProfile,
    base: &ServingConfig,
    variants: &[(String, ServingConfig)],
    concurrencies: &[u64],
) -> Result<Vec<SpeedupRow>> {
    let mut rows = Vec::new();
    for &c in concurrencies {
        let base_report = simulate_throughput(model, hw, &base.clone().with_concurrency(c))?;
        let base_tps = base_report.tokens_per_second;
        rows.push(SpeedupRow {
            concurrency: c,
            variant: "base".into(),
            report: base_report,
            speedup_vs_base: 1.0,
        });
        for (name, variant) in variants {
            let report = simulate_throughput(model, hw, &variant.clone().with_concurrency(c))?;
            let speedup = report.tokens_per_second / base_tps;
            rows.push(SpeedupRow {
                concurrency: c,
                variant: name.clone(),
                report,
                speedup_vs_base: speedup,
            });
        }
    }
    Ok(rows)
}

/// Smallest concurrency at which the first decode step is compute-bound for
/// the majority of layers, or `None` if no concurrency up to 2^24 is.
pub fn knee_concurrency(
    model: &ModelConfig,
    hw: &HardwareProfile,
    template: &ServingConfig,
) -> Result<Option<u64>> {
    model.validate()?;
    hw.validate()?;
    template.validate(model)?;
    let n_a_per_layer = resolve_schedule(model, template);
    let n_e_eff = template.mask.as_ref().map_or(model.n_e, |m| m.keep);

    let majority_compute = |c: u64| -> Result<bool> {
        let context = template.input_tokens + 1;
        let kv = template.attention_coeff * (context * c) as f64;
        let (_, bounds) = pass_cost(model, hw, c, &n_a_per_layer, n_e_eff, kv)?;
        let compute = bounds.iter().filter(|b| **b == Bound::Compute).count();
        Ok(compute * 2 > bounds.len())
    };

    let mut hi = 1u64;
    while !majority_compute(hi)? {
        hi *= 2;
        if hi > (1 << 24) {
            return Ok(None);
        }
    }
    let mut lo = (hi / 2).max(1);
    if lo == hi {
        return Ok(Some(lo));
    }
    lo += 1;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if majority_compute(mid)? {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(Some(lo))
}
