//! Memory I/O, FLOP, and arithmetic-intensity accounting for FFN and MoE
//! layers, with a max-of-two-times latency model.
//!
//! `ffn_io` and `ffn_flops` count in elements and FLOPs exactly:
//!
//! ```text
//! io(d, d_i, L)    = 3·d_i·d + 2·L·(d + d_i)
//! flops(d, d_i, L) = 6·L·d_i·d
//! ```
//!
//! Byte conversion happens only at the latency boundary so the element-level
//! formulas stay directly testable.

use crate::config::{HardwareProfile, ModelConfig};
use crate::error::{Error, Result};
use crate::routing::expected_distinct_experts;

/// A dense FFN evaluation: hidden size `d`, intermediate size `d_i`, and
/// `tokens` processed in parallel (sequence length or decode batch).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RooflineQuery {
    pub d: u64,
    pub d_i: u64,
    pub tokens: u64,
}

impl RooflineQuery {
    pub fn new(d: u64, d_i: u64, tokens: u64) -> Result<Self> {
        if d == 0 || d_i == 0 || tokens == 0 {
            return Err(Error::InvalidArgument(
                "roofline query requires d, d_i, tokens >= 1".into(),
            ));
        }
        Ok(RooflineQuery { d, d_i, tokens })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    Memory,
    Compute,
}

impl std::fmt::Display for Bound {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Bound::Memory => write!(f, "memory"),
            Bound::Compute => write!(f, "compute"),
        }
    }
}

/// Latency estimate for one layer evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RooflineEstimate {
    pub io_elements: f64,
    pub io_bytes: f64,
    pub flops: f64,
    /// FLOPs per element moved.
    pub ai_elements: f64,
    pub time_s: f64,
    pub bound: Bound,
}

/// Elements moved by one FFN evaluation: three weight matrices plus input
/// and output activations.
pub fn ffn_io(q: RooflineQuery) -> u64 {
    3 * q.d_i * q.d + 2 * q.tokens * (q.d + q.d_i)
}

pub fn ffn_flops(q: RooflineQuery) -> u64 {
    6 * q.tokens * q.d_i * q.d
}

/// FLOPs per element; increases monotonically with `tokens` toward the
/// weight-reuse limit `3·d_i·d / (d_i + d)`.
pub fn arithmetic_intensity(q: RooflineQuery) -> f64 {
    ffn_flops(q) as f64 / ffn_io(q) as f64
}

/// Large-`tokens` limit of [`arithmetic_intensity`].
pub fn arithmetic_intensity_limit(d: u64, d_i: u64) -> f64 {
    (3 * d_i * d) as f64 / (d_i + d) as f64
}

/// Roofline latency: the slower of memory traffic and compute. Ties
/// classify as compute-bound.
pub fn latency(
    io_elements: f64,
    bytes_per_element: u32,
    flops: f64,
    hw: &HardwareProfile,
) -> Result<RooflineEstimate> {
    hw.validate()?;
    let io_bytes = io_elements * f64::from(bytes_per_element);
    let mem_time = io_bytes / hw.mem_bw;
    let compute_time = flops / hw.peak_flops;
    let (time_s, bound) = if mem_time > compute_time {
        (mem_time, Bound::Memory)
    } else {
        (compute_time, Bound::Compute)
    };
    Ok(RooflineEstimate {
        io_elements,
        io_bytes,
        flops,
        ai_elements: if io_elements > 0.0 { flops / io_elements } else { 0.0 },
        time_s,
        bound,
    })
}

/// Full estimate for a dense FFN query.
pub fn ffn_estimate(
    q: RooflineQuery,
    bytes_per_element: u32,
    hw: &HardwareProfile,
) -> Result<RooflineEstimate> {
    latency(ffn_io(q) as f64, bytes_per_element, ffn_flops(q) as f64, hw)
}

/// Closed-form approximation of the saturation length, valid when weight
/// traffic dominates activation traffic: `peak_flops·B / (2·mem_bw)`.
pub fn knee_length_approx(bytes_per_element: u32, hw: &HardwareProfile) -> f64 {
    hw.peak_flops * f64::from(bytes_per_element) / (2.0 * hw.mem_bw)
}

/// Smallest token count at which the FFN becomes compute-bound, or `None`
/// when compute never dominates (degenerate hardware).
pub fn knee_length(
    d: u64,
    d_i: u64,
    bytes_per_element: u32,
    hw: &HardwareProfile,
) -> Result<Option<u64>> {
    hw.validate()?;
    let b = f64::from(bytes_per_element);
    let compute_slope = (6 * d_i * d) as f64 / hw.peak_flops;
    let mem_slope = (2 * (d + d_i)) as f64 * b / hw.mem_bw;
    if compute_slope <= mem_slope {
        return Ok(None);
    }
    let mem_const = (3 * d_i * d) as f64 * b / hw.mem_bw;
    let crossing = mem_const / (compute_slope - mem_slope);
    let mut candidate = crossing.floor().max(1.0) as u64;
    // settle fp slack around the closed-form crossing
    while candidate > 1 && is_compute_bound(d, d_i, candidate - 1, b, hw) {
        candidate -= 1;
    }
    while !is_compute_bound(d, d_i, candidate, b, hw) {
        candidate += 1;
    }
    Ok(Some(candidate))
}

fn is_compute_bound(d: u64, d_i: u64, tokens: u64, b: f64, hw: &HardwareProfile) -> bool {
    let q = RooflineQuery { d, d_i, tokens };
    ffn_flops(q) as f64 / hw.peak_flops >= ffn_io(q) as f64 * b / hw.mem_bw
}

/// I/O breakdown of one MoE layer evaluation, in elements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoeIoBreakdown {
    pub shared_weights: f64,
    pub routed_weights: f64,
    pub router_weights: f64,
    pub activations: f64,
}

/// Cost estimate for one MoE layer over `tokens` parallel tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoeLayerEstimate {
    pub estimate: RooflineEstimate,
    pub io: MoeIoBreakdown,
    pub expert_flops: f64,
    pub gating_flops: f64,
    /// Expected distinct routed experts loaded for this batch.
    pub expected_distinct: f64,
}

/// Roofline estimate of one MoE layer: shared expert plus `n_a_eff` routed
/// experts per token out of `n_e_eff` retained, with routed-expert weight
/// traffic scaled by the expected number of distinct experts the batch
/// touches. Router weight I/O and gating FLOPs are included even though
/// they are negligible.
pub fn moe_layer_estimate(
    config: &ModelConfig,
    tokens: u64,
    n_a_eff: u32,
    n_e_eff: u32,
    hw: &HardwareProfile,
) -> Result<MoeLayerEstimate> {
    config.validate()?;
    if tokens == 0 {
        return Err(Error::InvalidArgument("tokens must be >= 1".into()));
    }
    if n_a_eff == 0 || n_a_eff > n_e_eff || n_e_eff > config.n_e {
        return Err(Error::InvalidArgument(format!(
            "requires 1 <= n_a_eff ({n_a_eff}) <= n_e_eff ({n_e_eff}) <= n_e ({})",
            config.n_e
        )));
    }
    moe_layer_estimate_unchecked(config, tokens, n_a_eff, n_e_eff, hw)
}

/// Same as [`moe_layer_estimate`] but with an explicit distinct-expert
/// count, for sampled-load studies.
pub fn moe_layer_estimate_with_distinct(
    config: &ModelConfig,
    tokens: u64,
    n_a_eff: u32,
    n_e_eff: u32,
    distinct: f64,
    hw: &HardwareProfile,
) -> Result<MoeLayerEstimate> {
    let d = config.d as f64;
    let shared_weights = 3.0 * config.d_s as f64 * d;
    let routed_weights = 3.0 * config.d_e as f64 * d * distinct;
    let router_weights = f64::from(n_e_eff) * d;
    let activations = 2.0
        * tokens as f64
        * (config.d as f64 + config.d_s as f64 + f64::from(n_a_eff) * config.d_e as f64);
    let io_elements = shared_weights + routed_weights + router_weights + activations;

    let expert_flops =
        6.0 * tokens as f64 * (config.d_s as f64 + f64::from(n_a_eff) * config.d_e as f64) * d;
    let gating_flops = 2.0 * tokens as f64 * f64::from(n_e_eff) * d;
    let flops = expert_flops + gating_flops;

    let estimate = latency(io_elements, config.bytes_per_element, flops, hw)?;
    Ok(MoeLayerEstimate {
        estimate,
        io: MoeIoBreakdown {
            shared_weights,
            routed_weights,
            router_weights,
            activations,
        },
        expert_flops,
        gating_flops,
        expected_distinct: distinct,
    })
}

fn moe_layer_estimate_unchecked(
    config: &ModelConfig,
    tokens: u64,
    n_a_eff: u32,
    n_e_eff: u32,
    hw: &HardwareProfile,
) -> Result<MoeLayerEstimate> {
    let distinct = expected_distinct_experts(n_e_eff, n_a_eff, tokens)?;
    moe_layer_estimate_with_distinct(config, tokens, n_a_eff, n_e_eff, distinct, hw)
}
