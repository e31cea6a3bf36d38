//! Top-k gating, the distinct-experts-loaded model, and calibration
//! statistics for pruning.
//!
//! Routing follows the two-stage scheme used by fine-grained MoE routers:
//! a selection modifier `F_r` (group-limited masking) applied to raw logits
//! before top-k, then a weight modifier `F_w` (softmax or logistic, with
//! optional renormalization over the selected set) producing combination
//! weights. Ties break toward the lower expert index everywhere so results
//! are deterministic.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{GroupConfig, RouterKind};
use crate::error::{Error, Result};

/// How a group's score is computed for group-limited selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupScore {
    /// Sum of the group's two largest logits (DeepSeek-V3 convention).
    Top2Sum,
    /// The group's single largest logit.
    Max,
}

/// How soft counts accumulate gate probability mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftCountMode {
    /// Every expert's pre-top-k probability is accumulated for every token.
    AllExperts,
    /// Only the selected experts' probabilities are accumulated.
    SelectedOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterConfig {
    pub router_kind: RouterKind,
    pub normalize_selected: bool,
    pub group_config: Option<GroupConfig>,
    pub n_e: u32,
    pub n_a: u32,
    pub group_score: GroupScore,
}

impl RouterConfig {
    pub fn default_for(router_kind: RouterKind, n_e: u32, n_a: u32) -> Self {
        RouterConfig {
            router_kind,
            normalize_selected: true,
            group_config: None,
            n_e,
            n_a,
            group_score: GroupScore::Top2Sum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_a == 0 || self.n_a > self.n_e {
            return Err(Error::InvalidConfig(format!(
                "n_a ({}) must be in [1, n_e ({})]",
                self.n_a, self.n_e
            )));
        }
        if let Some(g) = self.group_config {
            if g.n_group == 0 || self.n_e % g.n_group != 0 {
                return Err(Error::InvalidConfig(format!(
                    "n_e ({}) must be divisible by n_group ({})",
                    self.n_e, g.n_group
                )));
            }
            if g.topk_group == 0 || g.topk_group > g.n_group {
                return Err(Error::InvalidConfig(format!(
                    "topk_group ({}) must be in [1, n_group ({})]",
                    g.topk_group, g.n_group
                )));
            }
        }
        Ok(())
    }
}

/// One token's routing outcome: selected expert indices in rank order
/// (best first), their gate weights, and the raw logits.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub selected: Vec<u32>,
    pub weights: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Route one token's logits through selection and weighting.
pub fn route(logits: &[f64], cfg: &RouterConfig) -> Result<RoutingDecision> {
    route_masked(logits, cfg, None)
}

/// Core routing with an optional availability mask (used by pruning's
/// restricted re-routing). `allowed`, when present, lists the retained
/// expert indices; all others are excluded before group scoring and top-k.
pub fn route_masked(
    logits: &[f64],
    cfg: &RouterConfig,
    allowed: Option<&[u32]>,
) -> Result<RoutingDecision> {
    cfg.validate()?;
    if logits.len() != cfg.n_e as usize {
        return Err(Error::InvalidArgument(format!(
            "expected {} logits, got {}",
            cfg.n_e,
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("logits must be finite".into()));
    }

    let n_e = cfg.n_e as usize;
    let mut available = vec![true; n_e];
    if let Some(allowed) = allowed {
        available = vec![false; n_e];
        for &i in allowed {
            if i as usize >= n_e {
                return Err(Error::InvalidArgument(format!(
                    "retained index {i} out of range for n_e {}",
                    cfg.n_e
                )));
            }
            available[i as usize] = true;
        }
    }

    // F_r: group-limited masking.
    if let Some(g) = cfg.group_config {
        apply_group_filter(logits, g, cfg.group_score, &mut available);
    }

    // Top-n_a by logit, ties toward the lower index.
    let mut survivors: Vec<u32> = (0..cfg.n_e).filter(|&i| available[i as usize]).collect();
    if (survivors.len() as u32) < cfg.n_a {
        return Err(Error::InvalidArgument(format!(
            "only {} experts survive selection filtering but n_a is {}",
            survivors.len(),
            cfg.n_a
        )));
    }
    survivors.sort_by(|&a, &b| {
        logits[b as usize]
            .partial_cmp(&logits[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    let selected: Vec<u32> = survivors[..cfg.n_a as usize].to_vec();

    // F_w over the survivors.
    let weights = gate_weights(logits, cfg, &survivors, &selected);

    Ok(RoutingDecision {
        selected,
        weights,
        logits: logits.to_vec(),
    })
}

fn apply_group_filter(
    logits: &[f64],
    g: GroupConfig,
    score_kind: GroupScore,
    available: &mut [bool],
) {
    let n_e = logits.len();
    let group_size = n_e / g.n_group as usize;
    let mut scores: Vec<(usize, f64)> = Vec::with_capacity(g.n_group as usize);
    for group in 0..g.n_group as usize {
        let members: Vec<f64> = (group * group_size..(group + 1) * group_size)
            .filter(|&i| available[i])
            .map(|i| logits[i])
            .collect();
        let score = match score_kind {
            GroupScore::Max => members.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            GroupScore::Top2Sum => {
                let mut top = [f64::NEG_INFINITY; 2];
                for v in members {
                    if v > top[0] {
                        top[1] = top[0];
                        top[0] = v;
                    } else if v > top[1] {
                        top[1] = v;
                    }
                }
                if top[1] == f64::NEG_INFINITY {
                    top[0]
                } else {
                    top[0] + top[1]
                }
            }
        };
        scores.push((group, score));
    }
    scores.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(group, _) in &scores[g.topk_group as usize..] {
        for i in group * group_size..(group + 1) * group_size {
            available[i] = false;
        }
    }
}

fn gate_weights(logits: &[f64], cfg: &RouterConfig, survivors: &[u32], selected: &[u32]) -> Vec<f64> {
    match cfg.router_kind {
        RouterKind::Softmax => {
            if cfg.normalize_selected {
                softmax(&selected.iter().map(|&i| logits[i as usize]).collect::<Vec<_>>())
            } else {
                // Elementwise reading: probabilities from the softmax over all
                // surviving logits, taken at the selected indices.
                let probs = softmax(&survivors.iter().map(|&i| logits[i as usize]).collect::<Vec<_>>());
                selected
                    .iter()
                    .map(|s| {
                        let pos = survivors.iter().position(|x| x == s).unwrap();
                        probs[pos]
                    })
                    .collect()
            }
        }
        RouterKind::Sigmoid => {
            let raw: Vec<f64> = selected.iter().map(|&i| logistic(logits[i as usize])).collect();
            if cfg.normalize_selected {
                let sum: f64 = raw.iter().sum();
                raw.iter().map(|w| w / sum).collect()
            } else {
                raw
            }
        }
    }
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Pre-top-k gate probabilities for soft counting: softmax over all logits
/// for softmax routers, elementwise logistic for sigmoid routers.
pub fn pre_topk_probabilities(logits: &[f64], kind: RouterKind) -> Vec<f64> {
    match kind {
        RouterKind::Softmax => softmax(logits),
        RouterKind::Sigmoid => logits.iter().map(|&x| logistic(x)).collect(),
    }
}

/// Expected number of distinct experts touched by `tokens` tokens, each
/// drawing `n_a` distinct experts uniformly from `n_e`:
/// `n_e * (1 - (1 - n_a/n_e)^T)`.
///
/// Exact under uniform independent routing: a fixed expert is missed by one
/// token with probability `1 - n_a/n_e` regardless of within-token
/// dependence, and tokens are independent.
pub fn expected_distinct_experts(n_e: u32, n_a: u32, tokens: u64) -> Result<f64> {
    if n_a == 0 || n_a > n_e {
        return Err(Error::InvalidArgument(format!(
            "n_a ({n_a}) must be in [1, n_e ({n_e})]"
        )));
    }
    let ne = f64::from(n_e);
    let miss = 1.0 - f64::from(n_a) / ne;
    Ok(ne * (1.0 - miss.powf(tokens as f64)))
}

/// Per-layer hard selection tallies and accumulated gate probability mass
/// over a calibration stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub hard: Vec<u64>,
    pub soft: Vec<f64>,
    pub tokens_seen: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingStats {
    pub n_e: u32,
    pub layers: Vec<LayerStats>,
}

impl RoutingStats {
    pub fn new(n_layers: u32, n_e: u32) -> Self {
        RoutingStats {
            n_e,
            layers: (0..n_layers)
                .map(|_| LayerStats {
                    hard: vec![0; n_e as usize],
                    soft: vec![0.0; n_e as usize],
                    tokens_seen: 0,
                })
                .collect(),
        }
    }

    pub fn n_layers(&self) -> u32 {
        self.layers.len() as u32
    }

    /// Serialize to the documented text format: a JSON object keyed by layer
    /// index, each value holding `hard`, `soft`, and `tokens_seen`.
    pub fn to_json_string(&self) -> String {
        let map: BTreeMap<String, &LayerStats> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (i.to_string(), l))
            .collect();
        let doc = serde_json::json!({ "n_e": self.n_e, "layers": map });
        serde_json::to_string_pretty(&doc).expect("stats serialization cannot fail")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            n_e: u32,
            layers: BTreeMap<String, LayerStats>,
        }
        let doc: Doc =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("routing stats: {e}")))?;
        let mut indexed: Vec<(u32, LayerStats)> = Vec::with_capacity(doc.layers.len());
        for (k, v) in doc.layers {
            let idx: u32 = k
                .parse()
                .map_err(|_| Error::Parse(format!("routing stats: bad layer key '{k}'")))?;
            if v.hard.len() != doc.n_e as usize || v.soft.len() != doc.n_e as usize {
                return Err(Error::Parse(format!(
                    "routing stats: layer {idx} count arrays do not match n_e {}",
                    doc.n_e
                )));
            }
            indexed.push((idx, v));
        }
        indexed.sort_by_key(|(i, _)| *i);
        for (expected, (got, _)) in indexed.iter().enumerate() {
            if *got != expected as u32 {
                return Err(Error::Parse(format!(
                    "routing stats: layer indices must be contiguous from 0, missing {expected}"
                )));
            }
        }
        Ok(RoutingStats {
            n_e: doc.n_e,
            layers: indexed.into_iter().map(|(_, l)| l).collect(),
        })
    }
}

/// Accumulates [`RoutingStats`] from a stream of routing decisions.
pub struct StatsCollector {
    kind: RouterKind,
    mode: SoftCountMode,
    stats: RoutingStats,
}

impl StatsCollector {
    pub fn new(n_layers: u32, n_e: u32, kind: RouterKind, mode: SoftCountMode) -> Self {
        StatsCollector {
            kind,
            mode,
            stats: RoutingStats::new(n_layers, n_e),
        }
    }

    /// Record one token's decision, deriving pre-top-k probabilities from
    /// the decision's raw logits.
    pub fn record(&mut self, layer: u32, decision: &RoutingDecision) -> Result<()> {
        let probs = pre_topk_probabilities(&decision.logits, self.kind);
        self.record_with_probs(layer, decision, &probs)
    }

    /// Record one token's decision with externally supplied pre-top-k
    /// probabilities.
    pub fn record_with_probs(
        &mut self,
        layer: u32,
        decision: &RoutingDecision,
        pre_topk: &[f64],
    ) -> Result<()> {
        let n_e = self.stats.n_e as usize;
        let layer_stats = self
            .stats
            .layers
            .get_mut(layer as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} out of range")))?;
        if pre_topk.len() != n_e {
            return Err(Error::InvalidArgument(format!(
                "expected {n_e} probabilities, got {}",
                pre_topk.len()
            )));
        }
        for &i in &decision.selected {
            let slot = layer_stats
                .hard
                .get_mut(i as usize)
                .ok_or_else(|| Error::InvalidArgument(format!("expert {i} out of range")))?;
            *slot += 1;
        }
        match self.mode {
            SoftCountMode::AllExperts => {
                for (s, p) in layer_stats.soft.iter_mut().zip(pre_topk) {
                    *s += p;
                }
            }
            SoftCountMode::SelectedOnly => {
                for &i in &decision.selected {
                    layer_stats.soft[i as usize] += pre_topk[i as usize];
                }
            }
        }
        layer_stats.tokens_seen += 1;
        Ok(())
    }

    pub fn finish(self) -> RoutingStats {
        self.stats
    }
}

/// Splittable per-token stream: mixing the seed with the token index gives
/// identical results no matter how tokens are partitioned across workers.
fn token_rng(seed: u64, token: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(token)))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Monte Carlo companion to [`expected_distinct_experts`]: simulate `tokens`
/// tokens each drawing `n_a` distinct experts, uniformly or from an
/// empirical per-expert `popularity` distribution.
///
/// Returns the number of distinct experts touched plus single-layer routing
/// stats (hard counts from the realized draws; soft counts accumulate the
/// sampling distribution itself).
pub fn simulate_batch_routing(
    cfg: &RouterConfig,
    tokens: u64,
    popularity: Option<&[f64]>,
    seed: u64,
) -> Result<(u32, RoutingStats)> {
    cfg.validate()?;
    let n_e = cfg.n_e as usize;
    let n_a = cfg.n_a as usize;
    let uniform_mass = 1.0 / n_e as f64;
    if let Some(p) = popularity {
        if p.len() != n_e {
            return Err(Error::InvalidArgument(format!(
                "popularity length {} does not match n_e {}",
                p.len(),
                n_e
            )));
        }
        if p.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::InvalidArgument(
                "popularity entries must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "popularity must sum to 1, got {sum}"
            )));
        }
        if (p.iter().filter(|&&v| v > 0.0).count()) < n_a {
            return Err(Error::InvalidArgument(
                "popularity must give positive mass to at least n_a experts".into(),
            ));
        }
    }

    let mut collector = StatsCollector::new(1, cfg.n_e, cfg.router_kind, SoftCountMode::AllExperts);
    let mut touched = vec![false; n_e];
    let mut weights = vec![0.0f64; n_e];
    for token in 0..tokens {
        let mut rng = token_rng(seed, token);
        match popularity {
            None => {
                for w in weights.iter_mut() {
                    *w = uniform_mass;
                }
            }
            Some(p) => weights.copy_from_slice(p),
        }
        let mut picks = Vec::with_capacity(n_a);
        for _ in 0..n_a {
            let total: f64 = weights.iter().sum();
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n_e - 1;
            for (i, &w) in weights.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            weights[chosen] = 0.0;
            touched[chosen] = true;
            picks.push(chosen as u32);
        }
        let soft = match popularity {
            None => vec![uniform_mass; n_e],
            Some(p) => p.to_vec(),
        };
        let decision = RoutingDecision {
            selected: picks,
            weights: vec![1.0 / n_a as f64; n_a],
            logits: vec![0.0; n_e],
        };
        collector.record_with_probs(0, &decision, &soft)?;
    }

    let distinct = touched.iter().filter(|&&t| t).count() as u32;
    Ok((distinct, collector.finish()))
}
