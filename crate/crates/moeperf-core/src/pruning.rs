//! Per-layer retained-expert masks and restricted re-routing.
//!
//! Seven mask strategies: random sampling, structured index patterns
//! (odd / even / first half / last half), and the two popularity rankings
//! (hard activate counts, soft gate-probability mass) computed per layer
//! from calibration stats.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::routing::{route_masked, RouterConfig, RoutingDecision, RoutingStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneStrategy {
    Random,
    Odd,
    Even,
    FirstHalf,
    LastHalf,
    ActivateCount,
    SoftCount,
}

impl PruneStrategy {
    pub const ALL: [PruneStrategy; 7] = [
        PruneStrategy::Random,
        PruneStrategy::Odd,
        PruneStrategy::Even,
        PruneStrategy::FirstHalf,
        PruneStrategy::LastHalf,
        PruneStrategy::ActivateCount,
        PruneStrategy::SoftCount,
    ];
}

impl fmt::Display for PruneStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PruneStrategy::Random => "random",
            PruneStrategy::Odd => "odd",
            PruneStrategy::Even => "even",
            PruneStrategy::FirstHalf => "first_half",
            PruneStrategy::LastHalf => "last_half",
            PruneStrategy::ActivateCount => "activate_count",
            PruneStrategy::SoftCount => "soft_count",
        };
        write!(f, "{s}")
    }
}

impl FromStr for PruneStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PruneStrategy::Random),
            "odd" => Ok(PruneStrategy::Odd),
            "even" => Ok(PruneStrategy::Even),
            "first_half" => Ok(PruneStrategy::FirstHalf),
            "last_half" => Ok(PruneStrategy::LastHalf),
            "activate_count" => Ok(PruneStrategy::ActivateCount),
            "soft_count" => Ok(PruneStrategy::SoftCount),
            other => Err(Error::Parse(format!(
                "unknown prune strategy '{other}' (expected one of random, odd, even, first_half, last_half, activate_count, soft_count)"
            ))),
        }
    }
}

/// Per-layer retained expert index sets plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub strategy: PruneStrategy,
    pub keep: u32,
    pub n_e: u32,
    pub seed: Option<u64>,
    pub stats_digest: Option<u64>,
    /// Sorted retained indices, one vec per MoE layer.
    pub layers: Vec<Vec<u32>>,
}

impl PruneMask {
    pub fn n_layers(&self) -> u32 {
        self.layers.len() as u32
    }

    pub fn layer(&self, i: u32) -> Result<&[u32]> {
        self.layers
            .get(i as usize)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("mask has no layer {i}")))
    }

    pub fn to_json_string(&self) -> String {
        let layers: BTreeMap<String, &Vec<u32>> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (i.to_string(), l))
            .collect();
        let doc = serde_json::json!({
            "strategy": self.strategy,
            "keep": self.keep,
            "n_e": self.n_e,
            "seed": self.seed,
            "stats_digest": self.stats_digest,
            "layers": layers,
        });
        serde_json::to_string_pretty(&doc).expect("mask serialization cannot fail")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            strategy: PruneStrategy,
            keep: u32,
            n_e: u32,
            seed: Option<u64>,
            stats_digest: Option<u64>,
            layers: BTreeMap<String, Vec<u32>>,
        }
        let doc: Doc =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("prune mask: {e}")))?;
        let mut indexed: Vec<(u32, Vec<u32>)> = Vec::with_capacity(doc.layers.len());
        for (k, v) in doc.layers {
            let idx: u32 = k
                .parse()
                .map_err(|_| Error::Parse(format!("prune mask: bad layer key '{k}'")))?;
            indexed.push((idx, v));
        }
        indexed.sort_by_key(|(i, _)| *i);
        for (expected, (got, _)) in indexed.iter().enumerate() {
            if *got != expected as u32 {
                return Err(Error::Parse(format!(
                    "prune mask: layer indices must be contiguous from 0, missing {expected}"
                )));
            }
        }
        let mask = PruneMask {
            strategy: doc.strategy,
            keep: doc.keep,
            n_e: doc.n_e,
            seed: doc.seed,
            stats_digest: doc.stats_digest,
            layers: indexed.into_iter().map(|(_, l)| l).collect(),
        };
        mask.validate()?;
        Ok(mask)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.len() != self.keep as usize {
                return Err(Error::InvalidConfig(format!(
                    "mask layer {i} retains {} experts, expected keep = {}",
                    layer.len(),
                    self.keep
                )));
            }
            let mut prev: Option<u32> = None;
            for &idx in layer {
                if idx >= self.n_e {
                    return Err(Error::InvalidConfig(format!(
                        "mask layer {i} index {idx} out of range for n_e {}",
                        self.n_e
                    )));
                }
                if let Some(p) = prev {
                    if idx <= p {
                        return Err(Error::InvalidConfig(format!(
                            "mask layer {i} indices must be sorted and distinct"
                        )));
                    }
                }
                prev = Some(idx);
            }
        }
        Ok(())
    }
}

/// FNV-1a digest of calibration stats, recorded in masks built from them.
pub fn stats_digest(stats: &RoutingStats) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x100000001b3);
        }
    };
    eat(&stats.n_e.to_le_bytes());
    eat(&(stats.layers.len() as u64).to_le_bytes());
    for layer in &stats.layers {
        eat(&layer.tokens_seen.to_le_bytes());
        for &h in &layer.hard {
            eat(&h.to_le_bytes());
        }
        for &s in &layer.soft {
            eat(&s.to_bits().to_le_bytes());
        }
    }
    hash
}

/// Build a retained-expert mask.
///
/// `n_a` is the model's active-expert count; masks keeping fewer than `n_a`
/// experts would make routing infeasible and are rejected.
pub fn build_mask(
    strategy: PruneStrategy,
    keep: u32,
    n_e: u32,
    n_a: u32,
    n_layers: u32,
    seed: Option<u64>,
    stats: Option<&RoutingStats>,
) -> Result<PruneMask> {
    if keep > n_e {
        return Err(Error::InvalidArgument(format!(
            "keep ({keep}) exceeds n_e ({n_e})"
        )));
    }
    if keep < n_a {
        return Err(Error::InvalidArgument(format!(
            "keep ({keep}) below n_a ({n_a}); routing would be infeasible"
        )));
    }
    let layers: Vec<Vec<u32>> = match strategy {
        PruneStrategy::Odd => {
            let pool: Vec<u32> = (0..n_e).filter(|i| i % 2 == 1).collect();
            structured(&pool, keep, n_layers, "odd")?
        }
        PruneStrategy::Even => {
            let pool: Vec<u32> = (0..n_e).filter(|i| i % 2 == 0).collect();
            structured(&pool, keep, n_layers, "even")?
        }
        PruneStrategy::FirstHalf => {
            let pool: Vec<u32> = (0..keep).collect();
            vec![pool; n_layers as usize]
        }
        PruneStrategy::LastHalf => {
            let pool: Vec<u32> = (n_e - keep..n_e).collect();
            vec![pool; n_layers as usize]
        }
        PruneStrategy::Random => {
            let seed = seed.ok_or_else(|| {
                Error::InvalidArgument("random strategy requires a seed".into())
            })?;
            (0..n_layers)
                .map(|layer| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::from(layer)));
                    let mut pool: Vec<u32> = (0..n_e).collect();
                    pool.shuffle(&mut rng);
                    let mut picked: Vec<u32> = pool[..keep as usize].to_vec();
                    picked.sort_unstable();
                    picked
                })
                .collect()
        }
        PruneStrategy::ActivateCount | PruneStrategy::SoftCount => {
            let stats = stats.ok_or_else(|| {
                Error::InvalidArgument(format!("{strategy} strategy requires routing stats"))
            })?;
            if stats.n_e != n_e {
                return Err(Error::InvalidArgument(format!(
                    "stats cover n_e = {}, mask needs {}",
                    stats.n_e, n_e
                )));
            }
            if stats.n_layers() < n_layers {
                return Err(Error::InvalidArgument(format!(
                    "stats cover {} layers, mask needs {}",
                    stats.n_layers(),
                    n_layers
                )));
            }
            (0..n_layers as usize)
                .map(|layer| {
                    let scores: Vec<f64> = match strategy {
                        PruneStrategy::ActivateCount => {
                            stats.layers[layer].hard.iter().map(|&c| c as f64).collect()
                        }
                        _ => stats.layers[layer].soft.clone(),
                    };
                    top_keep_by_score(&scores, keep)
                })
                .collect()
        }
    };
    let mask = PruneMask {
        strategy,
        keep,
        n_e,
        seed: if strategy == PruneStrategy::Random { seed } else { None },
        stats_digest: stats.map(stats_digest),
        layers,
    };
    mask.validate()?;
    Ok(mask)
}

fn structured(pool: &[u32], keep: u32, n_layers: u32, name: &str) -> Result<Vec<Vec<u32>>> {
    if (pool.len() as u32) < keep {
        return Err(Error::InvalidArgument(format!(
            "{name} strategy can retain at most {} experts, keep is {keep}",
            pool.len()
        )));
    }
    let picked: Vec<u32> = pool[..keep as usize].to_vec();
    Ok(vec![picked; n_layers as usize])
}

/// Top `keep` indices by score, ties toward the lower index, sorted.
fn top_keep_by_score(scores: &[f64], keep: u32) -> Vec<u32> {
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut picked: Vec<u32> = order[..keep as usize].to_vec();
    picked.sort_unstable();
    picked
}

/// Route with non-retained experts excluded before top-k. Weights are
/// computed by the same `F_w` over the survivors.
pub fn route_restricted(
    logits: &[f64],
    cfg: &RouterConfig,
    retained: &[u32],
) -> Result<RoutingDecision> {
    if (retained.len() as u32) < cfg.n_a {
        return Err(Error::InvalidArgument(format!(
            "{} retained experts cannot satisfy n_a = {}",
            retained.len(),
            cfg.n_a
        )));
    }
    route_masked(logits, cfg, Some(retained))
}

fn mix_seed(seed: u64, layer: u64) -> u64 {
    let mut x = seed ^ layer.wrapping_mul(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Weight bytes freed by the mask:
/// `(n_e - keep) · 3 · d_e · d · bytes_per_element · n_moe_layers`.
pub fn mask_memory_savings(mask: &PruneMask, config: &ModelConfig) -> u64 {
    let removed = u64::from(config.n_e - mask.keep);
    removed
        * 3
        * config.d_e
        * config.d
        * u64::from(config.bytes_per_element)
        * u64::from(config.n_moe_layers())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{load_model_preset, RouterKind};
    use crate::routing::{route, LayerStats};
    use approx::assert_relative_eq;

    fn synthetic_stats(n_layers: u32, n_e: u32) -> RoutingStats {
        // expert j gets soft mass 1/(j+1) and hard count n_e - j
        RoutingStats {
            n_e,
            layers: (0..n_layers)
                .map(|_| LayerStats {
                    hard: (0..n_e).map(|j| u64::from(n_e - j)).collect(),
                    soft: (0..n_e).map(|j| 1.0 / f64::from(j + 1)).collect(),
                    tokens_seen: 100,
                })
                .collect(),
        }
    }

    #[test]
    fn even_mask_matches_published_pattern() {
        let m = build_mask(PruneStrategy::Even, 32, 64, 6, 26, None, None).unwrap();
        let expected: Vec<u32> = (0..64).filter(|i| i % 2 == 0).collect();
        for layer in &m.layers {
            assert_eq!(layer, &expected);
        }
    }

    #[test]
    fn structured_masks() {
        let odd = build_mask(PruneStrategy::Odd, 4, 16, 2, 2, None, None).unwrap();
        assert_eq!(odd.layers[0], vec![1, 3, 5, 7]);
        let first = build_mask(PruneStrategy::FirstHalf, 32, 64, 6, 1, None, None).unwrap();
        assert_eq!(first.layers[0], (0..32).collect::<Vec<_>>());
        let last = build_mask(PruneStrategy::LastHalf, 32, 64, 6, 1, None, None).unwrap();
        assert_eq!(last.layers[0], (32..64).collect::<Vec<_>>());
        // odd/even cannot supply more than half the experts
        assert!(build_mask(PruneStrategy::Odd, 33, 64, 6, 1, None, None).is_err());
    }

    #[test]
    fn random_mask_deterministic_per_seed_and_layer() {
        let a = build_mask(PruneStrategy::Random, 8, 64, 6, 4, Some(42), None).unwrap();
        let b = build_mask(PruneStrategy::Random, 8, 64, 6, 4, Some(42), None).unwrap();
        assert_eq!(a, b);
        let c = build_mask(PruneStrategy::Random, 8, 64, 6, 4, Some(43), None).unwrap();
        assert_ne!(a.layers, c.layers);
        // layers differ from each other under one seed
        assert_ne!(a.layers[0], a.layers[1]);
        assert!(build_mask(PruneStrategy::Random, 8, 64, 6, 4, None, None).is_err());
    }

    #[test]
    fn count_masks_match_oracle_ranking() {
        let stats = synthetic_stats(3, 16);
        let soft = build_mask(PruneStrategy::SoftCount, 5, 16, 2, 3, None, Some(&stats)).unwrap();
        // soft mass 1/(j+1) is decreasing, so the top-keep are the lowest indices
        for layer in &soft.layers {
            assert_eq!(layer, &vec![0, 1, 2, 3, 4]);
        }
        let hard =
            build_mask(PruneStrategy::ActivateCount, 5, 16, 2, 3, None, Some(&stats)).unwrap();
        for layer in &hard.layers {
            assert_eq!(layer, &vec![0, 1, 2, 3, 4]);
        }
        assert_eq!(soft.stats_digest, Some(stats_digest(&stats)));
        // missing stats is an error
        assert!(build_mask(PruneStrategy::SoftCount, 5, 16, 2, 3, None, None).is_err());
    }

    #[test]
    fn count_ranking_invariant_under_positive_rescaling() {
        let mut stats = synthetic_stats(2, 16);
        let before =
            build_mask(PruneStrategy::SoftCount, 6, 16, 2, 2, None, Some(&stats)).unwrap();
        for layer in &mut stats.layers {
            for s in &mut layer.soft {
                *s *= 1000.0;
            }
        }
        let after = build_mask(PruneStrategy::SoftCount, 6, 16, 2, 2, None, Some(&stats)).unwrap();
        assert_eq!(before.layers, after.layers);
    }

    #[test]
    fn keep_below_n_a_rejected() {
        assert!(build_mask(PruneStrategy::Even, 4, 64, 6, 1, None, None).is_err());
        assert!(build_mask(PruneStrategy::Even, 65, 64, 6, 1, None, None).is_err());
    }

    #[test]
    fn identity_mask_routes_identically() {
        let cfg = RouterConfig::default_for(RouterKind::Softmax, 8, 3);
        let logits = [0.3, -0.2, 1.5, 0.9, -1.0, 2.2, 0.0, 0.4];
        let all: Vec<u32> = (0..8).collect();
        assert_eq!(
            route_restricted(&logits, &cfg, &all).unwrap(),
            route(&logits, &cfg).unwrap()
        );
    }

    #[test]
    fn masked_favorite_falls_to_next_ranked_survivor() {
        let cfg = RouterConfig::default_for(RouterKind::Softmax, 8, 2);
        let logits = [0.3, -0.2, 1.5, 0.9, -1.0, 2.2, 0.0, 0.4];
        // expert 5 (best) pruned; brute-force over the retained subset
        let retained = [0u32, 1, 2, 3, 4, 6, 7];
        let d = route_restricted(&logits, &cfg, &retained).unwrap();
        assert_eq!(d.selected, vec![2, 3]);
        let weights_oracle = {
            let sub = [logits[2], logits[3]];
            let m = sub[0].max(sub[1]);
            let e0 = (sub[0] - m).exp();
            let e1 = (sub[1] - m).exp();
            [e0 / (e0 + e1), e1 / (e0 + e1)]
        };
        assert_relative_eq!(d.weights[0], weights_oracle[0], epsilon = 1e-12);
        assert_relative_eq!(d.weights[1], weights_oracle[1], epsilon = 1e-12);
        // normalization invariant holds under masking
        assert_relative_eq!(d.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn keep_equal_n_a_forces_the_whole_retained_set() {
        let cfg = RouterConfig::default_for(RouterKind::Softmax, 8, 3);
        let retained = [1u32, 4, 6];
        for logits in [
            [9.0, -9.0, 0.0, 0.0, -9.0, 5.0, -9.0, 1.0],
            [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
        ] {
            let d = route_restricted(&logits, &cfg, &retained).unwrap();
            let mut got = d.selected.clone();
            got.sort_unstable();
            assert_eq!(got, retained);
        }
        assert!(route_restricted(&[0.0; 8], &cfg, &[1, 4]).is_err());
    }

    #[test]
    fn memory_savings_golden_and_linear() {
        let model = load_model_preset("v2-lite").unwrap();
        let keep32 = build_mask(PruneStrategy::Even, 32, 64, 6, 26, None, None).unwrap();
        assert_eq!(mask_memory_savings(&keep32, &model), 32 * 3 * 1408 * 2048 * 2 * 26);
        let keep64 = build_mask(PruneStrategy::FirstHalf, 64, 64, 6, 26, None, None).unwrap();
        assert_eq!(mask_memory_savings(&keep64, &model), 0);
        let keep48 = build_mask(PruneStrategy::FirstHalf, 48, 64, 6, 26, None, None).unwrap();
        assert_eq!(
            mask_memory_savings(&keep48, &model) * 2,
            mask_memory_savings(&keep32, &model)
        );
    }

    #[test]
    fn mask_json_round_trip() {
        let stats = synthetic_stats(2, 16);
        let m = build_mask(PruneStrategy::SoftCount, 5, 16, 2, 2, None, Some(&stats)).unwrap();
        let text = m.to_json_string();
        assert_eq!(PruneMask::from_json_str(&text).unwrap(), m);
    }
}
