//! Model architectures, hardware profiles, and named presets.
//!
//! Config files use a flat `key = value` document (TOML). Unknown keys are
//! rejected so typos surface as errors instead of silently falling back to
//! defaults.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::RouterConfig;

/// Activation applied by the router when converting selected logits to weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    Softmax,
    Sigmoid,
}

impl fmt::Display for RouterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RouterKind::Softmax => write!(f, "softmax"),
            RouterKind::Sigmoid => write!(f, "sigmoid"),
        }
    }
}

impl FromStr for RouterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(RouterKind::Softmax),
            "sigmoid" => Ok(RouterKind::Sigmoid),
            other => Err(Error::Parse(format!("unknown router_kind '{other}'"))),
        }
    }
}

/// Group-limited routing: experts are partitioned into `n_group` contiguous
/// groups and each token may only select experts from the `topk_group`
/// best-scoring groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupConfig {
    pub n_group: u32,
    pub topk_group: u32,
}

/// Architecture parameters of a fine-grained MoE model.
///
/// Symbols follow the usual convention: `d` hidden size, `d_e` per-expert
/// intermediate size, `d_s` shared-expert intermediate size, `n_e` routed
/// experts per layer, `n_a` active routed experts per token.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub d: u64,
    pub d_e: u64,
    pub d_s: u64,
    pub n_e: u32,
    pub n_a: u32,
    pub n_layers_total: u32,
    pub n_layers_dense: u32,
    pub router_kind: RouterKind,
    pub normalize_selected: bool,
    pub group_config: Option<GroupConfig>,
    /// Bytes per weight/activation element. Defaults to 2 (half precision).
    pub bytes_per_element: u32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidConfig("d must be > 0".into()));
        }
        if self.d_e == 0 {
            return Err(Error::InvalidConfig("d_e must be > 0".into()));
        }
        if self.d_s == 0 {
            return Err(Error::InvalidConfig("d_s must be > 0".into()));
        }
        if self.n_a == 0 {
            return Err(Error::InvalidConfig("n_a must be >= 1".into()));
        }
        if self.n_a > self.n_e {
            return Err(Error::InvalidConfig(format!(
                "n_a ({}) must not exceed n_e ({})",
                self.n_a, self.n_e
            )));
        }
        if self.n_layers_dense >= self.n_layers_total {
            return Err(Error::InvalidConfig(format!(
                "n_layers_dense ({}) must be < n_layers_total ({})",
                self.n_layers_dense, self.n_layers_total
            )));
        }
        if self.bytes_per_element == 0 {
            return Err(Error::InvalidConfig("bytes_per_element must be > 0".into()));
        }
        if let Some(g) = self.group_config {
            if g.n_group == 0 {
                return Err(Error::InvalidConfig("n_group must be >= 1".into()));
            }
            if self.n_e % g.n_group != 0 {
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

    /// Number of layers carrying routed experts.
    pub fn n_moe_layers(&self) -> u32 {
        self.n_layers_total - self.n_layers_dense
    }

    /// Activated intermediate size `d_a = d_e * n_a`, optionally for an
    /// overridden active-expert count.
    pub fn activated_intermediate(&self, n_a_override: Option<u32>) -> Result<u64> {
        let n_a = match n_a_override {
            Some(n) => {
                if n == 0 || n > self.n_e {
                    return Err(Error::InvalidArgument(format!(
                        "n_a override ({n}) must be in [1, n_e ({})]",
                        self.n_e
                    )));
                }
                n
            }
            None => self.n_a,
        };
        Ok(self.d_e * u64::from(n_a))
    }

    /// Fraction of FFN compute attributable to routed experts:
    /// `d_a / (d_s + d_a)`. This bounds the compute savings available from
    /// skipping routed experts entirely.
    pub fn compute_reduction_upper_bound(&self) -> f64 {
        let d_a = (self.d_e * u64::from(self.n_a)) as f64;
        d_a / (self.d_s as f64 + d_a)
    }

    /// Router parameters for this model.
    pub fn router_config(&self) -> RouterConfig {
        RouterConfig {
            router_kind: self.router_kind,
            normalize_selected: self.normalize_selected,
            group_config: self.group_config,
            n_e: self.n_e,
            n_a: self.n_a,
            ..RouterConfig::default_for(self.router_kind, self.n_e, self.n_a)
        }
    }

    /// Canonical flat key-value serialization. Parsing this string yields a
    /// config equal to `self`.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("name = {:?}\n", self.name));
        s.push_str(&format!("d = {}\n", self.d));
        s.push_str(&format!("d_e = {}\n", self.d_e));
        s.push_str(&format!("d_s = {}\n", self.d_s));
        s.push_str(&format!("n_e = {}\n", self.n_e));
        s.push_str(&format!("n_a = {}\n", self.n_a));
        s.push_str(&format!("n_layers_total = {}\n", self.n_layers_total));
        s.push_str(&format!("n_layers_dense = {}\n", self.n_layers_dense));
        s.push_str(&format!("router_kind = \"{}\"\n", self.router_kind));
        s.push_str(&format!("normalize_selected = {}\n", self.normalize_selected));
        if let Some(g) = self.group_config {
            s.push_str(&format!("n_group = {}\n", g.n_group));
            s.push_str(&format!("topk_group = {}\n", g.topk_group));
        }
        s.push_str(&format!("bytes_per_element = {}\n", self.bytes_per_element));
        s
    }

    pub fn from_config_str(text: &str) -> Result<Self> {
        let file: ModelConfigFile =
            toml::from_str(text).map_err(|e| Error::Parse(format!("model config: {e}")))?;
        let cfg = file.into_config()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_config_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_config_str(&text)
    }
}

/// Flat file schema for [`ModelConfig`]. Group fields are optional but must
/// be given together.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelConfigFile {
    name: String,
    d: u64,
    d_e: u64,
    d_s: u64,
    n_e: u32,
    n_a: u32,
    n_layers_total: u32,
    n_layers_dense: u32,
    router_kind: RouterKind,
    normalize_selected: bool,
    #[serde(default)]
    n_group: Option<u32>,
    #[serde(default)]
    topk_group: Option<u32>,
    #[serde(default = "default_bytes_per_element")]
    bytes_per_element: u32,
}

fn default_bytes_per_element() -> u32 {
    2
}

impl ModelConfigFile {
    fn into_config(self) -> Result<ModelConfig> {
        let group_config = match (self.n_group, self.topk_group) {
            (Some(n_group), Some(topk_group)) => Some(GroupConfig { n_group, topk_group }),
            (None, None) => None,
            _ => {
                return Err(Error::InvalidConfig(
                    "n_group and topk_group must be given together".into(),
                ))
            }
        };
        Ok(ModelConfig {
            name: self.name,
            d: self.d,
            d_e: self.d_e,
            d_s: self.d_s,
            n_e: self.n_e,
            n_a: self.n_a,
            n_layers_total: self.n_layers_total,
            n_layers_dense: self.n_layers_dense,
            router_kind: self.router_kind,
            normalize_selected: self.normalize_selected,
            group_config,
            bytes_per_element: self.bytes_per_element,
        })
    }
}

/// Compute and memory rates of a device, plus link bandwidths for
/// multi-device planning. All rates in base units (FLOP/s, bytes/s).
#[derive(Debug, Clone, PartialEq)]
pub struct HardwareProfile {
    pub name: String,
    pub peak_flops: f64,
    pub mem_bw: f64,
    pub intra_node_bw: f64,
    pub inter_node_bw: f64,
    pub n_devices_per_node: u32,
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("peak_flops", self.peak_flops),
            ("mem_bw", self.mem_bw),
            ("intra_node_bw", self.intra_node_bw),
            ("inter_node_bw", self.inter_node_bw),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidConfig(format!("{field} must be > 0, got {v}")));
            }
        }
        if self.n_devices_per_node == 0 {
            return Err(Error::InvalidConfig("n_devices_per_node must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_config_string(&self) -> String {
        format!(
            "name = {:?}\npeak_flops = {:e}\nmem_bw = {:e}\nintra_node_bw = {:e}\ninter_node_bw = {:e}\nn_devices_per_node = {}\n",
            self.name,
            self.peak_flops,
            self.mem_bw,
            self.intra_node_bw,
            self.inter_node_bw,
            self.n_devices_per_node
        )
    }

    pub fn from_config_str(text: &str) -> Result<Self> {
        let file: HardwareProfileFile =
            toml::from_str(text).map_err(|e| Error::Parse(format!("hardware config: {e}")))?;
        let hw = HardwareProfile {
            name: file.name,
            peak_flops: file.peak_flops,
            mem_bw: file.mem_bw,
            intra_node_bw: file.intra_node_bw,
            inter_node_bw: file.inter_node_bw,
            n_devices_per_node: file.n_devices_per_node,
        };
        hw.validate()?;
        Ok(hw)
    }

    pub fn from_config_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_config_str(&text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HardwareProfileFile {
    name: String,
    peak_flops: f64,
    mem_bw: f64,
    intra_node_bw: f64,
    inter_node_bw: f64,
    n_devices_per_node: u32,
}

/// Load a bundled model preset (`v2-lite`, `v3`) or a config file path.
pub fn load_model_preset(name: &str) -> Result<ModelConfig> {
    let cfg = match name {
        "v2-lite" => v2_lite(),
        "v3" => v3(),
        other => {
            let path = Path::new(other);
            if path.exists() {
                return ModelConfig::from_config_file(path);
            }
            return Err(Error::InvalidArgument(format!(
                "unknown model preset '{other}' (expected v2-lite, v3, or a config file path)"
            )));
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Load a bundled hardware preset (`a800`, `h200`) or a config file path.
///
/// Peak rates are vendor-nominal and meant to be edited for specific parts;
/// link bandwidths reflect typical NVLink / InfiniBand deployments.
pub fn load_hardware_preset(name: &str) -> Result<HardwareProfile> {
    let hw = match name {
        "a800" => a800(),
        "h200" => h200(),
        other => {
            let path = Path::new(other);
            if path.exists() {
                return HardwareProfile::from_config_file(path);
            }
            return Err(Error::InvalidArgument(format!(
                "unknown hardware preset '{other}' (expected a800, h200, or a config file path)"
            )));
        }
    };
    hw.validate()?;
    Ok(hw)
}

fn v2_lite() -> ModelConfig {
    // Layer counts are not part of the published architecture table; 27/1 is
    // what the model's own tuple index range (p up to 26 MoE layers) implies.
    ModelConfig {
        name: "v2-lite".into(),
        d: 2048,
        d_e: 1408,
        d_s: 10944,
        n_e: 64,
        n_a: 6,
        n_layers_total: 27,
        n_layers_dense: 1,
        router_kind: RouterKind::Softmax,
        normalize_selected: true,
        group_config: None,
        bytes_per_element: 2,
    }
}

fn v3() -> ModelConfig {
    ModelConfig {
        name: "v3".into(),
        d: 7168,
        d_e: 2048,
        d_s: 18432,
        n_e: 256,
        n_a: 8,
        n_layers_total: 61,
        n_layers_dense: 3,
        router_kind: RouterKind::Sigmoid,
        normalize_selected: true,
        group_config: Some(GroupConfig {
            n_group: 8,
            topk_group: 2,
        }),
        bytes_per_element: 2,
    }
}

fn a800() -> HardwareProfile {
    HardwareProfile {
        name: "a800".into(),
        peak_flops: 312e12,
        mem_bw: 1.935e12,
        intra_node_bw: 160e9,
        inter_node_bw: 50e9,
        n_devices_per_node: 8,
    }
}

fn h200() -> HardwareProfile {
    HardwareProfile {
        name: "h200".into(),
        peak_flops: 989e12,
        mem_bw: 4.8e12,
        intra_node_bw: 160e9,
        inter_node_bw: 50e9,
        n_devices_per_node: 8,
    }
}

/// The compute-reduction ratio printed in the published architecture table,
/// as a percentage, for the bundled presets.
pub fn reported_reduction_pct(preset_name: &str) -> Option<f64> {
    match preset_name {
        "v2-lite" => Some(45.6),
        "v3" => Some(47.1),
        _ => None,
    }
}

/// Comparison of the computed `d_a / (d_s + d_a)` against the published
/// value for the preset, when one exists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReductionCheck {
    pub computed: f64,
    pub reported_pct: Option<f64>,
    /// True when the computed percentage does not round to the reported one.
    pub discrepant: bool,
}

pub fn check_reduction(config: &ModelConfig) -> ReductionCheck {
    let computed = config.compute_reduction_upper_bound();
    let reported_pct = reported_reduction_pct(&config.name);
    let discrepant = match reported_pct {
        // Published values carry one decimal; allow half a print unit.
        Some(pct) => (computed * 100.0 - pct).abs() >= 0.05,
        None => false,
    };
    ReductionCheck {
        computed,
        reported_pct,
        discrepant,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn v2_lite_preset_matches_published_architecture() {
        let c = load_model_preset("v2-lite").unwrap();
        assert_eq!(c.n_e, 64);
        assert_eq!(c.n_a, 6);
        assert_eq!(c.d, 2048);
        assert_eq!(c.d_e, 1408);
        assert_eq!(c.d_s, 10944);
        assert_eq!(c.router_kind, RouterKind::Softmax);
        assert!(c.group_config.is_none());
        assert_eq!(c.n_moe_layers(), 26);
    }

    #[test]
    fn v3_preset_matches_published_architecture() {
        let c = load_model_preset("v3").unwrap();
        assert_eq!(c.n_e, 256);
        assert_eq!(c.n_a, 8);
        assert_eq!(c.d, 7168);
        assert_eq!(c.d_e, 2048);
        assert_eq!(c.d_s, 18432);
        assert_eq!(c.router_kind, RouterKind::Sigmoid);
        assert_eq!(
            c.group_config,
            Some(GroupConfig {
                n_group: 8,
                topk_group: 2
            })
        );
        assert_eq!(c.n_moe_layers(), 58);
    }

    #[test]
    fn unknown_preset_is_an_error() {
        assert!(load_model_preset("v9-giant").is_err());
    }

    #[test]
    fn activated_intermediate_values() {
        let v2 = load_model_preset("v2-lite").unwrap();
        let v3 = load_model_preset("v3").unwrap();
        assert_eq!(v2.activated_intermediate(None).unwrap(), 8448);
        assert_eq!(v3.activated_intermediate(None).unwrap(), 16384);
        assert_eq!(v2.activated_intermediate(Some(1)).unwrap(), 1408);
        assert!(v2.activated_intermediate(Some(0)).is_err());
        assert!(v2.activated_intermediate(Some(65)).is_err());
    }

    #[test]
    fn compute_reduction_v3() {
        let v3 = load_model_preset("v3").unwrap();
        let r = v3.compute_reduction_upper_bound();
        assert!((r - 16384.0 / 34816.0).abs() < 1e-12);
        assert!((r - 0.4706).abs() < 5e-4);
        // rounds to the published 47.1%
        let check = check_reduction(&v3);
        assert!(!check.discrepant);
    }

    #[test]
    fn compute_reduction_v2_lite_flags_published_discrepancy() {
        let v2 = load_model_preset("v2-lite").unwrap();
        let r = v2.compute_reduction_upper_bound();
        assert!((r - 8448.0 / 19392.0).abs() < 1e-12);
        assert!((r - 0.4356).abs() < 5e-4);
        let check = check_reduction(&v2);
        assert_eq!(check.reported_pct, Some(45.6));
        assert!(check.discrepant);
    }

    #[test]
    fn compute_reduction_without_shared_expert_is_one() {
        let mut c = load_model_preset("v2-lite").unwrap();
        c.d_s = 1; // d_s = 0 is rejected by validate; take the limit instead
        assert!(c.compute_reduction_upper_bound() > 0.999);
        let d_a = (c.d_e * u64::from(c.n_a)) as f64;
        assert_eq!(d_a / (0.0 + d_a), 1.0);
    }

    #[test]
    fn reduction_monotone_in_n_a_and_d_s() {
        let base = load_model_preset("v2-lite").unwrap();
        let mut prev = 0.0;
        for n_a in 1..=8 {
            let mut c = base.clone();
            c.n_a = n_a;
            let r = c.compute_reduction_upper_bound();
            assert!(r > prev, "not increasing in n_a at {n_a}");
            prev = r;
        }
        let mut prev = 1.0;
        for d_s in [1024, 4096, 10944, 32768] {
            let mut c = base.clone();
            c.d_s = d_s;
            let r = c.compute_reduction_upper_bound();
            assert!(r < prev, "not decreasing in d_s at {d_s}");
            prev = r;
        }
    }

    #[test]
    fn config_file_round_trip_preserves_fields() {
        for name in ["v2-lite", "v3"] {
            let c = load_model_preset(name).unwrap();
            let parsed = ModelConfig::from_config_str(&c.to_config_string()).unwrap();
            assert_eq!(parsed, c);
        }
        let hw = load_hardware_preset("a800").unwrap();
        let parsed = HardwareProfile::from_config_str(&hw.to_config_string()).unwrap();
        assert_eq!(parsed, hw);
    }

    #[test]
    fn invalid_file_reports_offending_field() {
        let c = load_model_preset("v2-lite").unwrap();
        let text = c.to_config_string().replace("n_a = 6", "n_a = 0");
        let err = ModelConfig::from_config_str(&text).unwrap_err();
        assert!(err.to_string().contains("n_a"), "{err}");
    }

    #[test]
    fn unknown_key_is_an_error() {
        let c = load_model_preset("v2-lite").unwrap();
        let text = format!("{}mystery_knob = 3\n", c.to_config_string());
        let err = ModelConfig::from_config_str(&text).unwrap_err();
        assert!(err.to_string().contains("mystery_knob"), "{err}");
    }

    #[test]
    fn group_divisibility_enforced() {
        let mut c = load_model_preset("v3").unwrap();
        c.group_config = Some(GroupConfig {
            n_group: 7,
            topk_group: 2,
        });
        assert!(c.validate().is_err());
    }

    #[test]
    fn hardware_presets() {
        let a = load_hardware_preset("a800").unwrap();
        assert_eq!(a.peak_flops, 312e12);
        assert_eq!(a.mem_bw, 1.935e12);
        assert_eq!(a.intra_node_bw, 160e9);
        assert_eq!(a.inter_node_bw, 50e9);
        let h = load_hardware_preset("h200").unwrap();
        assert_eq!(h.peak_flops, 989e12);
        assert!(load_hardware_preset("tpu-v9").is_err());
    }
}
