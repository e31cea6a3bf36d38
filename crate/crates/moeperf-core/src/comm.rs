//! Tensor-parallel vs expert-parallel communication volume and time.
//!
//! Volumes are modeled at the bound level rather than by simulating
//! collectives: the TP lower bound `2·(n_d−1)·L·d` (each hidden value
//! crosses every partner device twice, map and reduce) and the EP worst
//! case `2·n_a·L·d` (dispatch and combine once per selected expert).

use std::fmt;
use std::str::FromStr;

use crate::config::HardwareProfile;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    IntraNode,
    InterNode,
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::IntraNode => write!(f, "intra_node"),
            Placement::InterNode => write!(f, "inter_node"),
        }
    }
}

impl FromStr for Placement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra_node" => Ok(Placement::IntraNode),
            "inter_node" => Ok(Placement::InterNode),
            other => Err(Error::Parse(format!("unknown placement '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParallelConfig {
    pub n_d: u32,
    pub placement: Placement,
    /// Tokens exchanged per step.
    pub tokens: u64,
    pub d: u64,
    pub n_a: u32,
    pub bytes_per_element: u32,
}

impl ParallelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_d == 0 {
            return Err(Error::InvalidConfig("n_d must be >= 1".into()));
        }
        if self.tokens == 0 || self.d == 0 {
            return Err(Error::InvalidConfig("tokens and d must be >= 1".into()));
        }
        if self.bytes_per_element == 0 {
            return Err(Error::InvalidConfig("bytes_per_element must be > 0".into()));
        }
        Ok(())
    }
}

/// TP volume lower bound in elements: `2·(n_d−1)·L·d`.
pub fn tp_comm_volume(cfg: &ParallelConfig) -> u64 {
    2 * u64::from(cfg.n_d - 1) * cfg.tokens * cfg.d
}

/// EP worst-case volume in elements: `2·n_a·L·d`.
pub fn ep_comm_volume(cfg: &ParallelConfig) -> u64 {
    2 * u64::from(cfg.n_a) * cfg.tokens * cfg.d
}

/// Group-limited EP volume: one dispatch plus combine per touched device
/// group, `2·groups_touched·L·d`.
pub fn group_limited_ep_volume(cfg: &ParallelConfig, groups_touched: u32) -> Result<u64> {
    if groups_touched > cfg.n_d {
        return Err(Error::InvalidArgument(format!(
            "groups_touched ({groups_touched}) exceeds device count ({})",
            cfg.n_d
        )));
    }
    Ok(2 * u64::from(groups_touched) * cfg.tokens * cfg.d)
}

/// Transfer time over the link selected by placement.
pub fn comm_time(volume_elements: u64, cfg: &ParallelConfig, hw: &HardwareProfile) -> Result<f64> {
    cfg.validate()?;
    let link = match cfg.placement {
        Placement::IntraNode => hw.intra_node_bw,
        Placement::InterNode => hw.inter_node_bw,
    };
    if !(link > 0.0) {
        return Err(Error::InvalidConfig("link bandwidth must be > 0".into()));
    }
    Ok(volume_elements as f64 * f64::from(cfg.bytes_per_element) / link)
}
