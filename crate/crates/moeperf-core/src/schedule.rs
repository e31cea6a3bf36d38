//! Per-layer active-expert schedules built from a four-tuple `(b, h, e, p)`:
//! `b` experts at the first MoE layer, `h` at layer `p`, `e` at the last,
//! linear interpolation in between.

use std::fmt;
use std::str::FromStr;

use crate::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkipTuple {
    pub b: u32,
    pub h: u32,
    pub e: u32,
    pub p: u32,
}

impl SkipTuple {
    pub fn new(b: u32, h: u32, e: u32, p: u32) -> Self {
        SkipTuple { b, h, e, p }
    }

    /// Parse the CLI form `"b,h,e,p"`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::Parse(format!(
                "expected four comma-separated counts 'b,h,e,p', got '{text}'"
            )));
        }
        let mut vals = [0u32; 4];
        for (slot, part) in vals.iter_mut().zip(&parts) {
            *slot = part
                .parse()
                .map_err(|_| Error::Parse(format!("bad tuple component '{part}'")))?;
        }
        Ok(SkipTuple::new(vals[0], vals[1], vals[2], vals[3]))
    }

    pub fn validate(&self, n_layers: u32, n_e: Option<u32>) -> Result<()> {
        for (name, v) in [("b", self.b), ("h", self.h), ("e", self.e)] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("tuple {name} must be >= 1")));
            }
            if let Some(max) = n_e {
                if v > max {
                    return Err(Error::InvalidArgument(format!(
                        "tuple {name} ({v}) exceeds n_e ({max})"
                    )));
                }
            }
        }
        if self.p == 0 || self.p > n_layers {
            return Err(Error::InvalidArgument(format!(
                "tuple p ({}) must be in [1, {n_layers}]",
                self.p
            )));
        }
        Ok(())
    }

    /// When `p` lands on an endpoint the `h` anchor overrides the endpoint
    /// anchor. Returns the name of the ignored anchor, for warnings.
    pub fn anchor_conflict(&self, n_layers: u32) -> Option<&'static str> {
        if self.p == 1 && self.b != self.h {
            Some("b")
        } else if self.p == n_layers && self.e != self.h {
            Some("e")
        } else {
            None
        }
    }
}

impl fmt::Display for SkipTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.b, self.h, self.e, self.p)
    }
}

/// Whether tuple `p` indexes the MoE-layer sequence directly or the global
/// layer sequence (dense layers included).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexSpace {
    Moe,
    Global,
}

impl FromStr for IndexSpace {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moe" => Ok(IndexSpace::Moe),
            "global" => Ok(IndexSpace::Global),
            other => Err(Error::Parse(format!("unknown index space '{other}'"))),
        }
    }
}

/// Map a tuple's `p` into MoE-layer space for the given model.
pub fn resolve_index_space(t: SkipTuple, space: IndexSpace, model: &ModelConfig) -> Result<SkipTuple> {
    match space {
        IndexSpace::Moe => Ok(t),
        IndexSpace::Global => {
            if t.p <= model.n_layers_dense {
                return Err(Error::InvalidArgument(format!(
                    "global layer {} is a dense layer; p must name an MoE layer",
                    t.p
                )));
            }
            Ok(SkipTuple {
                p: t.p - model.n_layers_dense,
                ..t
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScheduleSource {
    Tuple(SkipTuple),
    Uniform(u32),
}

/// Active routed-expert count per MoE layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipSchedule {
    pub n_a_per_layer: Vec<u32>,
    pub source: ScheduleSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Constant,
    Ascending,
    Descending,
    Peak,
    Valley,
    Mixed,
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ShapeClass::Constant => "constant",
            ShapeClass::Ascending => "ascending",
            ShapeClass::Descending => "descending",
            ShapeClass::Peak => "peak",
            ShapeClass::Valley => "valley",
            ShapeClass::Mixed => "mixed",
        };
        write!(f, "{s}")
    }
}

fn round_half_away_from_zero(x: f64) -> i64 {
    if x >= 0.0 {
        (x + 0.5).floor() as i64
    } else {
        (x - 0.5).ceil() as i64
    }
}

/// Build the per-layer schedule for `n_layers` MoE layers.
///
/// Anchors: layer 1 takes `b`, layer `p` takes `h`, layer `n_layers` takes
/// `e`; interior layers interpolate linearly with half-away-from-zero
/// rounding. When `p` collides with an endpoint the `h` anchor wins and the
/// endpoint anchor is ignored (see [`SkipTuple::anchor_conflict`]).
pub fn build_schedule(t: SkipTuple, n_layers: u32) -> Result<SkipSchedule> {
    t.validate(n_layers, None)?;
    if n_layers == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one layer".into()));
    }
    let n = n_layers as usize;
    let p = t.p as usize;
    let (b, h, e) = (f64::from(t.b), f64::from(t.h), f64::from(t.e));
    let mut counts = vec![0u32; n];
    for (idx, slot) in counts.iter_mut().enumerate() {
        let i = idx + 1; // 1-based layer position
        let v = if i < p {
            if i == 1 {
                b
            } else {
                b + (h - b) * (i - 1) as f64 / (p - 1) as f64
            }
        } else if i == p {
            h
        } else if i == n {
            e
        } else {
            h + (e - h) * (i - p) as f64 / (n - p) as f64
        };
        *slot = round_half_away_from_zero(v).max(1) as u32;
    }
    Ok(SkipSchedule {
        n_a_per_layer: counts,
        source: ScheduleSource::Tuple(t),
    })
}

pub fn uniform_schedule(n_a: u32, n_layers: u32) -> SkipSchedule {
    SkipSchedule {
        n_a_per_layer: vec![n_a; n_layers as usize],
        source: ScheduleSource::Uniform(n_a),
    }
}

impl SkipSchedule {
    pub fn n_layers(&self) -> u32 {
        self.n_a_per_layer.len() as u32
    }

    pub fn average_active(&self) -> f64 {
        let total: u64 = self.n_a_per_layer.iter().map(|&v| u64::from(v)).sum();
        total as f64 / self.n_a_per_layer.len() as f64
    }

    /// Classify by the collapsed sign pattern of consecutive differences.
    pub fn shape_class(&self) -> ShapeClass {
        let mut signs: Vec<i8> = Vec::new();
        for pair in self.n_a_per_layer.windows(2) {
            let s = match pair[1].cmp(&pair[0]) {
                std::cmp::Ordering::Greater => 1,
                std::cmp::Ordering::Less => -1,
                std::cmp::Ordering::Equal => 0,
            };
            if s != 0 && signs.last() != Some(&s) {
                signs.push(s);
            }
        }
        match signs.as_slice() {
            [] => ShapeClass::Constant,
            [1] => ShapeClass::Ascending,
            [-1] => ShapeClass::Descending,
            [1, -1] => ShapeClass::Peak,
            [-1, 1] => ShapeClass::Valley,
            _ => ShapeClass::Mixed,
        }
    }

    /// Check all entries fit the model's expert count.
    pub fn validate_against(&self, n_e: u32) -> Result<()> {
        for (i, &v) in self.n_a_per_layer.iter().enumerate() {
            if v == 0 || v > n_e {
                return Err(Error::InvalidConfig(format!(
                    "schedule entry {v} at layer {i} outside [1, {n_e}]"
                )));
            }
        }
        Ok(())
    }
}
