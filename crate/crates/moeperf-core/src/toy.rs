//! A small, deterministic numeric executor for GLU and MoE layers.
//!
//! This exists to verify mechanism semantics at desk scale: partition
//! equivalence of the intermediate dimension, top-k prefix behavior under
//! expert skipping, and masked re-routing under pruning. It makes no
//! performance claims; everything is plain f32 loops.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{GroupConfig, RouterKind};
use crate::error::{Error, Result};
use crate::pruning::route_restricted;
use crate::routing::{route, RouterConfig, RoutingDecision};

/// Dense row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Entries drawn uniformly from [-0.1, 0.1], a well-conditioned range
    /// for repeated products at desk scale.
    pub fn seeded_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-0.1..=0.1)).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.cols {
            return Err(Error::InvalidArgument(format!(
                "matvec dimension mismatch: matrix has {} cols, vector has {}",
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0f32; self.rows];
        for (r, slot) in out.iter_mut().enumerate() {
            let row = self.row(r);
            let mut acc = 0.0f32;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            *slot = acc;
        }
        Ok(out)
    }

    /// Rows `[start, end)` as a new matrix.
    fn row_block(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Columns `[start, end)` as a new matrix.
    fn col_block(&self, start: usize, end: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * (end - start));
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Matrix {
            rows: self.rows,
            cols: end - start,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Identity,
}

fn activate(kind: Activation, x: f32) -> f32 {
    match kind {
        Activation::Silu => x / (1.0 + (-x).exp()),
        Activation::Identity => x,
    }
}

/// One GLU: `W_d · (ACT(W_u·h) ⊗ (W_g·h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GluWeights {
    pub w_up: Matrix,
    pub w_gate: Matrix,
    pub w_down: Matrix,
    pub activation: Activation,
}

impl GluWeights {
    pub fn new(w_up: Matrix, w_gate: Matrix, w_down: Matrix, activation: Activation) -> Result<Self> {
        if w_up.rows != w_gate.rows || w_up.cols != w_gate.cols {
            return Err(Error::InvalidArgument(
                "w_up and w_gate must have identical shape".into(),
            ));
        }
        if w_down.cols != w_up.rows || w_down.rows != w_up.cols {
            return Err(Error::InvalidArgument(format!(
                "w_down must be {}x{}, got {}x{}",
                w_up.cols, w_up.rows, w_down.rows, w_down.cols
            )));
        }
        Ok(GluWeights {
            w_up,
            w_gate,
            w_down,
            activation,
        })
    }

    pub fn seeded(d: usize, d_i: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        GluWeights {
            w_up: Matrix::seeded_uniform(d_i, d, rng),
            w_gate: Matrix::seeded_uniform(d_i, d, rng),
            w_down: Matrix::seeded_uniform(d, d_i, rng),
            activation,
        }
    }

    pub fn d(&self) -> usize {
        self.w_up.cols
    }

    pub fn d_i(&self) -> usize {
        self.w_up.rows
    }
}

/// One token (`d` values) or a block of `tokens` tokens stored token-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    d: usize,
    tokens: usize,
    data: Vec<f32>,
}

impl HiddenState {
    pub fn single(values: Vec<f32>) -> Result<Self> {
        Self::block(values.len(), 1, values)
    }

    pub fn block(d: usize, tokens: usize, data: Vec<f32>) -> Result<Self> {
        if d == 0 || tokens == 0 || data.len() != d * tokens {
            return Err(Error::InvalidArgument(format!(
                "hidden state {d}x{tokens} needs {} values, got {}",
                d * tokens,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("hidden state must be finite".into()));
        }
        Ok(HiddenState { d, tokens, data })
    }

    pub fn seeded(d: usize, tokens: usize, rng: &mut impl Rng) -> Self {
        let data = (0..d * tokens).map(|_| rng.gen_range(-0.1..=0.1)).collect();
        HiddenState { d, tokens, data }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn token(&self, t: usize) -> &[f32] {
        &self.data[t * self.d..(t + 1) * self.d]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// `W_d · (ACT(W_u·h) ⊗ (W_g·h))`, applied per token.
pub fn glu_forward(w: &GluWeights, h: &HiddenState) -> Result<HiddenState> {
    if h.d() != w.d() {
        return Err(Error::InvalidArgument(format!(
            "hidden size {} does not match GLU d = {}",
            h.d(),
            w.d()
        )));
    }
    let mut out = Vec::with_capacity(h.data.len());
    for t in 0..h.tokens {
        out.extend_from_slice(&glu_forward_token(w, h.token(t))?);
    }
    HiddenState::block(h.d, h.tokens, out)
}

fn glu_forward_token(w: &GluWeights, h: &[f32]) -> Result<Vec<f32>> {
    let up = w.w_up.matvec(h)?;
    let gate = w.w_gate.matvec(h)?;
    let inner: Vec<f32> = up
        .iter()
        .zip(&gate)
        .map(|(&u, &g)| activate(w.activation, u) * g)
        .collect();
    w.w_down.matvec(&inner)
}

/// An MoE layer at desk scale: routed expert GLUs, an optional always-on
/// shared GLU, and a linear router.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMoeLayer {
    pub experts: Vec<GluWeights>,
    pub shared: Option<GluWeights>,
    pub router: Matrix,
    pub router_cfg: RouterConfig,
}

impl ToyMoeLayer {
    pub fn new(
        experts: Vec<GluWeights>,
        shared: Option<GluWeights>,
        router: Matrix,
        router_cfg: RouterConfig,
    ) -> Result<Self> {
        router_cfg.validate()?;
        if experts.is_empty() {
            return Err(Error::InvalidArgument("layer needs at least one expert".into()));
        }
        if experts.len() != router_cfg.n_e as usize {
            return Err(Error::InvalidArgument(format!(
                "router config expects {} experts, got {}",
                router_cfg.n_e,
                experts.len()
            )));
        }
        let d = experts[0].d();
        let d_e = experts[0].d_i();
        for (i, e) in experts.iter().enumerate() {
            if e.d() != d || e.d_i() != d_e {
                return Err(Error::InvalidArgument(format!(
                    "expert {i} shape differs from expert 0"
                )));
            }
        }
        if let Some(s) = &shared {
            if s.d() != d {
                return Err(Error::InvalidArgument("shared expert hidden size mismatch".into()));
            }
        }
        if router.rows() != experts.len() || router.cols() != d {
            return Err(Error::InvalidArgument(format!(
                "router must be {}x{d}, got {}x{}",
                experts.len(),
                router.rows(),
                router.cols()
            )));
        }
        Ok(ToyMoeLayer {
            experts,
            shared,
            router,
            router_cfg,
        })
    }

    /// Deterministic random layer for tests and verification runs.
    pub fn seeded(
        d: usize,
        d_e: usize,
        d_s: Option<usize>,
        router_cfg: RouterConfig,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let experts = (0..router_cfg.n_e)
            .map(|_| GluWeights::seeded(d, d_e, activation, &mut rng))
            .collect();
        let shared = d_s.map(|ds| GluWeights::seeded(d, ds, activation, &mut rng));
        let router = Matrix::seeded_uniform(router_cfg.n_e as usize, d, &mut rng);
        ToyMoeLayer::new(experts, shared, router, router_cfg)
    }

    pub fn d(&self) -> usize {
        self.experts[0].d()
    }

    pub fn router_logits(&self, token: &[f32]) -> Result<Vec<f64>> {
        Ok(self.router.matvec(token)?.iter().map(|&v| f64::from(v)).collect())
    }
}

/// Knobs for [`moe_forward`]: reduce the active count, restrict to a
/// retained set, or bypass `F_w` with fixed weights for identity tests.
#[derive(Debug, Clone, Copy, Default)]
pub struct MoeForwardOptions<'a> {
    pub n_a_override: Option<u32>,
    pub mask: Option<&'a [u32]>,
    pub weight_override: Option<&'a [f64]>,
}

/// Shared-expert output (weight 1) plus the router-weighted sum of selected
/// expert outputs.
pub fn moe_forward(layer: &ToyMoeLayer, h: &HiddenState, opts: MoeForwardOptions) -> Result<HiddenState> {
    Ok(moe_forward_detailed(layer, h, opts)?.0)
}

/// [`moe_forward`] plus the per-token routing decisions, for oracle checks.
pub fn moe_forward_detailed(
    layer: &ToyMoeLayer,
    h: &HiddenState,
    opts: MoeForwardOptions,
) -> Result<(HiddenState, Vec<RoutingDecision>)> {
    if h.d() != layer.d() {
        return Err(Error::InvalidArgument(format!(
            "hidden size {} does not match layer d = {}",
            h.d(),
            layer.d()
        )));
    }
    let mut cfg = layer.router_cfg.clone();
    if let Some(n_a) = opts.n_a_override {
        if n_a == 0 || n_a > cfg.n_e {
            return Err(Error::InvalidArgument(format!(
                "n_a override ({n_a}) out of range [1, {}]",
                cfg.n_e
            )));
        }
        cfg.n_a = n_a;
    }
    if let Some(w) = opts.weight_override {
        if w.len() != cfg.n_a as usize {
            return Err(Error::InvalidArgument(format!(
                "weight override needs {} values, got {}",
                cfg.n_a,
                w.len()
            )));
        }
    }

    let mut out = Vec::with_capacity(h.data().len());
    let mut decisions = Vec::with_capacity(h.tokens());
    for t in 0..h.tokens() {
        let token = h.token(t);
        let logits = layer.router_logits(token)?;
        let mut decision = match opts.mask {
            Some(retained) => route_restricted(&logits, &cfg, retained)?,
            None => route(&logits, &cfg)?,
        };
        if let Some(w) = opts.weight_override {
            decision.weights = w.to_vec();
        }

        let mut acc = vec![0.0f32; layer.d()];
        if let Some(shared) = &layer.shared {
            for (slot, v) in acc.iter_mut().zip(glu_forward_token(shared, token)?) {
                *slot += v;
            }
        }
        for (&idx, &w) in decision.selected.iter().zip(&decision.weights) {
            let expert_out = glu_forward_token(&layer.experts[idx as usize], token)?;
            let wf = w as f32;
            for (slot, v) in acc.iter_mut().zip(expert_out) {
                *slot += wf * v;
            }
        }
        out.extend_from_slice(&acc);
        decisions.push(decision);
    }
    Ok((HiddenState::block(h.d(), h.tokens(), out)?, decisions))
}

/// Partition a GLU's intermediate dimension into `parts` equal experts:
/// row blocks of `W_u`/`W_g`, column blocks of `W_d`. Summing the parts'
/// outputs reproduces the original GLU exactly in exact arithmetic.
pub fn split_glu_into_experts(w: &GluWeights, parts: usize) -> Result<Vec<GluWeights>> {
    if parts == 0 || w.d_i() % parts != 0 {
        return Err(Error::InvalidArgument(format!(
            "d_i ({}) must be divisible by parts ({parts})",
            w.d_i()
        )));
    }
    let chunk = w.d_i() / parts;
    let mut out = Vec::with_capacity(parts);
    for part in 0..parts {
        let start = part * chunk;
        let end = start + chunk;
        out.push(GluWeights {
            w_up: w.w_up.row_block(start, end),
            w_gate: w.w_gate.row_block(start, end),
            w_down: w.w_down.col_block(start, end),
            activation: w.activation,
        });
    }
    Ok(out)
}

// --- flat binary weight dump -------------------------------------------------
//
// Layout: magic "MOET", version u32, dims (d, d_e, d_s, n_e, n_a) as u32,
// activation/router-kind/normalize/group-present as u8, group dims as u32,
// then row-major f32 LE matrices (router, shared GLU if present, experts),
// and a trailing FNV-1a-64 checksum of all preceding bytes.

const DUMP_MAGIC: &[u8; 4] = b"MOET";
const DUMP_VERSION: u32 = 1;

pub fn layer_to_bytes(layer: &ToyMoeLayer) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DUMP_MAGIC);
    buf.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    let d = layer.d() as u32;
    let d_e = layer.experts[0].d_i() as u32;
    let d_s = layer.shared.as_ref().map_or(0, |s| s.d_i() as u32);
    buf.extend_from_slice(&d.to_le_bytes());
    buf.extend_from_slice(&d_e.to_le_bytes());
    buf.extend_from_slice(&d_s.to_le_bytes());
    buf.extend_from_slice(&layer.router_cfg.n_e.to_le_bytes());
    buf.extend_from_slice(&layer.router_cfg.n_a.to_le_bytes());
    buf.push(match layer.experts[0].activation {
        Activation::Silu => 0,
        Activation::Identity => 1,
    });
    buf.push(match layer.router_cfg.router_kind {
        RouterKind::Softmax => 0,
        RouterKind::Sigmoid => 1,
    });
    buf.push(u8::from(layer.router_cfg.normalize_selected));
    buf.push(u8::from(layer.router_cfg.group_config.is_some()));
    let g = layer.router_cfg.group_config.unwrap_or(GroupConfig {
        n_group: 0,
        topk_group: 0,
    });
    buf.extend_from_slice(&g.n_group.to_le_bytes());
    buf.extend_from_slice(&g.topk_group.to_le_bytes());

    let push_matrix = |buf: &mut Vec<u8>, m: &Matrix| {
        for &v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };
    push_matrix(&mut buf, &layer.router);
    if let Some(shared) = &layer.shared {
        push_matrix(&mut buf, &shared.w_up);
        push_matrix(&mut buf, &shared.w_gate);
        push_matrix(&mut buf, &shared.w_down);
    }
    for expert in &layer.experts {
        push_matrix(&mut buf, &expert.w_up);
        push_matrix(&mut buf, &expert.w_gate);
        push_matrix(&mut buf, &expert.w_down);
    }
    let checksum = fnv1a(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    buf
}

pub fn layer_from_bytes(bytes: &[u8]) -> Result<ToyMoeLayer> {
    if bytes.len() < 4 + 4 + 5 * 4 + 4 + 8 + 8 {
        return Err(Error::Parse("weight dump truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(Error::Parse("weight dump checksum mismatch".into()));
    }
    let mut cur = Cursor { buf: body, pos: 0 };
    if cur.take(4)? != DUMP_MAGIC {
        return Err(Error::Parse("weight dump has wrong magic".into()));
    }
    let version = cur.u32()?;
    if version != DUMP_VERSION {
        return Err(Error::Parse(format!("unsupported weight dump version {version}")));
    }
    let d = cur.u32()? as usize;
    let d_e = cur.u32()? as usize;
    let d_s = cur.u32()? as usize;
    let n_e = cur.u32()?;
    let n_a = cur.u32()?;
    let activation = match cur.u8()? {
        0 => Activation::Silu,
        1 => Activation::Identity,
        other => return Err(Error::Parse(format!("bad activation tag {other}"))),
    };
    let router_kind = match cur.u8()? {
        0 => RouterKind::Softmax,
        1 => RouterKind::Sigmoid,
        other => return Err(Error::Parse(format!("bad router kind tag {other}"))),
    };
    let normalize_selected = cur.u8()? != 0;
    let has_group = cur.u8()? != 0;
    let n_group = cur.u32()?;
    let topk_group = cur.u32()?;

    let matrix = |cur: &mut Cursor, rows: usize, cols: usize| -> Result<Matrix> {
        let raw = cur.take(rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::from_vec(rows, cols, data)
    };
    let router = matrix(&mut cur, n_e as usize, d)?;
    let shared = if d_s > 0 {
        Some(GluWeights {
            w_up: matrix(&mut cur, d_s, d)?,
            w_gate: matrix(&mut cur, d_s, d)?,
            w_down: matrix(&mut cur, d, d_s)?,
            activation,
        })
    } else {
        None
    };
    let mut experts = Vec::with_capacity(n_e as usize);
    for _ in 0..n_e {
        experts.push(GluWeights {
            w_up: matrix(&mut cur, d_e, d)?,
            w_gate: matrix(&mut cur, d_e, d)?,
            w_down: matrix(&mut cur, d, d_e)?,
            activation,
        });
    }
    if cur.pos != body.len() {
        return Err(Error::Parse("weight dump has trailing bytes".into()));
    }
    let router_cfg = RouterConfig {
        router_kind,
        normalize_selected,
        group_config: if has_group {
            Some(GroupConfig { n_group, topk_group })
        } else {
            None
        },
        n_e,
        n_a,
        ..RouterConfig::default_for(router_kind, n_e, n_a)
    };
    ToyMoeLayer::new(experts, shared, router, router_cfg)
}

pub fn dump_layer(layer: &ToyMoeLayer, path: &Path) -> Result<()> {
    std::fs::write(path, layer_to_bytes(layer))?;
    Ok(())
}

pub fn load_layer(path: &Path) -> Result<ToyMoeLayer> {
    layer_from_bytes(&std::fs::read(path)?)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse("weight dump truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
