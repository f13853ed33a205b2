//! The Excitor adapter.
//!
//! An Excitor block never touches the residual stream or the Values of the
//! layer it is attached to. It produces an extra score matrix with the same
//! shape as the layer's own scores and adds it, scaled by a small learnable
//! gate, before the causal mask and softmax:
//!
//! ```text
//! Q_ex      = (T · W_down) · W_up                       low-rank query
//! Key_extra = softmax(Q_ex · Pᵀ / √C) · P               key reconstruction
//! S_extra   = Q_rot,h · Key_extra,hᵀ / √(C/heads)       per head
//! A         = softmax(S + g_h · S_extra + causal)
//! out       = W_o · concat_h(A · V_h)
//! ```
//!
//! Because `A` stays row-stochastic over the original Values, every mixed
//! output row is a convex combination of base Value rows.

use alloc::sync::Arc;

use crate::attention::{
    base_scores, finish, low_rank, project_qkv, AttentionOutput, AttentionVars, AttnShape,
    LowRankVars,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, HeadLayout, Var};
use crate::multimodal::{ExcitorKv, VisualProjections, VisualVars};
use crate::real::Real;
use crate::rng::SplitMix64;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Default gate initialisation scale, N(0, 0.01²).
pub const DEFAULT_GATE_STD: f64 = 0.01;
/// Initialisation scale of prompts and the down projection.
pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExcitorConfig {
    /// Number of topmost layers that carry a block (L).
    pub n_excited_layers: usize,
    /// Learnable prompt rows per layer (K).
    pub prompt_len: usize,
    /// Rank of the low-rank query projection (r).
    pub rank: usize,
    pub gate_std: f64,
    /// One gate per head, or a single gate shared by all heads of a layer.
    pub gate_per_head: bool,
    /// Which of query, key and value of the inner attention get a low-rank
    /// projection. The default projects the query only.
    pub projection: ProjectionSet,
    /// Visual feature width D; `Some` enables the multimodal projections.
    pub visual_dim: Option<usize>,
}

/// Placement of low-rank projections in the key reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionSet {
    pub query: bool,
    pub key: bool,
    pub value: bool,
}

impl ProjectionSet {
    pub const QUERY_ONLY: Self = Self {
        query: true,
        key: false,
        value: false,
    };

    /// Parse `none` or any combination of the letters `q`, `k`, `v`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut out = Self {
            query: false,
            key: false,
            value: false,
        };
        if s == "none" {
            return Ok(out);
        }
        if s.is_empty() {
            return Err(Error::Config("empty projection set".into()));
        }
        for c in s.chars() {
            let slot = match c {
                'q' => &mut out.query,
                'k' => &mut out.key,
                'v' => &mut out.value,
                _ => return Err(Error::Config(alloc::format!("bad projection set {s:?}"))),
            };
            if *slot {
                return Err(Error::Config(alloc::format!("bad projection set {s:?}")));
            }
            *slot = true;
        }
        Ok(out)
    }

    pub fn label(&self) -> alloc::string::String {
        let mut s = alloc::string::String::new();
        for (on, c) in [(self.query, 'q'), (self.key, 'k'), (self.value, 'v')] {
            if on {
                s.push(c);
            }
        }
        if s.is_empty() {
            s.push_str("none");
        }
        s
    }

    pub fn count(&self) -> usize {
        self.query as usize + self.key as usize + self.value as usize
    }
}

impl ExcitorConfig {
    /// Larger-scale defaults: rank 16 and all but the bottom layer excited.
    pub fn reference(n_layers: usize) -> Self {
        Self {
            n_excited_layers: n_layers.saturating_sub(1).max(1),
            prompt_len: 16,
            rank: 16,
            gate_std: DEFAULT_GATE_STD,
            gate_per_head: true,
            projection: ProjectionSet::QUERY_ONLY,
            visual_dim: None,
        }
    }

    /// Settings used by the desk-scale runs.
    pub fn toy(n_layers: usize) -> Self {
        Self {
            rank: 4,
            ..Self::reference(n_layers)
        }
    }

    pub fn validate(&self, n_layers: usize, dim: usize) -> Result<()> {
        if self.n_excited_layers < 1 || self.n_excited_layers > n_layers {
            return Err(Error::Config(alloc::format!(
                "excitor.layers must be in 1..={n_layers}, got {}",
                self.n_excited_layers
            )));
        }
        if self.prompt_len < 1 {
            return Err(Error::Config("excitor.prompt_len must be >= 1".into()));
        }
        if self.rank < 1 || self.rank > dim {
            return Err(Error::Config(alloc::format!(
                "excitor.rank must be in 1..={dim}, got {}",
                self.rank
            )));
        }
        if !(self.gate_std > 0.0) || !self.gate_std.is_finite() {
            return Err(Error::Config("excitor.gate_std must be > 0".into()));
        }
        if let Some(d) = self.visual_dim {
            if d == 0 {
                return Err(Error::Config("excitor.visual_dim must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// First excited layer index; blocks live on `[N − L, N)`.
    pub fn first_layer(&self, n_layers: usize) -> usize {
        n_layers - self.n_excited_layers
    }

    /// Trainable scalars added per excited layer.
    pub fn trainable_per_layer(&self, dim: usize, heads: usize) -> usize {
        let gates = if self.gate_per_head { heads } else { 1 };
        let text = self.prompt_len * dim + gates + self.projection.count() * 2 * dim * self.rank;
        let visual = self
            .visual_dim
            .map_or(0, |d| 2 * (d * self.rank + self.rank * dim));
        text + visual
    }

    pub fn trainable_count(&self, dim: usize, heads: usize) -> usize {
        self.n_excited_layers * self.trainable_per_layer(dim, heads)
    }
}

/// Per-layer Excitor parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExcitorBlock {
    /// `[K, C]`
    pub prompts: ParamId,
    /// `[heads]` (or `[1]`)
    pub gate: ParamId,
    /// Query projection `wq_down` `[C, r]`, `wq_up` `[r, C]`.
    pub wq: Option<LowRankPair>,
    pub wk: Option<LowRankPair>,
    pub wv: Option<LowRankPair>,
    pub visual: Option<VisualProjections>,
}

/// `down` `[C, r]` drawn small, `up` `[r, C]` zero at init.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LowRankPair {
    pub down: ParamId,
    pub up: ParamId,
}

impl LowRankPair {
    fn init<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        dim: usize,
        rank: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        Ok(Self {
            down: store.add(
                &alloc::format!("{prefix}_down"),
                Tensor::randn(&[dim, rank], PROMPT_INIT_STD, rng),
            )?,
            up: store.add(&alloc::format!("{prefix}_up"), Tensor::zeros(&[rank, dim]))?,
        })
    }

    pub fn bind<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>) -> LowRankVars {
        LowRankVars {
            down: g.param(store, self.down),
            up: g.param(store, self.up),
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExcitorVars {
    pub prompts: Var,
    pub gate: Var,
    pub wq: Option<LowRankVars>,
    pub wk: Option<LowRankVars>,
    pub wv: Option<LowRankVars>,
    pub visual: Option<VisualVars>,
}

impl ExcitorBlock {
    pub fn bind<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>) -> ExcitorVars {
        ExcitorVars {
            prompts: g.param(store, self.prompts),
            gate: g.param(store, self.gate),
            wq: self.wq.map(|p| p.bind(g, store)),
            wk: self.wk.map(|p| p.bind(g, store)),
            wv: self.wv.map(|p| p.bind(g, store)),
            visual: self.visual.map(|v| v.bind(g, store)),
        }
    }

    /// Register a fresh block under `excitor.layer.{layer}.*`.
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        layer: usize,
        dim: usize,
        heads: usize,
        cfg: &ExcitorConfig,
        seed: u64,
    ) -> Result<Self> {
        let p = |s: &str| alloc::format!("excitor.layer.{layer}.{s}");
        let mut rng = SplitMix64::derive(seed, &p("init"));
        let gates = if cfg.gate_per_head { heads } else { 1 };
        let prompts = store.add(
            &p("prompts"),
            Tensor::randn(&[cfg.prompt_len, dim], PROMPT_INIT_STD, &mut rng),
        )?;
        let gate = store.add(&p("gate"), init_gate(gates, cfg.gate_std, &mut rng)?)?;
        let mut pair = |on: bool, name: &str, rng: &mut SplitMix64| -> Result<Option<LowRankPair>> {
            if on {
                Ok(Some(LowRankPair::init(store, &p(name), dim, cfg.rank, rng)?))
            } else {
                Ok(None)
            }
        };
        let wq = pair(cfg.projection.query, "wq", &mut rng)?;
        let wk = pair(cfg.projection.key, "wk", &mut rng)?;
        let wv = pair(cfg.projection.value, "wv", &mut rng)?;
        let visual = match cfg.visual_dim {
            Some(d) => Some(VisualProjections::init(store, layer, d, dim, cfg.rank, &mut rng)?),
            None => None,
        };
        Ok(Self {
            prompts,
            gate,
            wq,
            wk,
            wv,
            visual,
        })
    }
}

/// Cold-start gate: `n` scalars drawn i.i.d. from N(0, gate_std²).
pub fn init_gate<R: Real>(n: usize, gate_std: f64, rng: &mut SplitMix64) -> Result<Tensor<R>> {
    if !(gate_std > 0.0) {
        return Err(Error::Config("gate_std must be > 0".into()));
    }
    Ok(Tensor::randn(&[n], gate_std, rng))
}

/// Excitor query `(T · W_down) · W_up`, or `T` itself when the query is not
/// projected.
pub fn excitor_query<R: Real>(g: &mut Graph<R>, t: Var, block: &ExcitorVars) -> Result<Var> {
    match &block.wq {
        Some(lr) => low_rank(g, t, lr),
        None => Ok(t),
    }
}

/// Key reconstruction from the learnable prompts alone: an unmasked inner
/// attention from the Excitor query onto `P`, with `P` used as both key and
/// value (unprojected in the default placement). Returns `batch * seq` rows
/// of width `C`.
pub fn key_reconstruct<R: Real>(
    g: &mut Graph<R>,
    t: Var,
    block: &ExcitorVars,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let kv = ExcitorKv::text_only(g, block)?;
    reconstruct_with(g, t, block, &kv, batch, seq)
}

/// Key reconstruction against an arbitrary key/value set (text-only prompts
/// or prompts concatenated with projected visual features).
pub(crate) fn reconstruct_with<R: Real>(
    g: &mut Graph<R>,
    t: Var,
    block: &ExcitorVars,
    kv: &ExcitorKv,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let (rows, c) = g.value(t).dims2();
    if rows != batch * seq {
        return Err(crate::error::dim_err("key_reconstruct", g.shape(t), &[batch, seq]));
    }
    let qex = excitor_query(g, t, block)?;
    let layout = HeadLayout {
        batch,
        heads: 1,
        q_rows: seq,
        k_rows: kv.rows,
        kv_shared: kv.shared,
    };
    let scale = R::one() / R::from_usize(c).sqrt();
    let s = g.batched_qk(qex, kv.key, layout, scale)?;
    let a = g.softmax_rows(s)?;
    g.batched_pv(a, kv.value, layout)
}

/// Extra per-head scores from the reused (rotated) base query and the
/// reconstructed key, split into heads exactly like the base keys. The
/// result has the same layout as the base score tensor.
pub fn extra_scores<R: Real>(
    g: &mut Graph<R>,
    shape: &AttnShape,
    query: Var,
    key_extra: Var,
) -> Result<Var> {
    let c = g.value(query).dims2().1;
    if g.shape(query) != g.shape(key_extra) || c % shape.heads != 0 {
        return Err(crate::error::dim_err("extra_scores", g.shape(query), g.shape(key_extra)));
    }
    let scale = R::one() / R::from_usize(shape.head_dim(c)).sqrt();
    g.batched_qk(query, key_extra, shape.layout(), scale)
}

/// Attention of an excited layer. `kv` selects the multimodal key/value set;
/// `None` uses the prompts alone.
pub fn fused_attention<R: Real>(
    g: &mut Graph<R>,
    shape: &AttnShape,
    t: Var,
    w: &AttentionVars,
    block: &ExcitorVars,
    kv: Option<&ExcitorKv>,
    mask: Arc<[bool]>,
) -> Result<AttentionOutput> {
    let p = project_qkv(g, shape, t, w, None, None)?;
    let base = base_scores(g, shape, &p)?;
    let key_extra = match kv {
        Some(kv) => reconstruct_with(g, t, block, kv, shape.batch, shape.seq)?,
        None => key_reconstruct(g, t, block, shape.batch, shape.seq)?,
    };
    let extra = extra_scores(g, shape, p.query, key_extra)?;
    let gated = g.scale_heads(extra, block.gate, shape.layout())?;
    let scores = g.add(base, gated)?;
    finish(g, shape, &p, scores, mask, w.wo)
}
