//! Causal multi-head attention of the frozen decoder, with hooks for the
//! adapters that change its scores (Excitor, prefix) or its projections (LoRA).

use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, HeadLayout, Var};
use crate::real::Real;
use crate::tensor::{ParamId, ParamStore};

/// The four frozen projections of one attention layer, each `[C, C]` and
/// applied as `x · W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionWeights {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionWeights {
    pub fn bind<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>) -> AttentionVars {
        AttentionVars {
            wq: g.param(store, self.wq),
            wk: g.param(store, self.wk),
            wv: g.param(store, self.wv),
            wo: g.param(store, self.wo),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Batch geometry of one attention call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub rope_base: f64,
}

impl AttnShape {
    pub fn layout(&self) -> HeadLayout {
        HeadLayout::self_attention(self.batch, self.heads, self.seq)
    }

    pub fn head_dim(&self, dim: usize) -> usize {
        dim / self.heads
    }
}

/// Projected inputs of an attention layer. `query` and `keys` are already
/// rotated; `values` never are.
#[derive(Debug, Clone, Copy)]
pub struct Projections {
    pub query: Var,
    pub keys: Var,
    pub values: Var,
}

/// Everything an attention call produced, kept for probes and tests.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `W_o` applied to `mixed`.
    pub output: Var,
    /// Heads concatenated, before `W_o`.
    pub mixed: Var,
    pub values: Var,
    /// Row-stochastic scores actually applied to `values`.
    pub probs: Var,
    pub query: Var,
    pub keys: Var,
}

/// Upper-triangular mask (`true` = future position) for sequence length `m`.
pub fn causal_mask(m: usize) -> Arc<[bool]> {
    let mut v = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            v.push(j > i);
        }
    }
    Arc::from(v)
}

/// Causal masks for every length up to `max_seq`, built once per model.
#[derive(Debug, Clone)]
pub struct MaskCache {
    masks: Vec<Arc<[bool]>>,
}

impl MaskCache {
    pub fn new(max_seq: usize) -> Self {
        Self {
            masks: (0..=max_seq).map(causal_mask).collect(),
        }
    }

    pub fn get(&self, m: usize) -> Arc<[bool]> {
        match self.masks.get(m) {
            Some(mask) => mask.clone(),
            None => causal_mask(m),
        }
    }
}

/// Low-rank delta on one projection: `scale · (x · down) · up`.
#[derive(Debug, Clone, Copy)]
pub struct LowRankVars {
    pub down: Var,
    pub up: Var,
    pub scale: f64,
}

pub(crate) fn low_rank<R: Real>(g: &mut Graph<R>, x: Var, lr: &LowRankVars) -> Result<Var> {
    let d = g.matmul(x, lr.down)?;
    let u = g.matmul(d, lr.up)?;
    Ok(g.scale(u, R::from_f64(lr.scale)))
}

/// `x · w`, plus a low-rank delta when one is given.
pub fn project<R: Real>(g: &mut Graph<R>, x: Var, w: Var, delta: Option<&LowRankVars>) -> Result<Var> {
    let base = g.matmul(x, w)?;
    match delta {
        Some(lr) => {
            let d = low_rank(g, x, lr)?;
            g.add(base, d)
        }
        None => Ok(base),
    }
}

/// Query/key/value projections of `t` (`batch * seq` rows), with rotary
/// rotation applied to query and key.
pub fn project_qkv<R: Real>(
    g: &mut Graph<R>,
    shape: &AttnShape,
    t: Var,
    w: &AttentionVars,
    q_delta: Option<&LowRankVars>,
    v_delta: Option<&LowRankVars>,
) -> Result<Projections> {
    let (rows, _) = g.value(t).dims2();
    if rows == 0 || shape.seq == 0 {
        return Err(Error::EmptySequence);
    }
    let q = project(g, t, w.wq, q_delta)?;
    let k = g.matmul(t, w.wk)?;
    let values = project(g, t, w.wv, v_delta)?;
    let query = g.rope(q, shape.seq, shape.heads, shape.rope_base)?;
    let keys = g.rope(k, shape.seq, shape.heads, shape.rope_base)?;
    Ok(Projections {
        query,
        keys,
        values,
    })
}

/// Base per-head scores `Qₕ Kₕᵀ / √(C/heads)`, unmasked.
pub fn base_scores<R: Real>(g: &mut Graph<R>, shape: &AttnShape, p: &Projections) -> Result<Var> {
    let c = g.value(p.query).dims2().1;
    let scale = R::one() / R::from_usize(shape.head_dim(c)).sqrt();
    g.batched_qk(p.query, p.keys, shape.layout(), scale)
}

/// Mask, softmax and mix values. Returns `(probs, mixed)`.
pub fn mix<R: Real>(
    g: &mut Graph<R>,
    shape: &AttnShape,
    p: &Projections,
    scores: Var,
    mask: Arc<[bool]>,
) -> Result<(Var, Var)> {
    let masked = g.masked_fill(scores, mask, R::neg_infinity())?;
    let probs = g.softmax_rows(masked)?;
    let mixed = g.batched_pv(probs, p.values, shape.layout())?;
    Ok((probs, mixed))
}

/// Mask, softmax, mix values, project out. `scores` must already carry any
/// adapter residual.
pub fn finish<R: Real>(
    g: &mut Graph<R>,
    shape: &AttnShape,
    p: &Projections,
    scores: Var,
    mask: Arc<[bool]>,
    wo: Var,
) -> Result<AttentionOutput> {
    let (probs, mixed) = mix(g, shape, p, scores, mask)?;
    let output = g.matmul(mixed, wo)?;
    Ok(AttentionOutput {
        output,
        mixed,
        values: p.values,
        probs,
        query: p.query,
        keys: p.keys,
    })
}

/// Unadapted causal attention over `t` (`batch * seq` rows of width `C`).
pub fn base_attention<R: Real>(
    g: &mut Graph<R>,
    shape: &AttnShape,
    t: Var,
    w: &AttentionVars,
    mask: Arc<[bool]>,
) -> Result<AttentionOutput> {
    let p = project_qkv(g, shape, t, w, None, None)?;
    let s = base_scores(g, shape, &p)?;
    finish(g, shape, &p, s, mask, w.wo)
}
