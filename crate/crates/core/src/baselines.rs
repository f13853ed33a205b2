//! Comparison adapters: LoRA on the query/value projections and a zero-init
//! gated prefix adapter. Full fine-tuning is a freezing toggle on the model.

use alloc::sync::Arc;

use crate::attention::{
    base_scores, finish, low_rank, mix, project_qkv, AttentionOutput, AttentionVars, AttnShape,
    LowRankVars,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, HeadLayout, Var};
use crate::real::Real;
use crate::rng::SplitMix64;
use crate::tensor::{ParamId, ParamStore, Tensor};

const LORA_DOWN_STD: f64 = 0.02;
const PREFIX_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraConfig {
    /// Number of topmost layers adapted.
    pub n_layers: usize,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraConfig {
    /// `alpha = 2r` on every layer.
    pub fn new(n_layers: usize, rank: usize) -> Self {
        Self {
            n_layers,
            rank,
            alpha: 2.0 * rank as f64,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, n_layers: usize, dim: usize) -> Result<()> {
        if self.n_layers < 1 || self.n_layers > n_layers {
            return Err(Error::Config(alloc::format!("lora.layers must be in 1..={n_layers}")));
        }
        if self.rank < 1 || self.rank > dim {
            return Err(Error::Config(alloc::format!("lora.rank must be in 1..={dim}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoraPair {
    /// `[C, r]`
    pub down: ParamId,
    /// `[r, C]`, zero at init.
    pub up: ParamId,
}

/// LoRA deltas for the query and value projections of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraBlock {
    pub wq: LoraPair,
    pub wv: LoraPair,
    pub scale: f64,
}

impl LoraBlock {
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        layer: usize,
        dim: usize,
        cfg: &LoraConfig,
        seed: u64,
    ) -> Result<Self> {
        let p = |s: &str| alloc::format!("lora.layer.{layer}.{s}");
        let mut rng = SplitMix64::derive(seed, &p("init"));
        let mut pair = |proj: &str, rng: &mut SplitMix64| -> Result<LoraPair> {
            Ok(LoraPair {
                down: store.add(
                    &p(&alloc::format!("{proj}.down")),
                    Tensor::randn(&[dim, cfg.rank], LORA_DOWN_STD, rng),
                )?,
                up: store.add(&p(&alloc::format!("{proj}.up")), Tensor::zeros(&[cfg.rank, dim]))?,
            })
        };
        let wq = pair("wq", &mut rng)?;
        let wv = pair("wv", &mut rng)?;
        Ok(Self {
            wq,
            wv,
            scale: cfg.scale(),
        })
    }

    pub fn bind<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>) -> (LowRankVars, LowRankVars) {
        let b = |g: &mut Graph<R>, p: &LoraPair| LowRankVars {
            down: g.param(store, p.down),
            up: g.param(store, p.up),
            scale: self.scale,
        };
        (b(g, &self.wq), b(g, &self.wv))
    }
}

/// `x · base_w + scale · (x · down) · up`
pub fn lora_forward<R: Real>(g: &mut Graph<R>, x: Var, base_w: Var, delta: &LowRankVars) -> Result<Var> {
    let base = g.matmul(x, base_w)?;
    let d = low_rank(g, x, delta)?;
    g.add(base, d)
}

/// Attention with LoRA deltas on `W_q` and `W_v`.
pub fn lora_attention<R: Real>(
    g: &mut Graph<R>,
    shape: &AttnShape,
    t: Var,
    w: &AttentionVars,
    deltas: &(LowRankVars, LowRankVars),
    mask: Arc<[bool]>,
) -> Result<AttentionOutput> {
    let p = project_qkv(g, shape, t, w, Some(&deltas.0), Some(&deltas.1))?;
    let s = base_scores(g, shape, &p)?;
    finish(g, shape, &p, s, mask, w.wo)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefixConfig {
    /// Number of topmost layers adapted.
    pub n_layers: usize,
    pub prefix_len: usize,
}

impl PrefixConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.n_layers < 1 || self.n_layers > n_layers {
            return Err(Error::Config(alloc::format!("prefix.layers must be in 1..={n_layers}")));
        }
        if self.prefix_len < 1 {
            return Err(Error::Config("prefix.prefix_len must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefixAdapterBlock {
    /// `[K, C]`
    pub prefix: ParamId,
    /// `[heads]`, exactly zero at init.
    pub gate: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct PrefixVars {
    pub prefix: Var,
    pub gate: Var,
}

impl PrefixAdapterBlock {
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        layer: usize,
        dim: usize,
        heads: usize,
        cfg: &PrefixConfig,
        seed: u64,
    ) -> Result<Self> {
        let p = |s: &str| alloc::format!("prefix.layer.{layer}.{s}");
        let mut rng = SplitMix64::derive(seed, &p("init"));
        Ok(Self {
            prefix: store.add(
                &p("prefix"),
                Tensor::randn(&[cfg.prefix_len, dim], PREFIX_INIT_STD, &mut rng),
            )?,
            gate: store.add(&p("gate"), Tensor::zeros(&[heads]))?,
        })
    }

    pub fn bind<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>) -> PrefixVars {
        PrefixVars {
            prefix: g.param(store, self.prefix),
            gate: g.param(store, self.gate),
        }
    }
}

/// Zero-init gated prefix attention. The prefix is projected by the frozen
/// `W_k`/`W_v` (without rotation), scored against the rotated queries,
/// softmaxed separately over its own `K` columns, scaled per head by
/// `tanh(gate)` and mixed into the base output before `W_o`.
pub fn prefix_forward<R: Real>(
    g: &mut Graph<R>,
    shape: &AttnShape,
    t: Var,
    w: &AttentionVars,
    pb: &PrefixVars,
    mask: Arc<[bool]>,
) -> Result<AttentionOutput> {
    let p = project_qkv(g, shape, t, w, None, None)?;
    let s = base_scores(g, shape, &p)?;
    let (probs, base_mixed) = mix(g, shape, &p, s, mask)?;

    let k_rows = g.value(pb.prefix).dims2().0;
    let (_, c) = g.value(p.query).dims2();
    let kp = g.matmul(pb.prefix, w.wk)?;
    let vp = g.matmul(pb.prefix, w.wv)?;
    let layout = HeadLayout {
        batch: shape.batch,
        heads: shape.heads,
        q_rows: shape.seq,
        k_rows,
        kv_shared: true,
    };
    let scale = R::one() / R::from_usize(shape.head_dim(c)).sqrt();
    let sp = g.batched_qk(p.query, kp, layout, scale)?;
    let ap = g.softmax_rows(sp)?;
    let gate = g.tanh(pb.gate);
    let ap = g.scale_heads(ap, gate, layout)?;
    let extra = g.batched_pv(ap, vp, layout)?;
    let mixed = g.add(base_mixed, extra)?;
    let output = g.matmul(mixed, w.wo)?;
    Ok(AttentionOutput {
        output,
        mixed,
        values: p.values,
        probs,
        query: p.query,
        keys: p.keys,
    })
}

#[cfg(test)]
mod tests;
